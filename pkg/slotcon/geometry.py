"""
Junction and slot parameterization shared by every other module.

Conventions: pixel coordinates are continuous, pixel (i, j) covers [j, j+1) x [i, i+1);
grid cells are addressed as (row, col) with row derived from y and col derived from x;
angles live in [0, 2pi).

to_cell and from_cell invert each other exactly when the cell size is a power of two;
other cell sizes round-trip to within a few ulps.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Tuple

from slotcon.errors import DomainError

TWO_PI = 2.0 * math.pi
BELOW_ONE = 1.0 - 2.0**-53  # largest float below 1

Point = Tuple[float, float]
Cell = Tuple[int, int]


class Shape(str, Enum):
    T = "T"
    L = "L"


class Identity(str, Enum):
    J = "J"
    B = "B"


# class index order used by every classifier, loss and report
ID_CLASSES = (Identity.J, Identity.B)
SHAPE_CLASSES = (Shape.L, Shape.T)


def normalize_angle(theta: float) -> float:
    a = math.fmod(float(theta), TWO_PI)
    if a < 0.0:
        a += TWO_PI
    if a >= TWO_PI:
        a = 0.0
    return a


@dataclass(frozen=True)
class Junction:
    x: float
    y: float
    angle: float
    shape: Shape

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DomainError(f"junction position ({self.x}, {self.y}) is not finite")
        object.__setattr__(self, "angle", normalize_angle(self.angle))
        object.__setattr__(self, "shape", Shape(self.shape))

    @property
    def position(self) -> Point:
        return (self.x, self.y)


@dataclass(frozen=True)
class GridSpec:
    image_size: int
    G: int

    def __post_init__(self):
        if self.G < 2:
            raise DomainError(f"grid needs at least 2 cells per side, got G={self.G}")
        if self.image_size <= 0 or self.image_size % self.G != 0:
            raise DomainError(f"image size {self.image_size} is not divisible by G={self.G}")

    @property
    def cell_size(self) -> float:
        return self.image_size / self.G

    @property
    def num_cells(self) -> int:
        return self.G * self.G

    def contains(self, point: Point) -> bool:
        x, y = point
        return 0.0 <= x < self.image_size and 0.0 <= y < self.image_size


@dataclass(frozen=True)
class CellLabel:
    cell: Cell
    rel: Point
    angle: float
    identification: Identity
    shape: Optional[Shape] = None

    def __post_init__(self):
        if not all(0.0 <= r < 1.0 for r in self.rel):
            raise DomainError(f"relative location {self.rel} outside [0, 1)")
        if (self.shape is not None) != (self.identification == Identity.J):
            raise DomainError("a cell label carries a shape iff it is a junction cell")


@dataclass(frozen=True)
class SlotSpec:
    entrance: Tuple[Junction, Junction]
    depth: float
    polygon: Tuple[Point, Point, Point, Point] = field(compare=False)


def _unit(r: float) -> float:
    return min(max(r, 0.0), BELOW_ONE)


def to_cell(point: Point, grid: GridSpec) -> Tuple[Cell, Point]:
    x, y = float(point[0]), float(point[1])
    if not grid.contains((x, y)):
        raise DomainError(f"point ({x}, {y}) outside [0, {grid.image_size})^2")
    cs = grid.cell_size
    col = min(int(math.floor(x / cs)), grid.G - 1)
    row = min(int(math.floor(y / cs)), grid.G - 1)
    return (row, col), (_unit(x / cs - col), _unit(y / cs - row))


def from_cell(cell: Cell, rel: Point, grid: GridSpec) -> Point:
    row, col = int(cell[0]), int(cell[1])
    if not (0 <= row < grid.G and 0 <= col < grid.G):
        raise DomainError(f"cell {cell} outside a {grid.G}x{grid.G} grid")
    cs = grid.cell_size
    return (col * cs + float(rel[0]) * cs, row * cs + float(rel[1]) * cs)


def encode_angle(theta: float) -> Tuple[float, float]:
    return (math.cos(theta), math.sin(theta))


def decode_angle(c: float, s: float) -> float:
    norm = math.hypot(c, s)
    if norm == 0.0 or not math.isfinite(norm):
        raise DomainError(f"cannot decode an angle from ({c}, {s})")
    return normalize_angle(math.atan2(s / norm, c / norm))


def angle_difference(a: float, b: float) -> float:
    """Absolute angular distance in [0, pi]."""
    d = normalize_angle(a - b)
    return min(d, TWO_PI - d)


def entrance_and_sides(j1: Junction, j2: Junction, depth: float) -> SlotSpec:
    dx, dy = j2.x - j1.x, j2.y - j1.y
    length = math.hypot(dx, dy)
    if length == 0.0:
        raise DomainError(f"coincident junctions at ({j1.x}, {j1.y})")
    ux, uy = dx / length, dy / length
    # left normal of the entrance; flipped when the junction angles point the other way
    nx, ny = -uy, ux
    ax = math.cos(j1.angle) + math.cos(j2.angle)
    ay = math.sin(j1.angle) + math.sin(j2.angle)
    if ax * nx + ay * ny < 0.0:
        nx, ny = -nx, -ny
    polygon = (
        (j1.x, j1.y),
        (j2.x, j2.y),
        (j2.x + nx * depth, j2.y + ny * depth),
        (j1.x + nx * depth, j1.y + ny * depth),
    )
    return SlotSpec(entrance=(j1, j2), depth=float(depth), polygon=polygon)


def label_cells(junctions: Iterable[Junction], grid: GridSpec) -> List[CellLabel]:
    """
    One label per grid cell, row-major. A cell holding several junctions keeps the first one.
    """
    taken = {}
    for junction in junctions:
        cell, rel = to_cell(junction.position, grid)
        if cell not in taken:
            taken[cell] = CellLabel(cell, rel, junction.angle, Identity.J, junction.shape)
    labels = []
    for row in range(grid.G):
        for col in range(grid.G):
            labels.append(taken.get((row, col)) or CellLabel((row, col), (0.0, 0.0), 0.0, Identity.B))
    return labels


def point_segment_distance(p: Point, a: Point, b: Point) -> Tuple[float, float]:
    """Returns (t, perpendicular distance) of p against the line through a and b, t in units of |ab|."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom == 0.0:
        raise DomainError("degenerate segment")
    t = ((p[0] - ax) * dx + (p[1] - ay) * dy) / denom
    cx, cy = ax + t * dx, ay + t * dy
    return t, math.hypot(p[0] - cx, p[1] - cy)
