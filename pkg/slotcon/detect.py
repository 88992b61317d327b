"""
Inference: per-cell junction decoding, non-maximum suppression, geometric pair filtering and
slot assembly.
"""
import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from slotcon.errors import ConfigError, DomainError, ParseError
from slotcon.geometry import (SHAPE_CLASSES, Cell, GridSpec, Junction, Shape, SlotSpec, angle_difference,
                              decode_angle, entrance_and_sides, from_cell, normalize_angle, point_segment_distance)
from slotcon.model import Network
from slotcon.netcore import softmax
from slotcon.synthdata import Dataset, Scene, SceneConfig, cell_targets, labels_from_doc, read_json

MAX_SLOTS_PER_JUNCTION = 2
J_INDEX = 0


@dataclass(frozen=True)
class DetectionParams:
    conf_threshold: float
    nms_radius: float
    d_min: float
    d_max: float
    corridor_width: float
    angle_tolerance: float
    slot_depth: float

    def __post_init__(self):
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ConfigError("detect.conf_threshold", "must lie in [0, 1]")
        if not 0.0 < self.d_min < self.d_max:
            raise ConfigError("detect.d_min", f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        for key in ("nms_radius", "corridor_width", "angle_tolerance", "slot_depth"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"detect.{key}", "must be positive")


@dataclass(frozen=True)
class DetectConfig:
    """Detection settings; unset distances are derived from the grid and the scene generator."""
    conf_threshold: float = 0.5
    nms_radius: Optional[float] = None
    d_min: Optional[float] = None
    d_max: Optional[float] = None
    corridor_width: Optional[float] = None
    angle_tolerance: float = 0.3
    slot_depth: Optional[float] = None
    batch_size: int = 16

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("detect.batch_size", "must be positive")

    def params(self, grid: GridSpec, scene: SceneConfig) -> DetectionParams:
        cell = grid.cell_size

        def pick(value, default):
            return float(default if value is None else value)

        return DetectionParams(
            conf_threshold=self.conf_threshold,
            nms_radius=pick(self.nms_radius, 0.5 * scene.slot_width[0]),
            d_min=pick(self.d_min, 0.75 * scene.slot_width[0]),
            d_max=pick(self.d_max, 1.5 * scene.slot_width[1]),
            corridor_width=pick(self.corridor_width, cell / 2.0),
            angle_tolerance=float(self.angle_tolerance),
            slot_depth=pick(self.slot_depth, sum(scene.slot_depth) / 2.0),
        )


@dataclass(frozen=True)
class DetectedJunction:
    x: float
    y: float
    angle: float
    shape: Shape
    confidence: float
    cell: Cell

    @property
    def position(self) -> Tuple[float, float]:
        return (self.x, self.y)

    @property
    def order_key(self) -> Tuple[float, int, int]:
        return (-self.confidence, self.cell[0], self.cell[1])

    def as_junction(self) -> Junction:
        return Junction(self.x, self.y, self.angle, self.shape)


@dataclass(frozen=True)
class ParkingSlot:
    entrance: Tuple[DetectedJunction, DetectedJunction]
    polygon: Tuple[Tuple[float, float], ...]

    @property
    def length(self) -> float:
        a, b = self.entrance
        return math.hypot(b.x - a.x, b.y - a.y)

    def as_slot(self, depth: float) -> SlotSpec:
        return entrance_and_sides(self.entrance[0].as_junction(), self.entrance[1].as_junction(), depth)


@dataclass(frozen=True)
class CellOutputs:
    """Head outputs of one image, cells flattened row-major."""
    junction_prob: np.ndarray  # (G*G,)
    shape_logits: np.ndarray  # (G*G, |shapes|)
    reg: np.ndarray  # (G*G, 4)


@dataclass
class DetectionResult:
    scene_id: str
    junctions: List[DetectedJunction]
    slots: List[ParkingSlot]


def predict(network: Network, images: np.ndarray, batch_size: int = 16) -> List[CellOutputs]:
    """
    Junction probability and shape scores come from the compensated logits: the classifier
    outputs plus log q of the training-set class frequencies stored on the network.
    """
    outputs = []
    for start in range(0, len(images), batch_size):
        fp = network.forward(images[start:start + batch_size])
        cells = network.config.grid_size**2
        p_j = softmax(network.compensated_logits(fp.logits["id"], "id"), axis=1)[:, J_INDEX]
        shape_logits = network.compensated_logits(fp.logits["sh"], "sh")
        for b in range(fp.batch):
            sl = slice(b * cells, (b + 1) * cells)
            outputs.append(CellOutputs(p_j[sl], shape_logits[sl], fp.reg[sl].astype(np.float64)))
    return outputs


def decode_cells(outputs: CellOutputs, grid: GridSpec, conf_threshold: float) -> List[DetectedJunction]:
    below_one = float(np.nextafter(1.0, 0.0))
    found = []
    for idx in np.flatnonzero(outputs.junction_prob >= conf_threshold):
        row, col = divmod(int(idx), grid.G)
        rel = np.clip(outputs.reg[idx, :2], 0.0, below_one)
        x, y = from_cell((row, col), (float(rel[0]), float(rel[1])), grid)
        c, s = outputs.reg[idx, 2:]
        try:
            angle = decode_angle(float(c), float(s))
        except DomainError:
            angle = 0.0
        shape = SHAPE_CLASSES[int(np.argmax(outputs.shape_logits[idx]))]
        found.append(DetectedJunction(x, y, angle, shape, float(outputs.junction_prob[idx]), (row, col)))
    return found


def nms(junctions: Sequence[DetectedJunction], radius: float) -> List[DetectedJunction]:
    """Greedy by confidence (ties by cell index); drops anything within `radius` of a kept junction."""
    kept: List[DetectedJunction] = []
    for j in sorted(junctions, key=lambda j: j.order_key):
        if all(math.hypot(j.x - k.x, j.y - k.y) > radius for k in kept):
            kept.append(j)
    return kept


def pair_valid(j1: DetectedJunction, j2: DetectedJunction, junctions: Sequence[DetectedJunction],
               params: DetectionParams) -> bool:
    dx, dy = j2.x - j1.x, j2.y - j1.y
    length = math.hypot(dx, dy)
    if not params.d_min <= length <= params.d_max:
        return False
    for other in junctions:
        if other is j1 or other is j2:
            continue
        t, dist = point_segment_distance(other.position, j1.position, j2.position)
        if 0.0 < t < 1.0 and dist < params.corridor_width:
            return False
    # both junction angles along the same normal of the entrance line
    normal = math.atan2(dx, -dy)
    for side in (normal, normalize_angle(normal + math.pi)):
        if (angle_difference(j1.angle, side) <= params.angle_tolerance
                and angle_difference(j2.angle, side) <= params.angle_tolerance):
            return True
    return False


def infer_slots(junctions: Sequence[DetectedJunction], params: DetectionParams) -> List[ParkingSlot]:
    """
    Valid pairs, shortest entrance first, each junction used by at most two slots.
    """
    candidates = []
    for i, j in combinations(range(len(junctions)), 2):
        if pair_valid(junctions[i], junctions[j], junctions, params):
            a, b = junctions[i], junctions[j]
            candidates.append((math.hypot(b.x - a.x, b.y - a.y), i, j))
    usage = [0] * len(junctions)
    slots = []
    for _, i, j in sorted(candidates):
        if usage[i] >= MAX_SLOTS_PER_JUNCTION or usage[j] >= MAX_SLOTS_PER_JUNCTION:
            continue
        usage[i] += 1
        usage[j] += 1
        spec = entrance_and_sides(junctions[i].as_junction(), junctions[j].as_junction(), params.slot_depth)
        slots.append(ParkingSlot(entrance=(junctions[i], junctions[j]), polygon=spec.polygon))
    return slots


def detect_outputs(scene_id: str, outputs: CellOutputs, grid: GridSpec, params: DetectionParams) -> DetectionResult:
    junctions = nms(decode_cells(outputs, grid, params.conf_threshold), params.nms_radius)
    return DetectionResult(scene_id=scene_id, junctions=junctions, slots=infer_slots(junctions, params))


def detect_scenes(network: Network, scenes: Sequence[Scene], grid: GridSpec, params: DetectionParams,
                  batch_size: int = 16) -> List[DetectionResult]:
    if not scenes:
        return []
    images = np.stack([s.image for s in scenes])
    outputs = predict(network, images, batch_size)
    return [detect_outputs(s.scene_id, out, grid, params) for s, out in zip(scenes, outputs)]


def oracle_outputs(scene: Scene, grid: GridSpec) -> CellOutputs:
    """Head outputs a perfect model would produce for `scene`."""
    targets = cell_targets(scene, grid)
    junction = targets.identity == J_INDEX
    shape_logits = np.zeros((grid.num_cells, len(SHAPE_CLASSES)))
    shape_logits[junction, targets.shape[junction]] = 1.0
    reg = np.concatenate([targets.rel, np.cos(targets.angle)[:, None], np.sin(targets.angle)[:, None]], axis=1)
    return CellOutputs(junction.astype(np.float64), shape_logits, reg)


# ---------------------------------------------------------------------------------------
# detection files


def detections_to_json(results: Sequence[DetectionResult], grid: GridSpec, params: DetectionParams) -> Dict[str, Any]:
    scenes = []
    for result in results:
        index = {id(j): i for i, j in enumerate(result.junctions)}
        scenes.append({
            "scene_id": result.scene_id,
            "junctions": [{
                "x": j.x,
                "y": j.y,
                "angle": j.angle,
                "shape": j.shape.value,
                "confidence": j.confidence,
            } for j in result.junctions],
            "slots": [{
                "j1": index[id(s.entrance[0])],
                "j2": index[id(s.entrance[1])],
                "depth": params.slot_depth,
            } for s in result.slots],
        })
    return {"grid": {"image_size": grid.image_size, "G": grid.G}, "scenes": scenes}


def write_detections(results: Sequence[DetectionResult], grid: GridSpec, params: DetectionParams,
                     path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(detections_to_json(results, grid, params), f, indent=1)
        f.write("\n")
    return path


def read_detections(path: Union[str, Path]) -> Dataset:
    """Detection files and label files share a schema; scenes are keyed by `scene_id` or `id`."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(str(path), "file", e.strerror or str(e)) from None
    doc = read_json(text, str(path))
    if isinstance(doc, dict) and isinstance(doc.get("scenes"), list):
        for scene in doc["scenes"]:
            if isinstance(scene, dict) and "id" not in scene and "scene_id" in scene:
                scene["id"] = scene["scene_id"]
    return labels_from_doc(doc, str(path))
