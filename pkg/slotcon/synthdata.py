"""
Synthetic top-down parking scenes with exact junction labels, the augmentation pipeline used
to build training views, and the JSON label format.
"""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from slotcon.errors import ConfigError, DomainError, GenerationError, ParseError
from slotcon.geometry import (ID_CLASSES, SHAPE_CLASSES, TWO_PI, GridSpec, Junction, Shape, SlotSpec,
                              entrance_and_sides, label_cells)

LABELS_FILE = "labels.json"
IMAGES_DIR = "images"


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    slots_per_scene: Tuple[int, int] = (1, 2)
    slot_width: Tuple[float, float] = (40.0, 56.0)
    slot_depth: Tuple[float, float] = (64.0, 96.0)
    line_width: float = 3.0
    global_rotation: Tuple[float, float] = (0.0, TWO_PI)
    background_noise: float = 0.1
    target_shape_imbalance: float = 5.0
    edge_margin: float = 8.0

    def validate(self):
        for key in ("slots_per_scene", "slot_width", "slot_depth", "global_rotation"):
            lo, hi = getattr(self, key)
            if hi < lo:
                raise ConfigError(f"scene.{key}", f"empty range [{lo}, {hi}]")
        if self.slots_per_scene[0] < 0:
            raise ConfigError("scene.slots_per_scene", "must be non-negative")
        if self.slot_width[0] <= 0 or self.slot_depth[0] <= 0:
            raise ConfigError("scene.slot_width", "slot dimensions must be positive")
        if self.line_width <= 0:
            raise ConfigError("scene.line_width", "must be positive")
        if not 0.0 <= self.background_noise <= 1.0:
            raise ConfigError("scene.background_noise", "must lie in [0, 1]")
        if self.target_shape_imbalance <= 0:
            raise ConfigError("scene.target_shape_imbalance", "must be positive")
        if not 0.0 < self.edge_margin < self.image_size / 2:
            raise ConfigError("scene.edge_margin", "must lie in (0, image_size / 2)")


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation: float = 0.25
    min_crop_area: float = 0.8
    crop_area_floor: float = 0.5
    max_blur_sigma: float = 1.0
    blur_probability: float = 0.5
    erase_probability: float = 0.3
    erase_max_fraction: float = 0.25

    def validate(self):
        if self.max_rotation < 0:
            raise ConfigError("augment.max_rotation", "must be non-negative")
        if not 0.0 < self.crop_area_floor <= 1.0:
            raise ConfigError("augment.crop_area_floor", "must lie in (0, 1]")
        if not self.crop_area_floor <= self.min_crop_area <= 1.0:
            raise ConfigError("augment.min_crop_area", f"must lie in [{self.crop_area_floor}, 1]")
        if self.max_blur_sigma < 0:
            raise ConfigError("augment.max_blur_sigma", "must be non-negative")
        for key in ("blur_probability", "erase_probability", "erase_max_fraction"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"augment.{key}", "must lie in [0, 1]")


@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 0.0
    crop_origin: Tuple[float, float] = (0.0, 0.0)
    crop_scale: float = 1.0
    blur_sigma: float = 0.0
    erase: Optional[Tuple[float, float, float, float]] = None  # x0, y0, width, height (output pixels)
    cell_size: float = 0.0
    crop_area_floor: float = 0.5

    def clamped(self, image_size: int) -> "AugmentParams":
        scale = float(np.clip(self.crop_scale, math.sqrt(self.crop_area_floor), 1.0))
        limit = image_size * (1.0 - scale)
        origin = (float(np.clip(self.crop_origin[0], 0.0, limit)), float(np.clip(self.crop_origin[1], 0.0, limit)))
        return AugmentParams(self.rotation, origin, scale, max(0.0, self.blur_sigma), self.erase, self.cell_size,
                             self.crop_area_floor)

    def affine(self, image_size: int) -> Tuple[np.ndarray, np.ndarray]:
        """(M, t) with p' = M p + t: rotation about the image center, then crop and resize."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        center = np.full(2, image_size / 2.0)
        M = rot / self.crop_scale
        t = (center - rot @ center - np.asarray(self.crop_origin, dtype=float)) / self.crop_scale
        return M, t

    @property
    def warps(self) -> bool:
        return self.rotation != 0.0 or self.crop_scale != 1.0 or self.crop_origin != (0.0, 0.0)


@dataclass
class Scene:
    scene_id: str
    image_size: int
    junctions: List[Junction]
    slots: List[SlotSpec]
    image: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for j in self.junctions:
            if not (0.0 <= j.x < self.image_size and 0.0 <= j.y < self.image_size):
                raise DomainError(f"scene {self.scene_id}: junction ({j.x}, {j.y}) "
                                  f"outside the {self.image_size} px image")
        known = set(self.junctions)
        for slot in self.slots:
            if not all(j in known for j in slot.entrance):
                raise DomainError(f"scene {self.scene_id}: slot entrance junction missing from junction list")


@dataclass
class Dataset:
    grid: GridSpec
    scenes: List[Scene]


@dataclass(frozen=True)
class DatasetStats:
    rho_id: float
    rho_sh: float
    id_counts: Dict[str, int]
    shape_counts: Dict[str, int]

    def frequencies(self) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        """Class frequencies (q_id, q_sh) in classifier index order."""
        id_total = sum(self.id_counts.values())
        sh_total = sum(self.shape_counts.values())
        q_id = tuple(self.id_counts[k.value] / id_total for k in ID_CLASSES) if id_total else ()
        q_sh = tuple(self.shape_counts[k.value] / sh_total for k in SHAPE_CLASSES) if sh_total else ()
        return q_id, q_sh


@dataclass(frozen=True)
class CellTargets:
    identity: np.ndarray  # (G*G,) index into ID_CLASSES
    shape: np.ndarray  # (G*G,) index into SHAPE_CLASSES, -1 for background
    rel: np.ndarray  # (G*G, 2)
    angle: np.ndarray  # (G*G,) radians, 0 for background

    @property
    def junction_cells(self) -> np.ndarray:
        return np.flatnonzero(self.identity == 0)


# ---------------------------------------------------------------------------------------
# generation


def _render(size: int, segments: List[Tuple[np.ndarray, np.ndarray]], line_width: float, noise: float,
            rng: np.random.Generator) -> np.ndarray:
    centers = np.arange(size, dtype=np.float64) + 0.5
    xx, yy = np.meshgrid(centers, centers)
    mask = np.zeros((size, size), dtype=bool)
    half = line_width / 2.0
    for a, b in segments:
        d = b - a
        t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / float(d @ d), 0.0, 1.0)
        mask |= np.hypot(xx - (a[0] + t * d[0]), yy - (a[1] + t * d[1])) <= half
    image = mask.astype(np.float64)
    if noise > 0:
        image = np.clip(image + rng.uniform(-noise, noise, size=image.shape), 0.0, 1.0)
    return image[..., None].astype(np.float32)


def generate_scene(cfg: SceneConfig, seed: int, scene_id: str = "") -> Scene:
    """
    A single row of slots. Separators inside the row are T-shaped; each row end is either
    terminal (L-shaped) or continues out of view (T-shaped), with the terminal probability
    chosen so the expected T:L ratio equals `target_shape_imbalance`.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    n = int(rng.integers(cfg.slots_per_scene[0], cfg.slots_per_scene[1] + 1))
    junctions: List[Junction] = []
    slots: List[SlotSpec] = []
    segments = []
    if n > 0:
        widths = rng.uniform(*cfg.slot_width, size=n)
        depth = float(rng.uniform(*cfg.slot_depth))
        phi = float(rng.uniform(*cfg.global_rotation))
        u = np.array([math.cos(phi), math.sin(phi)])
        v = np.array([-math.sin(phi), math.cos(phi)])

        offsets = np.concatenate([[0.0], np.cumsum(widths)])
        offsets -= offsets[-1] / 2.0
        local = offsets[:, None] * u[None, :]
        lo = cfg.edge_margin - local.min(axis=0)
        hi = size - cfg.edge_margin - local.max(axis=0)
        if np.any(hi < lo):
            raise GenerationError(f"scene {scene_id or seed}: a row of {n} slots spanning {2 * offsets[-1]:.1f} px "
                                  f"at rotation {phi:.3f} rad does not fit a {size} px frame "
                                  f"with edge margin {cfg.edge_margin}")
        positions = rng.uniform(lo, hi) + local

        p_terminal = min(1.0, (n + 1) / (2.0 * (cfg.target_shape_imbalance + 1.0)))
        terminal = rng.random(2) < p_terminal
        shapes = [Shape.T] * (n + 1)
        if terminal[0]:
            shapes[0] = Shape.L
        if terminal[1]:
            shapes[-1] = Shape.L

        angle = math.atan2(v[1], v[0])
        junctions = [Junction(p[0], p[1], angle, shape) for p, shape in zip(positions, shapes)]
        slots = [entrance_and_sides(junctions[k], junctions[k + 1], depth) for k in range(n)]

        start, end = positions[0], positions[-1]
        if not terminal[0]:
            start = start - u * 2 * size
        if not terminal[1]:
            end = end + u * 2 * size
        segments.append((start, end))
        segments.extend((p, p + v * depth) for p in positions)

    image = _render(size, segments, cfg.line_width, cfg.background_noise, rng)
    return Scene(scene_id=scene_id, image_size=size, junctions=junctions, slots=slots, image=image)


def generate_dataset(cfg: SceneConfig, count: int, seed: int, grid: GridSpec, prefix: str = "scene",
                     workers: int = 1) -> Dataset:
    if cfg.image_size != grid.image_size:
        raise ConfigError("scene.image_size", f"{cfg.image_size} does not match grid.image_size {grid.image_size}")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]
    ids = [f"{prefix}-{i:05d}" for i in range(count)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(lambda a: generate_scene(cfg, a[0], a[1]), zip(seeds, ids)))
    else:
        scenes = [generate_scene(cfg, s, i) for s, i in zip(seeds, ids)]
    return Dataset(grid=grid, scenes=scenes)


# ---------------------------------------------------------------------------------------
# augmentation


def _protected(junction: Junction, cell_size: float) -> Tuple[float, float, float, float]:
    cs = cell_size if cell_size > 0 else 1.0
    col, row = math.floor(junction.x / cs), math.floor(junction.y / cs)
    return ((col - 1) * cs, (row - 1) * cs, (col + 2) * cs, (row + 2) * cs)


def _overlaps(rect: Tuple[float, float, float, float], box: Tuple[float, float, float, float]) -> bool:
    x0, y0, w, h = rect
    return x0 < box[2] and box[0] < x0 + w and y0 < box[3] and box[1] < y0 + h


def augment(scene: Scene, params: AugmentParams) -> Scene:
    size = scene.image_size
    params = params.clamped(size)
    M, t = params.affine(size)
    margin = params.cell_size / 4.0

    mapped: Dict[Junction, Junction] = {}
    for junction in scene.junctions:
        x, y = M @ np.array(junction.position) + t
        if margin <= x < size - margin and margin <= y < size - margin:
            mapped[junction] = Junction(x, y, junction.angle + params.rotation, junction.shape)
    slots = [
        entrance_and_sides(mapped[s.entrance[0]], mapped[s.entrance[1]], s.depth / params.crop_scale)
        for s in scene.slots if s.entrance[0] in mapped and s.entrance[1] in mapped
    ]
    junctions = list(mapped.values())

    image = scene.image
    if image is not None:
        image = image[..., 0].astype(np.float64)
        if params.warps:
            Minv = np.linalg.inv(M)
            offset = Minv @ (np.full(2, 0.5) - t) - 0.5
            image = ndimage.affine_transform(image, Minv[::-1, ::-1], offset=offset[::-1], output_shape=image.shape,
                                             order=1, mode="constant", cval=0.0)
        if params.blur_sigma > 0:
            image = ndimage.gaussian_filter(image, params.blur_sigma, mode="constant")
        if params.erase is not None and not any(_overlaps(params.erase, _protected(j, params.cell_size))
                                                for j in junctions):
            x0, y0, w, h = params.erase
            r0, r1 = max(0, math.floor(y0)), min(size, math.ceil(y0 + h))
            c0, c1 = max(0, math.floor(x0)), min(size, math.ceil(x0 + w))
            image = image.copy()
            image[r0:r1, c0:c1] = 0.0
        image = image[..., None].astype(scene.image.dtype)

    return Scene(scene_id=scene.scene_id, image_size=size, junctions=junctions, slots=slots, image=image)


def sample_augment_params(rng: np.random.Generator, cfg: AugmentConfig, image_size: int,
                          cell_size: float) -> AugmentParams:
    rotation = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    scale = math.sqrt(float(rng.uniform(cfg.min_crop_area, 1.0)))
    origin = tuple(float(o) for o in rng.uniform(0.0, image_size * (1.0 - scale), size=2))
    blur = float(rng.uniform(0.0, cfg.max_blur_sigma)) if rng.random() < cfg.blur_probability else 0.0
    erase = None
    if rng.random() < cfg.erase_probability:
        w, h = rng.uniform(0.05, max(0.05, cfg.erase_max_fraction), size=2) * image_size
        x0, y0 = rng.uniform(0.0, image_size - w), rng.uniform(0.0, image_size - h)
        erase = (float(x0), float(y0), float(w), float(h))
    return AugmentParams(rotation=rotation, crop_origin=origin, crop_scale=scale, blur_sigma=blur, erase=erase,
                         cell_size=cell_size, crop_area_floor=cfg.crop_area_floor)


def make_views(scene: Scene, seed: int, cfg: AugmentConfig = AugmentConfig(),
               cell_size: float = 0.0) -> Tuple[Scene, Scene, Scene]:
    """Three independently augmented copies: the detection view and the two contrastive views."""
    rng = np.random.default_rng(seed)
    return tuple(augment(scene, sample_augment_params(rng, cfg, scene.image_size, cell_size)) for _ in range(3))


# ---------------------------------------------------------------------------------------
# labels


def cell_targets(scene: Scene, grid: GridSpec) -> CellTargets:
    labels = label_cells(scene.junctions, grid)
    identity = np.array([ID_CLASSES.index(lab.identification) for lab in labels], dtype=np.int64)
    shape = np.array([SHAPE_CLASSES.index(lab.shape) if lab.shape is not None else -1 for lab in labels],
                     dtype=np.int64)
    rel = np.array([lab.rel for lab in labels], dtype=np.float64)
    angle = np.array([lab.angle for lab in labels], dtype=np.float64)
    return CellTargets(identity=identity, shape=shape, rel=rel, angle=angle)


def compute_stats(dataset: Dataset, grid: GridSpec) -> DatasetStats:
    if not dataset.scenes:
        raise DomainError("cannot compute statistics of an empty dataset")
    id_counts = {k.value: 0 for k in ID_CLASSES}
    shape_counts = {k.value: 0 for k in SHAPE_CLASSES}
    for scene in dataset.scenes:
        for lab in label_cells(scene.junctions, grid):
            id_counts[lab.identification.value] += 1
            if lab.shape is not None:
                shape_counts[lab.shape.value] += 1

    def ratio(counts: Dict[str, int]) -> float:
        lo, hi = min(counts.values()), max(counts.values())
        return math.inf if lo == 0 else hi / lo

    return DatasetStats(rho_id=ratio(id_counts), rho_sh=ratio(shape_counts), id_counts=id_counts,
                        shape_counts=shape_counts)


def labels_to_json(dataset: Dataset) -> Dict[str, Any]:
    scenes = []
    for scene in dataset.scenes:
        index = {j: i for i, j in enumerate(scene.junctions)}
        scenes.append({
            "id": scene.scene_id,
            "junctions": [{"x": j.x, "y": j.y, "angle": j.angle, "shape": j.shape.value} for j in scene.junctions],
            "slots": [{"j1": index[s.entrance[0]], "j2": index[s.entrance[1]], "depth": s.depth} for s in scene.slots],
        })
    return {"grid": {"image_size": dataset.grid.image_size, "G": dataset.grid.G}, "scenes": scenes}


class _Reader:
    def __init__(self, source: str):
        self.source = source

    def fail(self, loc: str, message: str):
        raise ParseError(self.source, loc, message)

    def get(self, obj: Any, key: str, kind, loc: str):
        if not isinstance(obj, dict):
            self.fail(loc, "expected an object")
        if key not in obj:
            self.fail(f"{loc}.{key}" if loc else key, "missing field")
        value = obj[key]
        kinds = kind if isinstance(kind, tuple) else (kind, )
        if isinstance(value, bool) or not isinstance(value, kinds):
            self.fail(f"{loc}.{key}" if loc else key, f"expected {'/'.join(k.__name__ for k in kinds)}")
        if isinstance(value, float) and not math.isfinite(value):
            self.fail(f"{loc}.{key}", "non-finite number")
        return value


def read_json(text: str, source: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(source, f"line {e.lineno} column {e.colno}", e.msg) from None


def labels_from_json(text: str, source: str = "<labels>") -> Dataset:
    return labels_from_doc(read_json(text, source), source)


def labels_from_doc(doc: Any, source: str = "<labels>") -> Dataset:
    r = _Reader(source)
    grid_doc = r.get(doc, "grid", dict, "")
    try:
        grid = GridSpec(r.get(grid_doc, "image_size", int, "grid"), r.get(grid_doc, "G", int, "grid"))
    except DomainError as e:
        raise ParseError(source, "grid", str(e)) from None
    number = (int, float)

    scenes = []
    for si, scene_doc in enumerate(r.get(doc, "scenes", list, "")):
        loc = f"scenes[{si}]"
        scene_id = r.get(scene_doc, "id", str, loc)
        junctions = []
        for ji, jd in enumerate(r.get(scene_doc, "junctions", list, loc)):
            jloc = f"{loc}.junctions[{ji}]"
            x, y = r.get(jd, "x", number, jloc), r.get(jd, "y", number, jloc)
            if not grid.contains((x, y)):
                r.fail(jloc, f"position ({x}, {y}) outside the {grid.image_size} px image")
            angle = r.get(jd, "angle", number, jloc)
            if not 0.0 <= angle < TWO_PI:
                r.fail(f"{jloc}.angle", f"{angle} outside [0, 2pi)")
            shape = r.get(jd, "shape", str, jloc)
            if shape not in ("T", "L"):
                r.fail(f"{jloc}.shape", f"expected 'T' or 'L', got {shape!r}")
            junctions.append(Junction(x, y, angle, Shape(shape)))
        slots = []
        for ki, sd in enumerate(r.get(scene_doc, "slots", list, loc)):
            kloc = f"{loc}.slots[{ki}]"
            j1, j2 = r.get(sd, "j1", int, kloc), r.get(sd, "j2", int, kloc)
            depth = r.get(sd, "depth", number, kloc)
            for key, ref in (("j1", j1), ("j2", j2)):
                if not 0 <= ref < len(junctions):
                    r.fail(f"{kloc}.{key}", f"junction index {ref} out of range")
            if j1 == j2:
                r.fail(kloc, "entrance junctions must be distinct")
            if depth <= 0:
                r.fail(f"{kloc}.depth", "must be positive")
            slots.append(entrance_and_sides(junctions[j1], junctions[j2], depth))
        scenes.append(Scene(scene_id=scene_id, image_size=grid.image_size, junctions=junctions, slots=slots))
    return Dataset(grid=grid, scenes=scenes)


def export_labels(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        json.dump(labels_to_json(dataset), f, indent=1)
        f.write("\n")
    return path


def import_labels(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(str(path), "file", e.strerror or str(e)) from None
    return labels_from_json(text, source=str(path))


def save_dataset(dataset: Dataset, out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    (out_dir / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    written = [export_labels(dataset, out_dir / LABELS_FILE)]
    for scene in dataset.scenes:
        if scene.image is not None:
            image_path = out_dir / IMAGES_DIR / f"{scene.scene_id}.npy"
            np.save(image_path, scene.image.astype("<f4"))
            written.append(image_path)
    return written


def load_dataset(data_dir: Union[str, Path], images: bool = True) -> Dataset:
    data_dir = Path(data_dir)
    dataset = import_labels(data_dir / LABELS_FILE)
    if images:
        for scene in dataset.scenes:
            image_path = data_dir / IMAGES_DIR / f"{scene.scene_id}.npy"
            try:
                scene.image = np.load(image_path)
            except OSError as e:
                raise ParseError(str(image_path), "file", e.strerror or str(e)) from None
    return dataset
