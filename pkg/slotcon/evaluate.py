"""
Slot precision and recall under the entrance RMSE criterion, representation geometry of the
contrastive spaces, and the CSV/SVG report.
"""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from slotcon.errors import DomainError
from slotcon.geometry import SHAPE_CLASSES, GridSpec, SlotSpec
from slotcon.losses import TERM_NAMES
from slotcon.model import Network
from slotcon.synthdata import Scene, cell_targets

HISTORY_COLUMNS = ("epoch", ) + TERM_NAMES + ("total", "precision", "recall", "prototype_cosine", "alignment")
REFERENCE_SIZE = 600.0
REFERENCE_THRESHOLD = 10.0
CLASS_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red")
SVG_SIZE = 512


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    rmse: List[float] = field(default_factory=list)
    pairs: List[Tuple[int, int]] = field(default_factory=list)

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.rmse + other.rmse, [])


class PrecisionRecall(NamedTuple):
    precision: float
    recall: float
    degenerate: bool


@dataclass(frozen=True)
class GeometryReport:
    prototype_cosine: float
    alignment: float
    variance: float
    missing: Tuple[str, ...] = ()


def default_threshold(image_size: int) -> float:
    return REFERENCE_THRESHOLD * image_size / REFERENCE_SIZE


def slot_rmse(pred: SlotSpec, gt: SlotSpec) -> float:
    """RMSE over the two entrance junctions, under the better of the two junction orderings."""
    p = np.array([j.position for j in pred.entrance])
    g = np.array([j.position for j in gt.entrance])
    direct = np.mean(np.sum((p - g)**2, axis=1))
    swapped = np.mean(np.sum((p[::-1] - g)**2, axis=1))
    return float(math.sqrt(min(direct, swapped)))


def match_slots(pred: Sequence[SlotSpec], gt: Sequence[SlotSpec], rmse_threshold: float) -> MatchResult:
    """Greedy one-to-one matching in ascending RMSE; a pair matches iff RMSE < threshold."""
    if not rmse_threshold > 0:
        raise DomainError(f"RMSE threshold must be positive, got {rmse_threshold}")
    candidates = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            err = slot_rmse(p, g)
            if err < rmse_threshold:
                candidates.append((err, i, j))
    used_p, used_g = set(), set()
    result = MatchResult()
    for err, i, j in sorted(candidates):
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        result.pairs.append((i, j))
        result.rmse.append(err)
    result.tp = len(result.pairs)
    result.fp = len(pred) - result.tp
    result.fn = len(gt) - result.tp
    return result


def precision_recall(result: MatchResult) -> PrecisionRecall:
    predicted, actual = result.tp + result.fp, result.tp + result.fn
    precision = result.tp / predicted if predicted else 1.0
    recall = result.tp / actual if actual else 1.0
    return PrecisionRecall(precision, recall, predicted == 0 or actual == 0)


def evaluate_slots(pred: Dict[str, Sequence[SlotSpec]], gt: Dict[str, Sequence[SlotSpec]],
                   rmse_threshold: float) -> MatchResult:
    """Sums per-scene matches over every scene of `gt`; unknown predicted scenes count as false positives."""
    total = MatchResult()
    for scene_id in sorted(set(gt) | set(pred)):
        total = total + match_slots(pred.get(scene_id, ()), gt.get(scene_id, ()), rmse_threshold)
    return total


# ---------------------------------------------------------------------------------------
# geometry


def geometry_metrics(embeddings: np.ndarray,
                     labels: np.ndarray,
                     prototypes: np.ndarray,
                     class_names: Sequence[str] = tuple(k.value for k in SHAPE_CLASSES)) -> GeometryReport:
    """
    Mean pairwise prototype cosine, mean member-to-own-prototype cosine and the variance of those
    cosines. Classes without members are listed in `missing`.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64).reshape(-1, prototypes.shape[1])
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    protos = np.asarray(prototypes, dtype=np.float64)
    protos = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    K = len(protos)

    gram = np.clip(protos @ protos.T, -1.0, 1.0)
    iu = np.triu_indices(K, k=1)
    proto_cos = float(np.mean(gram[iu])) if K > 1 else 1.0

    missing = tuple(class_names[k] for k in range(K) if not np.any(labels == k))
    if len(embeddings):
        unit = embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
        cos = np.clip(np.sum(unit * protos[labels], axis=1), -1.0, 1.0)
        alignment, variance = float(np.mean(cos)), float(np.var(cos))
    else:
        alignment = variance = float("nan")
    return GeometryReport(prototype_cosine=proto_cos, alignment=alignment, variance=variance, missing=missing)


def task_embeddings(network: Network, scenes: Sequence[Scene], grid: GridSpec, task: str = "sh",
                    batch_size: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """
    Embeddings with their class index in the given task: junction cells for the shape task,
    every cell (junction and background) for the identification task.
    """
    zs, labels = [], []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        fp = network.forward(np.stack([s.image for s in chunk]))
        cells = grid.num_cells
        for b, scene in enumerate(chunk):
            targets = cell_targets(scene, grid)
            rows = targets.junction_cells if task == "sh" else np.arange(cells)
            zs.append(fp.z[task][b * cells + rows].astype(np.float64))
            labels.append(targets.shape[rows] if task == "sh" else targets.identity[rows])
    P = network.config.proj_out
    if not zs:
        return np.zeros((0, P)), np.zeros(0, dtype=np.int64)
    return np.concatenate(zs), np.concatenate(labels).astype(np.int64)


# ---------------------------------------------------------------------------------------
# report


def format_metric(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


def write_history(rows: Sequence[Dict[str, Any]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({col: format_metric(row.get(col)) for col in HISTORY_COLUMNS})
    return path


def read_history(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def principal_circle(points: np.ndarray) -> np.ndarray:
    """Projection onto the two leading principal axes, rescaled onto the unit circle."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return np.zeros((0, 2))
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=True)
    axes = vt[:2]
    if len(axes) < 2:
        axes = np.vstack([axes, np.eye(points.shape[1])[:2 - len(axes)]])
    # sign convention: largest-magnitude loading positive
    signs = np.sign(axes[np.arange(len(axes)), np.argmax(np.abs(axes), axis=1)])
    axes = axes * np.where(signs == 0, 1.0, signs)[:, None]
    flat = points @ axes.T
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    return np.where(norms > 1e-12, flat / np.where(norms > 1e-12, norms, 1.0), flat)


def scatter_svg(embeddings: np.ndarray, labels: np.ndarray, prototypes: np.ndarray, class_names: Sequence[str],
                path: Union[str, Path]) -> int:
    """Unit-circle scatter of embeddings (dots) and prototypes (stars); returns the point count."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    flat = principal_circle(np.concatenate([embeddings.reshape(-1, prototypes.shape[1]), prototypes]))
    pts, protos = flat[:len(labels)], flat[len(labels):]

    with matplotlib.rc_context({"svg.hashsalt": "slotcon", "svg.fonttype": "none"}):
        fig = Figure(figsize=(SVG_SIZE / 72.0, SVG_SIZE / 72.0), dpi=72)
        ax = fig.add_subplot(1, 1, 1)
        circle = np.linspace(0.0, 2.0 * math.pi, 361)
        ax.plot(np.cos(circle), np.sin(circle), color="lightgray", linewidth=0.8)
        for k, name in enumerate(class_names):
            color = CLASS_COLORS[k % len(CLASS_COLORS)]
            members = pts[labels == k]
            ax.scatter(members[:, 0], members[:, 1], s=6, color=color, label=name, alpha=0.6)
            if k < len(protos):
                ax.scatter(protos[k:k + 1, 0], protos[k:k + 1, 1], s=220, marker="*", color=color,
                           edgecolors="black", linewidths=0.8)
        ax.set_xlim(-1.2, 1.2)
        ax.set_ylim(-1.2, 1.2)
        ax.set_aspect("equal")
        ax.legend(loc="upper right")
        fig.savefig(path, format="svg", metadata={"Date": None})
    return len(pts) + len(protos)


def emit_report(history: Sequence[Dict[str, Any]], embeddings: Optional[Dict[str, np.ndarray]],
                out_dir: Union[str, Path]) -> Tuple[List[Path], int]:
    """
    Writes metrics.csv and, when embeddings are given, embeddings.svg. Returns the written
    paths and the number of plotted points.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_history(history, out_dir / "metrics.csv")]
    points = 0
    if embeddings is not None:
        names = [str(n) for n in embeddings.get("class_names", [k.value for k in SHAPE_CLASSES])]
        svg_path = out_dir / "embeddings.svg"
        points = scatter_svg(embeddings["z"], embeddings["labels"], embeddings["prototypes"], names, svg_path)
        written.append(svg_path)
    return written, points
