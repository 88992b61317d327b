"""
The work behind each command: reading inputs, running the library and writing outputs.
"""
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from slotcon.checkpoint import Checkpoint, load_checkpoint, write_atomic
from slotcon.config import Settings, parse_overrides
from slotcon.detect import detect_scenes, read_detections, write_detections
from slotcon.errors import ConfigError, DimensionError, ParseError
from slotcon.evaluate import (default_threshold, emit_report, evaluate_slots, geometry_metrics, task_embeddings,
                              precision_recall, read_history)
from slotcon.geometry import ID_CLASSES, SHAPE_CLASSES
from slotcon.model import TASKS, Network
from slotcon.synthdata import (IMAGES_DIR, LABELS_FILE, Dataset, Scene, compute_stats, generate_dataset, import_labels,
                               load_dataset, save_dataset)
from slotcon.trainer import METRICS_FILE, train
from slotcon.utils import fmt_path, fmt_value, status, warn

PathLike = Union[str, Path]
SPLITS = ("train", "test")
STATS_FILE = "stats.json"
EVAL_METRICS_FILE = "metrics.json"
GEOMETRY_FILE = "geometry.json"
EMBEDDINGS_FILE = "embeddings.npz"
# keys that may change between a checkpoint and the run resuming it
RESUMABLE_KEYS = {"train.epochs", "train.eval_every", "train.checkpoint_every", "train.workers"}
CLASS_NAMES = {"id": tuple(k.value for k in ID_CLASSES), "sh": tuple(k.value for k in SHAPE_CLASSES)}


def _dump_json(doc: Any, path: PathLike) -> Path:
    return write_atomic(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def split_seed(seed: int, split: int) -> int:
    return int(np.random.SeedSequence([seed, split]).generate_state(1)[0])


def run_synth(settings: Settings, out_dir: PathLike, seed: int, workers: int = 1, quiet: bool = False) -> List[Path]:
    out_dir = Path(out_dir)
    sizes = {"train": settings.data.train_scenes, "test": settings.data.test_scenes}
    written: List[Path] = []
    stats_doc: Dict[str, Any] = {}
    for index, split in enumerate(SPLITS):
        status("synth", f"generating {fmt_value(sizes[split])} {split} scenes", quiet=quiet)
        dataset = generate_dataset(settings.scene, sizes[split], split_seed(seed, index), settings.grid,
                                   prefix=split, workers=workers)
        written.extend(save_dataset(dataset, out_dir / split))
        if dataset.scenes:
            stats = compute_stats(dataset, settings.grid)
            stats_doc[split] = {
                "rho_id": stats.rho_id,
                "rho_sh": stats.rho_sh,
                "id_counts": stats.id_counts,
                "shape_counts": stats.shape_counts,
            }
            status("synth", f"{split}: rho_id {fmt_value(stats.rho_id)}, rho_sh {fmt_value(stats.rho_sh)}",
                   quiet=quiet)
    written.append(_dump_json(stats_doc, out_dir / STATS_FILE))
    status("synth", "wrote dataset to", fmt_path(out_dir), quiet=quiet)
    return written


def _load_split(data_dir: Path, split: str) -> Optional[Dataset]:
    split_dir = data_dir / split
    return load_dataset(split_dir) if (split_dir / LABELS_FILE).exists() else None


def _check_grid(settings: Settings, dataset: Dataset, source: PathLike):
    if dataset.grid != settings.grid:
        raise ConfigError("grid.G", f"{source} was generated for image_size={dataset.grid.image_size}, "
                          f"G={dataset.grid.G}; the configuration has image_size={settings.grid.image_size}, "
                          f"G={settings.grid.G}")


def check_resumable(settings: Settings, ckpt: Checkpoint):
    current = settings.to_flat()
    for key in sorted(set(current) | set(ckpt.config)):
        if key in RESUMABLE_KEYS:
            continue
        if current.get(key) != ckpt.config.get(key):
            raise ConfigError(key, f"is {current.get(key)!r} but the checkpoint was trained with "
                              f"{ckpt.config.get(key)!r}")


def run_train(settings: Settings,
              data_dir: PathLike,
              out_dir: PathLike,
              resume: Optional[PathLike] = None,
              quiet: bool = False) -> List[Path]:
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    train_set = _load_split(data_dir, "train") or load_dataset(data_dir)
    test_set = _load_split(data_dir, "test")
    _check_grid(settings, train_set, data_dir)
    if test_set is not None:
        _check_grid(settings, test_set, data_dir / "test")

    ckpt, history = None, None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        check_resumable(settings, ckpt)
        if (out_dir / METRICS_FILE).exists():
            history = read_history(out_dir / METRICS_FILE)
        status("train", f"resuming from epoch {fmt_value(ckpt.epoch, 'epoch')}", fmt_path(resume), quiet=quiet)

    status("train", f"{fmt_value(len(train_set.scenes))} training scenes,",
           f"{fmt_value(len(test_set.scenes) if test_set else 0)} evaluation scenes", quiet=quiet)
    eval_scenes = test_set.scenes if test_set is not None and test_set.scenes else None
    ckpt_path, _ = train(settings, train_set, out_dir, eval_scenes=eval_scenes, resume=ckpt, history=history,
                         quiet=quiet)
    written = sorted(out_dir.glob("checkpoint-*.ckpt")) + [ckpt_path, out_dir / METRICS_FILE]
    status("train", "wrote", fmt_path(ckpt_path), quiet=quiet)
    return written


def load_network(ckpt: Checkpoint, overrides: Iterable[str] = ()) -> Tuple[Settings, Network]:
    flat = dict(ckpt.config)
    flat.update(parse_overrides(overrides))
    settings = Settings.from_flat(flat)
    network = Network(settings.model, seed=ckpt.seed, dtype=np.dtype(ckpt.dtype))
    for name, param in network:
        if name not in ckpt.params:
            raise ParseError("<checkpoint>", f"param/{name}", "missing parameter")
        value = ckpt.params[name]
        if value.shape != param.shape:
            raise DimensionError(f"checkpoint parameter '{name}' has shape {value.shape}, model expects {param.shape}")
        param.value = value.astype(network.dtype)
    for task, q in ckpt.class_frequencies.items():
        network.set_class_frequencies(task, q)
    return settings, network


def _as_image(array: np.ndarray, source: Path) -> np.ndarray:
    if array.ndim == 2:
        array = array[..., None]
    if array.ndim != 3 or array.shape[0] != array.shape[1]:
        raise ParseError(str(source), "array", f"expected a square (S, S) or (S, S, C) image, got {array.shape}")
    return array.astype(np.float32)


def load_images(path: PathLike) -> List[Scene]:
    """Scenes from a dataset directory, a directory of .npy images or a single .npy file."""
    path = Path(path)
    if (path / LABELS_FILE).exists():
        return load_dataset(path).scenes
    if path.is_dir():
        folder = path / IMAGES_DIR if (path / IMAGES_DIR).is_dir() else path
        files = sorted(folder.glob("*.npy"))
    elif path.suffix == ".npy":
        files = [path]
    else:
        raise ParseError(str(path), "file", "expected a dataset directory, an image directory or a .npy image")
    scenes = []
    for f in files:
        try:
            image = _as_image(np.load(f), f)
        except (OSError, ValueError) as e:
            raise ParseError(str(f), "file", str(e)) from None
        scenes.append(Scene(scene_id=f.stem, image_size=image.shape[0], junctions=[], slots=[], image=image))
    return scenes


def run_detect(checkpoint: PathLike, images: PathLike, out: PathLike, overrides: Iterable[str] = (),
               quiet: bool = False) -> List[Path]:
    settings, network = load_network(load_checkpoint(checkpoint), overrides)
    scenes = load_images(images)
    params = settings.detect.params(settings.grid, settings.scene)
    status("detect", f"{fmt_value(len(scenes))} images from", fmt_path(images), quiet=quiet)
    results = detect_scenes(network, scenes, settings.grid, params, settings.detect.batch_size)
    found = sum(len(r.slots) for r in results)
    path = write_detections(results, settings.grid, params, out)
    status("detect", f"{fmt_value(found)} slots written to", fmt_path(path), quiet=quiet)
    return [path]


def _labels_file(path: Path) -> Path:
    return path / LABELS_FILE if path.is_dir() else path


def _geometry(network: Network, settings: Settings, scenes: List[Scene]) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    report, exported = {}, {}
    for task in TASKS:
        z, labels = task_embeddings(network, scenes, settings.grid, task, settings.detect.batch_size)
        protos, _ = network.prototypes(task)
        geo = geometry_metrics(z, labels, protos, CLASS_NAMES[task])
        report[task] = {
            "prototype_cosine": geo.prototype_cosine,
            "alignment": geo.alignment,
            "variance": geo.variance,
            "missing": list(geo.missing),
        }
        if geo.missing:
            warn(f"{task} task: no embeddings for class(es) {', '.join(geo.missing)}")
        if task == "sh":
            exported = {"z": z, "labels": labels, "prototypes": protos.astype(np.float64),
                        "class_names": np.array(CLASS_NAMES[task])}
    return report, exported


def run_eval(detections: PathLike,
             labels: PathLike,
             out_dir: PathLike,
             checkpoint: Optional[PathLike] = None,
             rmse_threshold: Optional[float] = None,
             quiet: bool = False) -> Tuple[List[Path], Dict[str, Any]]:
    """
    Slot precision/recall of a detection file against ground-truth labels. With a checkpoint,
    also the representation geometry of the ground-truth junction cells (labels must then be a
    dataset directory with images).
    """
    labels, out_dir = Path(labels), Path(out_dir)
    pred_set = read_detections(detections)
    gt_set = import_labels(_labels_file(labels))
    if pred_set.grid != gt_set.grid:
        warn(f"detections use grid {pred_set.grid} but labels use {gt_set.grid}")
    threshold = rmse_threshold if rmse_threshold is not None else default_threshold(gt_set.grid.image_size)
    pred = {s.scene_id: s.slots for s in pred_set.scenes}
    gt = {s.scene_id: s.slots for s in gt_set.scenes}
    result = evaluate_slots(pred, gt, threshold)
    pr = precision_recall(result)
    metrics = {
        "precision": pr.precision,
        "recall": pr.recall,
        "degenerate": pr.degenerate,
        "tp": result.tp,
        "fp": result.fp,
        "fn": result.fn,
        "mean_rmse": float(np.mean(result.rmse)) if result.rmse else None,
        "rmse_threshold": threshold,
        "scenes": len(gt),
    }
    if pr.degenerate:
        warn("no predicted or no ground-truth slots; precision/recall reported as 1.0")
    written = [_dump_json(metrics, out_dir / EVAL_METRICS_FILE)]
    status("eval", f"precision {fmt_value(pr.precision)} recall {fmt_value(pr.recall)}",
           f"(TP {result.tp}, FP {result.fp}, FN {result.fn})", quiet=quiet)

    if checkpoint is not None:
        if not labels.is_dir():
            raise ParseError(str(labels), "file", "geometry metrics need a dataset directory with images")
        settings, network = load_network(load_checkpoint(checkpoint))
        scenes = load_dataset(labels).scenes
        report, exported = _geometry(network, settings, scenes)
        written.append(_dump_json(report, out_dir / GEOMETRY_FILE))
        np.savez(out_dir / EMBEDDINGS_FILE, **exported)
        written.append(out_dir / EMBEDDINGS_FILE)
        status("eval", f"shape prototype cosine {fmt_value(report['sh']['prototype_cosine'])},",
               f"alignment {fmt_value(report['sh']['alignment'])}", quiet=quiet)
        metrics["geometry"] = report
    return written, metrics


def load_embeddings(path: PathLike) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        with np.load(path) as data:
            embeddings = {key: data[key] for key in data.files}
    except (OSError, ValueError) as e:
        raise ParseError(str(path), "file", str(e)) from None
    for key in ("z", "labels", "prototypes"):
        if key not in embeddings:
            raise ParseError(str(path), key, "missing array")
    return embeddings


def run_report(metrics: PathLike, embeddings: Optional[PathLike], out_dir: PathLike,
               quiet: bool = False) -> List[Path]:
    try:
        history = read_history(metrics)
    except OSError as e:
        raise ParseError(str(metrics), "file", e.strerror or str(e)) from None
    written, points = emit_report(history, load_embeddings(embeddings) if embeddings else None, out_dir)
    status("report", f"{fmt_value(len(history))} epochs, {fmt_value(points)} plotted points", quiet=quiet)
    return written

