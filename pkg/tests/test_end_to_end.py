"""
Desk-scale runs: a 200/50 scene dataset trained with configs/desk.yml. Each takes minutes on a
4-core CPU; run with `pytest --runslow`.
"""
from pathlib import Path

import numpy as np
import pytest

from slotcon.config import load_settings
from slotcon.runs import run_detect, run_eval, run_synth, run_train

DESK = Path(__file__).parents[1] / "configs" / "desk.yml"


def desk_run(root: Path, seed: int = 0, overrides=()):
    settings = load_settings(DESK, [f"train.seed={seed}", *overrides])
    data = root / "data"
    if not (data / "train" / "labels.json").exists():
        run_synth(settings, data, 0, workers=settings.train.workers, quiet=True)
    run_dir = root / f"run-{seed}-{len(overrides)}"
    if not (run_dir / "checkpoint.ckpt").exists():
        run_train(settings, data, run_dir, quiet=True)
    return data, run_dir


def detect_and_eval(data: Path, run_dir: Path, geometry: bool = False):
    detections = run_dir / "detections.json"
    run_detect(run_dir / "checkpoint.ckpt", data / "test", detections, quiet=True)
    _, metrics = run_eval(detections, data / "test", run_dir / "eval",
                          checkpoint=run_dir / "checkpoint.ckpt" if geometry else None, quiet=True)
    return metrics


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return desk_run(tmp_path_factory.mktemp("desk"))


@pytest.mark.slow
def test_slots_found(desk):
    metrics = detect_and_eval(*desk, geometry=True)
    assert metrics["precision"] >= 0.9
    assert metrics["recall"] >= 0.9
    shapes = metrics["geometry"]["sh"]
    assert shapes["prototype_cosine"] <= -0.5
    assert shapes["alignment"] >= 0.8


@pytest.mark.slow
def test_metrics_reproducible(desk, tmp_path):
    data, run_dir = desk
    settings = load_settings(DESK, ["train.seed=0"])
    again = tmp_path / "again"
    run_train(settings, data, again, quiet=True)
    assert (again / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()


@pytest.mark.slow
def test_contrastive_terms_help_recall(desk):
    data, _ = desk
    root = data.parent
    full, ablated = [], []
    for seed in (0, 1, 2):
        _, run_dir = desk_run(root, seed)
        full.append(detect_and_eval(data, run_dir)["recall"])
        _, run_dir = desk_run(root, seed, ["train.use_cl=false"])
        ablated.append(detect_and_eval(data, run_dir)["recall"])
    assert np.mean(full) >= np.mean(ablated)
