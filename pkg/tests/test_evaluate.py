import math

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from slotcon.errors import DomainError
from slotcon.evaluate import (HISTORY_COLUMNS, MatchResult, default_threshold, emit_report, evaluate_slots,
                              geometry_metrics, match_slots, precision_recall, principal_circle, read_history,
                              slot_rmse, task_embeddings, write_history)
from slotcon.geometry import GridSpec, Junction, Shape, entrance_and_sides
from slotcon.model import Network
from slotcon.synthdata import cell_targets, generate_dataset


def slot(x, y, width=40.0, dx=0.0, dy=0.0):
    a = Junction(x + dx, y + dy, math.pi / 2, Shape.T)
    b = Junction(x + width + dx, y + dy, math.pi / 2, Shape.T)
    return entrance_and_sides(a, b, 60.0)


class TestMatching:
    def test_exact(self):
        s = slot(10, 10)
        result = match_slots([s], [s], 10.0)
        assert (result.tp, result.fp, result.fn) == (1, 0, 0)
        assert precision_recall(result)[:2] == (1.0, 1.0)

    def test_swapped_entrance(self):
        s = slot(10, 10)
        swapped = entrance_and_sides(s.entrance[1], s.entrance[0], 60.0)
        assert slot_rmse(swapped, s) == pytest.approx(0.0)

    def test_shift_at_threshold_is_not_a_match(self):
        result = match_slots([slot(10, 10, dx=10.0)], [slot(10, 10)], 10.0)
        assert (result.tp, result.fp, result.fn) == (0, 1, 1)
        assert match_slots([slot(10, 10, dx=9.9)], [slot(10, 10)], 10.0).tp == 1

    def test_nine_of_ten(self):
        gt = [slot(10 + 50 * k, 10) for k in range(10)]
        pred = gt[:9] + [slot(300, 300)]
        pr = precision_recall(match_slots(pred, gt, 10.0))
        assert pr.precision == pytest.approx(0.9)
        assert pr.recall == pytest.approx(0.9)
        assert not pr.degenerate

    def test_one_to_one(self):
        gt = [slot(10, 10)]
        result = match_slots([slot(10, 10, dx=2.0), slot(10, 10, dx=1.0)], gt, 10.0)
        assert (result.tp, result.fp, result.fn) == (1, 1, 0)
        assert result.pairs == [(1, 0)]

    def test_degenerate(self):
        pr = precision_recall(match_slots([], [], 10.0))
        assert pr == (1.0, 1.0, True)
        pr = precision_recall(MatchResult(tp=0, fp=3, fn=0))
        assert pr.precision == 0.0 and pr.recall == 1.0 and pr.degenerate

    def test_bad_threshold(self):
        with pytest.raises(DomainError):
            match_slots([], [], 0.0)

    def test_over_scenes(self):
        gt = {"a": [slot(10, 10)], "b": [slot(10, 10), slot(60, 10)]}
        pred = {"a": [slot(10, 10)], "b": [slot(60, 10)], "c": [slot(0, 0)]}
        result = evaluate_slots(pred, gt, 10.0)
        assert (result.tp, result.fp, result.fn) == (2, 1, 1)
        assert len(result.rmse) == 2

    def test_default_threshold(self):
        assert default_threshold(600) == pytest.approx(10.0)
        assert default_threshold(128) == pytest.approx(10.0 * 128 / 600)


class TestGeometry:
    def test_ideal_two_class_simplex(self):
        u = np.array([0.0, 0.0, 1.0])
        z = np.stack([u, u, -u])
        geo = geometry_metrics(z, [0, 0, 1], np.stack([u, -u]))
        assert geo.prototype_cosine == pytest.approx(-1.0)
        assert geo.alignment == pytest.approx(1.0)
        assert geo.variance == pytest.approx(0.0)
        assert geo.missing == ()

    def test_rotation_invariant(self, rng):
        z = rng.standard_normal((20, 4))
        labels = rng.integers(0, 2, size=20)
        protos = rng.standard_normal((2, 4))
        Q = special_ortho_group.rvs(4, random_state=3)
        a = geometry_metrics(z, labels, protos)
        b = geometry_metrics(z @ Q.T, labels, protos @ Q.T)
        assert b.prototype_cosine == pytest.approx(a.prototype_cosine, abs=1e-12)
        assert b.alignment == pytest.approx(a.alignment, abs=1e-12)
        assert b.variance == pytest.approx(a.variance, abs=1e-12)

    def test_missing_class(self, rng):
        geo = geometry_metrics(rng.standard_normal((3, 2)), [1, 1, 1], rng.standard_normal((2, 2)))
        assert geo.missing == ("L", )
        empty = geometry_metrics(np.zeros((0, 2)), [], np.eye(2))
        assert math.isnan(empty.alignment)
        assert empty.prototype_cosine == pytest.approx(0.0)


class TestReport:
    def test_empty_history(self, tmp_path):
        path = write_history([], tmp_path / "metrics.csv")
        assert path.read_text() == ",".join(HISTORY_COLUMNS) + "\n"

    def test_history_round_trip(self, tmp_path):
        rows = [{"epoch": 1, "total": 0.5, "precision": None}, {"epoch": 2, "total": 1 / 3, "recall": 1.0}]
        back = read_history(write_history(rows, tmp_path / "metrics.csv"))
        assert back[0]["epoch"] == "1"
        assert back[0]["precision"] == ""
        assert float(back[1]["total"]) == pytest.approx(1 / 3, rel=1e-9)
        assert back[1]["recall"] == "1"

    def test_principal_circle(self, rng):
        flat = principal_circle(rng.standard_normal((30, 5)))
        assert flat.shape == (30, 2)
        np.testing.assert_allclose(np.linalg.norm(flat, axis=1), 1.0)

    def test_emit_report_is_reproducible(self, rng, tmp_path):
        embeddings = {"z": rng.standard_normal((12, 4)), "labels": rng.integers(0, 2, size=12),
                      "prototypes": rng.standard_normal((2, 4)), "class_names": np.array(["L", "T"])}
        history = [{"epoch": 1, "total": 2.0}]
        written_a, points = emit_report(history, embeddings, tmp_path / "a")
        written_b, _ = emit_report(history, embeddings, tmp_path / "b")
        assert points == 14
        assert [p.name for p in written_a] == ["metrics.csv", "embeddings.svg"]
        for a, b in zip(written_a, written_b):
            assert a.read_bytes() == b.read_bytes()
        assert b"<svg" in written_a[1].read_bytes()

    def test_report_without_embeddings(self, tmp_path):
        written, points = emit_report([], None, tmp_path)
        assert [p.name for p in written] == ["metrics.csv"]
        assert points == 0


def test_task_embeddings(small_model, small_scene):
    grid = GridSpec(64, 4)
    scenes = generate_dataset(small_scene, 3, seed=2, grid=grid).scenes
    network = Network(small_model, seed=0, dtype=np.float64)
    z_id, y_id = task_embeddings(network, scenes, grid, "id", batch_size=2)
    z_sh, y_sh = task_embeddings(network, scenes, grid, "sh", batch_size=2)
    junctions = sum(len(cell_targets(s, grid).junction_cells) for s in scenes)
    assert z_id.shape == (3 * grid.num_cells, 4)
    assert sorted(set(y_id.tolist())) == [0, 1]
    assert int(np.sum(y_id == 0)) == junctions
    assert z_sh.shape == (junctions, 4)
    assert set(y_sh.tolist()) <= {0, 1}
