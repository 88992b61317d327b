from collections import deque

import numpy as np
import pytest

from slotcon.errors import DimensionError, DomainError
from slotcon.sampling import (MemoryBank, bank_contents, bank_push, hard_negative_count, prediction_error,
                              select_hard_negatives, select_random_negatives)


@pytest.mark.parametrize("count,expected", [(100, 2), (50, 1), (49, 1), (51, 2), (1, 1), (0, 0)])
def test_hard_negative_count(count, expected):
    assert hard_negative_count(count, 0.02) == expected


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
def test_bad_fraction(fraction):
    with pytest.raises(DomainError):
        hard_negative_count(10, fraction)


def test_top_scores_match_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 400))
        # coarse rounding produces ties
        scores = np.round(rng.uniform(size=n), 1)
        report = select_hard_negatives(scores, 0.02)
        oracle = sorted(range(n), key=lambda i: (-scores[i], i))[:hard_negative_count(n, 0.02)]
        assert report.selected.tolist() == oracle
        assert report.background_count == n
        np.testing.assert_array_equal(report.scores, scores[oracle])


def test_prediction_error():
    probs = np.array([[0.8, 0.2], [0.1, 0.9], [0.3, 0.7]])
    np.testing.assert_allclose(prediction_error(probs, [1, 1, 0]), [0.8, 0.1, 0.7])
    with pytest.raises(DimensionError):
        prediction_error(probs, [1, 1])


def test_random_negatives(rng):
    report = select_random_negatives(300, 0.02, rng)
    assert len(report) == 6
    assert len(set(report.selected.tolist())) == 6
    assert report.selected.min() >= 0 and report.selected.max() < 300
    assert len(select_random_negatives(0, 0.02, rng)) == 0


def test_bank_fifo():
    a, b, c, d = np.eye(4)
    bank = MemoryBank(3)
    for step, v in enumerate((a, b, c, d)):
        bank.push(v, step)
    np.testing.assert_array_equal(bank.contents(), np.stack([b, c, d]))
    np.testing.assert_array_equal(bank.steps(), [1, 2, 3])


def test_bank_matches_queue_oracle():
    rng = np.random.default_rng(4)
    bank = MemoryBank(256, 4)
    oracle = deque(maxlen=256)
    for step in range(40):
        batch = rng.standard_normal((int(rng.integers(0, 20)), 4))
        bank.push(batch, step)
        oracle.extend(batch)
        assert len(bank) == len(oracle) <= 256
    np.testing.assert_array_equal(bank.contents(), np.stack(oracle))


def test_bank_snapshot_is_frozen():
    bank = MemoryBank(2, 2).push(np.ones((1, 2)))
    snapshot = bank.contents()
    with pytest.raises(ValueError):
        snapshot[0, 0] = 5.0
    bank.push(np.zeros((2, 2)))
    np.testing.assert_array_equal(snapshot, np.ones((1, 2)))


def test_bank_dimension():
    bank = MemoryBank(4, 3)
    with pytest.raises(DimensionError):
        bank.push(np.ones((1, 2)))
    assert bank.contents().shape == (0, 3)


def test_zero_capacity():
    bank = MemoryBank(0, 2).push(np.ones((5, 2)))
    assert len(bank) == 0


def test_restore():
    bank = MemoryBank(3, 2)
    bank.restore(np.arange(6.0).reshape(3, 2), np.array([4, 5, 6]))
    np.testing.assert_array_equal(bank.steps(), [4, 5, 6])
    bank_push(bank, np.array([9.0, 9.0]), 7)
    np.testing.assert_array_equal(bank_contents(bank), [[2.0, 3.0], [4.0, 5.0], [9.0, 9.0]])
