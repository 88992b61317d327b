"""
Hard-negative mining by prediction error, and the FIFO memory banks of junction and
hard-negative background embeddings.
"""
import math
from collections import deque
from dataclasses import dataclass
from typing import Deque, Optional, Tuple

import numpy as np

from slotcon.errors import DimensionError, DomainError


@dataclass(frozen=True)
class HardNegativeReport:
    selected: np.ndarray  # cell indices into the batch's background cells
    scores: np.ndarray
    background_count: int

    def __len__(self) -> int:
        return len(self.selected)


def prediction_error(probabilities: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """
    1 - p(true class) per cell. For background cells this equals the probability of being
    misidentified as a junction.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probabilities.ndim != 2 or len(probabilities) != len(labels):
        raise DimensionError(f"probabilities {probabilities.shape} incompatible with {len(labels)} labels")
    return np.clip(1.0 - probabilities[np.arange(len(labels)), labels], 0.0, 1.0)


def hard_negative_count(background_count: int, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"hard-negative fraction must lie in (0, 1], got {fraction}")
    if background_count <= 0:
        return 0
    return min(background_count, max(1, math.ceil(fraction * background_count - 1e-9)))


def select_hard_negatives(scores: np.ndarray, fraction: float = 0.02) -> HardNegativeReport:
    """Top ceil(fraction * N) scores, ordered by score descending then index ascending."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = hard_negative_count(len(scores), fraction)
    # lexsort keys: last is primary
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    return HardNegativeReport(selected=order.astype(np.int64), scores=scores[order], background_count=len(scores))


def select_random_negatives(count: int, fraction: float, rng: np.random.Generator) -> HardNegativeReport:
    """Same budget as the hard-negative selection, drawn uniformly without replacement."""
    k = hard_negative_count(count, fraction)
    selected = rng.choice(count, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    return HardNegativeReport(selected=np.asarray(selected, dtype=np.int64), scores=np.zeros(k),
                              background_count=count)


class MemoryBank:
    """Fixed-capacity FIFO of (embedding, step) pairs."""

    def __init__(self, capacity: int, dim: Optional[int] = None):
        if capacity < 0:
            raise DomainError(f"memory bank capacity must be non-negative, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._entries: Deque[Tuple[np.ndarray, int]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, embeddings: np.ndarray, step: int = 0) -> "MemoryBank":
        embeddings = np.asarray(embeddings)
        if embeddings.ndim == 1:
            embeddings = embeddings[None]
        if self.dim is None and len(embeddings):
            self.dim = embeddings.shape[1]
        if len(embeddings) and embeddings.shape[1] != self.dim:
            raise DimensionError(f"bank of dimension {self.dim} cannot store embeddings of shape {embeddings.shape}")
        for row in embeddings:
            self._entries.append((np.array(row, copy=True), int(step)))
        return self

    def contents(self, dtype=None) -> np.ndarray:
        """Stored embeddings, oldest first, as an immutable snapshot."""
        if not self._entries:
            out = np.zeros((0, self.dim or 0), dtype=dtype or np.float64)
        else:
            out = np.stack([e for e, _ in self._entries])
            if dtype is not None:
                out = out.astype(dtype)
        out.setflags(write=False)
        return out

    def steps(self) -> np.ndarray:
        return np.array([s for _, s in self._entries], dtype=np.int64)

    def restore(self, embeddings: np.ndarray, steps: np.ndarray):
        self._entries.clear()
        for row, step in zip(embeddings, steps):
            self._entries.append((np.array(row, copy=True), int(step)))
        if len(embeddings):
            self.dim = embeddings.shape[1]


def bank_push(bank: MemoryBank, embeddings: np.ndarray, step: int = 0) -> MemoryBank:
    return bank.push(embeddings, step)


def bank_contents(bank: MemoryBank) -> np.ndarray:
    return bank.contents()
