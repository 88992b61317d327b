"""
Training objectives with analytic gradients.

The contrastive terms share one column layout: every anchor is compared against the batch
embeddings, one prototype per class and the memory-bank entries of each class. Class k owns
n_k = |batch_k| + |bank_k| samples plus its prototype, so each column of class k carries the
weight 1 / (n_k + 1) inside the class-averaged denominator.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from slotcon.errors import ConfigError, DimensionError
from slotcon.netcore import log_sum_exp, softmax

TERM_NAMES = ("cl_sh", "cl_id", "a_id", "lc_sh", "lc_id", "reg")
REDUCTIONS = ("sum", "mean")
Q_SOURCES = ("dataset", "batch")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    lambda_cl_sh: float = 1.0
    lambda_cl_id: float = 1.0
    lambda_a_id: float = 10.0
    lambda_lc_sh: float = 1.0
    lambda_lc_id: float = 100.0
    lambda_reg: float = 1.0
    q_source: str = "dataset"
    cl_reduction: str = "sum"
    q_id: Optional[Tuple[float, ...]] = None
    q_sh: Optional[Tuple[float, ...]] = None

    def validate(self):
        if not self.tau > 0:
            raise ConfigError("loss.tau", f"must be positive, got {self.tau}")
        for name in TERM_NAMES:
            if getattr(self, f"lambda_{name}") < 0:
                raise ConfigError(f"loss.lambda_{name}", "must be non-negative")
        if self.q_source not in Q_SOURCES:
            raise ConfigError("loss.q_source", f"must be one of {', '.join(Q_SOURCES)}")
        if self.cl_reduction not in REDUCTIONS:
            raise ConfigError("loss.cl_reduction", f"must be one of {', '.join(REDUCTIONS)}")
        for key in ("q_id", "q_sh"):
            q = getattr(self, key)
            if q is not None:
                check_frequencies(q, f"loss.{key}")

    @property
    def lambdas(self) -> Dict[str, float]:
        return {name: getattr(self, f"lambda_{name}") for name in TERM_NAMES}


@dataclass
class BatchSets:
    """
    Per-task contrastive batch: embeddings with class indices, one prototype per class and a
    gradient-free bank snapshot per class.
    """
    embeddings: np.ndarray  # (N, P)
    labels: np.ndarray  # (N,) class index
    prototypes: np.ndarray  # (K, P)
    bank: Tuple[np.ndarray, ...] = ()  # K arrays of shape (m_k, P)

    def __post_init__(self):
        K, P = self.prototypes.shape
        self.embeddings = np.asarray(self.embeddings).reshape(-1, P)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.embeddings):
            raise DimensionError(f"{len(self.labels)} labels for embeddings of shape {self.embeddings.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= K):
            raise DimensionError(f"class labels outside [0, {K})")
        if not self.bank:
            self.bank = tuple(np.zeros((0, P), dtype=self.prototypes.dtype) for _ in range(K))
        if len(self.bank) != K:
            raise DimensionError(f"{len(self.bank)} bank entries for {K} classes")
        self.bank = tuple(np.asarray(b).reshape(-1, P) for b in self.bank)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def class_sizes(self) -> np.ndarray:
        """n_k = batch members + bank entries of class k."""
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return counts + np.array([len(b) for b in self.bank], dtype=np.int64)

    def columns(self) -> Tuple[np.ndarray, np.ndarray]:
        """All comparable vectors (batch, prototypes, banks) and their class indices."""
        K = self.num_classes
        cols = np.concatenate([self.embeddings, self.prototypes] + list(self.bank), axis=0)
        col_labels = np.concatenate([self.labels, np.arange(K)] +
                                    [np.full(len(b), k, dtype=np.int64) for k, b in enumerate(self.bank)])
        return cols, col_labels


@dataclass
class LossValue:
    value: float
    grads: Dict[str, np.ndarray] = field(default_factory=dict)


def check_frequencies(q: Sequence[float], key: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or len(q) < 2:
        raise ConfigError(key, "needs one frequency per class")
    if np.any(~np.isfinite(q)) or np.any(q <= 0):
        raise ConfigError(key, f"class frequencies must be strictly positive, got {q.tolist()}")
    if abs(q.sum() - 1.0) > 1e-6:
        raise ConfigError(key, f"class frequencies must sum to 1, got {q.sum():.6g}")
    return q


def _empty(sets: BatchSets) -> LossValue:
    return LossValue(0.0, {"embeddings": np.zeros_like(sets.embeddings), "prototypes": np.zeros_like(sets.prototypes)})


def _positives(sets: BatchSets, col_labels: np.ndarray) -> np.ndarray:
    N = len(sets.labels)
    pos = (col_labels[None, :] == sets.labels[:, None]).astype(np.float64)
    pos[np.arange(N), np.arange(N)] = 0.0
    return pos


def _split_column_grads(sets: BatchSets, d_anchor: np.ndarray, d_cols: np.ndarray) -> Dict[str, np.ndarray]:
    N, K = len(sets.labels), sets.num_classes
    return {
        "embeddings": d_anchor + d_cols[:N],
        "prototypes": d_cols[N:N + K],
    }


def balanced_contrastive_loss(sets: BatchSets, tau: float, reduction: str = "sum") -> LossValue:
    """
    Class-averaged supervised contrastive loss with prototypes and bank entries.

    For anchor i of class k, positives are the other class-k batch members, the class-k
    prototype and the class-k bank entries, averaged with 1 / n_k. The anchor stays in its
    own class mean of the denominator. Bank entries receive no gradient.
    """
    if tau <= 0:
        raise ConfigError("loss.tau", f"must be positive, got {tau}")
    N = len(sets.labels)
    if N == 0:
        return _empty(sets)
    cols, col_labels = sets.columns()
    n = sets.class_sizes().astype(np.float64)
    S = (sets.embeddings.astype(np.float64) @ cols.astype(np.float64).T) / tau
    logits = S - np.log(n[col_labels] + 1.0)
    logden, _ = log_sum_exp(logits, axis=1)
    pos = _positives(sets, col_labels)
    npos = pos.sum(axis=1)
    coef = 1.0 / n[sets.labels]
    per_anchor = coef * (npos * logden - np.sum(pos * S, axis=1))
    scale = 1.0 if reduction == "sum" else 1.0 / N

    dS = scale * coef[:, None] * (npos[:, None] * softmax(logits, axis=1) - pos)
    d_dot = dS / tau
    grads = _split_column_grads(sets, d_dot @ cols, d_dot.T @ sets.embeddings)
    return LossValue(float(scale * np.sum(per_anchor)), grads)


def shape_cl_loss(sets: BatchSets, tau: float, reduction: str = "sum") -> LossValue:
    """Shape contrastive term over junction embeddings; the shape task has no banks."""
    if any(len(b) for b in sets.bank):
        raise DimensionError("the shape contrastive term takes no memory-bank entries")
    return balanced_contrastive_loss(sets, tau, reduction)


def id_cl_loss(sets: BatchSets, tau: float, reduction: str = "sum") -> LossValue:
    """Identification contrastive term over all cells, junction and background banks included."""
    return balanced_contrastive_loss(sets, tau, reduction)


def attraction_loss(sets: BatchSets, reduction: str = "sum") -> LossValue:
    """Pulls every positive cosine (batch, prototype, bank) towards 1 with weight 1 / n_k."""
    N = len(sets.labels)
    if N == 0:
        return _empty(sets)
    cols, col_labels = sets.columns()
    n = sets.class_sizes().astype(np.float64)
    dots = sets.embeddings.astype(np.float64) @ cols.astype(np.float64).T
    pos = _positives(sets, col_labels)
    coef = 1.0 / n[sets.labels]
    scale = 1.0 if reduction == "sum" else 1.0 / N
    gap = dots - 1.0
    value = scale * np.sum(coef * np.sum(pos * gap * gap, axis=1))

    d_dot = scale * coef[:, None] * pos * 2.0 * gap
    grads = _split_column_grads(sets, d_dot @ cols, d_dot.T @ sets.embeddings)
    return LossValue(float(value), grads)


def logit_compensation_loss(logits: np.ndarray,
                            labels: np.ndarray,
                            q: Sequence[float],
                            balanced: bool = False,
                            key: str = "loss.q") -> LossValue:
    """
    Cross-entropy at the true class over logits shifted by log class frequency. ``balanced``
    averages per class first instead of over all samples.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    q = check_frequencies(q, key)
    if logits.ndim != 2 or logits.shape[1] != len(q) or len(labels) != len(logits):
        raise DimensionError(f"logits {logits.shape} incompatible with {len(labels)} labels and {len(q)} classes")
    N = len(labels)
    if N == 0:
        return LossValue(0.0, {"logits": np.zeros_like(logits)})
    adjusted = logits + np.log(q)
    logden, _ = log_sum_exp(adjusted, axis=1)
    nll = logden - adjusted[np.arange(N), labels]

    if balanced:
        counts = np.bincount(labels, minlength=len(q)).astype(np.float64)
        present = np.count_nonzero(counts)
        weights = 1.0 / (present * counts[labels])
    else:
        weights = np.full(N, 1.0 / N)

    onehot = np.zeros_like(adjusted)
    onehot[np.arange(N), labels] = 1.0
    dlogits = weights[:, None] * (softmax(adjusted, axis=1) - onehot)
    return LossValue(float(np.sum(weights * nll)), {"logits": dlogits})


def regression_targets(rel: np.ndarray, angle: np.ndarray) -> np.ndarray:
    rel = np.asarray(rel, dtype=np.float64).reshape(-1, 2)
    angle = np.asarray(angle, dtype=np.float64).reshape(-1)
    return np.concatenate([rel, np.cos(angle)[:, None], np.sin(angle)[:, None]], axis=1)


def regression_loss(pred: np.ndarray, rel: np.ndarray, angle: np.ndarray) -> LossValue:
    """Mean over junction cells of the squared error on (x_rel, y_rel, cos, sin)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = regression_targets(rel, angle)
    if pred.shape != target.shape:
        raise DimensionError(f"regression output {pred.shape} does not match targets {target.shape}")
    N = len(pred)
    if N == 0:
        return LossValue(0.0, {"pred": np.zeros_like(pred)})
    diff = pred - target
    return LossValue(float(np.sum(diff * diff) / N), {"pred": 2.0 * diff / N})


def total_loss(terms: Dict[str, float], lambdas: Dict[str, float]) -> LossValue:
    """Weighted sum of the six terms; the gradient with respect to each term is its weight."""
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ConfigError("loss", f"unknown loss terms {sorted(unknown)}")
    value = 0.0
    for name in TERM_NAMES:
        weight = lambdas.get(name, 0.0)
        term = terms.get(name, 0.0)
        if weight != 0.0:
            value += weight * term
    return LossValue(value, {name: np.float64(lambdas.get(name, 0.0)) for name in TERM_NAMES})
