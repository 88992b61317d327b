"""
Central finite-difference checks of every layer, every loss term and the composed training
loss, each at a number of random double-precision configurations.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from slotcon.geometry import GridSpec
from slotcon.losses import (BatchSets, LossConfig, attraction_loss, balanced_contrastive_loss, logit_compensation_loss,
                            regression_loss)
from slotcon.model import ModelConfig, Network
from slotcon.netcore import conv2d, finite_diff_check, l2_normalize, linear, log_sum_exp, relu, sigmoid
from slotcon.sampling import MemoryBank
from slotcon.synthdata import AugmentConfig, CellTargets
from slotcon.trainer import Adam, StepContext, TrainConfig, TrainState, accumulate_gradients

TOLERANCE = 1e-4
EPS = 1e-5

Check = Callable[[np.random.Generator], float]


@dataclass(frozen=True)
class GradCheckRow:
    name: str
    kind: str
    configs: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < TOLERANCE

    def as_dict(self) -> Dict[str, str]:
        return {
            "check": self.name,
            "kind": self.kind,
            "configs": str(self.configs),
            "max_rel_error": f"{self.max_rel_error:.3e}",
            "status": "PASS" if self.passed else "FAIL",
        }


def _projected(fn, arg: int, rng: np.random.Generator):
    """Scalarizes an op with a fixed random projection R: L = sum(op(x) * R)."""
    cache = {}

    def f(x):
        y, back = fn(x)
        if "R" not in cache:
            cache["R"] = rng.standard_normal(y.shape)
        R = cache["R"]
        return float(np.sum(y * R)), back(R)[arg]

    return f


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.sign(x) * (0.05 + np.abs(x))


# ---------------------------------------------------------------------------------------
# layers


def check_linear(rng: np.random.Generator) -> float:
    n, i, o = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 6)
    x, W, b = rng.standard_normal((n, i)), rng.standard_normal((i, o)), rng.standard_normal(o)
    R = rng.standard_normal((n, o))

    def wrt(k):
        def f(v):
            args = [x, W, b]
            args[k] = v
            y, back = linear(*args)
            return float(np.sum(y * R)), back(R)[k]
        return f

    return max(finite_diff_check(wrt(k), a, EPS) for k, a in enumerate((x, W, b)))


def check_conv2d(rng: np.random.Generator) -> float:
    n, c, f = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    size = int(rng.integers(k, 7))
    x = rng.standard_normal((n, size, size, c))
    K = rng.standard_normal((k, k, c, f))
    b = rng.standard_normal(f)
    pad = k // 2
    y0, _ = conv2d(x, K, b, stride, pad)
    R = rng.standard_normal(y0.shape)

    def wrt(idx):
        def fn(v):
            args = [x, K, b]
            args[idx] = v
            y, back = conv2d(*args, stride=stride, pad=pad)
            return float(np.sum(y * R)), back(R)[idx]
        return fn

    return max(finite_diff_check(wrt(i), a, EPS) for i, a in enumerate((x, K, b)))


def check_relu(rng: np.random.Generator) -> float:
    return finite_diff_check(_projected(relu, 0, rng), _away_from_zero(rng, (3, 4)), EPS)


def check_sigmoid(rng: np.random.Generator) -> float:
    return finite_diff_check(_projected(sigmoid, 0, rng), rng.standard_normal((3, 4)) * 3.0, EPS)


def check_l2_normalize(rng: np.random.Generator) -> float:
    x = rng.standard_normal((int(rng.integers(1, 5)), int(rng.integers(2, 6))))
    return finite_diff_check(_projected(l2_normalize, 0, rng), x, EPS)


def check_log_sum_exp(rng: np.random.Generator) -> float:
    x = rng.standard_normal((int(rng.integers(1, 5)), int(rng.integers(2, 6)))) * 2.0
    return finite_diff_check(_projected(lambda v: log_sum_exp(v, axis=1), 0, rng), x, EPS)


# ---------------------------------------------------------------------------------------
# losses


def _unit(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _random_sets(rng: np.random.Generator, with_bank: bool) -> BatchSets:
    K, P = int(rng.integers(2, 4)), int(rng.integers(2, 5))
    N = int(rng.integers(1, 9))
    bank = tuple(_unit(rng, (int(rng.integers(0, 4)), P)) for _ in range(K)) if with_bank else ()
    return BatchSets(_unit(rng, (N, P)), rng.integers(0, K, size=N), _unit(rng, (K, P)), bank)


def _sets_check(loss_fn) -> Check:
    def check(rng: np.random.Generator) -> float:
        sets = _random_sets(rng, with_bank=bool(rng.integers(0, 2)))

        def wrt_embeddings(v):
            out = loss_fn(BatchSets(v, sets.labels, sets.prototypes, sets.bank))
            return out.value, out.grads["embeddings"]

        def wrt_prototypes(v):
            out = loss_fn(BatchSets(sets.embeddings, sets.labels, v, sets.bank))
            return out.value, out.grads["prototypes"]

        return max(finite_diff_check(wrt_embeddings, sets.embeddings, EPS),
                   finite_diff_check(wrt_prototypes, sets.prototypes, EPS))

    return check


def check_logit_compensation(rng: np.random.Generator) -> float:
    K, N = int(rng.integers(2, 5)), int(rng.integers(1, 9))
    q = rng.uniform(0.05, 1.0, size=K)
    q /= q.sum()
    labels = rng.integers(0, K, size=N)
    balanced = bool(rng.integers(0, 2))

    def f(v):
        out = logit_compensation_loss(v, labels, q, balanced)
        return out.value, out.grads["logits"]

    return finite_diff_check(f, rng.standard_normal((N, K)) * 2.0, EPS)


def check_regression(rng: np.random.Generator) -> float:
    N = int(rng.integers(1, 6))
    rel = rng.uniform(0.0, 1.0, size=(N, 2))
    angle = rng.uniform(0.0, 2.0 * np.pi, size=N)

    def f(v):
        out = regression_loss(v, rel, angle)
        return out.value, out.grads["pred"]

    return finite_diff_check(f, rng.standard_normal((N, 4)), EPS)


# ---------------------------------------------------------------------------------------
# composed total


TINY_MODEL = ModelConfig(image_size=8, grid_size=2, channels=(3, 4), strides=(2, 2), proj_hidden=5, proj_out=3,
                         proto_hidden=4, reg_hidden=4)
TINY_GRID = GridSpec(8, 2)


def _tiny_targets(rng: np.random.Generator, images: int) -> CellTargets:
    cells = images * TINY_GRID.num_cells
    identity = np.ones(cells, dtype=np.int64)
    junction = rng.choice(cells, size=max(2, cells // 3), replace=False)
    identity[junction] = 0
    shape = np.full(cells, -1, dtype=np.int64)
    shape[junction] = rng.integers(0, 2, size=len(junction))
    rel = np.where((identity == 0)[:, None], rng.uniform(0.0, 1.0, size=(cells, 2)), 0.0)
    angle = np.where(identity == 0, rng.uniform(0.0, 2.0 * np.pi, size=cells), 0.0)
    return CellTargets(identity=identity, shape=shape, rel=rel, angle=angle)


def check_total(rng: np.random.Generator) -> float:
    """Training-step gradient of a tiny float64 network against the weighted total loss."""
    seed = int(rng.integers(0, 2**31))
    train = TrainConfig(epochs=1, batch_size=2, dtype="float64", pool_views=bool(rng.integers(0, 2)),
                        balanced_id_lc=bool(rng.integers(0, 2)))
    loss = LossConfig(q_source="batch", cl_reduction=str(rng.choice(["sum", "mean"])))
    network = Network(TINY_MODEL, seed=seed, dtype=np.float64)
    banks = [MemoryBank(3, TINY_MODEL.proj_out), MemoryBank(3, TINY_MODEL.proj_out)]
    for bank in banks:
        bank.push(_unit(rng, (int(rng.integers(0, 4)), TINY_MODEL.proj_out)), 0)
    state = TrainState(network=network, optimizer=Adam(network), banks=banks, rng=np.random.default_rng(seed))
    ctx = StepContext(grid=TINY_GRID, train=train, loss=loss, augment=AugmentConfig(), q_id=None, q_sh=None)

    def batch(images: int) -> Tuple[np.ndarray, CellTargets]:
        return rng.uniform(0.0, 1.0, size=(images, 8, 8, 1)), _tiny_targets(rng, images)

    detection = batch(2)
    contrastive = [batch(4)] if train.pool_views else [batch(2), batch(2)]

    worst = 0.0
    for name, param in network:
        original = param.value.copy()
        picks = rng.choice(original.size, size=min(2, original.size), replace=False)

        def f(v, param=param):
            param.value = v
            _, total, _ = accumulate_gradients(state, detection, contrastive, ctx)
            return total, param.grad.copy()

        worst = max(worst, finite_diff_check(f, original, EPS, indices=[int(i) for i in picks]))
        param.value = original
    return worst


CHECKS: List[Tuple[str, str, Check]] = [
    ("linear", "layer", check_linear),
    ("conv2d", "layer", check_conv2d),
    ("relu", "layer", check_relu),
    ("sigmoid", "layer", check_sigmoid),
    ("l2_normalize", "layer", check_l2_normalize),
    ("log_sum_exp", "layer", check_log_sum_exp),
    ("balanced_contrastive", "loss", _sets_check(lambda s: balanced_contrastive_loss(s, 0.1, "sum"))),
    ("balanced_contrastive_mean", "loss", _sets_check(lambda s: balanced_contrastive_loss(s, 0.5, "mean"))),
    ("attraction", "loss", _sets_check(lambda s: attraction_loss(s, "sum"))),
    ("logit_compensation", "loss", check_logit_compensation),
    ("regression", "loss", check_regression),
    ("total", "total", check_total),
]


def run_gradchecks(seed: int = 0, configs: int = 20) -> List[GradCheckRow]:
    rows = []
    for index, (name, kind, check) in enumerate(CHECKS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        worst = max(check(rng) for _ in range(configs))
        rows.append(GradCheckRow(name=name, kind=kind, configs=configs, max_rel_error=worst))
    return rows
