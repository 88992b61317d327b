"""
Training loop: three augmented views per scene, the detection branch on the first view, the
contrastive branch on the other two, Adam updates and memory-bank maintenance.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from slotcon.checkpoint import Checkpoint, save_checkpoint
from slotcon.detect import detect_scenes
from slotcon.errors import ConfigError, DomainError, NumericError
from slotcon.evaluate import (default_threshold, evaluate_slots, geometry_metrics, task_embeddings,
                              precision_recall, write_history)
from slotcon.geometry import ID_CLASSES, SHAPE_CLASSES, GridSpec
from slotcon.losses import (TERM_NAMES, BatchSets, LossConfig, attraction_loss, id_cl_loss, logit_compensation_loss,
                            regression_loss, shape_cl_loss, total_loss)
from slotcon.model import ForwardPass, Network
from slotcon.netcore import softmax
from slotcon.sampling import MemoryBank, prediction_error, select_hard_negatives, select_random_negatives
from slotcon.synthdata import AugmentConfig, CellTargets, Dataset, Scene, cell_targets, compute_stats, make_views
from slotcon.utils import fmt_value, status

if TYPE_CHECKING:
    from slotcon.config import Settings

J, B = 0, 1
CHECKPOINT_FILE = "checkpoint.ckpt"
METRICS_FILE = "metrics.csv"
MINE_FROM = ("cl", "detection")
DTYPES = ("float32", "float64")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_epochs: Tuple[int, ...] = (40, 50)
    decay_factor: float = 0.1
    seed: int = 0
    eval_every: int = 10
    checkpoint_every: int = 0
    bank_capacity: int = 256
    hard_negative_fraction: float = 0.02
    workers: int = 1
    dtype: str = "float32"
    use_cl: bool = True
    use_hard_negatives: bool = True
    use_attraction: bool = True
    pool_views: bool = True
    mine_from: str = "cl"
    stop_prototype_grad: bool = False
    balanced_id_lc: bool = False

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs", "must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be positive")
        if not self.lr > 0:
            raise ConfigError("train.lr", "must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("train.beta1", "betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("train.eps", "must be positive")
        decay = list(self.decay_epochs)
        if any(b <= a for a, b in zip(decay, decay[1:])):
            raise ConfigError("train.decay_epochs", "must be strictly increasing")
        if self.epochs > 0 and any(e >= self.epochs or e < 0 for e in decay):
            raise ConfigError("train.decay_epochs", f"must lie in [0, epochs={self.epochs})")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError("train.decay_factor", "must lie in (0, 1]")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("train.eval_every", "schedules must be non-negative")
        if self.bank_capacity < 0:
            raise ConfigError("train.bank_capacity", "must be non-negative")
        if not 0.0 < self.hard_negative_fraction <= 1.0:
            raise ConfigError("train.hard_negative_fraction", "must lie in (0, 1]")
        if self.workers < 1:
            raise ConfigError("train.workers", "must be positive")
        if self.dtype not in DTYPES:
            raise ConfigError("train.dtype", f"must be one of {', '.join(DTYPES)}")
        if self.mine_from not in MINE_FROM:
            raise ConfigError("train.mine_from", f"must be one of {', '.join(MINE_FROM)}")

    def lr_at(self, epoch: int) -> float:
        """Base rate times the decay factor once per decay epoch already reached (0-based epochs)."""
        return self.lr * self.decay_factor**sum(1 for d in self.decay_epochs if epoch >= d)


class Adam:
    def __init__(self, network: Network, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.network = network
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in network}
        self.v = {name: np.zeros_like(p.value) for name, p in network}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name, p in self.network:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype, copy=False)


@dataclass
class TrainState:
    network: Network
    optimizer: Adam
    banks: List[MemoryBank]  # junction bank, background bank
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    def to_checkpoint(self, config: Dict[str, Any], seed: int) -> Checkpoint:
        return Checkpoint(
            config=config,
            params={name: p.value.copy() for name, p in self.network},
            epoch=self.epoch,
            step=self.step,
            seed=seed,
            adam_t=self.optimizer.t,
            moments={name: (self.optimizer.m[name].copy(), self.optimizer.v[name].copy())
                     for name, _ in self.network},
            banks=[(bank.contents(), bank.steps()) for bank in self.banks],
            rng_state=self.rng.bit_generator.state,
            class_frequencies={task: q.tolist() for task, q in self.network.class_frequencies.items()},
        )

    def restore(self, ckpt: Checkpoint):
        for name, p in self.network:
            if name not in ckpt.params:
                raise DomainError(f"checkpoint has no parameter '{name}'")
            if ckpt.params[name].shape != p.value.shape:
                raise DomainError(f"checkpoint parameter '{name}' has shape {ckpt.params[name].shape}, "
                                  f"model expects {p.value.shape}")
            p.value = ckpt.params[name].astype(p.value.dtype)
            p.grad = np.zeros_like(p.value)
            if name in ckpt.moments:
                m, v = ckpt.moments[name]
                self.optimizer.m[name] = m.astype(p.value.dtype)
                self.optimizer.v[name] = v.astype(p.value.dtype)
        self.optimizer.t = ckpt.adam_t
        for bank, (embeddings, steps) in zip(self.banks, ckpt.banks):
            bank.restore(embeddings, steps)
        for task, q in ckpt.class_frequencies.items():
            self.network.set_class_frequencies(task, q)
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        self.epoch, self.step = ckpt.epoch, ckpt.step


@dataclass
class StepContext:
    """Everything a step needs besides the mutable state."""
    grid: GridSpec
    train: TrainConfig
    loss: LossConfig
    augment: AugmentConfig
    q_id: Optional[np.ndarray]
    q_sh: Optional[np.ndarray]

    @property
    def lambdas(self) -> Dict[str, float]:
        lambdas = dict(self.loss.lambdas)
        if not self.train.use_cl:
            lambdas.update(cl_sh=0.0, cl_id=0.0, a_id=0.0)
        if not self.train.use_attraction:
            lambdas["a_id"] = 0.0
        return lambdas


@dataclass
class StepRecord:
    terms: Dict[str, float]
    total: float
    hard_negatives: int = 0
    junctions: int = 0


def new_state(settings: "Settings") -> TrainState:
    cfg = settings.train
    network = Network(settings.model, seed=cfg.seed, dtype=np.dtype(cfg.dtype),
                      stop_prototype_grad=cfg.stop_prototype_grad)
    optimizer = Adam(network, cfg.beta1, cfg.beta2, cfg.eps)
    dim = settings.model.proj_out
    banks = [MemoryBank(cfg.bank_capacity, dim), MemoryBank(cfg.bank_capacity, dim)]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    return TrainState(network=network, optimizer=optimizer, banks=banks, rng=rng)


def class_frequencies(settings: "Settings", dataset: Dataset) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Global training-set frequencies, overridden per task by explicit loss.q_id / loss.q_sh."""
    if settings.loss.q_source != "dataset":
        return None, None
    q_id, q_sh = compute_stats(dataset, dataset.grid).frequencies()
    q_id = settings.loss.q_id or q_id
    q_sh = settings.loss.q_sh or q_sh
    for key, q in (("loss.q_id", q_id), ("loss.q_sh", q_sh)):
        if len(q) == 0 or min(q) <= 0:
            raise ConfigError(key, f"training set class frequencies {list(q)} contain an empty class; "
                              "set the frequencies explicitly or use loss.q_source: batch")
    return np.asarray(q_id, dtype=np.float64), np.asarray(q_sh, dtype=np.float64)


def inference_frequencies(dataset: Dataset, q_id: Optional[np.ndarray],
                          q_sh: Optional[np.ndarray]) -> Dict[str, np.ndarray]:
    """Frequencies the trained network compensates with at inference; tasks with an empty class are left out."""
    stats_id, stats_sh = compute_stats(dataset, dataset.grid).frequencies()
    out = {}
    for task, q in (("id", q_id if q_id is not None else stats_id), ("sh", q_sh if q_sh is not None else stats_sh)):
        q = np.asarray(q, dtype=np.float64)
        if len(q) and np.all(q > 0):
            out[task] = q
    return out


def batch_frequencies(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-minibatch frequencies with add-one smoothing, so absent classes stay representable."""
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64) + 1.0
    return counts / counts.sum()


def view_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def build_views(scenes: Sequence[Tuple[int, Scene]], ctx: StepContext, epoch: int) -> List[Tuple[Scene, ...]]:
    def one(item):
        index, scene = item
        return make_views(scene, view_seed(ctx.train.seed, epoch, index), ctx.augment, ctx.grid.cell_size)

    if ctx.train.workers > 1:
        with ThreadPoolExecutor(max_workers=ctx.train.workers) as pool:
            return list(pool.map(one, scenes))
    return [one(item) for item in scenes]


def concat_targets(targets: Sequence[CellTargets]) -> CellTargets:
    return CellTargets(
        identity=np.concatenate([t.identity for t in targets]),
        shape=np.concatenate([t.shape for t in targets]),
        rel=np.concatenate([t.rel for t in targets]),
        angle=np.concatenate([t.angle for t in targets]),
    )


def stack_views(views: Sequence[Scene], grid: GridSpec) -> Tuple[np.ndarray, CellTargets]:
    return np.stack([v.image for v in views]), concat_targets([cell_targets(v, grid) for v in views])


def _check(name: str, value: float, step: int):
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss term '{name}' ({value}) at step {step}")


def _detection_branch(network: Network, images: np.ndarray, t: CellTargets, ctx: StepContext,
                      lambdas: Dict[str, float], terms: Dict[str, float], step: int) -> ForwardPass:
    fp = network.forward(images)
    junction = t.identity == J
    q_id = ctx.q_id if ctx.q_id is not None else batch_frequencies(t.identity, len(ID_CLASSES))
    q_sh = ctx.q_sh if ctx.q_sh is not None else batch_frequencies(t.shape[junction], len(SHAPE_CLASSES))

    lc_id = logit_compensation_loss(fp.logits["id"], t.identity, q_id, ctx.train.balanced_id_lc, "loss.q_id")
    lc_sh = logit_compensation_loss(fp.logits["sh"][junction], t.shape[junction], q_sh, key="loss.q_sh")
    reg = regression_loss(fp.reg[junction], t.rel[junction], t.angle[junction])
    for name, term in (("lc_id", lc_id), ("lc_sh", lc_sh), ("reg", reg)):
        _check(name, term.value, step)
        terms[name] = term.value

    grad_sh = np.zeros(fp.logits["sh"].shape)
    grad_sh[junction] = lambdas["lc_sh"] * lc_sh.grads["logits"]
    grad_reg = np.zeros(fp.reg.shape)
    grad_reg[junction] = lambdas["reg"] * reg.grads["pred"]
    fp.backward(grad_logits={"id": lambdas["lc_id"] * lc_id.grads["logits"], "sh": grad_sh}, grad_reg=grad_reg)
    return fp


def _contrastive_branch(state: TrainState, groups: Sequence[Tuple[np.ndarray, CellTargets]], ctx: StepContext,
                        lambdas: Dict[str, float], terms: Dict[str, float], step: int) -> List[ForwardPass]:
    """Each group is one forward pass; prototype gradients are summed over groups."""
    network = state.network
    reduction, tau = ctx.loss.cl_reduction, ctx.loss.tau
    protos_id, proto_back_id = network.prototypes("id")
    protos_sh, proto_back_sh = network.prototypes("sh")
    bank = tuple(b.contents(np.float64) for b in state.banks)

    d_protos_id = np.zeros(protos_id.shape)
    d_protos_sh = np.zeros(protos_sh.shape)
    for name in ("cl_sh", "cl_id", "a_id"):
        terms[name] = 0.0
    passes = []
    for images, t in groups:
        fp = network.forward(images)
        junction = t.identity == J

        sets_id = BatchSets(fp.z["id"].astype(np.float64), t.identity, protos_id.astype(np.float64), bank)
        sets_sh = BatchSets(fp.z["sh"][junction].astype(np.float64), t.shape[junction], protos_sh.astype(np.float64))
        cl_id = id_cl_loss(sets_id, tau, reduction)
        cl_sh = shape_cl_loss(sets_sh, tau, reduction)
        a_id = attraction_loss(sets_id, reduction) if lambdas["a_id"] > 0 else None
        for name, term in (("cl_id", cl_id), ("cl_sh", cl_sh), ("a_id", a_id)):
            if term is not None:
                _check(name, term.value, step)
                terms[name] += term.value

        grad_id = lambdas["cl_id"] * cl_id.grads["embeddings"]
        d_protos_id += lambdas["cl_id"] * cl_id.grads["prototypes"]
        if a_id is not None:
            grad_id = grad_id + lambdas["a_id"] * a_id.grads["embeddings"]
            d_protos_id += lambdas["a_id"] * a_id.grads["prototypes"]
        grad_sh = np.zeros(fp.z["sh"].shape)
        grad_sh[junction] = lambdas["cl_sh"] * cl_sh.grads["embeddings"]
        d_protos_sh += lambdas["cl_sh"] * cl_sh.grads["prototypes"]
        fp.backward(grad_z={"id": grad_id, "sh": grad_sh})
        passes.append(fp)

    proto_back_id(d_protos_id.astype(network.dtype))
    proto_back_sh(d_protos_sh.astype(network.dtype))
    return passes


def accumulate_gradients(state: TrainState, detection: Tuple[np.ndarray, CellTargets],
                         contrastive: Sequence[Tuple[np.ndarray, CellTargets]],
                         ctx: StepContext) -> Tuple[Dict[str, float], float, List[ForwardPass]]:
    """
    Zeroes the gradients, then accumulates those of the weighted total loss. Returns the
    unweighted terms, the total and the forward passes (detection first).
    """
    lambdas = ctx.lambdas
    state.network.zero_grad()
    terms = {name: 0.0 for name in TERM_NAMES}
    passes = [_detection_branch(state.network, *detection, ctx, lambdas, terms, state.step)]
    if ctx.train.use_cl and contrastive:
        passes.extend(_contrastive_branch(state, contrastive, ctx, lambdas, terms, state.step))
    total = total_loss(terms, lambdas).value
    _check("total", total, state.step)
    return terms, total, passes


def _mine(state: TrainState, fps: Sequence[ForwardPass], targets: Sequence[CellTargets], ctx: StepContext) -> int:
    """Pushes junction embeddings and the selected background embeddings into the banks."""
    z = np.concatenate([fp.z["id"] for fp in fps]).astype(np.float64)
    logits = np.concatenate([fp.logits["id"] for fp in fps]).astype(np.float64)
    identity = np.concatenate([t.identity for t in targets])
    background = np.flatnonzero(identity == B)
    if ctx.train.use_hard_negatives:
        q_id = ctx.q_id if ctx.q_id is not None else batch_frequencies(identity, len(ID_CLASSES))
        probs = softmax(logits + np.log(q_id), axis=1)
        scores = prediction_error(probs[background], identity[background])
        report = select_hard_negatives(scores, ctx.train.hard_negative_fraction)
    else:
        report = select_random_negatives(len(background), ctx.train.hard_negative_fraction, state.rng)
    state.banks[J].push(z[identity == J], state.step)
    state.banks[B].push(z[background[report.selected]], state.step)
    return len(report)


def train_step(state: TrainState, scenes: Sequence[Tuple[int, Scene]], ctx: StepContext) -> StepRecord:
    """
    One optimizer step on a batch of (dataset index, scene) pairs. Banks are read before and
    written after the update.
    """
    views = build_views(scenes, ctx, state.epoch)
    detection = stack_views([v[0] for v in views], ctx.grid)
    contrastive = []
    if ctx.train.use_cl:
        second, third = [v[1] for v in views], [v[2] for v in views]
        groups = [second + third] if ctx.train.pool_views else [second, third]
        contrastive = [stack_views(g, ctx.grid) for g in groups]

    terms, total, passes = accumulate_gradients(state, detection, contrastive, ctx)
    state.optimizer.step(ctx.train.lr_at(state.epoch))

    mined = 0
    if ctx.train.use_cl:
        if ctx.train.mine_from == "cl":
            mined = _mine(state, passes[1:], [t for _, t in contrastive], ctx)
        else:
            mined = _mine(state, passes[:1], [detection[1]], ctx)
    state.step += 1
    return StepRecord(terms=terms, total=total, hard_negatives=mined, junctions=int(np.sum(detection[1].identity == J)))


def evaluate_state(state: TrainState, settings: "Settings", scenes: Sequence[Scene]) -> Dict[str, float]:
    grid = settings.grid
    params = settings.detect.params(grid, settings.scene)
    results = detect_scenes(state.network, scenes, grid, params, settings.detect.batch_size)
    pred = {r.scene_id: [s.as_slot(params.slot_depth) for s in r.slots] for r in results}
    gt = {s.scene_id: s.slots for s in scenes}
    pr = precision_recall(evaluate_slots(pred, gt, default_threshold(grid.image_size)))
    z, labels = task_embeddings(state.network, scenes, grid, "sh", settings.detect.batch_size)
    protos, _ = state.network.prototypes("sh")
    geo = geometry_metrics(z, labels, protos)
    return {
        "precision": pr.precision,
        "recall": pr.recall,
        "prototype_cosine": geo.prototype_cosine,
        "alignment": geo.alignment,
    }


def train(settings: "Settings",
          dataset: Dataset,
          out_dir: Path,
          eval_scenes: Optional[Sequence[Scene]] = None,
          resume: Optional[Checkpoint] = None,
          history: Optional[List[Dict[str, Any]]] = None,
          quiet: bool = False,
          on_epoch: Optional[Callable[[Dict[str, Any]], None]] = None) -> Tuple[Path, List[Dict[str, Any]]]:
    """
    Runs the configured epochs, appending one history row per epoch (evaluation columns are
    filled every `eval_every` epochs and at the last epoch). Returns the final checkpoint path
    and the history.
    """
    cfg = settings.train
    if not dataset.scenes:
        raise DomainError("cannot train on an empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = new_state(settings)
    history = list(history or [])
    if resume is not None:
        state.restore(resume)
        history = [row for row in history if int(row["epoch"]) <= state.epoch]
    q_id, q_sh = class_frequencies(settings, dataset)
    for task, q in inference_frequencies(dataset, q_id, q_sh).items():
        state.network.set_class_frequencies(task, q)
    ctx = StepContext(grid=settings.grid, train=cfg, loss=settings.loss, augment=settings.augment, q_id=q_id, q_sh=q_sh)
    eval_scenes = list(eval_scenes if eval_scenes is not None else dataset.scenes)
    flat_config = settings.to_flat()

    while state.epoch < cfg.epochs:
        order = state.rng.permutation(len(dataset.scenes))
        sums = {name: 0.0 for name in TERM_NAMES + ("total", )}
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [(int(i), dataset.scenes[i]) for i in order[start:start + cfg.batch_size]]
            record = train_step(state, batch, ctx)
            for name in TERM_NAMES:
                sums[name] += record.terms[name]
            sums["total"] += record.total
            steps += 1
        state.epoch += 1

        row: Dict[str, Any] = {"epoch": state.epoch}
        row.update({name: value / steps for name, value in sums.items()})
        if (cfg.eval_every and state.epoch % cfg.eval_every == 0) or state.epoch == cfg.epochs:
            row.update(evaluate_state(state, settings, eval_scenes))
        history.append(row)
        status("train", f"epoch {fmt_value(state.epoch, 'epoch')}/{cfg.epochs}",
               f"loss {fmt_value(row['total'])}",
               *([f"P {fmt_value(row['precision'])} R {fmt_value(row['recall'])}"] if "precision" in row else []),
               quiet=quiet)
        if on_epoch is not None:
            on_epoch(row)
        if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0 and state.epoch < cfg.epochs:
            save_checkpoint(state.to_checkpoint(flat_config, cfg.seed), out_dir / f"checkpoint-{state.epoch:04d}.ckpt")

    ckpt_path = save_checkpoint(state.to_checkpoint(flat_config, cfg.seed), out_dir / CHECKPOINT_FILE)
    write_history(history, out_dir / METRICS_FILE)
    return ckpt_path, history
