"""
Shared convolutional encoder producing one local representation per grid cell, two projector
heads into unit-sphere contrastive spaces, linear classifiers, a 1x1 regressor and the
prototype transforms of the classifier weights.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from slotcon.errors import ConfigError, DimensionError, DomainError
from slotcon.geometry import ID_CLASSES, SHAPE_CLASSES
from slotcon.netcore import Param, conv2d, he_normal, l2_normalize, linear, relu, sigmoid

TASKS = ("id", "sh")
NUM_CLASSES = {"id": len(ID_CLASSES), "sh": len(SHAPE_CLASSES)}
# keeps projector outputs off zero for cells whose encoder features are all zero
HEAD_BIAS = 0.01


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    grid_size: int = 8
    in_channels: int = 1
    channels: Tuple[int, ...] = (16, 32, 48, 64)
    strides: Tuple[int, ...] = (2, 2, 2, 2)
    kernel_size: int = 3
    proj_hidden: int = 128
    proj_out: int = 32
    proto_hidden: int = 128
    reg_hidden: int = 64

    def validate(self):
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ConfigError("model.strides", "needs one stride per encoder stage")
        if int(np.prod(self.strides)) * self.grid_size != self.image_size:
            raise ConfigError("model.strides",
                              f"downsampling {int(np.prod(self.strides))} x G={self.grid_size} != {self.image_size}")
        if self.proj_out < 2:
            raise ConfigError("model.proj_out", "must be at least 2")
        if self.kernel_size % 2 != 1:
            raise ConfigError("model.kernel_size", "must be odd")
        for key in ("proj_hidden", "proto_hidden", "reg_hidden", "in_channels"):
            if getattr(self, key) < 1:
                raise ConfigError(f"model.{key}", "must be positive")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for s in self.strides:
            rf += (self.kernel_size - 1) * jump
            jump *= s
        return rf

    @property
    def receptive_radius(self) -> int:
        """Grid cells (Chebyshev) a change inside one image patch can reach."""
        cell = self.image_size // self.grid_size
        return math.ceil(self.receptive_field / cell)


@dataclass
class ForwardPass:
    """Outputs of one batch; cells are flattened as (image, row, col)."""
    features: np.ndarray  # (M, D)
    z: Dict[str, np.ndarray]  # task -> (M, P), unit rows
    logits: Dict[str, np.ndarray]  # task -> (M, K)
    reg: np.ndarray  # (M, 4): x_rel, y_rel, cos, sin
    batch: int
    backward: Callable[..., None] = field(repr=False)


class Network:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, stop_prototype_grad: bool = False):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.stop_prototype_grad = stop_prototype_grad
        self.params: Dict[str, Param] = {}
        self.class_frequencies = {task: np.full(k, 1.0 / k) for task, k in NUM_CLASSES.items()}
        rng = np.random.default_rng(seed)

        k, cin = config.kernel_size, config.in_channels
        for i, cout in enumerate(config.channels):
            self._add(f"encoder.{i}.weight", he_normal(rng, (k, k, cin, cout), k * k * cin, self.dtype))
            self._add(f"encoder.{i}.bias", np.zeros(cout, dtype=self.dtype))
            cin = cout

        D, H, P = config.feature_dim, config.proj_hidden, config.proj_out
        for task in TASKS:
            self._mlp(rng, f"proj_{task}", [D, H, H, P], bias=HEAD_BIAS)
            self._add(f"cls_{task}.weight", (rng.standard_normal((NUM_CLASSES[task], P)) * 0.1).astype(self.dtype))
            self._add(f"cls_{task}.bias", np.zeros(NUM_CLASSES[task], dtype=self.dtype))
            self._mlp(rng, f"proto_{task}", [P, config.proto_hidden, P], bias=HEAD_BIAS)
        self._mlp(rng, "reg", [D, config.reg_hidden, 4])

    def _add(self, name: str, value: np.ndarray):
        self.params[name] = Param(value)

    def _mlp(self, rng: np.random.Generator, prefix: str, sizes: List[int], bias: float = 0.0):
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self._add(f"{prefix}.{i}.weight", he_normal(rng, (fan_in, fan_out), fan_in, self.dtype))
            self._add(f"{prefix}.{i}.bias", np.full(fan_out, bias, dtype=self.dtype))

    def __iter__(self) -> Iterator[Tuple[str, Param]]:
        return iter(self.params.items())

    def set_class_frequencies(self, task: str, q: Sequence[float]):
        """Training-set class frequencies, added as log q to the logits at inference."""
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (NUM_CLASSES[task], ):
            raise DimensionError(f"{task} task has {NUM_CLASSES[task]} classes, got frequencies {q.tolist()}")
        if not np.all(q > 0):
            raise DomainError(f"{task} class frequencies must be positive, got {q.tolist()}")
        self.class_frequencies[task] = q / q.sum()

    def compensated_logits(self, logits: np.ndarray, task: str) -> np.ndarray:
        return logits.astype(np.float64) + np.log(self.class_frequencies[task])

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- building blocks ----------------------------------------------------------------

    def _run_mlp(self, x: np.ndarray, prefix: str, layers: int, final_relu: bool = False):
        backs = []
        for i in range(layers):
            W, b = self.params[f"{prefix}.{i}.weight"], self.params[f"{prefix}.{i}.bias"]
            x, back = linear(x, W.value, b.value)
            backs.append((i, back))
            if i < layers - 1 or final_relu:
                x, r_back = relu(x)
                backs.append((None, r_back))

        def backward(dy: np.ndarray) -> np.ndarray:
            for i, back in reversed(backs):
                if i is None:
                    dy, = back(dy)
                else:
                    dy, dW, db = back(dy)
                    self.params[f"{prefix}.{i}.weight"].accumulate(dW)
                    self.params[f"{prefix}.{i}.bias"].accumulate(db)
            return dy

        return x, backward

    def encode(self, images: np.ndarray):
        """images (N, S, S, C) -> GridFeatures (N, G, G, D) and its backward."""
        cfg = self.config
        if images.ndim == 3:
            images = images[None]
        expected = (cfg.image_size, cfg.image_size, cfg.in_channels)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise DimensionError(f"encoder expects images of shape (N, {expected}), got {images.shape}")
        x = images.astype(self.dtype, copy=False)
        backs = []
        for i, stride in enumerate(cfg.strides):
            x, c_back = conv2d(x, self.params[f"encoder.{i}.weight"].value, self.params[f"encoder.{i}.bias"].value,
                               stride=stride, pad=cfg.kernel_size // 2)
            x, r_back = relu(x)
            backs.append((i, c_back, r_back))

        def backward(df: np.ndarray) -> np.ndarray:
            for i, c_back, r_back in reversed(backs):
                df, = r_back(df)
                df, dK, db = c_back(df)
                self.params[f"encoder.{i}.weight"].accumulate(dK)
                self.params[f"encoder.{i}.bias"].accumulate(db)
            return df

        return x, backward

    def project(self, f: np.ndarray, task: str):
        """(M, D) local features -> (M, P) unit embeddings through a 3-layer perceptron."""
        h, mlp_back = self._run_mlp(f, f"proj_{task}", 3)
        z, n_back = l2_normalize(h)

        def backward(dz: np.ndarray) -> np.ndarray:
            dh, = n_back(dz)
            return mlp_back(dh)

        return z, backward

    def classify(self, z: np.ndarray, task: str):
        W, b = self.params[f"cls_{task}.weight"], self.params[f"cls_{task}.bias"]
        logits, back = linear(z, W.value.T, b.value)

        def backward(dlogits: np.ndarray) -> np.ndarray:
            dz, dWt, db = back(dlogits)
            W.accumulate(dWt.T)
            b.accumulate(db)
            return dz

        return logits, backward

    def regress(self, f: np.ndarray):
        """(M, D) -> (M, 4): sigmoid-squashed cell-relative x, y and raw cos, sin."""
        out, mlp_back = self._run_mlp(f, "reg", 2)
        xy, s_back = sigmoid(out[:, :2])
        pred = np.concatenate([xy, out[:, 2:]], axis=1)

        def backward(dpred: np.ndarray) -> np.ndarray:
            dout = np.empty_like(out)
            dout[:, :2], = s_back(dpred[:, :2])
            dout[:, 2:] = dpred[:, 2:]
            return mlp_back(dout)

        return pred, backward

    def prototypes(self, task: str):
        """One unit prototype per class, transformed from the current classifier weights."""
        W = self.params[f"cls_{task}.weight"]
        h, mlp_back = self._run_mlp(W.value, f"proto_{task}", 2)
        protos, n_back = l2_normalize(h)

        def backward(dprotos: np.ndarray):
            dh, = n_back(dprotos)
            dW = mlp_back(dh)
            if not self.stop_prototype_grad:
                W.accumulate(dW)

        return protos, backward

    # -- whole network ------------------------------------------------------------------

    def forward(self, images: np.ndarray) -> ForwardPass:
        f, enc_back = self.encode(images)
        N, G, _, D = f.shape
        flat = f.reshape(-1, D)
        z, logits, proj_backs, cls_backs = {}, {}, {}, {}
        for task in TASKS:
            z[task], proj_backs[task] = self.project(flat, task)
            logits[task], cls_backs[task] = self.classify(z[task], task)
        reg, reg_back = self.regress(flat)

        def backward(grad_z: Optional[Dict[str, np.ndarray]] = None,
                     grad_logits: Optional[Dict[str, np.ndarray]] = None,
                     grad_reg: Optional[np.ndarray] = None):
            grad_z, grad_logits = grad_z or {}, grad_logits or {}
            dflat = np.zeros_like(flat)
            touched = False
            for task in TASKS:
                dz = None
                if task in grad_logits:
                    dz = cls_backs[task](grad_logits[task].astype(self.dtype, copy=False))
                if task in grad_z:
                    gz = grad_z[task].astype(self.dtype, copy=False)
                    dz = gz if dz is None else dz + gz
                if dz is not None:
                    dflat += proj_backs[task](dz)
                    touched = True
            if grad_reg is not None:
                dflat += reg_back(grad_reg.astype(self.dtype, copy=False))
                touched = True
            if touched:
                enc_back(dflat.reshape(f.shape))

        return ForwardPass(features=flat, z=z, logits=logits, reg=reg, batch=N, backward=backward)
