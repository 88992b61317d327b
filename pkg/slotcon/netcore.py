"""
Dense numpy operations with hand-written reverse-mode gradients.

Every differentiable op returns ``(value, backward)`` where ``backward(grad_out)`` returns the
gradients with respect to the op's inputs, in argument order. Models compose these closures
explicitly; there is no tape.
"""
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from slotcon.errors import DimensionError, NumericError

EPS_NORM = 1e-12

Backward = Callable[[np.ndarray], Tuple[np.ndarray, ...]]


class Param:
    def __init__(self, value: np.ndarray):
        if not np.all(np.isfinite(value)):
            raise NumericError("parameter initialized with non-finite values")
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def accumulate(self, grad: np.ndarray):
        if grad.shape != self.value.shape:
            raise DimensionError(f"gradient of shape {grad.shape} for parameter of shape {self.value.shape}")
        self.grad += grad


def linear(x: np.ndarray, W: np.ndarray, b: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Backward]:
    """y = x @ W + b for x of shape (N, in) and W of shape (in, out)."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[1], ):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    y = x @ W
    if b is not None:
        y = y + b

    def backward(dy: np.ndarray):
        return dy @ W.T, x.T @ dy, dy.sum(axis=0)

    return y, backward


def conv2d(x: np.ndarray,
           K: np.ndarray,
           b: Optional[np.ndarray] = None,
           stride: int = 1,
           pad: int = 0) -> Tuple[np.ndarray, Backward]:
    """
    NHWC convolution. x: (N, H, W, C), K: (kh, kw, C, F) -> (N, Ho, Wo, F).
    """
    if x.ndim != 4 or K.ndim != 4 or x.shape[3] != K.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {K.shape}")
    N, H, W, C = x.shape
    kh, kw, _, F = K.shape
    if b is not None and b.shape != (F, ):
        raise DimensionError(f"conv2d: bias {b.shape} incompatible with kernel {K.shape}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if Hp < kh or Wp < kw:
        raise DimensionError(f"conv2d: padded input {(Hp, Wp)} smaller than kernel {K.shape}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1

    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, kh * kw * C)
    Kmat = K.reshape(kh * kw * C, F)
    y = (cols @ Kmat).reshape(N, Ho, Wo, F)
    if b is not None:
        y = y + b

    def backward(dy: np.ndarray):
        dy2 = dy.reshape(-1, F)
        dK = (cols.T @ dy2).reshape(K.shape)
        db = dy2.sum(axis=0)
        dcols = (dy2 @ Kmat.T).reshape(N, Ho, Wo, kh, kw, C)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += dcols[:, :, :, i, j, :]
        return dxp[:, pad:pad + H, pad:pad + W, :], dK, db

    return y, backward


def relu(x: np.ndarray) -> Tuple[np.ndarray, Backward]:
    mask = x > 0

    def backward(dy: np.ndarray):
        return (dy * mask, )

    return np.where(mask, x, 0.0).astype(x.dtype, copy=False), backward


def sigmoid(x: np.ndarray) -> Tuple[np.ndarray, Backward]:
    y = 0.5 * (1.0 + np.tanh(0.5 * x))

    def backward(dy: np.ndarray):
        return (dy * y * (1.0 - y), )

    return y, backward


def l2_normalize(v: np.ndarray) -> Tuple[np.ndarray, Backward]:
    """
    Row-wise unit normalization along the last axis. Rows with norm <= EPS_NORM are divided by
    EPS_NORM instead, so an all-zero row stays zero and its gradient stays finite.
    """
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    live = norm > EPS_NORM
    denom = np.where(live, norm, EPS_NORM)
    y = v / denom

    def backward(dy: np.ndarray):
        radial = np.where(live, y * np.sum(dy * y, axis=-1, keepdims=True), 0.0)
        return ((dy - radial) / denom, )

    return y, backward


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_sum_exp(x: np.ndarray, axis: int = -1) -> Tuple[np.ndarray, Backward]:
    m = np.max(x, axis=axis, keepdims=True)
    y = np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))

    def backward(dy: np.ndarray):
        return (np.expand_dims(dy, axis) * softmax(x, axis=axis), )

    return y, backward


def finite_diff_check(f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
                      x: np.ndarray,
                      eps: float = 1e-5,
                      indices: Optional[Iterable[int]] = None) -> float:
    """
    Max over coordinates of |a - n| / max(1, |a|, |n|) between the analytic gradient returned by
    ``f(x) -> (value, grad)`` and central differences. ``indices`` restricts the flat coordinates.
    """
    x = np.array(x, dtype=np.float64)
    value, analytic = f(x.copy())
    if not np.isfinite(value):
        raise NumericError("function value is not finite")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    worst = 0.0
    for i in (range(flat.size) if indices is None else indices):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        f_plus, _ = f(plus.reshape(x.shape))
        f_minus, _ = f(minus.reshape(x.shape))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"function value is not finite near coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
