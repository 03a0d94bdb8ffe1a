"""Dense float64 tensors and the differentiable primitives of the network.

Every forward op has a matching ``*_backward`` function.  Forward ops take
plain ``numpy`` arrays (or :class:`Tensor`), validate shapes and finiteness,
and return whatever the backward rule needs to replay the computation
exactly.  There is no taping engine: callers chain backward rules by hand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import (
    DegenerateBatchError,
    DimensionError,
    InstabilityError,
    LabelError,
    NeighborhoodError,
    ParameterError,
)

DTYPE = np.float64

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


class Tensor:
    """Value-semantic float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad = None
        if grad is not None:
            g = np.array(grad, dtype=DTYPE)
            if g.shape != arr.shape:
                raise DimensionError(f"grad shape {g.shape} != data shape {arr.shape}")
            self.grad = g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.zero_grad()
        self.grad += g

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.isfinite(x).all():
        raise InstabilityError(f"non-finite values in {name}")


def as_array(x, name: str = "input") -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x, dtype=DTYPE)
    _check_finite(arr, name)
    return arr


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> np.ndarray:
    a = as_array(a, "matmul lhs")
    b = as_array(b, "matmul rhs")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Return ``(dA, dB)`` for ``C = A @ B`` given ``dC``."""
    return grad @ b.T, a.T @ grad


def linear(x, w, b) -> np.ndarray:
    x = as_array(x, "linear input")
    w = as_array(w, "linear weight")
    b = as_array(b, "linear bias")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match weight {w.shape}")
    return matmul(x, w) + b


def linear_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Return ``(dx, dw, db)``."""
    dx, dw = matmul_backward(grad, x, w)
    return dx, dw, grad.sum(axis=0)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def activation(x, kind: str = "relu", slope: float = 0.0) -> np.ndarray:
    x = as_array(x, "activation input")
    if slope < 0:
        raise ParameterError(f"activation slope must be >= 0, got {slope}")
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, slope * x)
    raise ParameterError(f"unknown activation {kind!r}")


def activation_backward(grad: np.ndarray, x: np.ndarray, kind: str = "relu",
                        slope: float = 0.0) -> np.ndarray:
    if kind == "relu":
        return np.where(x > 0, grad, 0.0)
    return np.where(x > 0, grad, slope * grad)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DropoutMask:
    rate: float
    mask: np.ndarray
    mode: str

    def __post_init__(self):
        if self.mode == "eval" and not np.all(self.mask == 1.0):
            raise ParameterError("eval-mode dropout mask must be all ones")


def dropout(x, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout.  Returns ``(output, mask)``."""
    x = as_array(x, "dropout input")
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"unknown mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x.copy(), DropoutMask(rate, np.ones_like(x), mode)
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = np.where(keep, 1.0 / (1.0 - rate), 0.0)
    return x * mask, DropoutMask(rate, mask, mode)


def dropout_backward(grad: np.ndarray, mask: DropoutMask) -> np.ndarray:
    return grad * mask.mask


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


def batch_norm(x, gamma, beta, running_mean, running_var, mode: str = "train",
               momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON):
    """Per-channel batch normalization over the rows of ``x`` (N x C).

    Returns ``(out, cache, (new_running_mean, new_running_var))``.  The
    running statistics follow ``r <- momentum * r + (1 - momentum) * batch``
    and use the unbiased batch variance; the input is never mutated.
    """
    x = as_array(x, "batch_norm input")
    gamma = as_array(gamma, "gamma")
    beta = as_array(beta, "beta")
    if eps <= 0:
        raise ParameterError(f"epsilon must be > 0, got {eps}")
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise DimensionError(
            f"batch_norm shapes x={x.shape} gamma={gamma.shape} beta={beta.shape}")
    n = x.shape[0]
    if mode == "train":
        if n < 2:
            raise DegenerateBatchError(f"train-mode batch norm needs N >= 2, got {n}")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        new_mean = momentum * running_mean + (1.0 - momentum) * mean
        new_var = momentum * running_var + (1.0 - momentum) * var * (n / (n - 1))
    elif mode == "eval":
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    return gamma * x_hat + beta, BatchNormCache(x_hat, inv_std, gamma, mode), (new_mean, new_var)


def batch_norm_backward(grad: np.ndarray, cache: BatchNormCache):
    """Return ``(dx, dgamma, dbeta)``."""
    dgamma = (grad * cache.x_hat).sum(axis=0)
    dbeta = grad.sum(axis=0)
    g_hat = grad * cache.gamma
    if cache.mode == "eval":
        return g_hat * cache.inv_std, dgamma, dbeta
    dx = cache.inv_std * (g_hat - g_hat.mean(axis=0)
                          - cache.x_hat * (g_hat * cache.x_hat).mean(axis=0))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# neighbourhood max pooling
# ---------------------------------------------------------------------------

def max_aggregate(edge_features):
    """Max over the neighbour axis of an ``N x k x C`` array.

    Returns ``(pooled, argmax)``; ties resolve to the lowest slot.
    """
    e = as_array(edge_features, "edge features")
    if e.ndim != 3:
        raise DimensionError(f"expected N x k x C edge features, got {e.shape}")
    if e.shape[1] == 0:
        raise NeighborhoodError("max_aggregate over an empty neighbourhood")
    idx = e.argmax(axis=1)
    pooled = np.take_along_axis(e, idx[:, None, :], axis=1)[:, 0, :]
    return pooled, idx


def max_aggregate_backward(grad: np.ndarray, argmax: np.ndarray, k: int) -> np.ndarray:
    n, c = grad.shape
    out = np.zeros((n, k, c), dtype=DTYPE)
    np.put_along_axis(out, argmax[:, None, :], grad[:, None, :], axis=1)
    return out


def max_aggregate_gap(edge_features: np.ndarray, only_positive: bool = False) -> float:
    """Smallest margin between the winning slot and the runner-up.

    With ``only_positive`` the channels whose winner is <= 0 are skipped;
    after a ReLU those ties carry zero gradient on every slot.
    """
    if edge_features.shape[1] < 2:
        return np.inf
    part = -np.partition(-edge_features, 1, axis=1)
    gap = part[:, 0, :] - part[:, 1, :]
    if only_positive:
        gap = gap[part[:, 0, :] > 0]
    return float(gap.min()) if gap.size else np.inf


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits`` (N x C) against integer ``labels``.

    Returns ``(loss, dlogits)``.
    """
    logits = as_array(logits, "logits")
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    log_p = z[rows, labels] - log_norm
    loss = float(-log_p.mean())
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

KINK_MARGIN = 1e-5


def gradient_check(fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
                   params: Mapping[str, np.ndarray], h: float = 1e-6,
                   kink_distance: Callable[[Mapping[str, np.ndarray]], float] | None = None,
                   ) -> float:
    """Compare analytic gradients with central finite differences.

    ``fn(params)`` must return ``(loss, grads)`` where ``grads`` has an entry
    per key of ``params``.  Each entry of each parameter is nudged by ``±h``
    in place and restored afterwards.  Returns the maximum over entries of
    ``|analytic - numeric| / max(1, |numeric|)``.

    If ``kink_distance`` is given and reports a value below ``KINK_MARGIN``
    at the probe point, the point is rejected with :class:`ParameterError`.
    """
    work = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    if kink_distance is not None and kink_distance(work) < KINK_MARGIN:
        raise ParameterError("probe point lies within the kink margin")
    loss, grads = fn(work)
    if not np.isfinite(loss):
        raise InstabilityError("non-finite loss at the probe point")
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        analytic = np.asarray(grads[name], dtype=DTYPE).reshape(-1)
        if analytic.size != flat.size:
            raise DimensionError(f"gradient for {name!r} has {analytic.size} entries, "
                                 f"parameter has {flat.size}")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn(work)[0]
            flat[i] = orig - h
            f_minus = fn(work)[0]
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise InstabilityError(f"non-finite loss while probing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
