"""Fast normalization layer.

Batch normalization without the learned scale/shift: every node (or, for
convolutional maps, every channel) is standardized with the mini-batch mean
and biased variance during training, while exponential running averages of
both are kept for inference.

The backward pass is written term by term as three explicit partials
(w.r.t. the batch variance, the batch mean, and the inputs) rather than the
algebraically collapsed form most batch-norm code uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import BatchSizeError, ConfigError, ShapeError, StateCorruptionError, UsageError
from ..tensor import as_tensor

DEFAULT_MOMENTUM = 0.99
DEFAULT_EPS = 1e-5


@dataclass
class FnlCache:
    x: np.ndarray       # float64 copy of the input batch
    mean: np.ndarray    # broadcastable against x
    var: np.ndarray
    out: np.ndarray
    count: int          # samples per normalized statistic
    axes: tuple


@dataclass
class FnlState:
    """Running statistics of one FNL layer.

    ``running_mean`` starts at 0 and ``running_var`` at 1.  With
    ``per_node=False`` a 4-d (N, C, H, W) input is normalized per channel
    over (N, H, W); with ``per_node=True`` every (C, H, W) position gets its
    own statistics.  2-d (N, D) inputs are always per node.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = DEFAULT_MOMENTUM
    eps: float = DEFAULT_EPS
    per_node: bool = False
    cache: FnlCache | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"FNL momentum must be in (0, 1), got {self.momentum}")
        if self.eps < 0:
            raise ConfigError("FNL epsilon must be non-negative")
        if self.running_mean.shape != self.running_var.shape:
            raise ShapeError("running mean and variance shapes differ")

    @classmethod
    def create(cls, stat_shape, momentum=DEFAULT_MOMENTUM, eps=DEFAULT_EPS, per_node=False):
        stat_shape = tuple(stat_shape)
        return cls(np.zeros(stat_shape, dtype=np.float32), np.ones(stat_shape, dtype=np.float32),
                   momentum=momentum, eps=eps, per_node=per_node)

    @classmethod
    def for_input(cls, sample_shape, **kwargs):
        """State sized for inputs whose per-sample shape is ``sample_shape``."""
        return cls.create(stat_shape(sample_shape, kwargs.get("per_node", False)), **kwargs)


def stat_shape(sample_shape, per_node=False) -> tuple:
    sample_shape = tuple(sample_shape)
    if len(sample_shape) == 3 and not per_node:
        return (sample_shape[0],)
    return sample_shape


def _layout(x, state: FnlState):
    """Reduction axes and the broadcast shape of the statistics."""
    if x.ndim == 4 and not state.per_node:
        axes = (0, 2, 3)
        bshape = (1, x.shape[1], 1, 1)
    else:
        axes = (0,)
        bshape = (1, *x.shape[1:])
    if state.running_mean.size != int(np.prod(bshape)):
        raise ShapeError(f"FNL state holds {state.running_mean.size} statistics, input "
                         f"{x.shape} needs {int(np.prod(bshape))}")
    return axes, bshape


def fnl_forward(x, state: FnlState, mode: str = "train") -> np.ndarray:
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"FNL input needs a batch axis, got shape {x.shape}")
    axes, bshape = _layout(x, state)
    if np.any(state.running_var < 0):
        raise StateCorruptionError("FNL running variance has negative entries")
    x64 = x.astype(np.float64)

    if mode == "test":
        mu = state.running_mean.reshape(bshape).astype(np.float64)
        var = state.running_var.reshape(bshape).astype(np.float64)
        return ((x64 - mu) / np.sqrt(var + state.eps)).astype(x.dtype)
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'test', got {mode!r}")

    count = int(np.prod([x.shape[a] for a in axes]))
    if count < 2:
        raise BatchSizeError(f"FNL needs at least 2 samples per statistic in training, got {count}")
    mu = x64.mean(axis=axes, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=axes, keepdims=True)
    out = (x64 - mu) / np.sqrt(var + state.eps)

    w = state.momentum
    rm = state.running_mean.astype(np.float64)
    rv = state.running_var.astype(np.float64)
    state.running_mean = (w * rm + (1 - w) * mu.reshape(rm.shape)).astype(state.running_mean.dtype)
    state.running_var = (w * rv + (1 - w) * var.reshape(rv.shape)).astype(state.running_var.dtype)
    state.cache = FnlCache(x=x64, mean=mu, var=var, out=out, count=count, axes=axes)
    return out.astype(x.dtype)


def fnl_grad(grad_out, x, mean, var, eps, axes, count):
    """Input gradient from the cached batch statistics.

    ``var`` is the biased batch variance; ``eps`` is added wherever it is
    square-rooted or raised to a negative power.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    xc = x - mean
    v = var + eps
    d_var = -0.5 * np.sum(g * xc, axis=axes, keepdims=True) * v ** -1.5
    d_mean = (np.sum(g * (-1.0 / np.sqrt(v)), axis=axes, keepdims=True)
              + d_var * (-2.0 * np.sum(xc, axis=axes, keepdims=True) / count))
    return g / np.sqrt(v) + d_var * 2.0 * xc / count + d_mean / count


def fnl_backward(grad_out, state: FnlState) -> np.ndarray:
    c = state.cache
    if c is None:
        raise UsageError("fnl_backward called without a cached training forward pass")
    grad_out = np.asarray(grad_out)
    if grad_out.shape != c.x.shape:
        raise ShapeError(f"gradient shape {grad_out.shape} does not match cached input {c.x.shape}")
    dx = fnl_grad(grad_out, c.x, c.mean, c.var, state.eps, c.axes, c.count)
    return dx.astype(np.float64 if grad_out.dtype == np.float64 else np.float32)
