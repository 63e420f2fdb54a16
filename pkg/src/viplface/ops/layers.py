"""Forward/backward kernels for the standard CNN layers.

All kernels take batched inputs (leading sample axis).  Convolution and
pooling also accept a single (C, H, W) image and return an unbatched
result for it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError, ShapeError
from ..tensor import as_pair, as_tensor, col2im_batch, gemm, im2col_batch, out_extent


def _batched(x):
    x = as_tensor(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) or (C, H, W), got shape {x.shape}")
    return x, False


# -- convolution -------------------------------------------------------------

@dataclass
class ConvParams:
    weight: np.ndarray  # (out_channels, in_channels // group, kh, kw)
    bias: np.ndarray    # (out_channels,)
    stride: int = 1
    pad: int = 0
    group: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-d, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match "
                             f"{self.weight.shape[0]} output channels")
        if self.stride < 1 or self.pad < 0 or self.group < 1:
            raise ConfigError("conv needs stride >= 1, pad >= 0, group >= 1")
        if self.weight.shape[0] % self.group:
            raise ConfigError(f"{self.weight.shape[0]} output channels not divisible "
                              f"by group {self.group}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def conv_shape(in_shape, out_channels: int, kernel, stride: int = 1, pad: int = 0,
               group: int = 1) -> tuple[int, int, int]:
    c, h, w = in_shape
    kh, kw = as_pair(kernel)
    if c % group or out_channels % group:
        raise ShapeError(f"channels {c}->{out_channels} not divisible by group {group}")
    return out_channels, out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad)


def _check_conv_input(x, p: ConvParams):
    cin = x.shape[1]
    if cin != p.weight.shape[1] * p.group:
        raise ShapeError(f"input has {cin} channels, weights expect "
                         f"{p.weight.shape[1] * p.group}")


def conv_forward(x, p: ConvParams) -> np.ndarray:
    """Cross-correlation plus per-channel bias, lowered to im2col + GEMM."""
    x, single = _batched(x)
    _check_conv_input(x, p)
    n, cin, h, w = x.shape
    cout = p.out_channels
    kh, kw = p.kernel
    ho = out_extent(h, kh, p.stride, p.pad)
    wo = out_extent(w, kw, p.stride, p.pad)
    g = p.group
    cin_g, cout_g = cin // g, cout // g
    out = np.empty((cout, n, ho, wo), dtype=x.dtype)
    bias = p.bias.astype(np.float64)
    for gi in range(g):
        sl = slice(gi * cout_g, (gi + 1) * cout_g)
        cols = im2col_batch(x[:, gi * cin_g:(gi + 1) * cin_g], (kh, kw), p.stride, p.pad)
        wmat = p.weight[sl].reshape(cout_g, -1)
        # bias rides in the beta*c term so the float32 result is rounded once
        acc = np.repeat(bias[sl, None], cols.shape[1], axis=1)
        gemm(wmat, cols, beta=1.0, c=acc)
        out[sl] = acc.reshape(cout_g, n, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return out[0] if single else out


def conv_backward(grad_out, x, p: ConvParams):
    """Returns ``(grad_in, grad_weight, grad_bias)``."""
    x, single = _batched(x)
    grad_out = as_tensor(grad_out, x.dtype)
    if single:
        grad_out = grad_out[None]
    _check_conv_input(x, p)
    n, cin, h, w = x.shape
    cout = p.out_channels
    kh, kw = p.kernel
    g = p.group
    cin_g, cout_g = cin // g, cout // g
    # (Cout, N*Ho*Wo), matching the im2col column order
    gmat = grad_out.transpose(1, 0, 2, 3).reshape(cout, -1)
    grad_in = np.empty_like(x)
    grad_w = np.empty(p.weight.shape, dtype=x.dtype)
    for gi in range(g):
        xs = x[:, gi * cin_g:(gi + 1) * cin_g]
        cols = im2col_batch(xs, (kh, kw), p.stride, p.pad)
        gm = gmat[gi * cout_g:(gi + 1) * cout_g]
        wmat = p.weight[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, -1).astype(x.dtype)
        grad_w[gi * cout_g:(gi + 1) * cout_g] = gemm(gm, cols, trans_b=True).reshape(
            cout_g, cin_g, kh, kw)
        dcols = gemm(wmat, gm, trans_a=True)
        grad_in[:, gi * cin_g:(gi + 1) * cin_g] = col2im_batch(dcols, xs.shape, (kh, kw),
                                                               p.stride, p.pad)
    grad_b = gmat.astype(np.float64).sum(axis=1).astype(x.dtype)
    return (grad_in[0] if single else grad_in), grad_w, grad_b


# -- relu --------------------------------------------------------------------

def relu_forward(x) -> np.ndarray:
    x = as_tensor(x)
    return np.maximum(x, 0).astype(x.dtype)


def relu_backward(grad_out, x) -> np.ndarray:
    x = as_tensor(x)
    return np.where(x > 0, as_tensor(grad_out, x.dtype), 0).astype(x.dtype)


# -- pooling -----------------------------------------------------------------

@dataclass(frozen=True)
class PoolParams:
    kind: str = "max"
    kernel: tuple = (2, 2)
    stride: int = 2

    def __post_init__(self):
        if self.kind not in ("max", "mean"):
            raise ConfigError(f"unknown pooling kind {self.kind!r}")
        kh, kw = as_pair(self.kernel)
        object.__setattr__(self, "kernel", (kh, kw))
        if kh < 1 or kw < 1 or self.stride < 1:
            raise ConfigError("pooling kernel and stride must be positive")


def pool_shape(in_shape, p: PoolParams):
    c, h, w = in_shape
    kh, kw = p.kernel
    return c, out_extent(h, kh, p.stride, 0), out_extent(w, kw, p.stride, 0)


def _windows(x, p: PoolParams):
    n, c, h, w = x.shape
    kh, kw = p.kernel
    ho = out_extent(h, kh, p.stride, 0)
    wo = out_extent(w, kw, p.stride, 0)
    s = p.stride
    hs, ws = s * (ho - 1) + 1, s * (wo - 1) + 1
    win = np.empty((kh * kw, n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            win[i * kw + j] = x[:, :, i:i + hs:s, j:j + ws:s]
    return win


def pool_forward(x, p: PoolParams):
    """Returns ``(out, argmax)``; ``argmax`` is None for mean pooling.

    Max-pool ties resolve to the first position in row-major window order.
    """
    x, single = _batched(x)
    win = _windows(x, p)
    if p.kind == "max":
        idx = np.argmax(win, axis=0)
        out = np.take_along_axis(win, idx[None], axis=0)[0]
    else:
        idx = None
        out = win.astype(np.float64).mean(axis=0).astype(x.dtype)
    if single:
        return out[0], (None if idx is None else idx[0])
    return out, idx


def pool_backward(grad_out, argmax, p: PoolParams, in_shape) -> np.ndarray:
    grad_out = as_tensor(grad_out)
    single = len(in_shape) == 3
    if single:
        grad_out = grad_out[None]
        in_shape = (1, *in_shape)
        if argmax is not None:
            argmax = argmax[None]
    n, c, h, w = in_shape
    kh, kw = p.kernel
    s = p.stride
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    hs, ws = s * (ho - 1) + 1, s * (wo - 1) + 1
    grad_in = np.zeros(in_shape, dtype=grad_out.dtype)
    if p.kind == "max":
        if argmax is None:
            raise ShapeError("max-pool backward needs the forward argmax")
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            grad_in[:, :, i:i + hs:s, j:j + ws:s] += np.where(argmax == k, grad_out, 0)
    else:
        share = grad_out / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                grad_in[:, :, i:i + hs:s, j:j + ws:s] += share
    return grad_in[0] if single else grad_in


# -- inner product -------------------------------------------------------------

def _flat(x):
    x = as_tensor(x)
    if x.ndim == 1:
        return x[None], True
    return x.reshape(x.shape[0], -1), False


def fc_forward(x, weight, bias) -> np.ndarray:
    """``out = x @ weight + bias`` with ``weight`` of shape (n_in, n_out)."""
    xf, single = _flat(x)
    if xf.shape[1] != weight.shape[0]:
        raise ShapeError(f"fc input length {xf.shape[1]} does not match weight rows "
                         f"{weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"fc bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    acc = np.repeat(bias.astype(np.float64)[None], xf.shape[0], axis=0)
    gemm(xf, weight, beta=1.0, c=acc)
    out = acc.astype(xf.dtype)
    return out[0] if single else out


def fc_backward(grad_out, x, weight):
    """Returns ``(grad_in, grad_weight, grad_bias)``; grad_in has the shape of ``x``."""
    x = as_tensor(x)
    xf, single = _flat(x)
    g = as_tensor(grad_out, xf.dtype).reshape(xf.shape[0], -1)
    grad_w = gemm(xf, g, trans_a=True)
    grad_b = g.astype(np.float64).sum(axis=0).astype(xf.dtype)
    grad_in = gemm(g, weight.astype(xf.dtype, copy=False), trans_b=True)
    return grad_in.reshape(x.shape), grad_w, grad_b


# -- dropout -----------------------------------------------------------------

@dataclass
class DropoutParams:
    ratio: float = 0.5
    mode: str = "train"
    rng_seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"dropout ratio must be in [0, 1), got {self.ratio}")
        if self.mode not in ("train", "test"):
            raise ConfigError(f"dropout mode must be 'train' or 'test', got {self.mode!r}")


def dropout_forward(x, p: DropoutParams, rng: np.random.Generator | None = None):
    """Inverted dropout.  Returns ``(out, mask)``; the mask carries the 1/(1-ratio) scale."""
    x = as_tensor(x)
    if p.mode == "test" or p.ratio == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        rng = np.random.default_rng(p.rng_seed)
    keep = rng.random(x.shape) >= p.ratio
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p.ratio))
    return x * mask, mask


def dropout_backward(grad_out, mask) -> np.ndarray:
    return as_tensor(grad_out, mask.dtype) * mask


# -- softmax loss ------------------------------------------------------------

def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n, c):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be integers")
    bad = labels[(labels < 0) | (labels >= c)]
    if bad.size:
        raise DataError(f"label {int(bad[0])} out of range [0, {c})")
    return labels.astype(np.int64)


def softmax_loss_forward(logits, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = np.asarray(logits)
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(n), labels].mean())


def softmax_loss_backward(logits, labels, grad_loss: float = 1.0) -> np.ndarray:
    logits = np.asarray(logits)
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    g *= grad_loss / n
    return g.astype(np.float64 if logits.dtype == np.float64 else np.float32)


# -- local response normalization (across channels) --------------------------

@dataclass(frozen=True)
class LrnParams:
    local_size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 1.0

    def __post_init__(self):
        if self.local_size < 1 or self.local_size % 2 == 0:
            raise ConfigError("lrn local_size must be a positive odd integer")


def _channel_window_sum(v, size):
    half = size // 2
    c = v.shape[1]
    padded = np.pad(v, ((0, 0), (half, half), (0, 0), (0, 0)))
    csum = np.concatenate([np.zeros_like(padded[:, :1]), np.cumsum(padded, axis=1)], axis=1)
    return csum[:, size:size + c] - csum[:, :c]


def lrn_forward(x, p: LrnParams):
    """``y = x / (k + alpha/n * sum_{window} x^2) ** beta``; returns ``(y, scale)``."""
    x, single = _batched(x)
    x64 = x.astype(np.float64)
    scale = p.k + (p.alpha / p.local_size) * _channel_window_sum(x64 * x64, p.local_size)
    y = (x64 * scale ** -p.beta).astype(x.dtype)
    if single:
        return y[0], scale[0]
    return y, scale


def lrn_backward(grad_out, x, scale, p: LrnParams) -> np.ndarray:
    x, single = _batched(x)
    g = np.asarray(grad_out, dtype=np.float64)
    if single:
        g, scale = g[None], scale[None]
    x64 = x.astype(np.float64)
    t = g * x64 * scale ** (-p.beta - 1.0)
    back = _channel_window_sum(t, p.local_size)
    dx = g * scale ** -p.beta - (2.0 * p.alpha * p.beta / p.local_size) * x64 * back
    dx = dx.astype(x.dtype)
    return dx[0] if single else dx
