"""Central finite-difference checks for every backward kernel.

Each check builds a random scalar loss ``L = sum(r * f(x))`` with a fixed
random projection ``r`` and compares the analytic gradient of every input
against ``(L(x + h e_i) - L(x - h e_i)) / 2h``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic, numeric) -> float:
    """max |a - n| scaled by the larger of the two infinity norms."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _proj(rng, shape, dtype):
    return rng.standard_normal(shape).astype(dtype)


def check_conv(rng, dtype=np.float32, h=1e-3, tol=1e-3, group=1):
    cin, cout = 2 * group, 3 * group
    x = rng.standard_normal((2, cin, 5, 5)).astype(dtype)
    w = rng.standard_normal((cout, cin // group, 3, 3)).astype(dtype)
    b = rng.standard_normal(cout).astype(dtype)
    stride, pad = 1, 1

    def out(x_, w_, b_):
        return ops.conv_forward(x_, ops.ConvParams(w_, b_, stride, pad, group))

    r = _proj(rng, out(x, w, b).shape, dtype)
    gx, gw, gb = ops.conv_backward(r, x, ops.ConvParams(w, b, stride, pad, group))
    errs = [
        rel_error(gx, numeric_grad(lambda v: np.sum(r * out(v, w, b), dtype=np.float64), x, h)),
        rel_error(gw, numeric_grad(lambda v: np.sum(r * out(x, v, b), dtype=np.float64), w, h)),
        rel_error(gb, numeric_grad(lambda v: np.sum(r * out(x, w, v), dtype=np.float64), b, h)),
    ]
    return max(errs)


def check_fc(rng, dtype=np.float32, h=1e-3, n=6, m=4):
    x = rng.standard_normal((3, n)).astype(dtype)
    w = rng.standard_normal((n, m)).astype(dtype)
    b = rng.standard_normal(m).astype(dtype)
    r = _proj(rng, (3, m), dtype)
    gx, gw, gb = ops.fc_backward(r, x, w)
    errs = [
        rel_error(gx, numeric_grad(lambda v: np.sum(r * ops.fc_forward(v, w, b), dtype=np.float64), x, h)),
        rel_error(gw, numeric_grad(lambda v: np.sum(r * ops.fc_forward(x, v, b), dtype=np.float64), w, h)),
        rel_error(gb, numeric_grad(lambda v: np.sum(r * ops.fc_forward(x, w, v), dtype=np.float64), b, h)),
    ]
    return max(errs)


def check_relu(rng, dtype=np.float32, h=1e-3):
    x = rng.standard_normal((4, 7)).astype(dtype)
    # keep clear of the kink at 0
    x[np.abs(x) < 10 * h] += np.sign(x[np.abs(x) < 10 * h] + 1e-12) * 20 * h
    r = _proj(rng, x.shape, dtype)
    g = ops.relu_backward(r, x)
    return rel_error(g, numeric_grad(lambda v: np.sum(r * ops.relu_forward(v), dtype=np.float64), x, h))


def _untied(rng, shape, dtype, gap):
    """Random values whose pairwise gaps all exceed ``gap`` (no pooling ties)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) * 4 * gap + rng.uniform(0, gap, n)) - 2 * gap * n
    return rng.permutation(vals).reshape(shape).astype(dtype)


def check_pool(rng, kind="max", dtype=np.float32, h=1e-3):
    p = ops.PoolParams(kind, (3, 3), 2)
    x = _untied(rng, (2, 1, 5, 5), dtype, gap=10 * h)
    out, idx = ops.pool_forward(x, p)
    r = _proj(rng, out.shape, dtype)
    g = ops.pool_backward(r, idx, p, x.shape)
    return rel_error(g, numeric_grad(lambda v: np.sum(r * ops.pool_forward(v, p)[0], dtype=np.float64), x, h))


def check_dropout(rng, dtype=np.float32, h=1e-3):
    x = rng.standard_normal((4, 10)).astype(dtype)
    _, mask = ops.dropout_forward(x, ops.DropoutParams(0.5), rng)
    r = _proj(rng, x.shape, dtype)
    g = ops.dropout_backward(r, mask)
    # fixed mask: the forward map is x -> x * mask
    return rel_error(g, numeric_grad(lambda v: np.sum(r * (v * mask), dtype=np.float64), x, h))


def check_softmax_loss(rng, dtype=np.float32, h=1e-3):
    logits = rng.standard_normal((3, 5)).astype(dtype)
    labels = rng.integers(0, 5, 3)
    g = ops.softmax_loss_backward(logits, labels)
    return rel_error(g, numeric_grad(lambda v: ops.softmax_loss_forward(v, labels), logits, h))


def check_lrn(rng, dtype=np.float32, h=1e-3):
    p = ops.LrnParams(local_size=3, alpha=0.5, beta=0.75, k=1.0)
    x = rng.standard_normal((2, 5, 3, 3)).astype(dtype)
    y, scale = ops.lrn_forward(x, p)
    r = _proj(rng, y.shape, dtype)
    g = ops.lrn_backward(r, x, scale, p)
    return rel_error(g, numeric_grad(lambda v: np.sum(r * ops.lrn_forward(v, p)[0], dtype=np.float64), x, h))


def _fnl_loss_and_grad(x, r, state_kwargs, backward=None):
    state = ops.FnlState.for_input(x.shape[1:], **state_kwargs)
    out = ops.fnl_forward(x, state, "train")
    g = (backward or ops.fnl_backward)(r.astype(out.dtype), state)
    return g


def check_fnl(rng, dtype=np.float64, h=None, shape=(8, 6), per_node=False, backward=None):
    """FNL gradient error for ``L = sum(r * fnl(x))``."""
    if h is None:
        h = 1e-4 if dtype == np.float64 else 1e-3
    x = (rng.standard_normal(shape) * 2.0 + 0.5).astype(dtype)
    r = _proj(rng, shape, dtype)
    kw = {"per_node": per_node}
    g = _fnl_loss_and_grad(x, r, kw, backward)

    def loss(v):
        st = ops.FnlState.for_input(v.shape[1:], **kw)
        return np.sum(r * ops.fnl_forward(v, st, "train"), dtype=np.float64)

    return rel_error(g, numeric_grad(loss, x, h))


def faulty_fnl_backward(grad_out, state):
    """fnl_backward with the sign of the variance term flipped (mutation check)."""
    c = state.cache
    g = np.asarray(grad_out, dtype=np.float64)
    xc = c.x - c.mean
    v = c.var + state.eps
    d_var = +0.5 * np.sum(g * xc, axis=c.axes, keepdims=True) * v ** -1.5
    d_mean = (np.sum(g * (-1.0 / np.sqrt(v)), axis=c.axes, keepdims=True)
              + d_var * (-2.0 * np.sum(xc, axis=c.axes, keepdims=True) / c.count))
    return g / np.sqrt(v) + d_var * 2.0 * xc / c.count + d_mean / c.count


def check_network(rng, dtype=np.float32, h=1e-3):
    """End-to-end gradient of a two-layer fc network with softmax loss."""
    from .graph import Network, parse_descriptor

    desc = parse_descriptor(
        "layer data input shape=5 out=data\n"
        "layer fc1 fc num_output=4 in=data out=fc1\n"
        "layer act relu in=fc1 out=act\n"
        "layer fc2 fc num_output=3 in=act out=fc2\n"
        "layer loss softmax_loss in=fc2 out=loss\n"
    )
    net = Network.zeros(desc)
    for arrs in net.params.values():
        for k in arrs:
            arrs[k][...] = rng.standard_normal(arrs[k].shape)
    x = rng.standard_normal((4, 5)).astype(dtype)
    labels = rng.integers(0, 3, 4)
    net.forward(x, "train", labels=labels)
    grads = net.backward({"loss": 1.0})
    errs = []
    for layer, arrs in net.params.items():
        for key, arr in arrs.items():
            def loss(_):
                return float(net.forward(x, "test", labels=labels)["loss"])
            errs.append(rel_error(grads[layer][key], numeric_grad(loss, arr, h)))
    return max(errs)


def run_all(seed: int = 0, faults=()) -> list[CheckResult]:
    """Every backward kernel, one result each.  ``faults`` may contain ``"fnl"``."""
    rng = np.random.default_rng(seed)
    fnl_bwd = faulty_fnl_backward if "fnl" in faults else None
    results = [
        CheckResult("conv", check_conv(rng), 1e-3),
        CheckResult("conv_group", check_conv(rng, group=2), 1e-3),
        CheckResult("relu", check_relu(rng), 1e-3),
        CheckResult("pool_max", check_pool(rng, "max"), 1e-3),
        CheckResult("pool_mean", check_pool(rng, "mean"), 1e-3),
        CheckResult("fc", check_fc(rng), 1e-3),
        CheckResult("dropout", check_dropout(rng), 1e-3),
        CheckResult("softmax_loss", check_softmax_loss(rng), 1e-3),
        CheckResult("lrn", check_lrn(rng), 1e-3),
        CheckResult("fnl", check_fnl(rng, np.float64, backward=fnl_bwd), 1e-4),
        CheckResult("fnl_conv", check_fnl(rng, np.float64, shape=(4, 3, 3, 3), backward=fnl_bwd), 1e-4),
        CheckResult("fnl_f32", check_fnl(rng, np.float32, backward=fnl_bwd), 1e-3),
        CheckResult("network", check_network(rng), 1e-3),
    ]
    return results
