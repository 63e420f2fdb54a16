"""Bound networks: a descriptor plus weights and FNL state, executed in
topological order."""
from __future__ import annotations

import numpy as np

from .. import ops
from ..errors import ShapeError, UsageError
from ..tensor import as_tensor
from .descriptor import NetworkDescriptor, topo_order
from .shapes import infer_shapes, param_shapes


class _Edges(dict):
    """Edge store that refuses reads of edges not yet produced."""

    def __missing__(self, key):
        raise UsageError(f"edge {key!r} read before it was produced")


class Network:
    """A descriptor bound to parameters.

    ``params`` maps conv/fc layer names to ``{"weight": ..., "bias": ...}``
    float32 arrays; ``fnl`` maps fnl layer names to :class:`FnlState`.
    Test-mode forward passes never mutate the network, so a bound network
    may serve concurrent inference.  Train-mode passes cache activations for
    :meth:`backward` and update FNL statistics.
    """

    def __init__(self, descriptor: NetworkDescriptor, params=None, fnl=None, seed=0):
        self.descriptor = descriptor
        self.order = topo_order(descriptor)
        self.shapes = infer_shapes(descriptor)
        self.param_shapes = param_shapes(descriptor, self.shapes)
        self.params = None
        if params is not None:
            self.bind(params)
        self.fnl = fnl if fnl is not None else self._fresh_fnl()
        self.rng = np.random.default_rng(seed)
        self.mean_image = None  # per-pixel input mean, carried into model files
        self._trace = None

    @classmethod
    def zeros(cls, descriptor, seed=0):
        shapes = param_shapes(descriptor)
        params = {name: {k: np.zeros(s, dtype=np.float32) for k, s in d.items()}
                  for name, d in shapes.items()}
        return cls(descriptor, params, seed=seed)

    def _fresh_fnl(self):
        out = {}
        for layer in self.descriptor.layers:
            if layer.kind == "fnl":
                p = layer.params
                out[layer.name] = ops.FnlState.for_input(
                    self.shapes[layer.inputs[0]], momentum=p["momentum"], eps=p["eps"],
                    per_node=p["per_node"])
        return out

    def bind(self, params):
        expected = self.param_shapes
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        bound = {}
        for name, shapes in expected.items():
            bound[name] = {}
            for key, shape in shapes.items():
                arr = np.ascontiguousarray(params[name][key], dtype=np.float32)
                if arr.shape != shape:
                    raise ShapeError(f"layer {name!r} {key}: got shape {arr.shape}, "
                                     f"descriptor implies {shape}")
                bound[name][key] = arr
        self.params = bound

    @property
    def input_shape(self):
        return self.descriptor.input_shape

    def parameters(self):
        """Yield ``(layer, key, array)`` in declaration order."""
        for layer in self.descriptor.layers:
            if self.params and layer.name in self.params:
                for key in ("weight", "bias"):
                    yield layer.name, key, self.params[layer.name][key]

    # -- forward -----------------------------------------------------------

    def forward(self, x, mode: str = "test", labels=None, outputs=None) -> dict:
        """Run every layer; return ``{edge: batched tensor}``.

        ``x`` is (N, *input_shape) or a single sample of ``input_shape``.
        ``outputs`` restricts the returned edges.
        """
        if mode not in ("train", "test"):
            raise UsageError(f"mode must be 'train' or 'test', got {mode!r}")
        if self.params is None:
            raise UsageError("network has no bound parameters")
        x = as_tensor(x)
        in_shape = tuple(self.input_shape)
        if x.shape == in_shape:
            x = x[None]
        if x.shape[1:] != in_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match descriptor input {in_shape}")
        train = mode == "train"
        edges = _Edges()
        caches = {}
        for layer in self.order:
            args = [edges[e] for e in layer.inputs]
            try:
                out, cache = self._run(layer, args, x, train, labels)
            except ShapeError as exc:
                raise ShapeError(f"layer {layer.name!r}: {exc}") from None
            edges[layer.output] = out
            if train:
                caches[layer.name] = cache
        if train:
            self._trace = {"edges": dict(edges), "caches": caches, "labels": labels}
        if outputs is not None:
            return {e: edges[e] for e in outputs}
        return dict(edges)

    def _run(self, layer, args, x, train, labels):
        kind, p = layer.kind, layer.params
        if kind == "input":
            return x, None
        if kind == "add":
            out = args[0].astype(np.float64)
            for a in args[1:]:
                out = out + a
            return out.astype(args[0].dtype), None
        (a,) = args
        if kind == "conv":
            w = self.params[layer.name]
            cp = ops.ConvParams(w["weight"], w["bias"], p["stride"], p["pad"], p["group"])
            return ops.conv_forward(a, cp), None
        if kind == "fc":
            w = self.params[layer.name]
            return ops.fc_forward(a, w["weight"], w["bias"]), None
        if kind == "relu":
            return ops.relu_forward(a), None
        if kind in ("pool_max", "pool_mean"):
            pp = ops.PoolParams("max" if kind == "pool_max" else "mean", p["kernel"], p["stride"])
            out, idx = ops.pool_forward(a, pp)
            return out, idx
        if kind == "flatten":
            return a.reshape(a.shape[0], -1), None
        if kind == "dropout":
            dp = ops.DropoutParams(p["ratio"], "train" if train else "test")
            out, mask = ops.dropout_forward(a, dp, self.rng)
            return out, mask
        if kind == "fnl":
            state = self.fnl[layer.name]
            return ops.fnl_forward(a, state, "train" if train else "test"), None
        if kind == "lrn":
            lp = ops.LrnParams(p["local_size"], p["alpha"], p["beta"], p["k"])
            out, scale = ops.lrn_forward(a, lp)
            return out, scale
        if kind == "softmax_loss":
            if labels is None:
                raise UsageError(f"softmax_loss layer {layer.name!r} needs labels")
            loss = ops.softmax_loss_forward(a, labels)
            return np.array(loss, dtype=np.float64), None
        raise AssertionError(kind)

    # -- backward ----------------------------------------------------------

    def backward(self, seeds: dict, return_edge_grads: bool = False):
        """Reverse-mode pass from ``seeds`` (``{edge: dL/d edge}``).

        Returns parameter gradients shaped like :attr:`params`; with
        ``return_edge_grads`` also the gradient of every reached edge.
        Gradients of an edge with several consumers are summed.
        """
        if self._trace is None:
            raise UsageError("backward called before a train-mode forward pass")
        edges, caches = self._trace["edges"], self._trace["caches"]
        grads: dict = {}
        for edge, g in seeds.items():
            if edge not in edges:
                raise UsageError(f"unknown edge {edge!r}")
            grads[edge] = np.asarray(g, dtype=np.float64) * np.ones(np.shape(edges[edge]))
        pgrads = {name: {k: np.zeros_like(v) for k, v in d.items()}
                  for name, d in self.params.items()}
        for layer in reversed(self.order):
            g = grads.get(layer.output)
            if g is None or layer.kind == "input":
                continue
            in_grads = self._back(layer, g, [edges[e] for e in layer.inputs],
                                  caches[layer.name], pgrads)
            for edge, ig in zip(layer.inputs, in_grads):
                if edge in grads:
                    grads[edge] = grads[edge] + ig
                else:
                    grads[edge] = ig
        if return_edge_grads:
            return pgrads, grads
        return pgrads

    def _back(self, layer, g, args, cache, pgrads):
        kind, p = layer.kind, layer.params
        if kind == "add":
            return [g for _ in args]
        (a,) = args
        dtype = a.dtype
        g = as_tensor(g, dtype)
        if kind == "conv":
            w = self.params[layer.name]
            cp = ops.ConvParams(w["weight"], w["bias"], p["stride"], p["pad"], p["group"])
            gi, gw, gb = ops.conv_backward(g, a, cp)
            pgrads[layer.name]["weight"] += gw.astype(np.float32)
            pgrads[layer.name]["bias"] += gb.astype(np.float32)
            return [gi]
        if kind == "fc":
            gi, gw, gb = ops.fc_backward(g, a, self.params[layer.name]["weight"])
            pgrads[layer.name]["weight"] += gw.astype(np.float32)
            pgrads[layer.name]["bias"] += gb.astype(np.float32)
            return [gi]
        if kind == "relu":
            return [ops.relu_backward(g, a)]
        if kind in ("pool_max", "pool_mean"):
            pp = ops.PoolParams("max" if kind == "pool_max" else "mean", p["kernel"], p["stride"])
            return [ops.pool_backward(g, cache, pp, a.shape)]
        if kind == "flatten":
            return [g.reshape(a.shape)]
        if kind == "dropout":
            return [ops.dropout_backward(g, cache)]
        if kind == "fnl":
            return [ops.fnl_backward(g, self.fnl[layer.name]).astype(dtype)]
        if kind == "lrn":
            lp = ops.LrnParams(p["local_size"], p["alpha"], p["beta"], p["k"])
            return [ops.lrn_backward(g, a, cache, lp)]
        if kind == "softmax_loss":
            return [ops.softmax_loss_backward(a, self._trace["labels"], np.asarray(g).item())]
        raise AssertionError(kind)
