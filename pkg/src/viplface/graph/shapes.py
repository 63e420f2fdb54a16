"""Per-sample shape propagation through a descriptor."""
from __future__ import annotations

import numpy as np

from .. import ops
from ..errors import ShapeError
from ..tensor import out_extent


def _layer_shape(layer, in_shapes):
    p = layer.params
    kind = layer.kind
    if kind in ("relu", "dropout", "fnl", "lrn"):
        (s,) = in_shapes
        if kind == "lrn" and len(s) != 3:
            raise ShapeError(f"lrn needs (C, H, W) input, got {s}")
        return s
    if kind == "add":
        first = in_shapes[0]
        if any(s != first for s in in_shapes):
            raise ShapeError(f"add inputs disagree: {in_shapes}")
        return first
    (s,) = in_shapes
    if kind == "conv":
        if len(s) != 3:
            raise ShapeError(f"conv needs (C, H, W) input, got {s}")
        return ops.conv_shape(s, p["num_output"], p["kernel"], p["stride"], p["pad"], p["group"])
    if kind in ("pool_max", "pool_mean"):
        if len(s) != 3:
            raise ShapeError(f"pooling needs (C, H, W) input, got {s}")
        kh, kw = p["kernel"]
        return s[0], out_extent(s[1], kh, p["stride"], 0), out_extent(s[2], kw, p["stride"], 0)
    if kind == "flatten":
        return (int(np.prod(s)),)
    if kind == "fc":
        return (p["num_output"],)
    if kind == "softmax_loss":
        if len(s) != 1:
            raise ShapeError(f"softmax_loss needs flat logits, got {s}")
        return (1,)
    raise AssertionError(kind)


def infer_shapes(desc, input_shape=None) -> dict:
    """Map every edge to its per-sample shape (no batch axis)."""
    from .descriptor import topo_order

    shapes = {}
    for layer in topo_order(desc):
        if layer.kind == "input":
            shape = tuple(input_shape) if input_shape is not None else tuple(layer.params["shape"])
        else:
            try:
                shape = _layer_shape(layer, [shapes[e] for e in layer.inputs])
            except ShapeError as exc:
                raise ShapeError(f"layer {layer.name!r}: {exc}") from None
        shapes[layer.output] = tuple(int(d) for d in shape)
    return shapes


def param_shapes(desc, shapes=None) -> dict:
    """``{layer: {"weight": shape, "bias": shape}}`` for conv and fc layers."""
    if shapes is None:
        shapes = infer_shapes(desc)
    out = {}
    for layer in desc.layers:
        p = layer.params
        if layer.kind == "conv":
            cin = shapes[layer.inputs[0]][0]
            kh, kw = p["kernel"]
            out[layer.name] = {"weight": (p["num_output"], cin // p["group"], kh, kw),
                               "bias": (p["num_output"],)}
        elif layer.kind == "fc":
            n_in = int(np.prod(shapes[layer.inputs[0]]))
            out[layer.name] = {"weight": (n_in, p["num_output"]), "bias": (p["num_output"],)}
    return out


def fan_in(weight_shape) -> int:
    """Inputs feeding one output unit: Cin/g*kh*kw for conv, n_in for fc."""
    if len(weight_shape) == 4:
        return int(np.prod(weight_shape[1:]))
    return int(weight_shape[0])
