"""Multiply-accumulate counts per layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .shapes import infer_shapes

HEADLINE_KINDS = ("conv", "fc")


@dataclass
class LayerCost:
    name: str
    kind: str
    out_shape: tuple
    macs: int

    @property
    def headline(self) -> bool:
        return self.kind in HEADLINE_KINDS


@dataclass
class FlopReport:
    layers: list

    @property
    def total(self) -> int:
        """Conv + fc MACs only."""
        return sum(c.macs for c in self.layers if c.headline)

    @property
    def other(self) -> int:
        return sum(c.macs for c in self.layers if not c.headline)


def count_flops(desc, input_shape=None) -> FlopReport:
    shapes = infer_shapes(desc, input_shape)
    costs = []
    for layer in desc.layers:
        out = shapes[layer.output]
        n_out = int(np.prod(out))
        p = layer.params
        if layer.kind == "conv":
            cin = shapes[layer.inputs[0]][0]
            kh, kw = p["kernel"]
            macs = out[0] * (cin // p["group"]) * kh * kw * out[1] * out[2]
        elif layer.kind == "fc":
            macs = int(np.prod(shapes[layer.inputs[0]])) * p["num_output"]
        elif layer.kind in ("pool_max", "pool_mean"):
            macs = n_out * p["kernel"][0] * p["kernel"][1]
        elif layer.kind == "lrn":
            macs = n_out * p["local_size"]
        elif layer.kind in ("relu", "dropout", "fnl"):
            macs = n_out
        elif layer.kind == "add":
            macs = n_out * (len(layer.inputs) - 1)
        elif layer.kind == "softmax_loss":
            macs = int(np.prod(shapes[layer.inputs[0]]))
        else:
            macs = 0
        costs.append(LayerCost(layer.name, layer.kind, out, int(macs)))
    return FlopReport(costs)
