"""Network descriptor text format.

One statement per line, ``#`` starts a comment::

    network name=tiny feature=fc1
    layer data  input shape=1x8x8 out=data
    layer conv1 conv  num_output=8 kernel=3x3 stride=1 pad=1 in=data out=conv1
    layer act1  relu  in=conv1 out=act1

``in=`` and ``out=`` take comma-separated edge names.  Every non-input
edge must be produced by exactly one layer, and the layers must form a
DAG (declaration order is free).
"""
from __future__ import annotations

import heapq
import shlex
from dataclasses import dataclass, field

from ..errors import (
    CycleError,
    DanglingEdgeError,
    DescriptorError,
    DuplicateNameError,
    UnknownKindError,
)


# parameter schema: name -> (type tag, default); a default of None means required
_SCHEMA = {
    "input": {"shape": ("dims", None)},
    "conv": {"num_output": ("int", None), "kernel": ("pair", None), "stride": ("int", 1),
             "pad": ("int", 0), "group": ("int", 1)},
    "relu": {},
    "lrn": {"local_size": ("int", 5), "alpha": ("float", 1e-4), "beta": ("float", 0.75),
            "k": ("float", 1.0)},
    "pool_max": {"kernel": ("pair", None), "stride": ("int", 1)},
    "pool_mean": {"kernel": ("pair", None), "stride": ("int", 1)},
    "fc": {"num_output": ("int", None)},
    "dropout": {"ratio": ("float", 0.5)},
    "fnl": {"momentum": ("float", 0.99), "eps": ("float", 1e-5), "per_node": ("bool", False)},
    "softmax_loss": {},
    "flatten": {},
    "add": {},
}

KINDS = tuple(_SCHEMA)
WEIGHTED_KINDS = ("conv", "fc")


def _parse_value(tag, text):
    if tag == "int":
        return int(text)
    if tag == "float":
        return float(text)
    if tag == "bool":
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tag == "pair":
        parts = [int(p) for p in text.lower().split("x")]
        if len(parts) == 1:
            return (parts[0], parts[0])
        if len(parts) != 2:
            raise ValueError(f"expected K or KHxKW, got {text!r}")
        return tuple(parts)
    if tag == "dims":
        parts = tuple(int(p) for p in text.lower().replace(",", "x").split("x"))
        if any(p < 1 for p in parts):
            raise ValueError(f"extents must be positive: {text!r}")
        return parts
    raise AssertionError(tag)


def _format_value(tag, value):
    if tag == "bool":
        return "1" if value else "0"
    if tag in ("pair", "dims"):
        return "x".join(str(v) for v in value)
    if tag == "float":
        return repr(float(value))
    return str(value)


@dataclass
class LayerDef:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple = ()
    outputs: tuple = ()
    line: int | None = field(default=None, compare=False)

    @property
    def output(self) -> str:
        return self.outputs[0]

    def to_text(self) -> str:
        parts = ["layer", self.name, self.kind]
        for key, (tag, _) in _SCHEMA[self.kind].items():
            parts.append(f"{key}={_format_value(tag, self.params[key])}")
        if self.inputs:
            parts.append("in=" + ",".join(self.inputs))
        parts.append("out=" + ",".join(self.outputs))
        return " ".join(parts)


@dataclass
class NetworkDescriptor:
    layers: list
    name: str = "net"
    feature: str | None = None

    @property
    def input_layer(self) -> LayerDef:
        return next(layer for layer in self.layers if layer.kind == "input")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.input_layer.params["shape"])

    def layer(self, name) -> LayerDef:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def producers(self) -> dict:
        return {edge: layer for layer in self.layers for edge in layer.outputs}

    def consumers(self) -> dict:
        out: dict = {}
        for layer in self.layers:
            for edge in layer.inputs:
                out.setdefault(edge, []).append(layer)
        return out

    def to_text(self) -> str:
        head = f"network name={self.name}"
        if self.feature:
            head += f" feature={self.feature}"
        return "\n".join([head] + [layer.to_text() for layer in self.layers]) + "\n"

    def structure(self):
        """Hashable summary used to compare descriptors for structural identity."""
        return (self.name, self.feature,
                tuple((l.name, l.kind, tuple(sorted(l.params.items())), l.inputs, l.outputs)
                      for l in self.layers))


def serialize(desc: NetworkDescriptor) -> str:
    return desc.to_text()


def _kv(token, lineno):
    key, sep, value = token.partition("=")
    if not sep or not key or not value:
        raise DescriptorError(f"expected key=value, got {token!r}", lineno)
    return key, value


def _edges(value, lineno):
    edges = tuple(e.strip() for e in value.split(","))
    if any(not e for e in edges):
        raise DescriptorError(f"empty edge name in {value!r}", lineno)
    return edges


def _parse_layer(tokens, lineno) -> LayerDef:
    if len(tokens) < 3:
        raise DescriptorError("layer statement needs a name and a kind", lineno)
    name, kind = tokens[1], tokens[2]
    if kind not in _SCHEMA:
        raise UnknownKindError(f"unknown layer kind {kind!r}", lineno)
    schema = _SCHEMA[kind]
    params, inputs, outputs = {}, (), ()
    for token in tokens[3:]:
        key, value = _kv(token, lineno)
        if key == "in":
            inputs = _edges(value, lineno)
        elif key == "out":
            outputs = _edges(value, lineno)
        elif key in schema:
            if key in params:
                raise DescriptorError(f"parameter {key!r} given twice", lineno)
            try:
                params[key] = _parse_value(schema[key][0], value)
            except ValueError as exc:
                raise DescriptorError(f"bad value for {key}: {exc}", lineno) from None
        else:
            raise DescriptorError(f"unknown parameter {key!r} for kind {kind}", lineno)
    for key, (tag, default) in schema.items():
        if key not in params:
            if default is None:
                raise DescriptorError(f"{kind} layer {name!r} is missing required {key!r}", lineno)
            params[key] = default
    layer = LayerDef(name, kind, params, inputs, outputs, lineno)
    _check_layer(layer)
    return layer


def _check_layer(layer: LayerDef):
    p, kind, ln = layer.params, layer.kind, layer.line
    n_in = len(layer.inputs)
    if kind == "input" and n_in:
        raise DescriptorError(f"input layer {layer.name!r} cannot consume edges", ln)
    if kind == "add" and n_in < 2:
        raise DescriptorError(f"add layer {layer.name!r} needs at least two inputs", ln)
    if kind not in ("input", "add") and n_in != 1:
        raise DescriptorError(f"{kind} layer {layer.name!r} takes exactly one input, got {n_in}", ln)
    if len(layer.outputs) != 1:
        raise DescriptorError(f"layer {layer.name!r} must produce exactly one edge", ln)
    positive = [k for k in ("num_output", "stride", "group", "local_size") if k in p and p[k] < 1]
    if positive:
        raise DescriptorError(f"{positive[0]} must be >= 1 in layer {layer.name!r}", ln)
    if "kernel" in p and min(p["kernel"]) < 1:
        raise DescriptorError(f"kernel must be positive in layer {layer.name!r}", ln)
    if p.get("pad", 0) < 0:
        raise DescriptorError(f"pad must be >= 0 in layer {layer.name!r}", ln)
    if kind == "dropout" and not 0.0 <= p["ratio"] < 1.0:
        raise DescriptorError(f"dropout ratio must be in [0, 1) in layer {layer.name!r}", ln)
    if kind == "fnl" and not 0.0 < p["momentum"] < 1.0:
        raise DescriptorError(f"fnl momentum must be in (0, 1) in layer {layer.name!r}", ln)
    if kind == "lrn" and p["local_size"] % 2 == 0:
        raise DescriptorError(f"lrn local_size must be odd in layer {layer.name!r}", ln)


def topo_order(desc: NetworkDescriptor) -> list:
    """Layers ordered so every producer precedes its consumers.

    Kahn's algorithm; among ready layers the earliest declared goes first,
    so a descriptor already in dependency order comes back unchanged.
    """
    producers = desc.producers()
    index = {layer.name: i for i, layer in enumerate(desc.layers)}
    deps = {}
    dependents: dict = {layer.name: [] for layer in desc.layers}
    for layer in desc.layers:
        srcs = set()
        for edge in layer.inputs:
            if edge not in producers:
                raise DanglingEdgeError(f"layer {layer.name!r} consumes edge {edge!r} "
                                        f"that no layer produces", layer.line)
            srcs.add(producers[edge].name)
        deps[layer.name] = len(srcs)
        for src in srcs:
            dependents[src].append(layer.name)
    ready = [index[name] for name, d in deps.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        layer = desc.layers[heapq.heappop(ready)]
        order.append(layer)
        for nxt in dependents[layer.name]:
            deps[nxt] -= 1
            if deps[nxt] == 0:
                heapq.heappush(ready, index[nxt])
    if len(order) != len(desc.layers):
        raise CycleError(_find_cycle(desc, {l.name for l in order}))
    return order


def _find_cycle(desc, done):
    producers = desc.producers()
    remaining = [l for l in desc.layers if l.name not in done]
    preds = {l.name: [producers[e].name for e in l.inputs if producers[e].name not in done]
             for l in remaining}
    # every remaining layer has a remaining predecessor, so walking back must revisit
    seen: dict = {}
    node = remaining[0].name
    path = []
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = preds[node][0]
    cycle = path[seen[node]:]
    cycle.reverse()
    return cycle + [cycle[0]]


def validate(desc: NetworkDescriptor) -> None:
    names = set()
    for layer in desc.layers:
        if not layer.name:
            raise DescriptorError("empty layer name", layer.line)
        if layer.name in names:
            raise DuplicateNameError(f"duplicate layer name {layer.name!r}", layer.line)
        names.add(layer.name)
    inputs = [l for l in desc.layers if l.kind == "input"]
    if len(inputs) != 1:
        raise DescriptorError(f"descriptor needs exactly one input layer, found {len(inputs)}")
    produced = {}
    for layer in desc.layers:
        for edge in layer.outputs:
            if edge in produced:
                raise DescriptorError(f"edge {edge!r} produced by both {produced[edge]!r} "
                                      f"and {layer.name!r}", layer.line)
            produced[edge] = layer.name
    topo_order(desc)
    if desc.feature is not None and desc.feature not in produced:
        raise DanglingEdgeError(f"feature edge {desc.feature!r} is not produced by any layer")
    from .shapes import infer_shapes
    infer_shapes(desc)


def parse_descriptor(text: str) -> NetworkDescriptor:
    layers = []
    name, feature = "net", None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise DescriptorError(str(exc), lineno) from None
        head = tokens[0]
        if head == "layer":
            layers.append(_parse_layer(tokens, lineno))
        elif head == "network":
            for token in tokens[1:]:
                key, value = _kv(token, lineno)
                if key == "name":
                    name = value
                elif key == "feature":
                    feature = value
                else:
                    raise DescriptorError(f"unknown network attribute {key!r}", lineno)
        else:
            raise DescriptorError(f"expected 'layer' or 'network', got {head!r}", lineno)
    desc = NetworkDescriptor(layers, name=name, feature=feature)
    validate(desc)
    return desc
