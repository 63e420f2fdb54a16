"""Single-file model container: descriptor text, weights, FNL statistics.

Layout (little-endian)::

    b"VFNM"  u32 version  u64 descriptor_length  descriptor (utf-8)
    weight records  "<layer>.weight", "<layer>.bias"        (declaration order)
    fnl records     "<layer>.running_mean", "<layer>.running_var"
    optional        "@mean_image", the per-pixel training mean used for inputs
    u64 checksum    first 8 bytes of BLAKE2b over everything before it
"""
from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

from .._io import atomic_write
from ..errors import ChecksumError, DescriptorError, MagicError, ModelFormatError, UsageError, VersionError
from ..ops import FnlState
from .blocks import encode_block, read_blocks
from .descriptor import parse_descriptor
from .network import Network

MAGIC = b"VFNM"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_CHECKSUM = struct.Struct("<Q")
MEAN_RECORD = "@mean_image"


def _digest():
    return hashlib.blake2b(digest_size=8)


def _records(net: Network):
    for layer, key, arr in net.parameters():
        yield f"{layer}.{key}", arr
    for layer in net.descriptor.layers:
        if layer.kind == "fnl":
            st = net.fnl[layer.name]
            yield f"{layer.name}.running_mean", st.running_mean
            yield f"{layer.name}.running_var", st.running_var
    if net.mean_image is not None:
        yield MEAN_RECORD, net.mean_image


def save_model(net: Network, path, version: int = VERSION) -> None:
    if net.params is None:
        raise UsageError("cannot save a network without bound weights")
    text = net.descriptor.to_text().encode("utf-8")
    h = _digest()
    with atomic_write(path) as f:
        def put(chunk):
            h.update(chunk)
            f.write(chunk)

        put(_HEADER.pack(MAGIC, version, len(text)))
        put(text)
        for name, arr in _records(net):
            put(encode_block(name, arr))
        f.write(_CHECKSUM.pack(int.from_bytes(h.digest(), "little")))


def load_model(path) -> Network:
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) >= 4 and head[:4] != MAGIC:
            raise MagicError(f"{path}: bad magic {head[:4]!r}, expected {MAGIC!r}")
        if len(head) < _HEADER.size or size < _HEADER.size + _CHECKSUM.size:
            raise ChecksumError(f"{path}: file truncated ({size} bytes)")
        _, version, desc_len = _HEADER.unpack(head)
        if version != VERSION:
            raise VersionError(version, VERSION)

        body_end = size - _CHECKSUM.size
        h = _digest()
        f.seek(0)
        remaining = body_end
        while remaining:
            chunk = f.read(min(remaining, 1 << 20))
            h.update(chunk)
            remaining -= len(chunk)
        (stored,) = _CHECKSUM.unpack(f.read(_CHECKSUM.size))
        if stored != int.from_bytes(h.digest(), "little"):
            raise ChecksumError(f"{path}: checksum mismatch (file corrupt or truncated)")
        if _HEADER.size + desc_len > body_end:
            raise ModelFormatError(f"{path}: descriptor length {desc_len} exceeds file")

        f.seek(_HEADER.size)
        try:
            desc = parse_descriptor(f.read(desc_len).decode("utf-8"))
        except (UnicodeDecodeError, DescriptorError) as exc:
            raise ModelFormatError(f"{path}: embedded descriptor invalid: {exc}") from None
        blocks = read_blocks(f, end=body_end)
        if f.tell() != body_end:
            raise ModelFormatError(f"{path}: record framing overruns the checksum")

    net = Network(desc)
    table = dict(blocks)
    if len(table) != len(blocks):
        raise ModelFormatError(f"{path}: duplicate record names")
    mean = table.pop(MEAN_RECORD, None)
    expected = {}
    for layer, shapes in net.param_shapes.items():
        for key, shape in shapes.items():
            expected[f"{layer}.{key}"] = shape
    for layer, st in net.fnl.items():
        expected[f"{layer}.running_mean"] = st.running_mean.shape
        expected[f"{layer}.running_var"] = st.running_var.shape
    missing = sorted(set(expected) - set(table))
    extra = sorted(set(table) - set(expected))
    if missing or extra:
        raise ModelFormatError(f"{path}: records do not match descriptor "
                               f"(missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if table[name].shape != tuple(shape):
            raise ModelFormatError(f"{path}: record {name!r} has shape {table[name].shape}, "
                                   f"descriptor implies {tuple(shape)}")

    params = {layer: {key: table[f"{layer}.{key}"] for key in shapes}
              for layer, shapes in net.param_shapes.items()}
    net.bind(params)
    for layer in desc.layers:
        if layer.kind == "fnl":
            p = layer.params
            net.fnl[layer.name] = FnlState(table[f"{layer.name}.running_mean"],
                                           table[f"{layer.name}.running_var"],
                                           momentum=p["momentum"], eps=p["eps"],
                                           per_node=p["per_node"])
    net.mean_image = mean
    return net
