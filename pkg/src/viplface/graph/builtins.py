"""The three reference architectures: AlexNet, VIPLFaceNetFull, VIPLFaceNet.

Convolution rows are (filters, kernel, stride, pad, group).  ReLU follows
every conv and the first two fc layers; with ``fnl=True`` a fast
normalization layer is inserted in front of each of those ReLUs.
"""
from __future__ import annotations

from ..errors import ConfigError
from .descriptor import NetworkDescriptor, parse_descriptor

NUM_IDENTITIES = 10575

_POOL = ("pool", 3, 2)
_LRN = ("lrn",)

ARCHITECTURES = {
    "alexnet": [
        ("conv", 96, 11, 4, 0, 1), _LRN, _POOL,
        ("conv", 256, 5, 1, 2, 2), _LRN, _POOL,
        ("conv", 384, 3, 1, 1, 1),
        ("conv", 384, 3, 1, 1, 2),
        ("conv", 256, 3, 1, 1, 2), _POOL,
        ("fc", 4096), ("fc", 4096), ("fc", NUM_IDENTITIES),
    ],
    "viplfacenet_full": [
        ("conv", 96, 9, 4, 0, 1), _POOL,
        ("conv", 192, 3, 1, 1, 1),
        ("conv", 192, 3, 1, 1, 1), _POOL,
        ("conv", 384, 3, 1, 1, 1),
        ("conv", 256, 3, 1, 1, 1),
        ("conv", 256, 3, 1, 1, 1),
        ("conv", 192, 3, 1, 1, 1), _POOL,
        ("fc", 4096), ("fc", 2048), ("fc", NUM_IDENTITIES),
    ],
    "viplfacenet": [
        ("conv", 48, 9, 4, 0, 1), _POOL,
        ("conv", 128, 3, 1, 1, 1),
        ("conv", 128, 3, 1, 1, 1), _POOL,
        ("conv", 256, 3, 1, 1, 1),
        ("conv", 192, 3, 1, 1, 1),
        ("conv", 192, 3, 1, 1, 1),
        ("conv", 128, 3, 1, 1, 1), _POOL,
        ("fc", 4096), ("fc", 2048), ("fc", NUM_IDENTITIES),
    ],
}

BUILTIN_NAMES = tuple(ARCHITECTURES)
# desk-scale net for small synthetic images; not one of the reference designs
TINY = "tiny"
ALL_NAMES = BUILTIN_NAMES + (TINY,)


def tiny_text(input_shape=(1, 8, 8), fnl: bool = False, num_classes: int | None = None) -> str:
    """conv 8x3x3 pad 1 -> [fnl] -> relu -> fc."""
    shape = "x".join(str(d) for d in input_shape)
    width = 10 if num_classes is None else num_classes
    lines = [f"network name={TINY}{'_fnl' if fnl else ''} feature=relu1",
             f"layer data input shape={shape} out=data",
             "layer conv1 conv num_output=8 kernel=3x3 stride=1 pad=1 in=data out=conv1"]
    src = "conv1"
    if fnl:
        lines.append("layer fnl1 fnl in=conv1 out=fnl1")
        src = "fnl1"
    lines.append(f"layer relu1 relu in={src} out=relu1")
    lines.append(f"layer fc1 fc num_output={width} in=relu1 out=fc1")
    return "\n".join(lines) + "\n"


def builtin_text(name: str, input_shape=None, fnl: bool = False,
                 num_classes: int | None = None) -> str:
    """Descriptor text; ``input_shape`` defaults to (3, 227, 227), or (1, 8, 8) for tiny."""
    if name == TINY:
        return tiny_text(input_shape or (1, 8, 8), fnl, num_classes)
    input_shape = input_shape or (3, 227, 227)
    if name not in ARCHITECTURES:
        raise ConfigError(f"unknown builtin network {name!r}; choose from {', '.join(ALL_NAMES)}")
    rows = ARCHITECTURES[name]
    n_fc = sum(1 for r in rows if r[0] == "fc")
    shape = "x".join(str(d) for d in input_shape)
    lines = [f"layer data input shape={shape} out=data"]
    counts = {"conv": 0, "pool": 0, "lrn": 0, "fc": 0}
    prev = "data"

    def add(name_, kind, params, src):
        lines.append(f"layer {name_} {kind} {params} in={src} out={name_}".replace("  ", " "))
        return name_

    def activate(base, src):
        if fnl:
            src = add(f"fnl_{base}", "fnl", "", src)
        return add(f"relu_{base}", "relu", "", src)

    feature = None
    for row in rows:
        kind = row[0]
        counts[kind] += 1
        idx = counts[kind]
        if kind == "conv":
            _, n, k, s, p, g = row
            prev = add(f"conv{idx}", "conv", f"num_output={n} kernel={k}x{k} stride={s} pad={p} group={g}", prev)
            prev = activate(f"conv{idx}", prev)
        elif kind == "lrn":
            prev = add(f"lrn{idx}", "lrn", "local_size=5 alpha=0.0001 beta=0.75 k=1.0", prev)
        elif kind == "pool":
            _, k, s = row
            prev = add(f"pool{idx}", "pool_max", f"kernel={k}x{k} stride={s}", prev)
        else:
            if idx == 1:
                prev = add("flatten", "flatten", "", prev)
            width = row[1]
            if idx == n_fc and num_classes is not None:
                width = num_classes
            prev = add(f"fc{idx}", "fc", f"num_output={width}", prev)
            if idx < n_fc:
                prev = activate(f"fc{idx}", prev)
                if idx == 2:
                    feature = prev
                prev = add(f"drop{idx}", "dropout", "ratio=0.5", prev)
    suffix = "_fnl" if fnl else ""
    header = f"network name={name}{suffix} feature={feature}"
    return "\n".join([header] + lines) + "\n"


def builtin(name: str, input_shape=None, fnl: bool = False,
            num_classes: int | None = None) -> NetworkDescriptor:
    return parse_descriptor(builtin_text(name, input_shape, fnl, num_classes))
