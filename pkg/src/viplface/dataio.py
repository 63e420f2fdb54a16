"""Dataset ingestion: binary PGM/PPM images, ``path,label`` manifests and
the per-pixel training mean."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


def _header_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, pos = [], 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise DataError("truncated image header")
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if pos >= n:
        raise DataError("truncated image header")
    return tokens, pos + 1  # a single whitespace byte ends the header


def decode_image(data: bytes, expected_size=None) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6) with maxval 255 to (C, H, W) float32.

    ``expected_size`` = (H, W) rejects images of any other size; nothing is
    ever resized.
    """
    if data[:2] not in (b"P5", b"P6"):
        raise DataError(f"unsupported image format {data[:2]!r} (need binary P5/P6)")
    tokens, offset = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError("malformed image header") from None
    if maxval != 255:
        raise DataError(f"maxval {maxval} unsupported (need 255)")
    if width < 1 or height < 1:
        raise DataError(f"bad image size {width}x{height}")
    if expected_size is not None and (height, width) != tuple(expected_size):
        raise DataError(f"image is {height}x{width}, expected {expected_size[0]}x{expected_size[1]}")
    channels = 1 if data[:2] == b"P5" else 3
    need = width * height * channels
    payload = data[offset:offset + need]
    if len(payload) != need:
        raise DataError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return np.ascontiguousarray(pix.transpose(2, 0, 1), dtype=np.float32)


def encode_image(image) -> bytes:
    """Encode a (1|3, H, W) array of 0..255 values as P5/P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"expected (1|3, H, W), got {image.shape}")
    c, h, w = image.shape
    pix = np.clip(np.rint(image), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def load_image(path, expected_size=None) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from None
    try:
        return decode_image(data, expected_size)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


@dataclass
class Manifest:
    entries: list  # (path, label)
    label_count: int

    @property
    def paths(self):
        return [p for p, _ in self.entries]

    @property
    def labels(self):
        return np.array([l for _, l in self.entries], dtype=np.int64)


def read_manifest(text: str) -> Manifest:
    entries, seen = [], set()
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if row[0].lstrip().startswith("#"):
            continue
        if len(row) != 2:
            raise DataError(f"manifest line {lineno}: expected 'path,label'")
        path, label = row[0].strip(), row[1].strip()
        try:
            label = int(label)
        except ValueError:
            raise DataError(f"manifest line {lineno}: label {label!r} is not an integer") from None
        if label < 0:
            raise DataError(f"manifest line {lineno}: negative label {label}")
        if path in seen:
            raise DataError(f"manifest line {lineno}: duplicate path {path!r}")
        seen.add(path)
        entries.append((path, label))
    if not entries:
        raise DataError("empty manifest")
    labels = {l for _, l in entries}
    count = max(labels) + 1
    missing = sorted(set(range(count)) - labels)
    if missing:
        raise DataError(f"labels are not contiguous; missing {', '.join(map(str, missing))}")
    return Manifest(entries, count)


def load_manifest(path) -> tuple[Manifest, str]:
    """Read a manifest file; returns it with the directory its paths are relative to."""
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    return read_manifest(text), os.path.dirname(os.path.abspath(path))


def mean_image(images, names=None) -> np.ndarray:
    """Elementwise mean, accumulated in float64 in dataset order.

    For integer-valued pixels (anything decoded from PGM/PPM) the float64
    sum is exact, so the result does not depend on dataset order.
    """
    acc = None
    count = 0
    for i, img in enumerate(images):
        img = np.asarray(img)
        if acc is None:
            acc = img.astype(np.float64)
        elif img.shape != acc.shape:
            who = names[i] if names is not None else f"image {i}"
            raise DataError(f"{who}: shape {img.shape} differs from {acc.shape}")
        else:
            acc += img
        count += 1
    if acc is None:
        raise DataError("mean of an empty dataset")
    return (acc / count).astype(np.float32)


def synthetic_task(n_classes=10, per_class=50, side=8, noise=1.5, seed=0, contrast=10.0):
    """Integer-valued 1×side×side images from ``n_classes`` random prototypes.

    Each sample is its class prototype plus Gaussian noise, mapped to
    0..255.  At the default noise level the classes still overlap enough
    that training takes tens of iterations, yet stay linearly separable.
    """
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((n_classes, side * side))
    labels = np.repeat(np.arange(n_classes), per_class)
    x = protos[labels] + noise * rng.standard_normal((len(labels), side * side))
    pix = np.clip(np.rint(128 + contrast * x), 0, 255)
    perm = rng.permutation(len(labels))
    return pix[perm].reshape(-1, 1, side, side).astype(np.float32), labels[perm]


def write_synthetic_dataset(directory, n_classes=10, per_class=50, side=8, noise=1.5, seed=0, contrast=10.0):
    """Write PGM files plus ``manifest.csv``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    images, labels = synthetic_task(n_classes, per_class, side, noise, seed, contrast)
    lines = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        name = f"img{i:05d}.pgm"
        with open(os.path.join(directory, name), "wb") as f:
            f.write(encode_image(img))
        lines.append(f"{name},{int(lab)}")
    path = os.path.join(directory, "manifest.csv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path
