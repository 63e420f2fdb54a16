"""Face-representation evaluation: feature extraction, cosine similarity,
k-fold pair verification and closed/open-set identification."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write
from .errors import DataError, ModelFormatError, UsageError
from .graph.blocks import read_blocks, write_block


# -- features ----------------------------------------------------------------

def feature_edge(net, pre_relu: bool = False) -> str:
    """Edge holding the representation.

    The descriptor's declared feature edge is normally the output of a ReLU;
    ``pre_relu`` steps back to that ReLU's input.
    """
    desc = net.descriptor
    if desc.feature is None:
        raise DataError(f"network {desc.name!r} declares no feature edge")
    producers = desc.producers()
    if desc.feature not in producers:
        raise DataError(f"feature edge {desc.feature!r} is not produced by any layer")
    if not pre_relu:
        return desc.feature
    layer = producers[desc.feature]
    if layer.kind != "relu":
        raise DataError(f"feature edge {desc.feature!r} is not a ReLU output")
    return layer.inputs[0]


def prepare(image, net, mean_image=None) -> np.ndarray:
    """Mean-subtract and center-crop one (C, H, W) image to the network input."""
    image = np.asarray(image, dtype=np.float32)
    if mean_image is not None:
        if mean_image.shape != image.shape:
            raise DataError(f"image shape {image.shape} differs from mean image {mean_image.shape}")
        image = image - mean_image
    want = tuple(net.input_shape)
    if image.shape == want:
        return image
    if image.ndim != 3 or len(want) != 3 or image.shape[0] != want[0]:
        raise DataError(f"image shape {image.shape} cannot feed network input {want}")
    _, h, w = image.shape
    ch, cw = want[1:]
    if ch > h or cw > w:
        raise DataError(f"image {h}x{w} smaller than network input {ch}x{cw}")
    top, left = (h - ch) // 2, (w - cw) // 2
    return np.ascontiguousarray(image[:, top:top + ch, left:left + cw])


def extract_features(net, images, mean_image=None, pre_relu=False, batch_size=32) -> np.ndarray:
    """Test-mode representation of every image, shape (N, D)."""
    edge = feature_edge(net, pre_relu)
    out = []
    for i in range(0, len(images), batch_size):
        batch = np.stack([prepare(im, net, mean_image) for im in images[i:i + batch_size]])
        feat = net.forward(batch, "test", outputs=[edge])[edge]
        out.append(feat.reshape(len(batch), -1))
    if not out:
        return np.zeros((0, int(np.prod(net.shapes[edge]))), dtype=np.float32)
    return np.concatenate(out)


def extract_feature(net, image, mean_image=None, pre_relu=False) -> np.ndarray:
    return extract_features(net, [image], mean_image, pre_relu)[0]


def save_features(path, names, feats) -> None:
    if len(names) != len(feats):
        raise DataError(f"{len(names)} names but {len(feats)} feature vectors")
    with atomic_write(path) as f:
        for name, vec in zip(names, feats):
            write_block(f, name, np.asarray(vec, dtype=np.float32).reshape(-1))


def load_features(path) -> dict:
    try:
        with open(path, "rb") as f:
            blocks = read_blocks(f)
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc.strerror}") from None
    except ModelFormatError as exc:
        raise DataError(f"{path}: {exc}") from None
    feats = {}
    for name, arr in blocks:
        if name in feats:
            raise DataError(f"{path}: duplicate feature record {name!r}")
        feats[name] = arr.reshape(-1)
    return feats


# -- similarity --------------------------------------------------------------

def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DataError(f"feature lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b) -> np.ndarray:
    """All-pairs cosine between rows of ``a`` and rows of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DataError("cosine similarity is undefined for a zero vector")
    return np.clip((a / na[:, None]) @ (b / nb[:, None]).T, -1.0, 1.0)


# -- verification ------------------------------------------------------------

SIM_DECIMALS = 12


@dataclass
class PairFolds:
    """``folds[k]`` is a list of ``(sample_a, sample_b, same)`` triples."""
    folds: list

    def __post_init__(self):
        if len(self.folds) < 2:
            raise DataError(f"need at least 2 folds, got {len(self.folds)}")
        for k, fold in enumerate(self.folds):
            if not fold:
                raise DataError(f"fold {k} is empty")


def read_pairs(text: str) -> PairFolds:
    """Parse ``fold_idx,sample_a,sample_b,same_flag`` lines; folds must be 0..K-1."""
    by_fold: dict = {}
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or (len(row) == 1 and not row[0].strip()) or row[0].lstrip().startswith("#"):
            continue
        if len(row) != 4:
            raise DataError(f"pairs line {lineno}: expected 'fold,sample_a,sample_b,same'")
        fold, a, b, same = (c.strip() for c in row)
        try:
            fold = int(fold)
            same = int(same)
        except ValueError:
            raise DataError(f"pairs line {lineno}: fold and flag must be integers") from None
        if same not in (0, 1) or fold < 0:
            raise DataError(f"pairs line {lineno}: bad fold {fold} or flag {same}")
        by_fold.setdefault(fold, []).append((a, b, bool(same)))
    if not by_fold:
        raise DataError("empty pairs file")
    missing = sorted(set(range(max(by_fold) + 1)) - set(by_fold))
    if missing:
        raise DataError(f"pairs file has no pairs for fold(s) {missing}")
    return PairFolds([by_fold[k] for k in range(len(by_fold))])


def load_pairs(path) -> PairFolds:
    try:
        with open(path, encoding="utf-8") as f:
            return read_pairs(f.read())
    except OSError as exc:
        raise DataError(f"cannot read pairs file {path}: {exc.strerror}") from None


def best_threshold(sims, same, thresholds=None) -> tuple[float, float]:
    """Threshold maximizing accuracy of ``sim >= t``; ties go to the lowest.

    Candidates default to every distinct similarity plus one value above the
    largest (which predicts "different" for every pair).
    """
    sims = np.asarray(sims, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if thresholds is None:
        top = sims.max()
        cand = np.append(np.unique(sims), np.nextafter(top, np.inf))
    else:
        cand = np.unique(np.asarray(thresholds, dtype=np.float64))
    pos = np.sort(sims[same])
    neg = np.sort(sims[~same])
    # same pairs at or above t are right; different pairs below t are right
    tp = len(pos) - np.searchsorted(pos, cand, side="left")
    tn = np.searchsorted(neg, cand, side="left")
    acc = (tp + tn) / len(sims)
    i = int(np.argmax(acc))
    return float(cand[i]), float(acc[i])


@dataclass
class EvalReport:
    fold_accuracies: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    rank1: float | None = None
    dir_at_far: float | None = None
    far: float | None = None

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std_accuracy(self) -> float:
        if len(self.fold_accuracies) < 2:
            return 0.0
        return float(np.std(self.fold_accuracies, ddof=1))

    def to_text(self) -> str:
        lines = []
        if self.fold_accuracies:
            lines.append(f"mean_accuracy {self.mean_accuracy:.4f}")
            lines.append(f"std_accuracy {self.std_accuracy:.4f}")
            for k, (acc, t) in enumerate(zip(self.fold_accuracies, self.thresholds)):
                lines.append(f"fold_{k}_accuracy {acc:.4f}")
                lines.append(f"threshold_{k} {t:.6f}")
        if self.rank1 is not None:
            lines.append(f"rank1 {self.rank1:.4f}")
        if self.dir_at_far is not None:
            lines.append(f"far {self.far:g}")
            lines.append(f"dir_at_far {self.dir_at_far:.4f}")
        return "\n".join(lines) + "\n"


def pair_similarities(fold, features) -> tuple[np.ndarray, np.ndarray]:
    sims, same = [], []
    for a, b, s in fold:
        for name in (a, b):
            if name not in features:
                raise DataError(f"no feature for sample {name!r}")
        try:
            sims.append(cosine(features[a], features[b]))
        except DataError as exc:
            raise DataError(f"pair ({a}, {b}): {exc}") from None
        same.append(s)
    # rescaling features moves cosines by a few ulps; rounding keeps ties tied
    return np.round(np.array(sims), SIM_DECIMALS), np.array(same, dtype=bool)


def verify_10fold(folds: PairFolds, features, thresholds=None) -> EvalReport:
    """Leave-one-fold-out verification accuracy.

    For each fold the threshold is fit on the remaining folds and applied to
    the held-out one.  Works for any fold count, ten being the usual protocol.
    """
    per_fold = [pair_similarities(fold, features) for fold in folds.folds]
    report = EvalReport()
    for k, (sims, same) in enumerate(per_fold):
        train_s = np.concatenate([s for j, (s, _) in enumerate(per_fold) if j != k])
        train_y = np.concatenate([y for j, (_, y) in enumerate(per_fold) if j != k])
        t, _ = best_threshold(train_s, train_y, thresholds)
        report.thresholds.append(t)
        report.fold_accuracies.append(float(np.mean((sims >= t) == same)))
    return report


# -- identification ----------------------------------------------------------

def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.size == 0:
        return x.reshape(0, 0)
    return x.reshape(len(x), -1)


@dataclass
class GalleryProbeSplit:
    gallery: np.ndarray           # (G, D)
    gallery_labels: np.ndarray    # (G,)
    known: np.ndarray             # (P, D) probes whose identity is enrolled
    known_labels: np.ndarray
    unknown: np.ndarray           # (U, D) probes of identities absent from the gallery
    unknown_labels: np.ndarray | None = None

    def __post_init__(self):
        self.gallery = _rows(self.gallery)
        self.gallery_labels = np.asarray(self.gallery_labels)
        self.known = _rows(self.known)
        self.known_labels = np.asarray(self.known_labels)
        self.unknown = _rows(self.unknown)
        if len(self.gallery) == 0:
            raise DataError("empty gallery")
        if len(self.gallery_labels) != len(self.gallery) or len(self.known_labels) != len(self.known):
            raise DataError("feature and label counts differ")
        enrolled = set(self.gallery_labels.tolist())
        stray = sorted(set(self.known_labels.tolist()) - enrolled)
        if stray:
            raise DataError(f"known probes have identities not in the gallery: {stray[:5]}")
        if self.unknown_labels is not None:
            self.unknown_labels = np.asarray(self.unknown_labels)
            clash = sorted(set(self.unknown_labels.tolist()) & enrolled)
            if clash:
                raise DataError(f"unknown probes share identities with the gallery: {clash[:5]}")


def _best_match(probes, split):
    """Index of the most similar gallery entry (first on ties) and its score."""
    sims = cosine_matrix(probes, split.gallery)
    idx = np.argmax(sims, axis=1)
    return idx, sims[np.arange(len(probes)), idx]


def identify_closed(split: GalleryProbeSplit) -> float:
    if len(split.known) == 0:
        raise DataError("no known probes")
    idx, _ = _best_match(split.known, split)
    return float(np.mean(split.gallery_labels[idx] == split.known_labels))


def open_set_threshold(unknown_scores, far: float) -> float:
    """Smallest ``t`` with ``mean(unknown_scores > t) <= far``.

    With scores sorted descending this is the (k+1)-th largest score,
    ``k = floor(far * U)`` being the number of false alarms allowed.
    """
    if not 0.0 < far < 1.0:
        raise UsageError(f"far must lie in (0, 1), got {far}")
    s = np.sort(np.asarray(unknown_scores, dtype=np.float64))[::-1]
    if len(s) == 0:
        raise DataError("no unknown probes: cannot calibrate the false alarm rate")
    k = math.floor(far * len(s) + 1e-9)
    return float(s[k])


def identify_open(split: GalleryProbeSplit, far: float) -> tuple[float, float]:
    """``(DIR, threshold)``: fraction of known probes matched correctly above the threshold."""
    if not 0.0 < far < 1.0:
        raise UsageError(f"far must lie in (0, 1), got {far}")
    if len(split.unknown) == 0:
        raise DataError("no unknown probes: cannot calibrate the false alarm rate")
    if len(split.known) == 0:
        raise DataError("no known probes")
    _, unk = _best_match(split.unknown, split)
    tau = open_set_threshold(unk, far)
    idx, score = _best_match(split.known, split)
    hit = (split.gallery_labels[idx] == split.known_labels) & (score > tau)
    return float(np.mean(hit)), tau


def read_labels(text: str, what: str) -> list:
    """``sample,label`` lines for gallery and probe lists."""
    out = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or (len(row) == 1 and not row[0].strip()) or row[0].lstrip().startswith("#"):
            continue
        if len(row) != 2:
            raise DataError(f"{what} line {lineno}: expected 'sample,label'")
        out.append((row[0].strip(), row[1].strip()))
    if not out:
        raise DataError(f"empty {what} list")
    return out


def build_split(features: dict, gallery, probes) -> GalleryProbeSplit:
    """Probes whose label is enrolled in the gallery are known, the rest unknown."""
    def vecs(entries):
        for name, _ in entries:
            if name not in features:
                raise DataError(f"no feature for sample {name!r}")
        if not entries:
            return np.zeros((0, len(next(iter(features.values())))))
        return np.stack([features[n] for n, _ in entries])

    enrolled = {lab for _, lab in gallery}
    known = [e for e in probes if e[1] in enrolled]
    unknown = [e for e in probes if e[1] not in enrolled]
    return GalleryProbeSplit(vecs(gallery), [l for _, l in gallery], vecs(known),
                             [l for _, l in known], vecs(unknown), [l for _, l in unknown])
