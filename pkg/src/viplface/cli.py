"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric or
validation failure.
"""
from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import dataio, evaluation, gradcheck, train as training
from ._io import atomic_write
from .errors import (
    ConfigError,
    DataError,
    DescriptorError,
    ShapeError,
    StateCorruptionError,
    UsageError,
    ViplError,
)
from .graph import ALL_NAMES, Network, builtin, count_flops, load_model, parse_descriptor, save_model
from .tensor import set_num_threads

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _open_unit(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def _fmt_shape(shape):
    return "x".join(str(d) for d in shape)


# -- describe ----------------------------------------------------------------

def cmd_describe(args, out):
    if args.model:
        net = load_model(args.model)
        desc = net.descriptor
    else:
        shape = (3, args.crop, args.crop) if args.crop else None
        desc = builtin(args.builtin, input_shape=shape, fnl=args.fnl)
        net = Network(desc)
    rows = []
    for layer in net.order:
        if layer.kind == "relu" and not args.all:
            continue
        n_params = sum(int(np.prod(s)) for s in net.param_shapes.get(layer.name, {}).values())
        rows.append((layer.name, layer.kind, _fmt_shape(net.shapes[layer.output]), str(n_params)))
    widths = [max(len(r[i]) for r in rows + [("layer", "kind", "output", "params")]) for i in range(4)]
    out.write(f"# network {desc.name}  input {_fmt_shape(desc.input_shape)}  feature {desc.feature}\n")
    out.write("  ".join(h.ljust(w) for h, w in zip(("layer", "kind", "output", "params"), widths)).rstrip() + "\n")
    for r in rows:
        out.write("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")
    total = sum(int(np.prod(s)) for d in net.param_shapes.values() for s in d.values())
    out.write(f"# total_params {total}\n")
    return EXIT_OK


# -- flops -------------------------------------------------------------------

def cmd_flops(args, out):
    totals = []
    for name in args.builtin:
        rep = count_flops(builtin(name, input_shape=(3, args.crop, args.crop)))
        totals.append((name, rep.total))
        out.write(f"{name} macs {rep.total} other {rep.other}\n")
    base_name, base = totals[-1]
    for name, total in totals[:-1]:
        out.write(f"ratio {name}/{base_name} {total / base:.3f}\n")
    return EXIT_OK


# -- train -------------------------------------------------------------------

def _load_dataset(manifest_path, expected_size=None):
    manifest, root = dataio.load_manifest(manifest_path)
    images = [dataio.load_image(os.path.join(root, p), expected_size) for p in manifest.paths]
    return manifest, images


def _descriptor_for(arch, input_shape, fnl, num_classes):
    if arch in ALL_NAMES:
        return builtin(arch, input_shape=input_shape, fnl=fnl, num_classes=num_classes)
    try:
        with open(arch, encoding="utf-8") as f:
            text = f.read()
    except OSError:
        raise CliUsageError(f"--arch {arch!r} is neither a builtin ({', '.join(ALL_NAMES)}) "
                            f"nor a readable descriptor file") from None
    if fnl:
        raise CliUsageError("--fnl applies to builtin architectures only")
    return parse_descriptor(text)


def cmd_train(args, out):
    manifest, images = _load_dataset(args.manifest)
    mean = dataio.mean_image(images, manifest.paths)
    side = min(mean.shape[1:])
    crop = args.crop or side
    if crop > side:
        raise ConfigError(f"--crop {crop} larger than the {side}-pixel images")
    desc = _descriptor_for(args.arch, (mean.shape[0], crop, crop), args.fnl, manifest.label_count)
    if args.iters:
        max_iter = args.iters
    else:
        max_iter = args.epochs * math.ceil(len(images) / args.batch)
    base_lr = args.base_lr
    if base_lr is None:
        has_fnl = any(l.kind == "fnl" for l in desc.layers)
        base_lr = training.BASE_LR_FNL if has_fnl else training.BASE_LR_PLAIN
    cfg = training.SolverConfig(max_iter=max_iter, base_lr=base_lr, batch_size=args.batch,
                                rng_seed=args.seed, crop_size=crop, flip_prob=args.flip_prob)
    net = training.initialize(Network(desc), np.random.default_rng(args.seed))
    net.mean_image = mean
    stack = np.stack(images)
    if args.log:
        with atomic_write(args.log, "w") as log:
            training.train(net, stack, manifest.labels, cfg, mean_image=mean, log=log)
    else:
        training.train(net, stack, manifest.labels, cfg, mean_image=mean, log=out)
    save_model(net, args.out)
    return EXIT_OK


# -- extract -----------------------------------------------------------------

def cmd_extract(args, out):
    net = load_model(args.model)
    manifest, images = _load_dataset(args.manifest)
    feats = evaluation.extract_features(net, images, net.mean_image, pre_relu=args.pre_relu,
                                        batch_size=args.batch)
    evaluation.save_features(args.out, manifest.paths, feats)
    out.write(f"wrote {len(feats)} features of length {feats.shape[1]} to {args.out}\n")
    return EXIT_OK


# -- verify / identify -------------------------------------------------------

def cmd_verify(args, out):
    feats = evaluation.load_features(args.features)
    folds = evaluation.load_pairs(args.pairs)
    out.write(evaluation.verify_10fold(folds, feats).to_text())
    return EXIT_OK


def _read_list(path, what):
    try:
        with open(path, encoding="utf-8") as f:
            return evaluation.read_labels(f.read(), what)
    except OSError as exc:
        raise DataError(f"cannot read {what} list {path}: {exc.strerror}") from None


def cmd_identify(args, out):
    feats = evaluation.load_features(args.features)
    split = evaluation.build_split(feats, _read_list(args.gallery, "gallery"),
                                   _read_list(args.probes, "probes"))
    rep = evaluation.EvalReport()
    if len(split.known):
        rep.rank1 = evaluation.identify_closed(split)
    if len(split.unknown):
        if not len(split.known):
            raise DataError("no probe identity is enrolled in the gallery")
        rep.dir_at_far, tau = evaluation.identify_open(split, args.far)
        rep.far = args.far
    elif rep.rank1 is None:
        raise DataError("no probes")
    out.write(rep.to_text())
    if rep.dir_at_far is not None:
        out.write(f"open_set_threshold {tau:.6f}\n")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------

def cmd_gradcheck(args, out):
    faults = (args.inject_fault,) if args.inject_fault else ()
    results = gradcheck.run_all(args.seed, faults)
    for r in results:
        out.write(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error {r.error:.3e} tol {r.tol:g}\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# -- wiring ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="viplface", description="Compact face-recognition CNN toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("describe", help="per-layer output shapes and parameter counts")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--builtin", choices=ALL_NAMES)
    src.add_argument("--model", help="model file")
    d.add_argument("--crop", type=_positive_int, help="input side for --builtin (default 227)")
    d.add_argument("--fnl", action="store_true", help="builtin variant with normalization layers")
    d.add_argument("--all", action="store_true", help="also list ReLU layers")
    d.set_defaults(func=cmd_describe)

    f = sub.add_parser("flops", help="multiply-accumulate totals; ratios against the last net")
    f.add_argument("--builtin", action="append", required=True, choices=ALL_NAMES)
    f.add_argument("--crop", type=_positive_int, default=227)
    f.set_defaults(func=cmd_flops)

    t = sub.add_parser("train", help="SGD training from a path,label manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--arch", required=True, help=f"{', '.join(ALL_NAMES)} or a descriptor file")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--seed", type=int, default=0)
    n = t.add_mutually_exclusive_group()
    n.add_argument("--epochs", type=_positive_int, default=1)
    n.add_argument("--iters", type=_positive_int)
    t.add_argument("--batch", type=_positive_int, default=32)
    t.add_argument("--base-lr", type=float, help="default 0.04 with normalization layers, else 0.01")
    t.add_argument("--crop", type=_positive_int, help="training crop side (default: full image)")
    t.add_argument("--flip-prob", type=float, default=0.5)
    t.add_argument("--fnl", action="store_true", help="insert normalization layers (builtins)")
    t.add_argument("--log", help="loss log file (default: standard output)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="write one feature vector per manifest image")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--pre-relu", action="store_true", help="take the feature before its ReLU")
    e.add_argument("--batch", type=_positive_int, default=32)
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("verify", help="k-fold pair verification accuracy")
    v.add_argument("--features", required=True)
    v.add_argument("--pairs", required=True, help="fold,sample_a,sample_b,same lines")
    v.set_defaults(func=cmd_verify)

    i = sub.add_parser("identify", help="rank-1 and detection-identification rate")
    i.add_argument("--features", required=True)
    i.add_argument("--gallery", required=True, help="sample,label lines")
    i.add_argument("--probes", required=True, help="sample,label lines; unenrolled labels are unknown")
    i.add_argument("--far", type=_open_unit, default=0.01)
    i.set_defaults(func=cmd_identify)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward kernel")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", choices=["fnl"], help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    for sp in (d, f, t, e, v, i, g):
        sp.add_argument("--threads", type=_positive_int, default=1,
                        help="1 = deterministic kernels (default)")
    return p


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    try:
        set_num_threads(args.threads)
        return args.func(args, out)
    except (CliUsageError, UsageError, ConfigError) as exc:
        print(f"viplface: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DescriptorError, OSError) as exc:
        print(f"viplface: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ShapeError, StateCorruptionError, FloatingPointError) as exc:
        print(f"viplface: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ViplError as exc:
        print(f"viplface: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
