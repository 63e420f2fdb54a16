"""SGD training: MSRA init, momentum + weight decay, polynomial LR decay,
mean subtraction, random crops and horizontal flips."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .errors import ConfigError, DataError, ShapeError, UsageError
from .graph import Network
from .graph.shapes import fan_in
from .ops import softmax_loss_backward, softmax_loss_forward

BASE_LR_PLAIN = 0.01
BASE_LR_FNL = 0.04


@dataclass
class SolverConfig:
    max_iter: int
    base_lr: float = BASE_LR_PLAIN
    lr_power: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    rng_seed: int = 0
    crop_size: int = 227
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.max_iter < 1:
            raise ConfigError("max_iter must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be >= 0")
        if self.crop_size < 1:
            raise ConfigError("crop_size must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be in [0, 1]")


@dataclass
class SolverState:
    iteration: int = 0
    velocity: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params):
        return cls(0, {name: {k: np.zeros_like(v) for k, v in d.items()}
                       for name, d in params.items()})


def msra_init(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian with variance 2 / fan_in."""
    if fan_in < 1:
        raise ConfigError(f"fan_in must be >= 1, got {fan_in}")
    return (rng.standard_normal(tuple(shape), dtype=np.float32)
            * np.float32(math.sqrt(2.0 / fan_in)))


def initialize(net: Network, rng: np.random.Generator) -> Network:
    """MSRA weights, zero biases, in declaration order."""
    params = {}
    for name, shapes in net.param_shapes.items():
        w = shapes["weight"]
        params[name] = {"weight": msra_init(w, fan_in(w), rng),
                        "bias": np.zeros(shapes["bias"], dtype=np.float32)}
    net.bind(params)
    return net


def poly_lr(cfg: SolverConfig, iteration: int) -> float:
    if not 0 <= iteration <= cfg.max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter) ** cfg.lr_power


def sgd_step(params, grads, state: SolverState, lr: float, cfg: SolverConfig):
    """``v <- momentum*v - lr*(g + wd*w);  w <- w + v``, in place."""
    for name, arrs in params.items():
        vel = state.velocity.setdefault(name, {})
        for key, w in arrs.items():
            g = grads[name][key]
            if g.shape != w.shape:
                raise ShapeError(f"{name}.{key}: gradient shape {g.shape} != parameter {w.shape}")
            v = vel.get(key)
            if v is None:
                v = vel[key] = np.zeros_like(w)
            elif v.shape != w.shape:
                raise ShapeError(f"{name}.{key}: velocity shape {v.shape} != parameter {w.shape}")
            v *= np.float32(cfg.momentum)
            v -= np.float32(lr) * (g + np.float32(cfg.weight_decay) * w)
            w += v
    state.iteration += 1
    return params, state


def augment(image, mean_image, cfg: SolverConfig, rng: np.random.Generator | None,
            train: bool = True) -> np.ndarray:
    """Mean-subtract, crop ``crop_size`` square, maybe mirror.

    Training takes a uniformly random window and flips with ``flip_prob``;
    test mode (or ``rng=None``) takes the center window unflipped.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    c = cfg.crop_size
    if c > h or c > w:
        raise ConfigError(f"crop {c} larger than source {h}x{w}")
    if mean_image is not None:
        image = image - mean_image
    if train and rng is not None:
        top = int(rng.integers(0, h - c + 1))
        left = int(rng.integers(0, w - c + 1))
        flip = rng.random() < cfg.flip_prob
    else:
        top, left, flip = (h - c) // 2, (w - c) // 2, False
    out = image[:, top:top + c, left:left + c]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


def logits_edge(desc) -> tuple[str, str | None]:
    """``(logits edge, softmax_loss output edge or None)``."""
    for layer in desc.layers:
        if layer.kind == "softmax_loss":
            return layer.inputs[0], layer.output
    consumed = {e for layer in desc.layers for e in layer.inputs}
    sinks = [layer.output for layer in desc.layers if layer.output not in consumed]
    if len(sinks) != 1:
        raise UsageError(f"cannot pick a logits edge among sinks {sinks}")
    return sinks[0], None


def predict(net: Network, images, batch_size: int = 256) -> np.ndarray:
    edge, _ = logits_edge(net.descriptor)
    preds = []
    for i in range(0, len(images), batch_size):
        out = net.forward(images[i:i + batch_size], "test", outputs=[edge])[edge]
        preds.append(np.argmax(out, axis=1))
    return np.concatenate(preds)


def accuracy(net: Network, images, labels) -> float:
    return float(np.mean(predict(net, images) == np.asarray(labels)))


@dataclass
class TrainResult:
    net: Network
    losses: list  # (iteration, lr, loss)
    state: SolverState


def train(net: Network, images, labels, cfg: SolverConfig, mean_image=None,
          log: TextIO | None = None,
          callback: Callable[[int, Network], bool | None] | None = None) -> TrainResult:
    """Run ``cfg.max_iter`` SGD iterations.

    Mini-batches walk a fresh permutation of the dataset each epoch.  All
    randomness (ordering, crops, flips, dropout) comes from generators seeded
    by ``cfg.rng_seed``.  ``callback(iteration, net)`` runs after each step;
    returning True stops training early.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise DataError("empty dataset")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    edge, loss_edge = logits_edge(net.descriptor)
    n_classes = net.shapes[edge][0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    if net.params is None:
        raise UsageError("network has no bound parameters")

    rng = np.random.default_rng(cfg.rng_seed)
    net.rng = np.random.default_rng([cfg.rng_seed, 1])
    state = SolverState.for_params(net.params)
    losses = []
    order = rng.permutation(len(images))
    pos = 0
    for it in range(cfg.max_iter):
        idx = []
        while len(idx) < cfg.batch_size:
            if pos == len(order):
                order = rng.permutation(len(images))
                pos = 0
            take = min(cfg.batch_size - len(idx), len(order) - pos)
            idx.extend(order[pos:pos + take])
            pos += take
        batch = np.stack([augment(images[i], mean_image, cfg, rng) for i in idx])
        y = labels[idx]
        if loss_edge is not None:
            edges = net.forward(batch, "train", labels=y)
            loss = float(edges[loss_edge])
            seeds = {loss_edge: 1.0}
        else:
            edges = net.forward(batch, "train")
            loss = softmax_loss_forward(edges[edge], y)
            seeds = {edge: softmax_loss_backward(edges[edge], y)}
        grads = net.backward(seeds)
        lr = poly_lr(cfg, it)
        sgd_step(net.params, grads, state, lr, cfg)
        losses.append((it, lr, loss))
        if log is not None:
            log.write(f"{it},{lr:.9g},{loss:.9g}\n")
        if callback is not None and callback(it, net):
            break
    return TrainResult(net, losses, state)


def iterations_to_reach(net: Network, images, labels, cfg: SolverConfig, target: float,
                        mean_image=None) -> int | None:
    """Train until test-mode accuracy on the (center-cropped) training set
    reaches ``target``; return the number of SGD steps taken, or None if
    ``cfg.max_iter`` steps were not enough."""
    prepared = np.stack([augment(im, mean_image, cfg, None, train=False) for im in images])
    hit = []

    def check(it, net_):
        if accuracy(net_, prepared, labels) >= target:
            hit.append(it + 1)
            return True
        return None

    train(net, images, labels, cfg, mean_image=mean_image, callback=check)
    return hit[0] if hit else None
