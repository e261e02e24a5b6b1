"""Gradient-descent training loop for the toy network."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .losses import LossWeights
from .network import ToyDualDecoder, loss_and_grads
from .postproc import resize_array

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    iterations: int = 500
    batch_size: int = 8
    seed: int = 0
    scale_jitter: tuple[float, float] = (1.0, 1.0)
    rotate: bool = True
    decay_power: float = 1.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        lo, hi = self.scale_jitter
        if not 0 < lo <= hi:
            raise ValueError("scale_jitter must satisfy 0 < lo <= hi")

    def to_json(self) -> dict:
        d = asdict(self)
        d["scale_jitter"] = list(self.scale_jitter)
        return d


@dataclass(frozen=True)
class Sample:
    """One training triple: image ``(3,H,W)``, class map, normalized target."""

    image: np.ndarray
    labels: np.ndarray
    target: np.ndarray


def poly_lr(base: float, t: int, total: int, power: float) -> float:
    return base * (1.0 - t / total) ** power


def _augment(batch: Sequence[Sample], rng: np.random.Generator, cfg: TrainConfig):
    lo, hi = cfg.scale_jitter
    scale = rng.uniform(lo, hi) if hi > lo else lo
    h, w = batch[0].labels.shape
    size = (max(2, 2 * round(h * scale / 2)), max(2, 2 * round(w * scale / 2)))
    images, labels, targets = [], [], []
    for s in batch:
        img, lab, tgt = s.image, s.labels, s.target
        if size != (h, w):
            img = np.stack([resize_array(c, size) for c in img])
            tgt = resize_array(tgt, size)
            lab = _resize_nearest(lab, size)
        if cfg.rotate:
            # quarter turns would change the shape of non-square tiles
            k = int(rng.integers(4)) if size[0] == size[1] else 2 * int(rng.integers(2))
            img = np.rot90(img, k, axes=(1, 2))
            lab = np.rot90(lab, k)
            tgt = np.rot90(tgt, k)
        images.append(img)
        labels.append(lab)
        targets.append(tgt)
    return (
        np.ascontiguousarray(np.stack(images), dtype=np.float32),
        np.stack(labels),
        np.ascontiguousarray(np.stack(targets), dtype=np.float32),
    )


def _resize_nearest(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = a.shape
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return a[rows][:, cols]


def train(
    model: ToyDualDecoder,
    dataset: Sequence[Sample],
    config: TrainConfig,
    weights: LossWeights | None = None,
) -> tuple[ToyDualDecoder, list[float]]:
    """Plain SGD with polynomial learning-rate decay.

    Returns a trained copy of ``model`` and the per-iteration batch loss.
    """
    if not dataset:
        raise ValueError("empty dataset")
    weights = weights or LossWeights()
    model = model.astype(np.float32)
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    bs = min(config.batch_size, n)
    trace = []
    for t in range(config.iterations):
        idx = rng.choice(n, size=bs, replace=False)
        images, labels, targets = _augment([dataset[i] for i in idx], rng, config)
        loss, grads = loss_and_grads(model, images, labels, targets, weights)
        lr = poly_lr(config.lr, t, config.iterations, config.decay_power)
        for k, g in grads.items():
            model.params[k] -= np.float32(lr) * g.astype(np.float32)
        trace.append(loss)
        if t % 100 == 0:
            log.debug("iter %d loss %.5f lr %.4g", t, loss, lr)
    return model, trace
