"""Pixel-mean losses for the two heads and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import HierarchyMap


@dataclass(frozen=True)
class LossWeights:
    """``alpha`` scales cross-entropy, ``beta`` scales smooth-L1."""

    alpha: float = 5.0
    beta: float = 30.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")


def smooth_l1_array(pred, target) -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = np.abs(pred.astype(np.float64) - target)
    return float(np.mean(np.where(d < 1.0, 0.5 * d * d, d - 0.5)))


def smooth_l1_grad(pred, target) -> np.ndarray:
    d = np.asarray(pred, dtype=np.float64) - target
    return np.clip(d, -1.0, 1.0) / d.size


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits, axis: int = 0) -> np.ndarray:
    return _softmax(np.asarray(logits, dtype=np.float64), axis)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> None:
    n = logits.shape[1]
    if logits.shape[:1] + logits.shape[2:] != labels.shape:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"label out of range for {n} classes")


def cross_entropy_array(logits, labels) -> float:
    """Mean negative log-likelihood; logits ``(N,n,H,W)``, labels ``(N,H,W)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    _check_labels(logits, labels)
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    picked = np.take_along_axis(logits, labels[:, None], axis=1)[:, 0]
    return float(np.mean(lse - picked))


def cross_entropy_grad(logits, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    g = _softmax(logits, axis=1)
    np.put_along_axis(g, labels[:, None], np.take_along_axis(g, labels[:, None], axis=1) - 1.0, axis=1)
    return g / labels.size


def smooth_l1(pred, target) -> float:
    """Smooth-L1 (transition at 1) averaged over pixels.

    Accepts arrays or height-map objects carrying ``.data``.
    """
    return smooth_l1_array(getattr(pred, "data", pred), getattr(target, "data", target))


def cross_entropy(seg_logits, labels) -> float:
    """Cross-entropy of ``(n,H,W)`` logits against a class map."""
    logits = np.asarray(seg_logits)
    lab = labels.data if isinstance(labels, HierarchyMap) else np.asarray(labels)
    if logits.ndim == 3:
        logits, lab = logits[None], lab[None]
    return cross_entropy_array(logits, lab)


def weighted_total(w: LossWeights, ce: float, sl1: float) -> float:
    return w.alpha * ce + w.beta * sl1


def total_loss(seg_logits, labels, height_pred, height_target, w: LossWeights | None = None) -> float:
    w = w or LossWeights()
    return weighted_total(w, cross_entropy(seg_logits, labels), smooth_l1(height_pred, height_target))
