"""Height threshold accuracy and instance-mask average precision."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .raster import HeightMap, InstanceSet, mask_iou_matrix, read_height_map, read_instance_set

DELTA_BASE = 1.25
IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


# ---------------------------------------------------------------------------
# Height accuracy
# ---------------------------------------------------------------------------


def _delta_ratio(pred: HeightMap, gt: HeightMap, eps: float) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = pred.valid & gt.valid
    p = pred.data[valid].astype(np.float64) + eps
    g = gt.data[valid].astype(np.float64) + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    # 0/0 with eps=0: equal heights, count as exact
    ratio[(p == g)] = 1.0
    return ratio


def delta_counts(pred: HeightMap, gt: HeightMap, eps: float = 1.0) -> tuple[int, tuple[int, int, int]]:
    """Evaluated pixel count and hits for the three threshold levels."""
    ratio = _delta_ratio(pred, gt, eps)
    hits = tuple(int(np.count_nonzero(ratio < DELTA_BASE**level)) for level in (1, 2, 3))
    return int(ratio.size), hits


def delta_accuracy(pred: HeightMap, gt: HeightMap, level: int = 1, eps: float = 1.0) -> float:
    """Fraction of pixels with ``max((y+eps)/(p+eps), (p+eps)/(y+eps)) < 1.25**level``."""
    if level not in (1, 2, 3):
        raise ValueError("level must be 1, 2 or 3")
    n, hits = delta_counts(pred, gt, eps)
    if n == 0:
        raise ValueError("no pixels to evaluate")
    return hits[level - 1] / n


@dataclass
class DeltaReport:
    delta1: float
    delta2: float
    delta3: float
    evaluated_pixels: int
    per_tile: dict = field(default_factory=dict)


def delta_report(pairs: dict[str, tuple[HeightMap, HeightMap]], eps: float = 1.0) -> DeltaReport:
    """Pixel-pooled threshold accuracies over tiles ``{tile_id: (pred, gt)}``."""
    total = 0
    hits = np.zeros(3, dtype=np.int64)
    per_tile = {}
    for tid in sorted(pairs):
        n, h = delta_counts(*pairs[tid], eps=eps)
        total += n
        hits += h
        if n:
            per_tile[tid] = {"d1": h[0] / n, "d2": h[1] / n, "d3": h[2] / n, "pixels": n}
    if total == 0:
        raise ValueError("no pixels to evaluate")
    d = hits / total
    return DeltaReport(float(d[0]), float(d[1]), float(d[2]), int(total), per_tile)


# ---------------------------------------------------------------------------
# Mask AP
# ---------------------------------------------------------------------------


def _binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    return m if m.dtype == bool else m > 0.5


def match_tile(preds: Sequence, gt_masks: Sequence[np.ndarray], iou_threshold: float):
    """Greedy matching in descending score order.

    Returns ``(scores, is_true_positive)`` in the order predictions were
    considered. Each prediction takes the unmatched ground truth of highest
    IoU, provided that IoU reaches the threshold.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    ious = mask_iou_matrix([_binary(preds[i].mask) for i in order], list(gt_masks))
    taken = np.zeros(len(gt_masks), dtype=bool)
    scores, tp = [], []
    for row, i in enumerate(order):
        cand = np.where(taken, -1.0, ious[row]) if len(gt_masks) else np.zeros(0)
        j = int(np.argmax(cand)) if cand.size else -1
        hit = j >= 0 and cand[j] >= iou_threshold
        if hit:
            taken[j] = True
        scores.append(float(preds[i].score))
        tp.append(bool(hit))
    return scores, tp


def interpolated_ap(scores: Sequence[float], tp: Sequence[bool], n_gt: int) -> float | None:
    """101-point interpolated AP from pooled detections.

    ``None`` when there is neither ground truth nor any detection.
    """
    if n_gt == 0:
        return 0.0 if len(scores) else None
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    tps = np.asarray(tp, dtype=bool)[order]
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(~tps)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision at this recall or beyond
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(RECALL_POINTS.size)
    ok = idx < precision.size
    q[ok] = precision[idx[ok]]
    return float(np.mean(q))


def ap_masks(preds: Sequence, gts: InstanceSet, iou_threshold: float = 0.5) -> float | None:
    """Mask AP of one tile's predictions at a single IoU threshold."""
    gt_masks = [_binary(i.mask) for i in gts.instances]
    scores, tp = match_tile(preds, gt_masks, iou_threshold)
    return interpolated_ap(scores, tp, len(gt_masks))


@dataclass
class APReport:
    ap50: float | None
    map: float | None
    per_threshold: dict = field(default_factory=dict)
    matched: int = 0
    unmatched_predictions: int = 0
    unmatched_ground_truth: int = 0
    per_tile: dict = field(default_factory=dict)


def ap_report(tiles: dict[str, tuple[Sequence, InstanceSet]]) -> APReport:
    """Detections pooled over tiles, AP at IoU 0.50:0.05:0.95."""
    per_thr = {}
    counts = {}
    per_tile = {}
    for thr in IOU_THRESHOLDS:
        scores, tps, n_gt = [], [], 0
        for tid in sorted(tiles):
            preds, gts = tiles[tid]
            gt_masks = [_binary(i.mask) for i in gts.instances]
            s, t = match_tile(list(preds), gt_masks, thr)
            scores += s
            tps += t
            n_gt += len(gt_masks)
            if thr == 0.5:
                per_tile[tid] = {"ap50": interpolated_ap(s, t, len(gt_masks)), "matched": int(sum(t)),
                                 "predictions": len(s), "ground_truth": len(gt_masks)}
        per_thr[f"{thr:.2f}"] = interpolated_ap(scores, tps, n_gt)
        if thr == 0.5:
            counts = {"matched": int(sum(tps)), "unmatched_predictions": len(tps) - int(sum(tps)),
                      "unmatched_ground_truth": n_gt - int(sum(tps))}
    vals = [v for v in per_thr.values() if v is not None]
    return APReport(
        ap50=per_thr["0.50"],
        map=float(np.mean(vals)) if len(vals) == len(per_thr) else None,
        per_threshold=per_thr,
        per_tile=per_tile,
        **counts,
    )


# ---------------------------------------------------------------------------
# Run evaluation
# ---------------------------------------------------------------------------


def combined_score(ap50: float, delta1: float) -> float:
    return (ap50 + delta1) / 2.0


class MissingTilesError(RuntimeError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing predictions for tiles: {', '.join(self.missing)}")


@dataclass
class EvalReport:
    delta: DeltaReport | None
    ap: APReport | None
    combined: float | None
    missing: list = field(default_factory=list)

    def to_json(self) -> dict:
        out = {"delta": None, "ap": None, "combined": self.combined, "per_tile": {}, "missing": self.missing}
        if self.delta is not None:
            d = self.delta
            out["delta"] = {"d1": d.delta1, "d2": d.delta2, "d3": d.delta3, "pixels": d.evaluated_pixels}
            for tid, rec in d.per_tile.items():
                out["per_tile"].setdefault(tid, {})["delta"] = rec
        if self.ap is not None:
            a = self.ap
            out["ap"] = {"ap50": a.ap50, "map": a.map, "per_threshold": a.per_threshold,
                         "matched": a.matched, "unmatched_predictions": a.unmatched_predictions,
                         "unmatched_ground_truth": a.unmatched_ground_truth}
            for tid, rec in a.per_tile.items():
                out["per_tile"].setdefault(tid, {})["ap"] = rec
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


HEIGHT_PRED = "{}.height.f32"
HEIGHT_GT = "{}.ndsm.f32"
INSTANCES = "{}.instances.json"


def _tile_ids(directory: Path, pattern: str) -> set[str]:
    suffix = pattern.format("")
    return {p.name[: -len(suffix)] for p in directory.glob("*" + suffix)}


def evaluate_heights(pred_dir, gt_dir, eps: float = 1.0, allow_partial: bool = False) -> DeltaReport:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_ids = _tile_ids(gt_dir, HEIGHT_GT)
    have = _tile_ids(pred_dir, HEIGHT_PRED)
    missing = gt_ids - have
    if missing and not allow_partial:
        raise MissingTilesError(missing)
    pairs = {
        t: (read_height_map(pred_dir / HEIGHT_PRED.format(t)), read_height_map(gt_dir / HEIGHT_GT.format(t)))
        for t in sorted(gt_ids & have)
    }
    return delta_report(pairs, eps)


def evaluate_instances(pred_dir, gt_dir, allow_partial: bool = False) -> APReport:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_ids = _tile_ids(gt_dir, INSTANCES)
    have = _tile_ids(pred_dir, INSTANCES)
    missing = gt_ids - have
    if missing and not allow_partial:
        raise MissingTilesError(missing)
    tiles = {
        t: (list(read_instance_set(pred_dir / INSTANCES.format(t)).instances),
            read_instance_set(gt_dir / INSTANCES.format(t)))
        for t in sorted(gt_ids & have)
    }
    return ap_report(tiles)


def evaluate_run(pred_dir, gt_dir, eps: float = 1.0, allow_partial: bool = False) -> EvalReport:
    """Evaluate whichever of heights and instances are present in ``pred_dir``.

    Layout: predictions ``<tile>.height.f32`` and ``<tile>.instances.json``;
    ground truth ``<tile>.ndsm.f32`` and ``<tile>.instances.json``.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    missing = set()
    delta = ap = None
    if _tile_ids(pred_dir, HEIGHT_PRED):
        missing |= _tile_ids(gt_dir, HEIGHT_GT) - _tile_ids(pred_dir, HEIGHT_PRED)
    if _tile_ids(pred_dir, INSTANCES):
        missing |= _tile_ids(gt_dir, INSTANCES) - _tile_ids(pred_dir, INSTANCES)
    if missing and not allow_partial:
        raise MissingTilesError(missing)
    if _tile_ids(pred_dir, HEIGHT_PRED):
        delta = evaluate_heights(pred_dir, gt_dir, eps, allow_partial=True)
    if _tile_ids(pred_dir, INSTANCES):
        ap = evaluate_instances(pred_dir, gt_dir, allow_partial=True)
    if delta is None and ap is None:
        raise ValueError(f"no predictions found in {pred_dir}")
    combined = None
    if delta is not None and ap is not None and ap.ap50 is not None:
        combined = combined_score(ap.ap50, delta.delta1)
    return EvalReport(delta, ap, combined, sorted(missing))
