"""Weighted segmentation fusion of instance predictions from several models.

Boxes from all inputs are clustered greedily in descending score order;
a box joins the first cluster whose running fused box overlaps it with
IoU >= ``iou_threshold``. Fused coordinates are the score x weight
average of members; the fused score is the (weighted) mean member score
scaled down by ``min(1, members / n_inputs)``. Member masks are averaged
with the same weights, binarized, and cropped to the fused box.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .postproc import resize_array
from .raster import (
    BBox,
    Instance,
    InstanceSet,
    box_to_mask,
    instance_to_json,
    iou_box,
)

SCORE_MODES = ("average", "weighted-average")


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.55
    skip_box_threshold: float = 0.0
    mask_binarize_threshold: float = 0.5
    score_mode: str = "weighted-average"

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if not 0 <= self.skip_box_threshold <= 1:
            raise ValueError("skip_box_threshold must lie in [0, 1]")
        if not 0 < self.mask_binarize_threshold < 1:
            raise ValueError("mask_binarize_threshold must lie in (0, 1)")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}")


@dataclass(frozen=True)
class Member:
    model_id: str
    index: int
    instance: Instance
    model_weight: float

    @property
    def score(self) -> float:
        return self.instance.score

    @property
    def weight(self) -> float:
        """Mask and coordinate weight: score times model weight."""
        return self.instance.score * self.model_weight


@dataclass
class Cluster:
    members: list[Member]
    box: BBox

    def fused_score(self, n_inputs: int, score_mode: str) -> float:
        if score_mode == "average":
            score = sum(m.score for m in self.members) / len(self.members)
        else:
            wsum = sum(m.model_weight for m in self.members)
            score = sum(m.model_weight * m.score for m in self.members) / wsum
        return score * min(1.0, len(self.members) / n_inputs)


@dataclass(frozen=True, eq=False)
class FusedInstance:
    bbox: BBox
    mask: np.ndarray
    members: tuple[tuple[str, int], ...]

    @property
    def score(self) -> float:
        return self.bbox.score


def _fused_box(members: Sequence[Member], score: float = 0.0) -> BBox:
    wsum = sum(m.weight for m in members)
    coords = [sum(m.weight * m.instance.bbox.coords[i] for m in members) / wsum for i in range(4)]
    return BBox(*coords, score=score)


def _validate(sets: Sequence[InstanceSet]) -> tuple[int, int] | None:
    if not sets:
        raise ValueError("no instance sets to fuse")
    ids = [s.model_id for s in sets]
    if len(set(ids)) != len(ids):
        raise ValueError("model_id must be unique per input set (encode the scale in the id)")
    sizes = {s.tile_size for s in sets if s.tile_size is not None}
    if len(sizes) > 1:
        raise ValueError(f"inconsistent tile sizes {sorted(sizes)}")
    tiles = {s.tile_id for s in sets}
    if len(tiles) > 1:
        raise ValueError(f"sets span several tiles: {sorted(tiles)}")
    if not any(s.model_weight > 0 for s in sets):
        raise ValueError("at least one model weight must be positive")
    return sizes.pop() if sizes else None


def _pooled(sets: Sequence[InstanceSet], skip: float) -> list[Member]:
    """All usable boxes, sorted by descending score then (model_id, index)."""
    out = []
    for s in sets:
        for i, inst in enumerate(s.instances):
            m = Member(s.model_id, i, inst, s.model_weight)
            # zero-weight boxes carry no information and would divide by zero
            if inst.score >= skip and m.weight > 0:
                out.append(m)
    out.sort(key=lambda m: (-m.score, m.model_id, m.index))
    return out


def wbf_boxes(sets: Sequence[InstanceSet], cfg: FusionConfig | None = None) -> list[Cluster]:
    """Greedy weighted box clustering; each cluster carries its fused box and score."""
    cfg = cfg or FusionConfig()
    _validate(sets)
    clusters: list[Cluster] = []
    for m in _pooled(sets, cfg.skip_box_threshold):
        for c in clusters:
            if iou_box(c.box, m.instance.bbox) >= cfg.iou_threshold:
                c.members.append(m)
                c.box = _fused_box(c.members)
                break
        else:
            clusters.append(Cluster([m], _fused_box([m])))
    n = len(sets)
    for c in clusters:
        c.box = _fused_box(c.members, c.fused_score(n, cfg.score_mode))
    return clusters


def fuse_masks(masks: Sequence[np.ndarray], weights: Sequence[float], cfg: FusionConfig | None = None) -> np.ndarray:
    """Weighted per-pixel mean of member masks, kept where it exceeds the threshold."""
    cfg = cfg or FusionConfig()
    if not masks:
        raise ValueError("no masks to fuse")
    wsum = float(sum(weights))
    if wsum <= 0:
        raise ValueError("mask weights sum to zero")
    acc = np.zeros(np.shape(masks[0]), dtype=np.float64)
    for m, w in zip(masks, weights):
        acc += w * np.asarray(m, dtype=np.float64)
    return acc / wsum > cfg.mask_binarize_threshold


def wsf(sets: Sequence[InstanceSet], cfg: FusionConfig | None = None) -> list[FusedInstance]:
    """Fuse boxes, then member masks, then crop each mask to its fused box."""
    cfg = cfg or FusionConfig()
    size = _validate(sets)
    out = []
    for c in wbf_boxes(sets, cfg):
        mask = fuse_masks([m.instance.mask for m in c.members], [m.weight for m in c.members], cfg)
        mask &= box_to_mask(c.box, size or mask.shape)
        if mask.any():
            out.append(FusedInstance(c.box, mask, tuple((m.model_id, m.index) for m in c.members)))
    # stable: equal scores keep cluster creation order
    out.sort(key=lambda f: -f.score)
    return out


def nms_baseline(sets: Sequence[InstanceSet], iou_threshold: float = 0.55) -> list[FusedInstance]:
    """Greedy NMS over the pooled boxes of all inputs; masks pass through."""
    _validate(sets)
    kept: list[Member] = []
    for m in _pooled(sets, 0.0):
        if all(iou_box(k.instance.bbox, m.instance.bbox) <= iou_threshold for k in kept):
            kept.append(m)
    return [FusedInstance(m.instance.bbox, m.instance.mask, ((m.model_id, m.index),)) for m in kept]


def rescale_instance_set(s: InstanceSet, tile_size: tuple[int, int]) -> InstanceSet:
    """Resample a set predicted at another scale onto the native tile grid."""
    if s.tile_size is None or tuple(s.tile_size) == tuple(tile_size):
        return InstanceSet(s.tile_id, s.model_id, s.instances, s.model_weight, tuple(tile_size))
    sy = tile_size[0] / s.tile_size[0]
    sx = tile_size[1] / s.tile_size[1]
    insts = []
    for inst in s.instances:
        b = inst.bbox
        box = BBox(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy, b.score)
        prob = resize_array(inst.mask.astype(np.float64), tile_size)
        insts.append(Instance(box, np.clip(prob, 0.0, 1.0)))
    return InstanceSet(s.tile_id, s.model_id, tuple(insts), s.model_weight, tuple(tile_size))


def fused_to_json(tile_id: str, fused: Sequence[FusedInstance], model_id: str = "wsf",
                  tile_size: tuple[int, int] | None = None) -> dict:
    instances = []
    for f in fused:
        rec = instance_to_json(Instance(f.bbox, f.mask))
        rec["members"] = [[mid, int(i)] for mid, i in f.members]
        instances.append(rec)
    size = tile_size or (fused[0].mask.shape if fused else None)
    out = {"tile_id": tile_id, "model_id": model_id, "model_weight": 1.0, "instances": instances}
    if size:
        out["tile_size"] = [int(v) for v in size]
    return out
