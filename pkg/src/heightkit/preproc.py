"""Height normalization and height-hierarchy label synthesis."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .raster import HeightMap, HierarchyMap, NormalizedHeightMap

GROUND_EPS = 1e-6

DEFAULT_BOUNDARIES = (0.0, 1e-6, 10.0, 36.0, 187.0)
DEFAULT_NAMES = ("ground", "low", "medium", "high")


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True)
class HierarchySpec:
    """Half-open height bins ``[b_i, b_{i+1})`` in meters."""

    boundaries: tuple[float, ...] = DEFAULT_BOUNDARIES
    names: tuple[str, ...] | None = DEFAULT_NAMES

    def __post_init__(self):
        b = tuple(float(v) for v in self.boundaries)
        if len(b) < 3:
            raise HierarchyError("need at least two bins")
        if b[0] != 0.0:
            raise HierarchyError("first boundary must be 0")
        if any(not math.isfinite(v) for v in b):
            raise HierarchyError("boundaries must be finite")
        if any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise HierarchyError("boundaries must be strictly increasing")
        object.__setattr__(self, "boundaries", b)
        if self.names is not None:
            names = tuple(self.names)
            if len(names) != len(b) - 1:
                raise HierarchyError(f"expected {len(b) - 1} names, got {len(names)}")
            object.__setattr__(self, "names", names)

    @property
    def n_classes(self) -> int:
        return len(self.boundaries) - 1

    def to_json(self) -> dict:
        return {
            "boundaries": list(self.boundaries),
            "names": list(self.names) if self.names is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HierarchySpec":
        names = obj.get("names")
        return cls(tuple(obj["boundaries"]), tuple(names) if names is not None else None)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "HierarchySpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def log_heights(h: np.ndarray) -> np.ndarray:
    return np.log1p(np.asarray(h, dtype=np.float64))


def normalize_heights(h: HeightMap, norm_constant: float) -> NormalizedHeightMap:
    """Map meters to ``ln(1 + h) / norm_constant`` clipped to ``[0, 1]``.

    ``ln(1 + h)`` replaces ``ln(h)`` so that bare ground maps to 0.
    """
    if not norm_constant > 0:
        raise ValueError(f"norm_constant must be positive, got {norm_constant}")
    valid = h.valid
    out = np.clip(log_heights(h.filled(0.0)) / norm_constant, 0.0, 1.0).astype(np.float32)
    if h.nodata is not None:
        out[~valid] = np.float32(h.nodata)
    return NormalizedHeightMap(out, float(norm_constant), h.nodata)


def denormalize_array(v: np.ndarray, norm_constant: float) -> np.ndarray:
    return np.expm1(np.asarray(v, dtype=np.float64) * norm_constant)


def denormalize_heights(nh: NormalizedHeightMap) -> HeightMap:
    valid = nh.valid
    v = np.where(valid, nh.data, 0.0)
    out = np.maximum(denormalize_array(v, nh.norm_constant), 0.0).astype(np.float32)
    if nh.nodata is not None:
        out[~valid] = np.float32(nh.nodata)
    return HeightMap(out, nh.nodata)


def compute_norm_constant(train_tiles: Iterable[HeightMap]) -> float:
    """Dataset-wide maximum of ``ln(1 + h)`` over valid training pixels."""
    best = None
    for tile in train_tiles:
        v = tile.data[tile.valid]
        if v.size:
            m = float(np.max(v))
            best = m if best is None else max(best, m)
    if best is None:
        raise ValueError("no valid pixels in training tiles")
    c = float(np.log1p(np.float64(best)))
    if c <= 0:
        raise ValueError("all training heights are zero; normalization constant would be 0")
    return c


# ---------------------------------------------------------------------------
# Hierarchy labels
# ---------------------------------------------------------------------------


def classify_heights(h: np.ndarray, spec: HierarchySpec) -> np.ndarray:
    """Bin index per value; values at or above the top edge go to the top class."""
    edges = np.asarray(spec.boundaries[1:-1], dtype=np.float64)
    idx = np.searchsorted(edges, np.asarray(h, dtype=np.float64), side="right")
    return idx.astype(np.uint8)


def synthesize_hierarchy_labels(h: HeightMap, spec: HierarchySpec | None = None) -> HierarchyMap:
    spec = spec or HierarchySpec()
    labels = classify_heights(h.filled(0.0), spec)
    labels[~h.valid] = 0
    return HierarchyMap(labels, spec.n_classes)


def _lloyd_1d(values: np.ndarray, centers: np.ndarray, max_iter: int, tol: float) -> np.ndarray:
    for _ in range(max_iter):
        # nearest center; ties go to the lower index
        assign = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
        new = centers.copy()
        for j in range(centers.size):
            members = values[assign == j]
            if members.size:
                new[j] = members.mean()
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift < tol:
            break
    return np.sort(centers)


def cluster_hierarchy_spec(
    train_tiles: Iterable[HeightMap],
    n: int,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> HierarchySpec:
    """Derive ``n`` bins from 1-D k-means over the non-ground heights.

    Class 0 is always the ground bin ``[0, 1e-6)``; the remaining ``n - 1``
    bins are split at midpoints between adjacent cluster centers.
    """
    if n < 2:
        raise HierarchyError("n must be >= 2")
    tiles = list(train_tiles)
    parts = [t.data[t.valid] for t in tiles]
    values = np.concatenate(parts).astype(np.float64) if parts else np.zeros(0)
    values = np.sort(values[values >= GROUND_EPS])
    if values.size == 0:
        raise HierarchyError("no non-ground heights to cluster")
    k = n - 1
    unique = np.unique(values)
    if unique.size < k:
        raise HierarchyError(f"{unique.size} distinct heights cannot form {k} clusters")
    q = (np.arange(k) + 0.5) / k
    centers = np.quantile(values, q)
    if np.unique(centers).size < k:
        centers = np.quantile(unique, q)
        if np.unique(centers).size < k:
            centers = unique[np.round(q * (unique.size - 1)).astype(int)]
    centers = _lloyd_1d(values, centers.astype(np.float64), max_iter, tol)
    if np.any(np.diff(centers) <= 0):
        raise HierarchyError("clustering collapsed to duplicate centers")
    top = float(values.max()) + 1.0
    mids = ((centers[:-1] + centers[1:]) / 2.0).tolist()
    return HierarchySpec(tuple([0.0, GROUND_EPS] + mids + [top]), names=None)


def names_for(spec: HierarchySpec) -> Sequence[str]:
    if spec.names is not None:
        return spec.names
    return tuple(f"class{i}" for i in range(spec.n_classes))
