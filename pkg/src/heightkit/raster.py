"""Raster and instance types shared across the package.

Coordinate conventions
----------------------
- Rasters are 2-D numpy arrays indexed ``[row, col]``; ``width`` is the
  number of columns.
- Boxes are continuous ``(x_min, y_min, x_max, y_max)`` in pixel units,
  ``x`` along columns. Pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)`` and
  its center is ``(c + 0.5, r + 0.5)``.
- Run-length encoding is column-major and starts with a run of zeros.

File formats
------------
A raster ``name.f32`` is a raw little-endian payload with a JSON sidecar
``name.json`` holding ``{width, height, dtype, nodata}`` (plus ``bands``
for multi-band images, ``n_classes`` for class maps and ``norm_constant``
for normalized heights). Instance sets are single JSON manifests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class RasterError(ValueError):
    """Raised for malformed rasters, masks or encodings."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# Height rasters
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HeightMap:
    """Single-band raster of heights in meters.

    ``nodata`` marks missing pixels (``nan`` is allowed as a sentinel).
    """

    data: np.ndarray
    nodata: float | None = None

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 2:
            raise RasterError(f"height map must be 2-D, got shape {a.shape}")
        valid = a[self.valid_mask_of(a, self.nodata)]
        if not np.all(np.isfinite(valid)):
            raise RasterError("height map contains non-finite values")
        if valid.size and valid.min() < 0:
            raise RasterError("height map contains negative heights")
        object.__setattr__(self, "data", _frozen(a))

    @staticmethod
    def valid_mask_of(a: np.ndarray, nodata: float | None) -> np.ndarray:
        if nodata is None:
            return np.ones(a.shape, dtype=bool)
        if math.isnan(nodata):
            return ~np.isnan(a)
        return a != np.float32(nodata)

    @property
    def valid(self) -> np.ndarray:
        return self.valid_mask_of(self.data, self.nodata)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def filled(self, value: float = 0.0) -> np.ndarray:
        """Return a writable copy with nodata pixels replaced by ``value``."""
        out = np.array(self.data, dtype=np.float32)
        out[~self.valid] = value
        return out


@dataclass(frozen=True, eq=False)
class NormalizedHeightMap:
    """Log-compressed heights scaled into ``[0, 1]``."""

    data: np.ndarray
    norm_constant: float
    nodata: float | None = None

    def __post_init__(self):
        if not self.norm_constant > 0:
            raise RasterError("norm_constant must be positive")
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 2:
            raise RasterError(f"normalized map must be 2-D, got shape {a.shape}")
        v = a[HeightMap.valid_mask_of(a, self.nodata)]
        if v.size and (v.min() < 0 or v.max() > 1):
            raise RasterError("normalized heights must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def valid(self) -> np.ndarray:
        return HeightMap.valid_mask_of(self.data, self.nodata)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class HierarchyMap:
    """Per-pixel height-hierarchy class indices."""

    data: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise RasterError("n_classes must be >= 2")
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise RasterError(f"class map must be 2-D, got shape {a.shape}")
        if a.size and (a.min() < 0 or a.max() >= self.n_classes):
            raise RasterError("class index out of range")
        object.__setattr__(self, "data", _frozen(a.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise RasterError(f"invalid box {self.coords}")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @classmethod
    def from_coords(cls, coords: Sequence[float], score: float = 1.0) -> "BBox":
        x0, y0, x1, y1 = (float(c) for c in coords)
        return cls(x0, y0, x1, y1, float(score))


@dataclass(frozen=True, eq=False)
class Instance:
    """A scored box with a mask on the tile grid.

    ``mask`` is either boolean (binary) or float in ``[0, 1]`` (probability).
    """

    bbox: BBox
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise RasterError("mask must be 2-D")
        if m.dtype != bool:
            m = m.astype(np.float64)
            if m.size and (m.min() < 0 or m.max() > 1):
                raise RasterError("probability mask outside [0, 1]")
        object.__setattr__(self, "mask", _frozen(m))

    @property
    def score(self) -> float:
        return self.bbox.score

    @property
    def is_binary(self) -> bool:
        return self.mask.dtype == bool


@dataclass(frozen=True, eq=False)
class InstanceSet:
    tile_id: str
    model_id: str
    instances: tuple[Instance, ...] = ()
    model_weight: float = 1.0
    tile_size: tuple[int, int] | None = None  # (height, width)

    def __post_init__(self):
        if self.model_weight < 0:
            raise RasterError("model_weight must be non-negative")
        insts = tuple(self.instances)
        size = tuple(self.tile_size) if self.tile_size is not None else None
        for inst in insts:
            if size is None:
                size = inst.mask.shape
            elif inst.mask.shape != size:
                raise RasterError(
                    f"mask shape {inst.mask.shape} does not match tile {size}"
                )
        object.__setattr__(self, "instances", insts)
        object.__setattr__(self, "tile_size", size)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def iou_box(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_mask(a: np.ndarray, b: np.ndarray) -> float:
    """Mask IoU; two empty masks give 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise RasterError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_iou_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise mask IoU, shape ``(len(preds), len(gts))``."""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    p = np.stack([np.asarray(m, dtype=bool).ravel() for m in preds]).astype(np.float64)
    g = np.stack([np.asarray(m, dtype=bool).ravel() for m in gts]).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def box_to_mask(box: BBox, shape: tuple[int, int]) -> np.ndarray:
    """Pixels whose centers fall inside ``box`` (boundaries inclusive)."""
    h, w = shape
    cx = np.arange(w) + 0.5
    cy = np.arange(h) + 0.5
    inx = (cx >= box.x_min) & (cx <= box.x_max)
    iny = (cy >= box.y_min) & (cy <= box.y_max)
    return iny[:, None] & inx[None, :]


def mask_to_box(mask: np.ndarray, score: float = 1.0) -> BBox:
    """Tight box around the nonzero pixels of a mask."""
    rows = np.flatnonzero(np.asarray(mask).any(axis=1))
    cols = np.flatnonzero(np.asarray(mask).any(axis=0))
    if rows.size == 0:
        raise RasterError("empty mask has no bounding box")
    return BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1), score)


# ---------------------------------------------------------------------------
# Run-length encoding
# ---------------------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> dict:
    """Column-major, zero-first run-length encoding of a binary mask."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise RasterError("mask must be 2-D")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise RasterError("mask must contain only 0 and 1")
        m = m.astype(bool)
    flat = m.ravel(order="F")
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    counts = np.diff(np.concatenate(([0], edges, [flat.size]))).tolist()
    if flat.size and flat[0]:
        counts.insert(0, 0)
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(record: dict) -> np.ndarray:
    h, w = (int(v) for v in record["size"])
    counts = np.asarray(record["counts"], dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise RasterError("negative run length")
    if int(counts.sum()) != h * w:
        raise RasterError(f"runs sum to {int(counts.sum())}, expected {h * w}")
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


# ---------------------------------------------------------------------------
# Raster I/O
# ---------------------------------------------------------------------------

_DTYPES = {"f32le": "<f4", "u8": "u1"}


def _header_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _write_raster(path, array: np.ndarray, dtype: str, extra: dict) -> Path:
    path = Path(path)
    a = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    height, width = a.shape[-2:]
    header = {"width": int(width), "height": int(height), "dtype": dtype}
    header.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(a.tobytes())
    _write_json(_header_path(path), header)
    return path


def read_raster(path) -> tuple[np.ndarray, dict]:
    """Read a raw raster and its sidecar header."""
    path = Path(path)
    header = json.loads(_header_path(path).read_text(encoding="utf-8"))
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise RasterError(f"unsupported dtype {dtype!r}")
    shape = (header["height"], header["width"])
    if "bands" in header:
        shape = (header["bands"],) + shape
    a = np.frombuffer(path.read_bytes(), dtype=_DTYPES[dtype])
    if a.size != int(np.prod(shape)):
        raise RasterError(f"{path}: payload has {a.size} values, header implies {shape}")
    return a.reshape(shape).copy(), header


def _nodata_to_json(nodata):
    if nodata is None:
        return None
    if math.isnan(nodata):
        return "nan"
    return float(nodata)


def _nodata_from_json(value):
    if value is None:
        return None
    if value == "nan":
        return float("nan")
    return float(value)


def write_height_map(path, hm: HeightMap) -> Path:
    return _write_raster(path, hm.data, "f32le", {"nodata": _nodata_to_json(hm.nodata)})


def read_height_map(path) -> HeightMap:
    a, header = read_raster(path)
    return HeightMap(a, nodata=_nodata_from_json(header.get("nodata")))


def write_normalized_map(path, nm: NormalizedHeightMap) -> Path:
    return _write_raster(
        path,
        nm.data,
        "f32le",
        {"nodata": _nodata_to_json(nm.nodata), "norm_constant": float(nm.norm_constant)},
    )


def read_normalized_map(path) -> NormalizedHeightMap:
    a, header = read_raster(path)
    return NormalizedHeightMap(
        a, norm_constant=header["norm_constant"], nodata=_nodata_from_json(header.get("nodata"))
    )


def write_hierarchy_map(path, hm: HierarchyMap) -> Path:
    return _write_raster(path, hm.data, "u8", {"n_classes": int(hm.n_classes)})


def read_hierarchy_map(path) -> HierarchyMap:
    a, header = read_raster(path)
    return HierarchyMap(a, n_classes=header["n_classes"])


def write_image(path, image: np.ndarray) -> Path:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise RasterError("image must be (bands, height, width)")
    return _write_raster(path, image, "f32le", {"bands": int(image.shape[0]), "nodata": None})


def read_image(path) -> np.ndarray:
    a, _ = read_raster(path)
    if a.ndim != 3:
        raise RasterError(f"{path} is not a multi-band image")
    return a


# ---------------------------------------------------------------------------
# Instance set I/O
# ---------------------------------------------------------------------------


def instance_to_json(inst: Instance) -> dict:
    rec = {"bbox": [float(c) for c in inst.bbox.coords], "score": float(inst.score)}
    if inst.is_binary:
        rec["mask_rle"] = rle_encode(inst.mask)
    else:
        rec["mask_prob"] = {
            "size": list(inst.mask.shape),
            "values": [float(v) for v in inst.mask.ravel()],
        }
    return rec


def instance_from_json(rec: dict) -> Instance:
    box = BBox.from_coords(rec["bbox"], rec["score"])
    if "mask_rle" in rec:
        mask = rle_decode(rec["mask_rle"])
    elif "mask_prob" in rec:
        h, w = rec["mask_prob"]["size"]
        mask = np.asarray(rec["mask_prob"]["values"], dtype=np.float64).reshape(h, w)
    else:
        raise RasterError("instance has no mask")
    return Instance(box, mask)


def instance_set_to_json(s: InstanceSet) -> dict:
    out = {
        "tile_id": s.tile_id,
        "model_id": s.model_id,
        "model_weight": float(s.model_weight),
        "instances": [instance_to_json(i) for i in s.instances],
    }
    if s.tile_size is not None:
        out["tile_size"] = [int(v) for v in s.tile_size]
    return out


def instance_set_from_json(obj: dict) -> InstanceSet:
    return InstanceSet(
        tile_id=str(obj["tile_id"]),
        model_id=str(obj["model_id"]),
        instances=tuple(instance_from_json(r) for r in obj.get("instances", [])),
        model_weight=float(obj.get("model_weight", 1.0)),
        tile_size=tuple(obj["tile_size"]) if obj.get("tile_size") else None,
    )


def write_instance_set(path, s: InstanceSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(path, instance_set_to_json(s))
    return path


def read_instance_set(path) -> InstanceSet:
    return instance_set_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def read_instance_sets(paths: Iterable) -> list[InstanceSet]:
    return [read_instance_set(p) for p in paths]
