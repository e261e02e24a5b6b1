"""Procedural synthetic-city tiles: image, nDSM and footprint instances.

Buildings are non-overlapping axis-aligned rectangles with log-normal
heights. The image shows shaded rooftops (color tracks height) and cast
shadows over textured ground, aligned with the nDSM. Footprint instance
masks can be shifted against the nDSM to mimic the label misalignment
between stereo-derived heights and annotated footprints.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .postproc import resize_array
from .raster import (
    BBox,
    HeightMap,
    Instance,
    InstanceSet,
    box_to_mask,
    mask_to_box,
    write_height_map,
    write_image,
    write_instance_set,
)

MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass(frozen=True)
class SceneConfig:
    tile_size: int = 32
    building_count: tuple[int, int] = (2, 5)
    footprint_size: tuple[int, int] = (4, 10)
    height_mu: float = 2.0
    height_sigma: float = 0.8
    min_height: float = 3.0
    max_height: float = 187.0
    misalignment_offset: int = 0
    noise_level: float = 0.0
    image_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("building_count", "footprint_size"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a nonempty range, got {(lo, hi)}")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.footprint_size[0] < 1:
            raise ValueError("footprints must be at least 1 pixel")
        if self.tile_size < 2 or self.tile_size % 2:
            raise ValueError("tile_size must be even and >= 2")
        if self.footprint_size[1] > self.tile_size:
            raise ValueError("footprints larger than the tile")
        if not 0 <= self.min_height < self.max_height:
            raise ValueError("need 0 <= min_height < max_height")
        if self.misalignment_offset < 0:
            raise ValueError("misalignment_offset must be >= 0")
        if self.noise_level < 0 or self.image_noise < 0:
            raise ValueError("noise levels must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["building_count"] = list(self.building_count)
        d["footprint_size"] = list(self.footprint_size)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SceneConfig":
        obj = dict(obj)
        for k in ("building_count", "footprint_size"):
            if k in obj:
                obj[k] = tuple(obj[k])
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class Tile:
    tile_id: str
    image: np.ndarray
    ndsm: HeightMap
    instances: InstanceSet
    footprints: tuple = field(default=(), repr=False)  # (row0, col0, rows, cols, height)


def tile_id_for(index: int) -> str:
    return f"tile{index:05d}"


def tile_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def sample_heights(rng: np.random.Generator, cfg: SceneConfig, n: int) -> np.ndarray:
    h = rng.lognormal(cfg.height_mu, cfg.height_sigma, size=n)
    return np.clip(h, cfg.min_height, _below(cfg.max_height))


def _below(x: float) -> float:
    # largest float32 strictly below x, so stored heights stay < max
    return float(np.nextafter(np.float32(x), np.float32(0)))


def _place(rng, cfg: SceneConfig, count: int):
    size = cfg.tile_size
    occupied = np.zeros((size, size), dtype=bool)
    rects = []
    attempts = 0
    lo, hi = cfg.footprint_size
    while len(rects) < count:
        if attempts >= MAX_PLACEMENT_ATTEMPTS:
            raise RuntimeError(
                f"could not place {count} buildings without overlap in {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        attempts += 1
        rows, cols = rng.integers(lo, hi + 1, size=2)
        r0 = int(rng.integers(0, size - rows + 1))
        c0 = int(rng.integers(0, size - cols + 1))
        # one-pixel gap keeps footprints from touching
        if occupied[max(r0 - 1, 0) : r0 + rows + 1, max(c0 - 1, 0) : c0 + cols + 1].any():
            continue
        occupied[r0 : r0 + rows, c0 : c0 + cols] = True
        rects.append((r0, c0, int(rows), int(cols)))
    return rects


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.normal(size=(cells, cells))
    return resize_array(coarse, (size, size))


def shift_mask(mask: np.ndarray, offset: int) -> np.ndarray:
    """Translate a mask by ``offset`` pixels down and right, clipping at the edge."""
    if offset == 0:
        return mask.copy()
    out = np.zeros_like(mask)
    if offset >= min(mask.shape):
        return out
    out[offset:, offset:] = mask[: mask.shape[0] - offset, : mask.shape[1] - offset]
    return out


def generate_tile(cfg: SceneConfig, index: int) -> Tile:
    rng = tile_rng(cfg.seed, index)
    size = cfg.tile_size
    lo, hi = cfg.building_count
    count = int(rng.integers(lo, hi + 1))
    rects = _place(rng, cfg, count)
    heights = sample_heights(rng, cfg, len(rects))

    ndsm = np.zeros((size, size), dtype=np.float64)
    building = np.zeros((size, size), dtype=bool)
    for (r0, c0, rows, cols), h in zip(rects, heights):
        roof = np.full((rows, cols), h)
        if cfg.noise_level > 0:
            roof = roof + rng.normal(0, cfg.noise_level, size=roof.shape)
        ndsm[r0 : r0 + rows, c0 : c0 + cols] = np.clip(roof, 0.1, _below(cfg.max_height))
        building[r0 : r0 + rows, c0 : c0 + cols] = True

    # ground texture
    ground = np.array([0.36, 0.42, 0.30])[:, None, None] + 0.05 * _smooth_noise(rng, size, max(size // 8, 2))
    image = np.broadcast_to(ground, (3, size, size)).copy()
    # shadows toward +row/+col, length grows with height
    shadow = np.zeros((size, size), dtype=bool)
    for (r0, c0, rows, cols), h in zip(rects, heights):
        length = int(min(np.ceil(h / 8.0), 6))
        for d in range(1, length + 1):
            shadow[min(r0 + d, size) : min(r0 + rows + d, size), min(c0 + d, size) : min(c0 + cols + d, size)] = True
    shadow &= ~building
    image[:, shadow] *= 0.55
    # rooftops: hue tracks log-height, with a mild shading ramp
    log_max = np.log1p(cfg.max_height)
    for (r0, c0, rows, cols), h in zip(rects, heights):
        t = np.log1p(h) / log_max
        color = np.array([0.2 + 0.75 * t, 0.8 - 0.6 * t, 0.5])
        ramp = 0.92 + 0.08 * np.linspace(0, 1, cols)[None, :]
        image[:, r0 : r0 + rows, c0 : c0 + cols] = color[:, None, None] * ramp[None]
    if cfg.image_noise > 0:
        image += rng.normal(0, cfg.image_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    tid = tile_id_for(index)
    insts = []
    for r0, c0, rows, cols in rects:
        fp = np.zeros((size, size), dtype=bool)
        fp[r0 : r0 + rows, c0 : c0 + cols] = True
        fp = shift_mask(fp, cfg.misalignment_offset)
        if fp.any():
            insts.append(Instance(mask_to_box(fp, 1.0), fp))
    footprints = tuple((r0, c0, rows, cols, float(h)) for (r0, c0, rows, cols), h in zip(rects, heights))
    return Tile(
        tid,
        image,
        HeightMap(ndsm.astype(np.float32)),
        InstanceSet(tid, "gt", tuple(insts), 1.0, (size, size)),
        footprints,
    )


def write_tile(tile: Tile, out_dir) -> dict:
    out_dir = Path(out_dir)
    paths = {
        "tile_id": tile.tile_id,
        "image": f"{tile.tile_id}.image.f32",
        "ndsm": f"{tile.tile_id}.ndsm.f32",
        "instances": f"{tile.tile_id}.instances.json",
    }
    write_image(out_dir / paths["image"], tile.image)
    write_height_map(out_dir / paths["ndsm"], tile.ndsm)
    write_instance_set(out_dir / paths["instances"], tile.instances)
    return paths


def generate_split(cfg: SceneConfig, n_train: int, n_val: int, out_dir=None) -> dict:
    """Generate disjoint train/val tiles; write them when ``out_dir`` is given.

    Train tiles use indices ``0..n_train-1`` and validation tiles follow.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("split counts must be >= 1")
    manifest = {"config": cfg.to_json(), "train": [], "val": []}
    ranges = {"train": range(0, n_train), "val": range(n_train, n_train + n_val)}
    for split, idx in ranges.items():
        for i in idx:
            tile = generate_tile(cfg, i)
            if out_dir is not None:
                rec = write_tile(tile, Path(out_dir) / split)
                rec = {k: (f"{split}/{v}" if k != "tile_id" else v) for k, v in rec.items()}
            else:
                rec = {"tile_id": tile.tile_id}
            rec["index"] = i
            manifest[split].append(rec)
    if out_dir is not None:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# Detector simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorSim:
    """A noisy stand-in for a trained instance segmenter."""

    recall: float = 0.85
    box_jitter: float = 0.8
    false_positives: float = 1.0
    fp_score: tuple[float, float] = (0.3, 0.9)
    tp_score: tuple[float, float] = (0.5, 1.0)

    def to_json(self) -> dict:
        d = asdict(self)
        d["fp_score"] = list(self.fp_score)
        d["tp_score"] = list(self.tp_score)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorSim":
        obj = dict(obj)
        for k in ("fp_score", "tp_score"):
            if k in obj:
                obj[k] = tuple(obj[k])
        return cls(**obj)


def _jitter_box(rng, box: BBox, sigma: float, size: tuple[int, int], score: float) -> BBox:
    x0, y0, x1, y1 = np.asarray(box.coords) + rng.normal(0, sigma, size=4)
    h, w = size
    x0, x1 = sorted((float(np.clip(x0, 0, w)), float(np.clip(x1, 0, w))))
    y0, y1 = sorted((float(np.clip(y0, 0, h)), float(np.clip(y1, 0, h))))
    return BBox(x0, y0, x1, y1, score)


def simulate_detector(
    gt: InstanceSet,
    model_id: str,
    sim: DetectorSim,
    seed: int,
    model_weight: float = 1.0,
) -> InstanceSet:
    """Detections derived from ground truth: misses, jittered boxes, false positives.

    Masks are the pixels whose centers fall inside the detected box.
    """
    size = gt.tile_size
    rng = np.random.default_rng([seed, zlib.crc32(model_id.encode()), zlib.crc32(gt.tile_id.encode())])
    out = []
    for inst in gt.instances:
        if rng.uniform() >= sim.recall:
            continue
        score = float(rng.uniform(*sim.tp_score))
        box = _jitter_box(rng, inst.bbox, sim.box_jitter, size, score)
        mask = box_to_mask(box, size)
        if mask.any():
            out.append(Instance(box, mask))
    for _ in range(int(rng.poisson(sim.false_positives))):
        h, w = size
        bw, bh = rng.uniform(3, max(4, w / 4), size=2)
        x0 = rng.uniform(0, w - bw)
        y0 = rng.uniform(0, h - bh)
        box = BBox(x0, y0, x0 + bw, y0 + bh, float(rng.uniform(*sim.fp_score)))
        mask = box_to_mask(box, size)
        if mask.any():
            out.append(Instance(box, mask))
    return InstanceSet(gt.tile_id, model_id, tuple(out), model_weight, size)
