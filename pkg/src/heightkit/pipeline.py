"""File-based pipeline stages and the run orchestrator.

Every stage reads its inputs from files and writes its outputs under its
own directory, so any stage can be re-run on its own from the CLI. The
orchestrator chains them, hashes each stage's outputs, and records the
hashes, timings and metrics in ``manifest.json``.

Height chain:   gen-synthetic -> synth-labels -> normalize -> train-toy
                -> infer -> aggregate -> correct -> eval-height
Instance chain: gen-instances -> simulate-detectors -> fuse -> eval-instances
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import config as config_mod
from .fusion import FusionConfig, fused_to_json, nms_baseline, rescale_instance_set, wsf
from .losses import LossWeights, softmax
from .metrics import combined_score, evaluate_heights, evaluate_instances
from .network import ToyDualDecoder, forward, load_checkpoint, save_checkpoint
from .postproc import aggregate_multiscale, correct_heights, resize_array
from .preproc import (
    HierarchySpec,
    cluster_hierarchy_spec,
    compute_norm_constant,
    denormalize_heights,
    normalize_heights,
    synthesize_hierarchy_labels,
)
from .raster import (
    HierarchyMap,
    NormalizedHeightMap,
    read_height_map,
    read_hierarchy_map,
    read_image,
    read_instance_set,
    read_normalized_map,
    write_height_map,
    write_hierarchy_map,
    write_instance_set,
    write_normalized_map,
)
from .synth import DetectorSim, SceneConfig, generate_split, generate_tile, simulate_detector, write_tile
from .training import Sample, TrainConfig, train

log = logging.getLogger(__name__)

NDSM = ".ndsm.f32"
IMAGE = ".image.f32"
LABELS = ".labels.u8"
NORM = ".norm.f32"
HEIGHT = ".height.f32"
SEG = ".seg.u8"
INSTANCES = ".instances.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _tiles(directory, suffix: str) -> dict[str, Path]:
    """``{tile_id: path}`` for files ending in ``suffix`` anywhere below ``directory``."""
    out = {}
    for p in sorted(Path(directory).rglob("*" + suffix)):
        tid = p.name[: -len(suffix)]
        if tid in out:
            raise ValueError(f"duplicate tile {tid} under {directory}")
        out[tid] = p
    return out


def _relocate(src: Path, root: Path, out_root: Path, suffix: str) -> Path:
    """Mirror ``src``'s position below ``root`` under ``out_root``."""
    rel = src.relative_to(root).parent
    return out_root / rel / (src.name.split(".")[0] + suffix)


def _map(fn: Callable, items: Iterable, workers: int) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def hash_tree(directory) -> tuple[str, dict[str, str]]:
    """Digest over the sorted relative paths and contents of all files."""
    directory = Path(directory)
    files = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            files[p.relative_to(directory).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    h = hashlib.sha256()
    for name, digest in files.items():
        h.update(f"{name}\0{digest}\n".encode())
    return h.hexdigest(), files


# ---------------------------------------------------------------------------
# Height stages
# ---------------------------------------------------------------------------


def gen_synthetic(scene: SceneConfig, n_train: int, n_val: int, out_dir) -> dict:
    return generate_split(scene, n_train, n_val, out_dir)


def _fit_dir(ndsm_dir: Path) -> Path:
    # statistics come from the training split when the layout has one
    return ndsm_dir / "train" if (ndsm_dir / "train").is_dir() else ndsm_dir


def synth_labels(ndsm_dir, out_dir, spec: HierarchySpec | None = None, cluster: int | None = None,
                 workers: int = 1) -> HierarchySpec:
    """Bin every nDSM below ``ndsm_dir`` into hierarchy labels."""
    ndsm_dir, out_dir = Path(ndsm_dir), Path(out_dir)
    if cluster is not None:
        fit = [read_height_map(p) for p in _tiles(_fit_dir(ndsm_dir), NDSM).values()]
        spec = cluster_hierarchy_spec(fit, cluster)
    spec = spec or HierarchySpec()
    tiles = _tiles(ndsm_dir, NDSM)
    if not tiles:
        raise FileNotFoundError(f"no *{NDSM} files under {ndsm_dir}")

    def one(p):
        labels = synthesize_hierarchy_labels(read_height_map(p), spec)
        write_hierarchy_map(_relocate(p, ndsm_dir, out_dir, LABELS), labels)

    _map(one, tiles.values(), workers)
    spec.save(out_dir / "hierarchy.json")
    return spec


def normalize(ndsm_dir, out_dir, norm_constant: float | None = None, workers: int = 1) -> float:
    """Log-normalize every nDSM; the constant is fit on the training split by default."""
    ndsm_dir, out_dir = Path(ndsm_dir), Path(out_dir)
    if norm_constant is None:
        norm_constant = compute_norm_constant(read_height_map(p) for p in _tiles(_fit_dir(ndsm_dir), NDSM).values())
    tiles = _tiles(ndsm_dir, NDSM)

    def one(p):
        write_normalized_map(_relocate(p, ndsm_dir, out_dir, NORM), normalize_heights(read_height_map(p), norm_constant))

    _map(one, tiles.values(), workers)
    _write_json(out_dir / "norm.json", {"norm_constant": norm_constant})
    return norm_constant


def load_samples(image_dir, labels_dir, norm_dir) -> list[Sample]:
    images = _tiles(image_dir, IMAGE)
    labels = _tiles(labels_dir, LABELS)
    targets = _tiles(norm_dir, NORM)
    missing = sorted(set(images) - set(labels) | set(images) - set(targets))
    if missing:
        raise FileNotFoundError(f"labels or targets missing for tiles: {', '.join(missing)}")
    return [
        Sample(read_image(images[t]), read_hierarchy_map(labels[t]).data, read_normalized_map(targets[t]).data)
        for t in sorted(images)
    ]


def train_toy(data_dir, labels_dir, norm_dir, out_path, train_cfg: TrainConfig, weights: LossWeights,
              seed: int) -> tuple[ToyDualDecoder, list[float]]:
    """Train on the ``train`` split and write the checkpoint plus loss trace."""
    data_dir, labels_dir, norm_dir = Path(data_dir), Path(labels_dir), Path(norm_dir)
    spec = HierarchySpec.load(labels_dir / "hierarchy.json")
    norm_constant = json.loads((norm_dir / "norm.json").read_text(encoding="utf-8"))["norm_constant"]
    samples = load_samples(_fit_dir(data_dir), _fit_dir(labels_dir), _fit_dir(norm_dir))
    model = ToyDualDecoder.init(spec.n_classes, seed=seed)
    model, trace = train(model, samples, train_cfg, weights)
    model = ToyDualDecoder(model.params, model.n_classes, seed, norm_constant)
    out_path = Path(out_path)
    save_checkpoint(model, out_path)
    _write_json(out_path.with_name(out_path.stem + ".trace.json"),
                {"config": train_cfg.to_json(), "loss": [float(x) for x in trace]})
    return model, trace


def scale_dir_name(scale: float) -> str:
    return f"scale_{scale:g}"


def _scaled_size(n: int, scale: float) -> int:
    return max(2, 2 * round(n * scale / 2))


def infer(model_path, image_dir, out_dir, scales: Sequence[float] = (1.0,), workers: int = 1) -> list[str]:
    """Per-scale height maps plus one class map from the scale-averaged softmax.

    Heights are written at the scale they were predicted at
    (``scale_<s>/<tile>.height.f32``); aggregation resamples them.
    """
    model = load_checkpoint(model_path)
    if model.norm_constant is None:
        raise ValueError(f"{model_path}: checkpoint has no norm_constant")
    image_dir, out_dir = Path(image_dir), Path(out_dir)
    tiles = _tiles(image_dir, IMAGE)
    if not tiles:
        raise FileNotFoundError(f"no *{IMAGE} files under {image_dir}")

    def one(item):
        tid, path = item
        image = read_image(path)
        _, h, w = image.shape
        probs = np.zeros((model.n_classes, h, w))
        for s in scales:
            size = (_scaled_size(h, s), _scaled_size(w, s))
            x = image if size == (h, w) else np.stack([resize_array(c, size) for c in image])
            height, logits = forward(model, x.astype(np.float32))
            hm = denormalize_heights(NormalizedHeightMap(height, model.norm_constant))
            write_height_map(out_dir / scale_dir_name(s) / (tid + HEIGHT), hm)
            p = softmax(logits.astype(np.float64), axis=0)
            probs += p if size == (h, w) else np.stack([resize_array(c, (h, w)) for c in p])
        write_hierarchy_map(out_dir / (tid + SEG), HierarchyMap(probs.argmax(0).astype(np.uint8), model.n_classes))
        return tid

    return _map(one, sorted(tiles.items()), workers)


def aggregate(input_dirs: Sequence, out_dir, target_size: tuple[int, int] | None = None, workers: int = 1) -> None:
    """Pixelwise max over the per-scale predictions of each tile.

    Without ``target_size`` each tile keeps the size of its first input.
    """
    per_dir = [_tiles(d, HEIGHT) for d in input_dirs]
    tids = sorted(set().union(*per_dir))
    out_dir = Path(out_dir)

    def one(tid):
        maps = [read_height_map(d[tid]) for d in per_dir if tid in d]
        if len(maps) != len(per_dir):
            raise FileNotFoundError(f"tile {tid} missing from some scales")
        write_height_map(out_dir / (tid + HEIGHT), aggregate_multiscale(maps, target_size or maps[0].shape))

    _map(one, tids, workers)


def correct(height_dir, seg_dir, out_dir, min_height: float = 3.0, workers: int = 1) -> None:
    heights = _tiles(height_dir, HEIGHT)
    segs = _tiles(seg_dir, SEG)
    missing = sorted(set(heights) - set(segs))
    if missing:
        raise FileNotFoundError(f"no class map for tiles: {', '.join(missing)}")
    out_dir = Path(out_dir)

    def one(tid):
        fixed = correct_heights(read_height_map(heights[tid]), read_hierarchy_map(segs[tid]), min_height)
        write_height_map(out_dir / (tid + HEIGHT), fixed)

    _map(one, sorted(heights), workers)


def copy_heights(src_dir, out_dir) -> None:
    """Pass-through used when correction is disabled."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for tid, p in _tiles(src_dir, HEIGHT).items():
        write_height_map(out_dir / (tid + HEIGHT), read_height_map(p))


# ---------------------------------------------------------------------------
# Instance stages
# ---------------------------------------------------------------------------


def gen_instances(scene: SceneConfig, n_tiles: int, out_dir, workers: int = 1) -> list[str]:
    """Ground-truth tiles for the extraction chain."""
    out_dir = Path(out_dir)

    def one(i):
        return write_tile(generate_tile(scene, i), out_dir)["tile_id"]

    return _map(one, range(n_tiles), workers)


def simulate_detectors(gt_dir, out_dir, models: Sequence[dict], seed: int, workers: int = 1) -> None:
    """One directory of InstanceSets per simulated detector."""
    gt = _tiles(gt_dir, INSTANCES)
    out_dir = Path(out_dir)

    def one(tid):
        s = read_instance_set(gt[tid])
        for m in models:
            params = {k: v for k, v in m.items() if k not in ("model_id", "weight")}
            det = simulate_detector(s, m["model_id"], DetectorSim(**params), seed, m.get("weight", 1.0))
            write_instance_set(out_dir / m["model_id"] / (tid + INSTANCES), det)

    _map(one, sorted(gt), workers)


def read_sets_by_tile(input_dir) -> dict[str, list]:
    """All InstanceSet files below ``input_dir`` grouped by tile id."""
    groups: dict[str, list] = {}
    for p in sorted(Path(input_dir).rglob("*" + INSTANCES)):
        s = read_instance_set(p)
        groups.setdefault(s.tile_id, []).append(s)
    return groups


def fuse(input_dir, out_dir, cfg: FusionConfig | None = None, method: str = "wsf", workers: int = 1) -> None:
    """Fuse every tile's sets with WSF (or the NMS baseline)."""
    cfg = cfg or FusionConfig()
    groups = read_sets_by_tile(input_dir)
    if not groups:
        raise FileNotFoundError(f"no *{INSTANCES} files under {input_dir}")
    out_dir = Path(out_dir)

    def one(tid):
        sets = groups[tid]
        sizes = [s.tile_size for s in sets if s.tile_size is not None]
        native = max(sizes, key=lambda hw: hw[0] * hw[1]) if sizes else None
        if native is not None:
            sets = [rescale_instance_set(s, native) for s in sets]
        fused = wsf(sets, cfg) if method == "wsf" else nms_baseline(sets, cfg.iou_threshold)
        _write_json(out_dir / (tid + INSTANCES), fused_to_json(tid, fused, method, native))

    _map(one, sorted(groups), workers)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


class _Run:
    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = out
        self.stages: list[dict] = []
        self.metrics: dict = {}

    def stage(self, name: str, fn: Callable[[Path], object]):
        target = self.out / name
        if target.exists():
            shutil.rmtree(target)
        target.mkdir(parents=True)
        t0 = time.perf_counter()
        try:
            result = fn(target)
        except Exception as exc:
            quarantine = self.out / "quarantine" / name
            if quarantine.exists():
                shutil.rmtree(quarantine)
            quarantine.parent.mkdir(parents=True, exist_ok=True)
            shutil.move(str(target), str(quarantine))
            self.stages.append({"name": name, "status": "failed", "error": str(exc),
                                "seconds": time.perf_counter() - t0})
            raise StageError(name, exc) from exc
        digest, files = hash_tree(target)
        self.stages.append({"name": name, "status": "ok", "hash": digest, "files": len(files),
                            "seconds": round(time.perf_counter() - t0, 3)})
        log.info("stage %s done in %.2fs", name, self.stages[-1]["seconds"])
        return result


def manifest_hash(manifest: dict) -> str:
    """Digest of config, stage hashes and metrics.

    Timings and the worker count are excluded: neither changes any output.
    """
    stable = {
        "config": {k: v for k, v in manifest["config"].items() if k != "workers"},
        "stages": [{k: v for k, v in s.items() if k != "seconds"} for s in manifest["stages"]],
        "metrics": manifest["metrics"],
        "status": manifest["status"],
    }
    return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()


def _scene(cfg: dict, section: dict | None = None) -> SceneConfig:
    params = dict(cfg["scene"])
    if section:
        params.update({k: section[k] for k in ("tile_size", "building_count", "footprint_size")})
    return SceneConfig.from_json({**params, "seed": cfg["seed"]})


def _height_chain(run: _Run, cfg: dict, workers: int) -> None:
    scales = cfg["inference"]["scales"]
    h = cfg["hierarchy"]
    run.stage("gen-synthetic", lambda o: gen_synthetic(_scene(cfg), cfg["split"]["train"], cfg["split"]["val"], o))
    data = run.out / "gen-synthetic"
    spec = None if h["cluster"] else HierarchySpec(tuple(h["boundaries"]), tuple(h["names"]) if h["names"] else None)
    run.stage("synth-labels", lambda o: synth_labels(data, o, spec, h["cluster"], workers))
    run.stage("normalize", lambda o: normalize(data, o, workers=workers))
    weights = LossWeights(cfg["loss"]["alpha"], cfg["loss"]["beta"])
    t = cfg["train"]
    train_cfg = TrainConfig(t["lr"], t["iterations"], t["batch_size"], cfg["seed"], tuple(t["scale_jitter"]),
                            t["rotate"], t["decay_power"])
    _, trace = run.stage("train-toy", lambda o: train_toy(data, run.out / "synth-labels", run.out / "normalize",
                                                          o / "model.bin", train_cfg, weights, cfg["seed"]))
    run.metrics["train"] = {"loss_first": float(trace[0]), "loss_last": float(trace[-1])}
    run.stage("infer", lambda o: infer(run.out / "train-toy" / "model.bin", data / "val", o, scales, workers))
    inf = run.out / "infer"
    run.stage("aggregate", lambda o: aggregate([inf / scale_dir_name(s) for s in scales], o,
                                               (cfg["scene"]["tile_size"],) * 2, workers))
    if cfg["postproc"]["correct"]:
        run.stage("correct", lambda o: correct(run.out / "aggregate", inf, o, cfg["postproc"]["min_height"], workers))
    else:
        run.stage("correct", lambda o: copy_heights(run.out / "aggregate", o))

    def evaluate(o):
        report = evaluate_heights(run.out / "correct", data / "val", cfg["eval"]["eps"], cfg["eval"]["allow_partial"])
        rec = {"delta1": report.delta1, "delta2": report.delta2, "delta3": report.delta3,
               "pixels": report.evaluated_pixels}
        _write_json(o / "report.json", {**rec, "per_tile": report.per_tile})
        return rec

    run.metrics["height"] = run.stage("eval-height", evaluate)


def _instance_chain(run: _Run, cfg: dict, workers: int) -> None:
    det = cfg["detectors"]
    fcfg = cfg["fusion"]
    fusion_cfg = FusionConfig(fcfg["iou_threshold"], fcfg["skip_box_threshold"], fcfg["mask_binarize_threshold"],
                              fcfg["score_mode"])
    run.stage("gen-instances", lambda o: gen_instances(_scene(cfg, det), cfg["split"]["val"], o, workers))
    gt = run.out / "gen-instances"
    run.stage("simulate-detectors", lambda o: simulate_detectors(gt, o, det["models"], cfg["seed"], workers))
    dets = run.out / "simulate-detectors"

    def fuse_all(o):
        fuse(dets, o / "wsf", fusion_cfg, "wsf", workers)
        fuse(dets, o / "nms", FusionConfig(iou_threshold=fcfg["nms_iou_threshold"]), "nms", workers)

    run.stage("fuse", fuse_all)

    def evaluate(o):
        allow = cfg["eval"]["allow_partial"]
        results = {}
        for name, d in [("wsf", run.out / "fuse" / "wsf"), ("nms", run.out / "fuse" / "nms")] + [
            (m["model_id"], dets / m["model_id"]) for m in det["models"]
        ]:
            r = evaluate_instances(d, gt, allow)
            results[name] = {"ap50": r.ap50, "map": r.map, "per_threshold": r.per_threshold}
        _write_json(o / "report.json", results)
        singles = [results[m["model_id"]]["ap50"] for m in det["models"]]
        return {"ap50": results["wsf"]["ap50"], "map": results["wsf"]["map"],
                "nms_ap50": results["nms"]["ap50"], "best_single_ap50": max(singles)}

    run.metrics["instances"] = run.stage("eval-instances", evaluate)


def run_pipeline(cfg: dict, output_dir) -> dict:
    """Execute the configured chain(s) and write ``manifest.json``.

    ``cfg`` is normalized (defaults applied) before use. On a stage failure
    the stage's partial outputs move to ``quarantine/<stage>``, the manifest
    is written with status ``failed``, and ``StageError`` is raised.
    """
    cfg = config_mod.normalize_config(cfg)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = config_mod.worker_count(cfg)
    run = _Run(cfg, out)
    manifest = {"config": cfg, "stages": run.stages, "metrics": run.metrics, "status": "ok"}
    try:
        if cfg["pipeline"] in ("height", "full"):
            _height_chain(run, cfg, workers)
        if cfg["pipeline"] in ("instances", "full"):
            _instance_chain(run, cfg, workers)
    except StageError:
        manifest["status"] = "failed"
        raise
    finally:
        if "height" in run.metrics and "instances" in run.metrics and run.metrics["instances"]["ap50"] is not None:
            run.metrics["combined"] = combined_score(run.metrics["instances"]["ap50"], run.metrics["height"]["delta1"])
        manifest["manifest_hash"] = manifest_hash(manifest)
        _write_json(out / "manifest.json", manifest)
    return manifest
