"""Command-line entry point: ``heightkit <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, apply_env, normalize_config, validate_config, worker_count
from .fusion import FusionConfig
from .losses import LossWeights
from .metrics import evaluate_heights, evaluate_instances, EvalReport
from .network import gradient_errors
from .postproc import aggregate_multiscale, correct_heights
from .preproc import HierarchySpec
from .raster import read_height_map, read_hierarchy_map, write_height_map
from .synth import SceneConfig
from .training import TrainConfig

GRADCHECK_TOLERANCE = 1e-4


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _load_config(path) -> dict:
    cfg = validate_config(path) if path else normalize_config({})
    return apply_env(cfg)


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8")) if path else {}


def cmd_gen_synthetic(args) -> int:
    obj = _load_json(args.config)
    if args.seed is not None:
        obj["seed"] = args.seed
    elif os.environ.get("HGD_SEED"):
        obj["seed"] = int(os.environ["HGD_SEED"])
    manifest = pl.gen_synthetic(SceneConfig.from_json(obj), args.train, args.val, args.out)
    print(f"wrote {len(manifest['train'])} train and {len(manifest['val'])} val tiles to {args.out}")
    return 0


def cmd_synth_labels(args) -> int:
    spec = HierarchySpec.load(args.spec) if args.spec else None
    spec = pl.synth_labels(args.ndsm_dir, args.out_dir, spec, args.cluster, args.workers or 1)
    _print_json(spec.to_json())
    return 0


def cmd_normalize(args) -> int:
    c = pl.normalize(args.ndsm_dir, args.out_dir, args.norm_constant, args.workers or 1)
    _print_json({"norm_constant": c})
    return 0


def cmd_train_toy(args) -> int:
    cfg = _load_config(args.config)
    t = cfg["train"]
    train_cfg = TrainConfig(t["lr"], t["iterations"], t["batch_size"], cfg["seed"], tuple(t["scale_jitter"]),
                            t["rotate"], t["decay_power"])
    weights = LossWeights(cfg["loss"]["alpha"], cfg["loss"]["beta"])
    with tempfile.TemporaryDirectory() as tmp:
        labels, norm = args.labels, args.normalized
        if labels is None:
            h = cfg["hierarchy"]
            spec = None if h["cluster"] else HierarchySpec(tuple(h["boundaries"]), h["names"])
            labels = Path(tmp) / "labels"
            pl.synth_labels(args.data, labels, spec, h["cluster"], worker_count(cfg))
        if norm is None:
            norm = Path(tmp) / "normalized"
            pl.normalize(args.data, norm, workers=worker_count(cfg))
        _, trace = pl.train_toy(args.data, labels, norm, args.out, train_cfg, weights, cfg["seed"])
    _print_json({"checkpoint": str(args.out), "loss_first": trace[0], "loss_last": trace[-1]})
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for seed in range(args.seed, args.seed + args.count):
        errs = gradient_errors(seed, args.size)
        err = max(errs.values())
        worst = max(worst, err)
        print(f"seed {seed} size {args.size}: max relative error {err:.3e}")
    ok = worst < GRADCHECK_TOLERANCE
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


def cmd_infer(args) -> int:
    tids = pl.infer(args.model, args.images, args.out, args.scales, args.workers or 1)
    print(f"inferred {len(tids)} tiles at scales {args.scales}")
    return 0


def cmd_aggregate(args) -> int:
    size = tuple(args.size) if len(args.size) == 2 else (args.size[0],) * 2
    out = aggregate_multiscale([read_height_map(p) for p in args.inputs], size)
    write_height_map(args.out, out)
    return 0


def cmd_correct(args) -> int:
    if Path(args.heights).is_dir():
        pl.correct(args.heights, args.seg, args.out, args.min_h, args.workers or 1)
    else:
        out = correct_heights(read_height_map(args.heights), read_hierarchy_map(args.seg), args.min_h)
        write_height_map(args.out, out)
    return 0


def cmd_fuse(args) -> int:
    cfg = FusionConfig(args.iou, args.skip_box_threshold, args.mask_threshold, args.score_mode)
    pl.fuse(args.inputs, args.out, cfg, args.method, args.workers or 1)
    return 0


def _report(report: EvalReport, out) -> int:
    if out:
        report.save(out)
    _print_json(report.to_json())
    return 0


def cmd_eval_height(args) -> int:
    d = evaluate_heights(args.pred, args.gt, args.eps, args.allow_partial)
    return _report(EvalReport(d, None, None), args.out)


def cmd_eval_instances(args) -> int:
    a = evaluate_instances(args.pred, args.gt, args.allow_partial)
    return _report(EvalReport(None, a, None), args.out)


def cmd_run_pipeline(args) -> int:
    cfg = _load_config(args.config)
    manifest = pl.run_pipeline(cfg, args.out)
    _print_json({"status": manifest["status"], "metrics": manifest["metrics"],
                 "manifest_hash": manifest["manifest_hash"]})
    return 0


def cmd_validate_config(args) -> int:
    _print_json(_load_config(args.config))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heightkit", description="Building height and instance toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=fn)
        return sp

    def workers(sp):
        sp.add_argument("--workers", type=int, default=None, help="worker threads for per-tile work")

    sp = add("gen-synthetic", cmd_gen_synthetic, "generate a synthetic train/val split")
    sp.add_argument("--config", help="scene config JSON")
    sp.add_argument("--train", type=int, default=64)
    sp.add_argument("--val", type=int, default=16)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("synth-labels", cmd_synth_labels, "bin nDSMs into hierarchy labels")
    sp.add_argument("--ndsm-dir", required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--spec", help="hierarchy spec JSON")
    g.add_argument("--cluster", type=int, help="fit this many classes by 1-D k-means")
    sp.add_argument("--out-dir", required=True)
    workers(sp)

    sp = add("normalize", cmd_normalize, "log-normalize nDSMs")
    sp.add_argument("--ndsm-dir", required=True)
    sp.add_argument("--norm-constant", type=float)
    sp.add_argument("--out-dir", required=True)
    workers(sp)

    sp = add("train-toy", cmd_train_toy, "train the toy dual-decoder network")
    sp.add_argument("--data", required=True, help="gen-synthetic output directory")
    sp.add_argument("--config", help="run config JSON (train, loss, hierarchy, seed)")
    sp.add_argument("--labels", help="synth-labels output (derived from --data when omitted)")
    sp.add_argument("--normalized", help="normalize output (derived from --data when omitted)")
    sp.add_argument("--out", required=True)

    sp = add("gradcheck", cmd_gradcheck, "compare analytic and finite-difference gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=6)
    sp.add_argument("--count", type=int, default=1, help="number of consecutive seeds")

    sp = add("infer", cmd_infer, "predict heights and class maps")
    sp.add_argument("--model", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--scales", type=float, nargs="+", default=[1.0])
    sp.add_argument("--out", required=True)
    workers(sp)

    sp = add("aggregate", cmd_aggregate, "pixelwise max over multi-scale height maps")
    sp.add_argument("--inputs", nargs="+", required=True)
    sp.add_argument("--size", type=int, nargs="+", required=True, help="N or ROWS COLS")
    sp.add_argument("--out", required=True)

    sp = add("correct", cmd_correct, "zero low heights on ground-class pixels")
    sp.add_argument("--heights", required=True, help="height raster or directory")
    sp.add_argument("--seg", required=True, help="class raster or directory")
    sp.add_argument("--min-h", type=float, default=3.0)
    sp.add_argument("--out", required=True)
    workers(sp)

    sp = add("fuse", cmd_fuse, "fuse instance sets per tile")
    sp.add_argument("--inputs", required=True, help="directory of InstanceSet JSON files")
    sp.add_argument("--iou", type=float, default=0.55)
    sp.add_argument("--skip-box-threshold", type=float, default=0.0)
    sp.add_argument("--mask-threshold", type=float, default=0.5)
    sp.add_argument("--score-mode", choices=["weighted-average", "average"], default="weighted-average")
    sp.add_argument("--method", choices=["wsf", "nms"], default="wsf")
    sp.add_argument("--out", required=True)
    workers(sp)

    for name, fn in (("eval-height", cmd_eval_height), ("eval-instances", cmd_eval_instances)):
        sp = add(name, fn, "evaluate predictions against ground truth")
        sp.add_argument("--pred", required=True)
        sp.add_argument("--gt", required=True)
        if name == "eval-height":
            sp.add_argument("--eps", type=float, default=1.0)
        sp.add_argument("--allow-partial", action="store_true")
        sp.add_argument("--out", help="write the report JSON here")

    sp = add("run-pipeline", cmd_run_pipeline, "run a configured pipeline end to end")
    sp.add_argument("--config", help="run config JSON (defaults when omitted)")
    sp.add_argument("--out", required=True)

    sp = add("validate-config", cmd_validate_config, "print the normalized config or its errors")
    sp.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for ptr, msg in exc.errors:
            print(f"config error at {ptr or '/'}: {msg}", file=sys.stderr)
        return 2
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
