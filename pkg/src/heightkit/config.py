"""Run configuration: schema, defaults and environment overrides.

A run is described by one JSON document. Missing keys take defaults,
unknown keys are rejected, and every violation is reported with the JSON
pointer of the offending value.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from jsonschema import Draft202012Validator

from .preproc import DEFAULT_BOUNDARIES, DEFAULT_NAMES

DEFAULTS: dict = {
    "seed": 3,
    "workers": None,
    "pipeline": "height",
    "scene": {
        "tile_size": 32,
        "building_count": [2, 5],
        "footprint_size": [4, 10],
        "height_mu": 2.0,
        "height_sigma": 0.8,
        "min_height": 3.0,
        "max_height": 187.0,
        "misalignment_offset": 0,
        "noise_level": 0.0,
        "image_noise": 0.02,
    },
    "split": {"train": 64, "val": 16},
    "hierarchy": {"boundaries": list(DEFAULT_BOUNDARIES), "names": list(DEFAULT_NAMES), "cluster": None},
    "loss": {"alpha": 5.0, "beta": 30.0},
    "train": {
        "lr": 0.05,
        "iterations": 500,
        "batch_size": 8,
        "scale_jitter": [1.0, 1.0],
        "rotate": True,
        "decay_power": 1.0,
    },
    "inference": {"scales": [1.0]},
    "postproc": {"correct": True, "min_height": 3.0},
    "detectors": {
        "tile_size": 64,
        "building_count": [4, 8],
        "footprint_size": [5, 14],
        "models": [
            {"model_id": "det-a", "weight": 1.0, "recall": 0.85, "box_jitter": 0.8, "false_positives": 1.0},
            {"model_id": "det-b", "weight": 1.0, "recall": 0.8, "box_jitter": 1.0, "false_positives": 1.5},
            {"model_id": "det-c", "weight": 1.0, "recall": 0.9, "box_jitter": 1.2, "false_positives": 1.0},
        ],
    },
    "fusion": {
        "iou_threshold": 0.55,
        "skip_box_threshold": 0.0,
        "mask_binarize_threshold": 0.5,
        "score_mode": "weighted-average",
        "nms_iou_threshold": 0.55,
    },
    "eval": {"eps": 1.0, "allow_partial": False},
}

_num = {"type": "number"}
_nonneg = {"type": "number", "minimum": 0}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int_range = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2}
_unit = {"type": "number", "minimum": 0, "maximum": 1}


def _obj(props: dict, **extra) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, **extra}


SCHEMA = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": ["integer", "null"], "minimum": 1},
        "pipeline": {"enum": ["height", "instances", "full"]},
        "scene": _obj(
            {
                "tile_size": {"type": "integer", "minimum": 2, "multipleOf": 2},
                "building_count": _int_range,
                "footprint_size": _int_range,
                "height_mu": _num,
                "height_sigma": _nonneg,
                "min_height": _nonneg,
                "max_height": _pos,
                "misalignment_offset": {"type": "integer", "minimum": 0},
                "noise_level": _nonneg,
                "image_noise": _nonneg,
            }
        ),
        "split": _obj({"train": {"type": "integer", "minimum": 1}, "val": {"type": "integer", "minimum": 1}}),
        "hierarchy": _obj(
            {
                "boundaries": {"type": "array", "items": _nonneg, "minItems": 3},
                "names": {"type": ["array", "null"], "items": {"type": "string"}},
                "cluster": {"type": ["integer", "null"], "minimum": 2},
            }
        ),
        "loss": _obj({"alpha": _nonneg, "beta": _nonneg}),
        "train": _obj(
            {
                "lr": _nonneg,
                "iterations": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "scale_jitter": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                "rotate": {"type": "boolean"},
                "decay_power": _nonneg,
            }
        ),
        "inference": _obj({"scales": {"type": "array", "items": _pos, "minItems": 1}}),
        "postproc": _obj({"correct": {"type": "boolean"}, "min_height": _nonneg}),
        "detectors": _obj(
            {
                "tile_size": {"type": "integer", "minimum": 2, "multipleOf": 2},
                "building_count": _int_range,
                "footprint_size": _int_range,
                "models": {
                    "type": "array",
                    "minItems": 1,
                    "items": _obj(
                        {
                            "model_id": {"type": "string", "minLength": 1},
                            "weight": _nonneg,
                            "recall": _unit,
                            "box_jitter": _nonneg,
                            "false_positives": _nonneg,
                        },
                        required=["model_id"],
                    ),
                },
            }
        ),
        "fusion": _obj(
            {
                "iou_threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "skip_box_threshold": _unit,
                "mask_binarize_threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "score_mode": {"enum": ["average", "weighted-average"]},
                "nms_iou_threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            }
        ),
        "eval": _obj({"eps": _nonneg, "allow_partial": {"type": "boolean"}}),
    }
)

_VALIDATOR = Draft202012Validator(SCHEMA)


class ConfigError(ValueError):
    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p or '/'}: {m}" for p, m in errors))


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _merge_with_defaults(obj: dict) -> dict:
    cfg = _merge(DEFAULTS, obj)
    h = obj.get("hierarchy", {})
    # default names only describe the default bins
    if ("boundaries" in h or h.get("cluster")) and "names" not in h:
        cfg["hierarchy"]["names"] = None
    return cfg


def _check_bins(cfg):
    b = cfg["hierarchy"]["boundaries"]
    if b[0] != 0:
        yield "/hierarchy/boundaries", "first boundary must be 0"
    if any(hi <= lo for lo, hi in zip(b, b[1:])):
        yield "/hierarchy/boundaries", "boundaries must be strictly increasing"
    names = cfg["hierarchy"]["names"]
    if names is not None and cfg["hierarchy"]["cluster"] is None and len(names) != len(b) - 1:
        yield "/hierarchy/names", f"expected {len(b) - 1} names"


def _check_loss(cfg):
    if cfg["loss"]["alpha"] == 0 and cfg["loss"]["beta"] == 0:
        yield "/loss", "alpha and beta cannot both be zero"


def _check_ranges(cfg):
    keys = [(s, k) for s in ("scene", "detectors") for k in ("building_count", "footprint_size")]
    for section, key in keys + [("train", "scale_jitter")]:
        lo, hi = cfg[section][key]
        if lo > hi:
            yield f"/{section}/{key}", "range must satisfy lo <= hi"
    if cfg["scene"]["min_height"] >= cfg["scene"]["max_height"]:
        yield "/scene/min_height", "must be below max_height"


def _check_models(cfg):
    ids = [m["model_id"] for m in cfg["detectors"]["models"]]
    if len(set(ids)) != len(ids):
        yield "/detectors/models", "model_id values must be unique"


def _semantic_errors(cfg: dict, skip: set[str]) -> list[tuple[str, str]]:
    errors = []
    for check in (_check_bins, _check_loss, _check_ranges, _check_models):
        try:
            found = list(check(cfg))
        except (TypeError, KeyError, IndexError, ValueError):
            # malformed values are already reported by the schema
            continue
        errors += [e for e in found if not any(e[0] == s or e[0].startswith(s + "/") for s in skip)]
    return errors


def _schema_errors(obj: dict) -> list[tuple[str, str]]:
    errors = []
    for e in _VALIDATOR.iter_errors(obj):
        path = _pointer(e.absolute_path)
        if e.validator == "additionalProperties":
            extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            errors += [(f"{path}/{k}", "unknown key") for k in extra]
        else:
            errors.append((path, e.message))
    return sorted(errors)


def check_config(obj) -> list[tuple[str, str]]:
    """All violations as ``(json_pointer, message)`` pairs; empty when valid."""
    if not isinstance(obj, dict):
        return [("", "config must be a JSON object")]
    errors = _schema_errors(obj)
    return errors + _semantic_errors(_merge_with_defaults(obj), {p for p, _ in errors})


def normalize_config(obj: dict) -> dict:
    """Validated config with defaults applied; raises ``ConfigError``."""
    errors = check_config(obj)
    if errors:
        raise ConfigError(errors)
    return _merge_with_defaults(obj)


def validate_config(path) -> dict:
    """Read, validate and normalize a JSON config file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"invalid JSON: {exc}")]) from exc
    return normalize_config(obj)


def apply_env(cfg: dict, environ=None) -> dict:
    """``HGD_SEED`` replaces the seed; ``HGD_WORKERS`` caps parallelism."""
    environ = os.environ if environ is None else environ
    cfg = copy.deepcopy(cfg)
    if environ.get("HGD_SEED"):
        cfg["seed"] = int(environ["HGD_SEED"])
    if environ.get("HGD_WORKERS"):
        cap = max(1, int(environ["HGD_WORKERS"]))
        cfg["workers"] = min(cfg["workers"] or cap, cap)
    return cfg


def worker_count(cfg: dict) -> int:
    return cfg.get("workers") or os.cpu_count() or 1
