"""Run configuration: JSON schema, defaults and dataset construction."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import jsonschema

from .data import AugmentPolicy, Dataset, corrupt_labels, load_csv, load_idx, synth_blobs
from .losses import ADM_FORMS, FEAT_VARIANTS, PRESETS, DistillConfig
from .nn import ModelSpec, preset_spec
from .trainer import OptimConfig, RunPlan


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted location of the problem."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}
_POS_INT = {"type": "integer", "minimum": 1}
_SHAPE = {"type": "array", "items": _POS_INT, "minItems": 3, "maxItems": 3}


def _obj(properties: dict, required=()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required), "additionalProperties": False}


SCHEMA = _obj({
    "models": {
        "type": "array",
        "minItems": 2,
        "items": _obj({
            "name": {"type": "string", "minLength": 1},
            "role": {"enum": ["teacher", "student"]},
            "preset": {"enum": ["tiny-a", "tiny-b"]},
            "stage_widths": {"type": "array", "items": _POS_INT, "minItems": 1},
            "blocks_per_stage": _POS_INT,
            "norm": {"enum": ["batchnorm", "none"]},
            "classifier_bias": {"type": "boolean"},
            "seed": {"type": "integer"},
        }, required=("name", "role")),
    },
    "data": _obj({
        "source": {"enum": ["blobs", "idx", "csv"]},
        "classes": _POS_INT,
        "per_class": _POS_INT,
        "test_per_class": _POS_INT,
        "shape": _SHAPE,
        "noise_sigma": _NONNEG,
        "seed": {"type": "integer"},
        "train_images": {"type": "string"},
        "train_labels": {"type": "string"},
        "test_images": {"type": "string"},
        "test_labels": {"type": "string"},
        "train_path": {"type": "string"},
        "test_path": {"type": "string"},
        "augment": _obj({
            "enabled": {"type": "boolean"},
            "pad": {"type": "integer", "minimum": 0},
            "crop": {"anyOf": [{"type": "null"}, {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2}]},
            "hflip_prob": _UNIT,
        }),
        "label_noise": _obj({"fraction": _UNIT, "seed": {"type": "integer"}}),
    }),
    "distill": _obj({
        "preset": {"enum": sorted(PRESETS)},
        "tau": _POS,
        "lam": _NONNEG,
        "alpha": _NONNEG,
        "beta": _NONNEG,
        "gamma": _NONNEG,
        "eps": _POS,
        "adm_form": {"enum": list(ADM_FORMS)},
        "feat_variant": {"enum": list(FEAT_VARIANTS)},
        "delta_start": _UNIT,
        "delta_end": _UNIT,
    }),
    "optim": _obj({
        "lr": _POS,
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": _NONNEG,
        "milestones": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "decay": _POS,
    }),
    "run": _obj({
        "mode": {"enum": ["online", "offline", "multi"]},
        "epochs": _POS_INT,
        "batch_size": _POS_INT,
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "eval_every": {"type": "integer", "minimum": 0},
        "teacher_checkpoint": {"type": ["string", "null"]},
        "teacher_pretrain_epochs": {"type": "integer", "minimum": 0},
    }),
}, required=("models",))


BLOB_DEFAULTS = {"classes": 4, "per_class": 200, "test_per_class": 50, "shape": [1, 16, 16],
                 "noise_sigma": 0.1, "seed": 0}

DEFAULTS = {
    "data": {
        "source": "blobs",
        "augment": {"enabled": False, "pad": 2, "crop": None, "hflip_prob": 0.0},
        "label_noise": {"fraction": 0.0, "seed": 0},
    },
    "distill": {"preset": "imagenet-like",
                **{k: v for k, v in DistillConfig().to_dict().items() if k != "mode"}},
    "optim": {"lr": 0.1, "momentum": 0.9, "weight_decay": 1e-4, "milestones": [30, 60, 90], "decay": 0.1},
    "run": {
        "mode": "online", "epochs": 100, "batch_size": 256, "seed": 0, "output_dir": "runs/default",
        "checkpoint_every": 1, "eval_every": 1, "teacher_checkpoint": None, "teacher_pretrain_epochs": 0,
    },
}


def _json_path(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        missing = error.message.split("'")[1] if "'" in error.message else ""
        parts.append(missing)
    if error.validator == "additionalProperties":
        extra = error.message.split("'")[1] if "'" in error.message else ""
        parts.append(extra)
    return ".".join(p for p in parts if p)


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    """A fully defaulted configuration document."""

    models: List[dict]
    data: dict
    distill: dict
    optim: dict
    run: dict
    base_dir: Path = Path(".")

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {"models": copy.deepcopy(self.models), "data": copy.deepcopy(self.data),
                "distill": copy.deepcopy(self.distill), "optim": copy.deepcopy(self.optim),
                "run": copy.deepcopy(self.run)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # ------------------------------------------------------------------
    def distill_config(self) -> DistillConfig:
        d = dict(self.distill)
        d.pop("preset")
        return DistillConfig(mode=self.run["mode"], **d)

    def optim_config(self) -> OptimConfig:
        o = self.optim
        return OptimConfig(o["lr"], o["momentum"], o["weight_decay"], list(o["milestones"]), o["decay"])

    def augment_policy(self) -> Optional[AugmentPolicy]:
        a = self.data["augment"]
        if not a["enabled"]:
            return None
        return AugmentPolicy(a["pad"], tuple(a["crop"]) if a["crop"] else None, a["hflip_prob"], True)

    def plan(self) -> RunPlan:
        r = self.run
        return RunPlan(r["mode"], [m["role"] for m in self.models], r["epochs"], r["batch_size"], r["seed"],
                       self.distill_config(), self.optim_config(), self.augment_policy(), r["eval_every"])

    def model_specs(self, input_shape: Tuple[int, int, int], num_classes: int) -> List[ModelSpec]:
        specs = []
        for m in self.models:
            if "preset" in m:
                spec = preset_spec(m["preset"], input_shape, num_classes, m["name"])
            else:
                spec = ModelSpec(m["name"], m["stage_widths"], 1, tuple(input_shape), num_classes)
            for key in ("blocks_per_stage", "norm", "classifier_bias"):
                if key in m:
                    setattr(spec, key, m[key])
            if "stage_widths" in m:
                spec.stage_widths = list(m["stage_widths"])
            spec.validate()
            specs.append(spec)
        return specs

    def model_seeds(self) -> List[int]:
        return [m.get("seed", self.run["seed"] * 1000 + i) for i, m in enumerate(self.models)]

    def datasets(self) -> Tuple[Dataset, Dataset]:
        return build_datasets(self.data, self.base_dir)


def parse_config(doc: dict, base_dir=".") -> RunConfig:
    """Validate ``doc`` against the schema and fill in defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("", "configuration must be a JSON object")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        raise ConfigError(_json_path(err), err.message)
    full = _merge(DEFAULTS, {k: v for k, v in doc.items() if k != "models"})
    if full["data"]["source"] == "blobs":
        full["data"] = _merge(BLOB_DEFAULTS, full["data"])
    if "preset" in doc.get("distill", {}):
        # a preset supplies alpha/beta/gamma unless they are given explicitly
        for k, v in PRESETS[doc["distill"]["preset"]].items():
            if k not in doc["distill"]:
                full["distill"][k] = v
    models = copy.deepcopy(doc["models"])
    names = [m["name"] for m in models]
    if len(set(names)) != len(names):
        raise ConfigError("models", f"model names must be unique, got {names}")
    for i, m in enumerate(models):
        if "preset" not in m and "stage_widths" not in m:
            raise ConfigError(f"models.{i}", "needs either 'preset' or 'stage_widths'")
    cfg = RunConfig(models, full["data"], full["distill"], full["optim"], full["run"], Path(base_dir))
    _semantic_checks(cfg)
    return cfg


def _semantic_checks(cfg: RunConfig) -> None:
    from .trainer import PlanError
    from .losses import ConfigError as LossConfigError

    ms = cfg.optim["milestones"]
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigError("optim.milestones", f"must be strictly increasing, got {ms}")
    try:
        cfg.plan().validate()
    except PlanError as exc:
        raise ConfigError("run.mode", str(exc)) from None
    except LossConfigError as exc:
        raise ConfigError("distill", str(exc)) from None
    d = cfg.data
    required = {"idx": ("train_images", "train_labels", "test_images", "test_labels"),
                "csv": ("train_path", "test_path")}.get(d["source"], ())
    for key in required:
        if key not in d:
            raise ConfigError(f"data.{key}", f"required for source {d['source']!r}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("", f"{path}: no such config file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, path.parent)


def build_datasets(data: dict, base_dir=".") -> Tuple[Dataset, Dataset]:
    """(train, test) splits for a data section; label noise hits the train split only."""
    base = Path(base_dir)
    src = data["source"]
    if src == "blobs":
        shape = tuple(data["shape"])
        train = synth_blobs(data["classes"], data["per_class"], shape, data["noise_sigma"], data["seed"], "train")
        test = synth_blobs(data["classes"], data["test_per_class"], shape, data["noise_sigma"],
                           data["seed"] + 1, "test")
    elif src == "idx":
        train = load_idx(base / data["train_images"], base / data["train_labels"], data.get("classes"), "train")
        test = load_idx(base / data["test_images"], base / data["test_labels"], train.num_classes, "test")
    else:
        shape = tuple(data["shape"]) if "shape" in data else None
        train = load_csv(base / data["train_path"], shape, data.get("classes"), "train")
        test = load_csv(base / data["test_path"], train.shape, train.num_classes, "test")
    noise = data["label_noise"]
    if noise["fraction"] > 0:
        train = corrupt_labels(train, noise["fraction"], noise["seed"])
    return train, test
