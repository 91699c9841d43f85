"""Experiment configuration: one JSON document describing a whole run."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cascade import StagePlan
from .phantom import PhantomSpec
from .unet import UNetConfig

PLAN_SETS = ("pretrain", "train", "finetune")

DEFAULTS = {
    "seed": 0,
    "skin_threshold_hu": -500.0,
    "unet": {"levels": 3, "base_channels": 8, "in_channels": 2, "out_channels": 5},
    "phantom": {
        "spec": {"dims": [64, 64, 64], "spacing": [0.9, 0.9, 0.6], "noise_sigma": [25.0, 12.0], "blur_sigma": 0.7},
        "n_dect": 12,
        "dect_seed": 1000,
        "n_sect": 4,
        "sect_seed": 5000,
    },
    "plans": {
        "pretrain": {
            "stage1": {"downsample": 2, "patch": [24, 24, 24], "batch_size": 2, "iterations": 1000, "learning_rate": 1e-3},
            "stage2": {"downsample": 1, "patch": [32, 32, 32], "batch_size": 2, "iterations": 900, "learning_rate": 1e-3},
        },
        "train": {
            "stage1": {"downsample": 2, "patch": [24, 24, 24], "batch_size": 2, "iterations": 1000, "learning_rate": 1e-3},
            "stage2": {"downsample": 1, "patch": [32, 32, 32], "batch_size": 2, "iterations": 900, "learning_rate": 1e-3},
        },
        "finetune": {
            "stage1": {"downsample": 2, "patch": [24, 24, 24], "batch_size": 2, "iterations": 1000, "learning_rate": 1e-4},
            "stage2": {"downsample": 1, "patch": [32, 32, 32], "batch_size": 2, "iterations": 900, "learning_rate": 1e-4},
        },
    },
    "folds": {"k": 3, "seed": 0, "use_validation": True},
    "alpha": {"train": 0.6, "test": 0.6, "study_train": [0.3, 0.6, 0.9], "study_test": [0.3, 0.6, 0.9], "study_fold": 0},
    "paths": {"dect_manifest": None, "sect_manifest": None, "pretrained": None, "runs": "runs"},
}


class ConfigError(ValueError):
    """Raised with every problem found in a configuration, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


def _open_node(path):
    """Nodes whose keys are checked by the dataclass they feed rather than by the defaults."""
    parts = path.split(".")
    return parts == ["phantom", "spec"] or (len(parts) == 3 and parts[0] == "plans")


def _merge(base, override, path, problems):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base and not _open_node(path):
            problems.append(f"unknown key '{where}'")
        elif isinstance(base.get(key), dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where, problems)
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    data: dict
    source: Path = None
    problems: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, raw, source=None):
        if not isinstance(raw, dict):
            raise ConfigError(["top level must be a JSON object"])
        problems = []
        data = _merge(DEFAULTS, raw, "", problems)
        cfg = cls(data, Path(source) if source else None, problems)
        cfg.validate()
        return cfg

    @classmethod
    def read(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError([f"config file {path} not found"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
        return cls.from_dict(raw, path)

    @classmethod
    def default(cls):
        return cls.from_dict({})

    # -- typed views ---------------------------------------------------------

    @property
    def seed(self):
        return int(self.data["seed"])

    @property
    def unet(self):
        return UNetConfig(**self.data["unet"])

    def phantom_spec(self):
        return PhantomSpec.from_dict({"seed": 0, **self.data["phantom"]["spec"]})

    def plans(self, which):
        d = self.data["plans"][which]
        alpha = float(self.data["alpha"]["train"])
        return (
            StagePlan(stage=1, alpha_training=alpha, **d["stage1"]),
            StagePlan(stage=2, alpha_training=alpha, **d["stage2"]),
        )

    def path(self, key):
        value = self.data["paths"][key]
        if value is None:
            return None
        p = Path(value)
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p

    # -- validation ----------------------------------------------------------

    def validate(self, require=()):
        """Collect every problem; raise :class:`ConfigError` if there are any.

        ``require`` names path keys that must be set and exist.
        """
        problems = list(self.problems)
        d = self.data

        def check(label, fn):
            try:
                return fn()
            except (TypeError, ValueError) as exc:
                problems.append(f"{label}: {exc}")

        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
            problems.append("seed must be an explicit integer")
        unet = check("unet", lambda: UNetConfig(**d["unet"]))
        check("phantom.spec", self.phantom_spec)
        for key in ("n_dect", "n_sect", "dect_seed", "sect_seed"):
            if not isinstance(d["phantom"][key], int) or d["phantom"][key] < 0:
                problems.append(f"phantom.{key} must be a non-negative integer")
        for which in PLAN_SETS:
            for stage in (1, 2):
                plan = check(
                    f"plans.{which}.stage{stage}",
                    lambda: StagePlan(stage=stage, **d["plans"][which][f"stage{stage}"]),
                )
                if plan is not None and unet is not None:
                    check(f"plans.{which}.stage{stage}", lambda: plan.check(unet))
        for key in ("train", "test"):
            v = d["alpha"][key]
            if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                problems.append(f"alpha.{key} must lie in [0, 1], got {v!r}")
        for key in ("study_train", "study_test"):
            vals = d["alpha"][key]
            if not isinstance(vals, list) or not vals or any(
                not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0 for v in vals
            ):
                problems.append(f"alpha.{key} must be a non-empty list of values in [0, 1]")
        k = d["folds"]["k"]
        if not isinstance(k, int) or k < 1:
            problems.append(f"folds.k must be an integer >= 1, got {k!r}")
        if not isinstance(d["folds"]["seed"], int):
            problems.append("folds.seed must be an explicit integer")
        sf = d["alpha"]["study_fold"]
        if not isinstance(sf, int) or (isinstance(k, int) and not 0 <= sf < max(k, 1)):
            problems.append(f"alpha.study_fold must index one of the {k} folds")
        for key in require:
            p = self.path(key)
            if p is None:
                problems.append(f"paths.{key} must be set")
            elif not p.exists():
                problems.append(f"paths.{key}: {p} does not exist")
        if problems:
            raise ConfigError(problems)
        return self

    # -- identity --------------------------------------------------------------

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def digest(self, length=10):
        """Short content hash; paths are excluded so moving the data keeps the identity."""
        body = {k: v for k, v in self.data.items() if k != "paths"}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:length]

    def override(self, dotted, value):
        """Return a copy with ``a.b.c`` set to ``value`` (re-validated)."""
        data = copy.deepcopy(self.data)
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        if leaf not in node:
            raise ConfigError([f"unknown key '{dotted}'"])
        node[leaf] = value
        cfg = RunConfig(data, self.source)
        cfg.validate()
        return cfg
