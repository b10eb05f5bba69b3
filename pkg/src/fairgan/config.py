"""Pipeline configuration: versioned JSON schema, validation and content hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from pathlib import Path

from .datasets import BENCHMARK_SHARES
from .errors import ConfigError
from .explore import ExploreConfig
from .models import ModelConfig
from .training import ClassifierConfig, TrainConfig

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "dataset": {
        "kind": "gaussian",
        "num_classes": 5,
        "total": 3000,
        "shares": list(BENCHMARK_SHARES),
        "radius": 0.6,
        "sigma": 0.06,
        # balanced set for the classifier and as the FID reference
        "balanced_per_class": 600,
        "path": None,
        "head": 5000,
        "long_tail_total": 29028,
    },
    "model": {
        "latent_dim": 8,
        "g_hidden": [64, 64],
        "d_hidden": [64, 64, 64],
        "c_hidden": [32, 16],
        "init_std": 0.02,
    },
    "classifier": {"steps": 600, "batch_size": 128, "lr": 1e-2, "holdout": 0.1, "accuracy_floor": 0.9},
    "train": {"steps": 3000, "batch_size": 128, "lr": 2e-3, "finetune_factor": 0.1, "bias_mode": "soft",
              "lambdas": "auto", "lambda_refresh": 500, "r1_gamma": 1.0, "r1_interval": 16,
              "beta1": 0.0, "beta2": 0.99, "eps": 1e-8, "eval_every": 500, "checkpoint_every": 0},
    "explore": {"mutations": 4, "delta": 0.25, "max_iter": 50, "tau": 0.7, "max_dequeues": None,
                "seed_tries": 50000, "max_seeds": 200, "per_class": 600, "use_discriminator": True,
                "d_percentile": 1.0},
    "rebalance": {"freeze_d": None, "second_stage_bias": False},
    "eval": {"repeats": 5, "samples": 2000, "is_splits": 10},
    "audit": {"set_size": 500, "profiles": {}},
}

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"bias_loss", "reweight", "freeze_d", "seed", "bias_batch"}
_CLF_KEYS = {f.name for f in fields(ClassifierConfig)} - {"seed", "model", "beta1", "beta2", "eps"}
_EXPLORE_KEYS = {f.name for f in fields(ExploreConfig)} - {"seed"} | {"per_class", "use_discriminator"}


def _merge(base: dict, over: dict, path: str, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            problems.append(f"unknown key {where!r}")
        elif isinstance(base[key], dict) and key != "profiles":
            if not isinstance(value, dict):
                problems.append(f"{where} must be an object")
            else:
                out[key] = _merge(base[key], value, where, problems)
        else:
            out[key] = value
    return out


class PipelineConfig:
    """A fully resolved, validated pipeline configuration."""

    def __init__(self, data: dict):
        self.data = data

    @classmethod
    def from_dict(cls, raw: dict | None = None, seed: int | None = None) -> PipelineConfig:
        raw = raw or {}
        problems: list[str] = []
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            problems.append(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        data = _merge(DEFAULTS, raw, "", problems)
        if seed is not None:
            data["seed"] = seed
        problems += _check(data)
        if problems:
            raise ConfigError("invalid pipeline config", problems)
        return cls(data)

    @classmethod
    def load(cls, path, seed: int | None = None) -> PipelineConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(raw, seed)

    # ------------------------------------------------------------ views

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def section(self, name: str) -> dict:
        return self.data[name]

    def model_config(self, data_shape, seed: int | None = None) -> ModelConfig:
        m = self.data["model"]
        return ModelConfig(tuple(data_shape), self.data["dataset"]["num_classes"], m["latent_dim"],
                           tuple(m["g_hidden"]), tuple(m["d_hidden"]), tuple(m["c_hidden"]),
                           m["init_std"], self.seed if seed is None else seed)

    def classifier_config(self) -> ClassifierConfig:
        m = self.data["model"]
        model = {"c_hidden": tuple(m["c_hidden"]), "init_std": m["init_std"]}
        return ClassifierConfig(**self.data["classifier"], seed=self.seed, model=model)

    def train_config(self, **overrides) -> TrainConfig:
        return TrainConfig(**self.data["train"], seed=self.seed, **overrides)

    def explore_config(self) -> ExploreConfig:
        e = {k: v for k, v in self.data["explore"].items() if k not in ("per_class", "use_discriminator")}
        return ExploreConfig(**e, seed=self.seed)

    # ------------------------------------------------------------ hashing

    def canonical(self, sections=None) -> str:
        d = self.data if sections is None else {k: self.data[k] for k in ["schema_version", "seed", *sections]}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self, sections=None, extra=None) -> str:
        """sha256 of the canonical JSON of ``sections`` (all when None) plus ``extra``."""
        text = self.canonical(sections)
        if extra is not None:
            text += json.dumps(extra, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"


def _check(d: dict) -> list[str]:
    problems = []
    if not isinstance(d["seed"], int) or d["seed"] < 0:
        problems.append("seed must be a non-negative integer")
    ds = d["dataset"]
    if ds["kind"] not in ("gaussian", "cifar10"):
        problems.append("dataset.kind must be 'gaussian' or 'cifar10'")
    if ds["kind"] == "cifar10":
        if not ds["path"]:
            problems.append("dataset.path is required for cifar10")
        if ds["num_classes"] != 10:
            problems.append("dataset.num_classes must be 10 for cifar10")
    if not isinstance(ds["num_classes"], int) or ds["num_classes"] < 2:
        problems.append("dataset.num_classes must be an integer >= 2")
    elif ds["kind"] == "gaussian" and len(ds["shares"]) != ds["num_classes"]:
        problems.append(f"dataset.shares has {len(ds['shares'])} entries for {ds['num_classes']} classes")
    if any(s <= 0 for s in ds["shares"]):
        problems.append("dataset.shares must be positive")
    if ds["total"] < ds["num_classes"]:
        problems.append("dataset.total must cover every class")
    if ds["balanced_per_class"] < 2:
        problems.append("dataset.balanced_per_class must be >= 2")
    if not ds["sigma"] > 0 or not ds["radius"] > 0:
        problems.append("dataset.radius and dataset.sigma must be positive")

    shape = (3, 32, 32) if ds["kind"] == "cifar10" else (2,)
    m = d["model"]
    try:
        ModelConfig(shape, max(ds["num_classes"], 2), m["latent_dim"], tuple(m["g_hidden"]),
                    tuple(m["d_hidden"]), tuple(m["c_hidden"]), m["init_std"])
    except (ConfigError, TypeError) as exc:
        problems += [f"model: {v}" for v in getattr(exc, "violations", [str(exc)])]

    for name, allowed in (("train", _TRAIN_KEYS), ("classifier", _CLF_KEYS), ("explore", _EXPLORE_KEYS)):
        for key in d[name]:
            if key not in allowed:
                problems.append(f"unknown key '{name}.{key}'")
    try:
        tc = TrainConfig(**{k: v for k, v in d["train"].items() if k in _TRAIN_KEYS})
        problems += [f"train: {v}" for v in tc.violations(ds["num_classes"])]
    except TypeError as exc:
        problems.append(f"train: {exc}")
    c = d["classifier"]
    if c["steps"] < 0 or c["batch_size"] < 1 or not c["lr"] > 0:
        problems.append("classifier: steps >= 0, batch_size >= 1 and lr > 0 are required")
    if not 0 < c["holdout"] < 1:
        problems.append("classifier.holdout must lie in (0, 1)")
    try:
        ExploreConfig(**{k: v for k, v in d["explore"].items() if k not in ("per_class", "use_discriminator")})
    except ConfigError as exc:
        problems += [f"explore: {v}" for v in exc.violations]
    except TypeError as exc:
        problems.append(f"explore: {exc}")
    if d["explore"]["per_class"] < 1:
        problems.append("explore.per_class must be >= 1")
    fd = d["rebalance"]["freeze_d"]
    if fd is not None and (not isinstance(fd, int) or fd < 0):
        problems.append("rebalance.freeze_d must be null or a non-negative integer")
    e = d["eval"]
    if e["repeats"] < 1 or e["samples"] < 2:
        problems.append("eval.repeats must be >= 1 and eval.samples >= 2")
    if d["audit"]["set_size"] < 2:
        problems.append("audit.set_size must be >= 2")
    for name, prof in d["audit"]["profiles"].items():
        if len(prof) != ds["num_classes"] or any(p < 0 for p in prof) or sum(prof) <= 0:
            problems.append(f"audit.profiles.{name} must be {ds['num_classes']} non-negative weights")
    return problems
