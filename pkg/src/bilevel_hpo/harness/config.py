"""Experiment configuration: YAML files layered over per-task profile defaults."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..bilevel import BilevelProblem, CVConfig, UDConfig
from ..data import Dataset, SplitSpec, inject_label_noise, load_idx, split, synth_blobs
from ..errors import ContractViolation
from ..models import (
    FeatureLearningSpec,
    ReweightingSpec,
    feature_learning_losses,
    reweighting_losses,
    scalar_quadratic_losses,
)

TASKS = ("feature_learning", "reweighting", "scalar_quadratic")
PROFILES = ("desk", "paper")


class ConfigError(ValueError):
    """A configuration file or flag is invalid; the message names the field."""


_REWEIGHTING_DESK = {
    "data": {
        "source": "synthetic",
        "num_classes": 4,
        "input_dim": 20,
        "class_sep": 1.5,
        "pool_size": 1000,
        "n_train": 500,
        "n_val": 50,
        "n_test": 200,
        "noise": 0.3,
        "seed": None,
    },
    "model": {"hidden_dim": 16},
    "ud": {
        "T": 300,
        "K": 64,
        "outer_mode": "GD",
        "inner_mode": "GD",
        "alpha": 100.0,
        "schedule": "constant",
        "eta": 0.6,
        "mu": 0.0,
        "nu": 0.0,
        "outer_batch": 50,
        "inner_batch": 100,
    },
    "cv": {"T": 300, "K": 64, "inner_mode": "GD", "eta": 0.6, "nu": 0.0, "inner_batch": 100,
           "sampler": "gaussian", "std": 1.0, "lo": -1.0, "hi": 1.0},
    "sweep": {"K": None, "mu": None, "nu": None, "T": None},
    "seeds": [0, 1, 2, 3, 4],
}

_REWEIGHTING_PAPER = {
    "data": {
        "source": "synthetic",
        "num_classes": 10,
        "input_dim": 784,
        "class_sep": 2.0,
        "pool_size": None,
        "n_train": 2000,
        "n_val": 200,
        "n_test": 1000,
        "noise": 0.5,
        "seed": None,
    },
    "model": {"hidden_dim": 256},
    "ud": {
        "T": 1000,
        "K": 512,
        "outer_mode": "SGD",
        "inner_mode": "SGD",
        "alpha": 10.0,
        "schedule": "constant",
        "eta": 0.3,
        "mu": 0.0,
        "nu": 0.0,
        "outer_batch": 100,
        "inner_batch": 100,
    },
    "cv": {"T": 1000, "K": 512, "inner_mode": "SGD", "eta": 0.3, "nu": 0.0, "inner_batch": 100,
           "sampler": "gaussian", "std": 1.0, "lo": -1.0, "hi": 1.0},
}

_FEATURE_DESK = {
    "data": {
        "source": "synthetic",
        "num_classes": 20,
        "input_dim": 196,
        "class_sep": 3.0,
        "pool_size": None,
        "n_train": 100,
        "n_val": 20,
        "n_test": 200,
        "noise": 0.0,
        "seed": None,
    },
    "model": {"feature_dim": 64, "hidden_dim": 32},
    "ud": {
        "T": 100,
        "K": 16,
        "outer_mode": "SGD",
        "inner_mode": "SGD",
        "alpha": 0.1,
        "schedule": "constant",
        "eta": 0.1,
        "mu": 0.0,
        "nu": 0.0,
        "outer_batch": 10,
        "inner_batch": 50,
    },
    "cv": {"T": 100, "K": 16, "inner_mode": "SGD", "eta": 0.1, "nu": 0.0, "inner_batch": 50,
           "sampler": "gaussian", "std": None, "lo": -1.0, "hi": 1.0},
}

_FEATURE_PAPER = {
    "data": {
        "source": "synthetic",
        "num_classes": 100,
        "input_dim": 784,
        "class_sep": 3.0,
        "pool_size": None,
        "n_train": 500,
        "n_val": 100,
        "n_test": 1000,
        "noise": 0.0,
        "seed": None,
    },
    "model": {"feature_dim": 256, "hidden_dim": 128},
    "ud": {
        "T": 1000,
        "K": 256,
        "outer_mode": "SGD",
        "inner_mode": "SGD",
        "alpha": 0.1,
        "schedule": "constant",
        "eta": 0.1,
        "mu": 0.0,
        "nu": 0.0,
        "outer_batch": 50,
        "inner_batch": 50,
    },
    "cv": {"T": 1000, "K": 256, "inner_mode": "SGD", "eta": 0.1, "nu": 0.0, "inner_batch": 50,
           "sampler": "gaussian", "std": None, "lo": -1.0, "hi": 1.0},
}

_QUADRATIC = {
    "data": {"theta0": 0.0, "lam0": 2.0},
    "model": {},
    "ud": {
        "T": 200,
        "K": 3,
        "outer_mode": "GD",
        "inner_mode": "GD",
        "alpha": 0.5,
        "schedule": "constant",
        "eta": 0.5,
        "mu": 0.0,
        "nu": 0.0,
        "outer_batch": 1,
        "inner_batch": 1,
    },
    "cv": {"T": 100, "K": 3, "inner_mode": "GD", "eta": 0.5, "nu": 0.0, "inner_batch": 1,
           "sampler": "uniform_box", "std": 1.0, "lo": -3.0, "hi": 3.0},
}

_COMMON = {
    "sweep": {"K": None, "mu": None, "nu": None, "T": None},
    "seeds": [0, 1, 2, 3, 4],
    "out": "results",
    "workers": 1,
}


def defaults(task, profile="desk"):
    if task not in TASKS:
        raise ConfigError(f"task: must be one of {TASKS}, got {task!r}")
    if profile not in PROFILES:
        raise ConfigError(f"profile: must be one of {PROFILES}, got {profile!r}")
    table = {
        ("reweighting", "desk"): _REWEIGHTING_DESK,
        ("reweighting", "paper"): _REWEIGHTING_PAPER,
        ("feature_learning", "desk"): _FEATURE_DESK,
        ("feature_learning", "paper"): _FEATURE_PAPER,
        ("scalar_quadratic", "desk"): _QUADRATIC,
        ("scalar_quadratic", "paper"): _QUADRATIC,
    }
    base = copy.deepcopy(_COMMON)
    _merge(base, copy.deepcopy(table[task, profile]), "")
    base["task"], base["profile"] = task, profile
    return base


def _merge(base, override, prefix):
    for key, value in override.items():
        name = f"{prefix}{key}"
        if isinstance(base.get(key), dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{name}: expected a mapping, got {value!r}")
            _merge(base[key], value, name + ".")
        else:
            base[key] = value


def _check_keys(raw, ref, prefix=""):
    for key, value in raw.items():
        name = f"{prefix}{key}"
        if key not in ref:
            raise ConfigError(f"{name}: unknown field")
        if isinstance(ref[key], dict) and isinstance(value, dict):
            _check_keys(value, ref[key], name + ".")


@dataclass
class ExperimentConfig:
    task: str
    profile: str
    data: dict
    model: dict
    ud: dict
    cv: dict
    sweep: dict
    seeds: list
    out: str = "results"
    workers: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    # -- sweep cells -------------------------------------------------------

    def axis(self, name, algorithm):
        values = self.sweep.get(name)
        if values is None:
            base = self.ud if algorithm == "ud" else self.cv
            return [base.get(name, 0.0)]
        return list(values)

    def cells(self, algorithm):
        """(seed, K, mu, nu) for every run in the sweep, in a fixed order."""
        mus = self.axis("mu", algorithm) if algorithm == "ud" else [0.0]
        out = []
        for seed in self.seeds:
            for K in self.axis("K", algorithm):
                for mu in mus:
                    for nu in self.axis("nu", algorithm):
                        out.append((int(seed), int(K), float(mu), float(nu)))
        return out

    def horizon(self, algorithm):
        """Run length: the largest swept T, else the algorithm's own T.

        Trajectories are prefix-consistent, so one run of length max(T)
        covers every shorter checkpoint.
        """
        values = self.sweep.get("T")
        if values is None:
            return int((self.ud if algorithm == "ud" else self.cv)["T"])
        return int(max(values))

    def ud_config(self, seed, K, mu, nu):
        u = dict(self.ud, T=self.horizon("ud"))
        try:
            return UDConfig(
                T=int(u["T"]), K=K, outer_mode=u["outer_mode"], inner_mode=u["inner_mode"],
                alpha=float(u["alpha"]), schedule=u["schedule"], eta=float(u["eta"]),
                mu=mu, nu=nu, outer_batch=int(u["outer_batch"]),
                inner_batch=int(u["inner_batch"]), seed=seed,
            ).validate()
        except (ContractViolation, TypeError, ValueError) as err:
            raise ConfigError(f"ud: {err}") from None

    def cv_config(self, seed, K, nu, problem=None):
        c = dict(self.cv, T=self.horizon("cv"))
        std = c.get("std")
        if std is None:
            std = _init_scale(problem)
        try:
            return CVConfig(
                T=int(c["T"]), K=K, inner_mode=c["inner_mode"], eta=float(c["eta"]), nu=nu,
                inner_batch=int(c["inner_batch"]), seed=seed, sampler=c["sampler"],
                std=float(std), lo=float(c["lo"]), hi=float(c["hi"]),
            ).validate()
        except (ContractViolation, TypeError, ValueError) as err:
            raise ConfigError(f"cv: {err}") from None

    # -- problem construction ----------------------------------------------

    def problem(self, seed):
        if self.task == "scalar_quadratic":
            d = self.data
            dummy = Dataset(np.zeros((1, 1)), np.zeros(1, dtype=np.int64), 1)
            losses = scalar_quadratic_losses(float(d.get("theta0", 0.0)), float(d.get("lam0", 0.0)))
            return BilevelProblem(dummy, dummy, dummy, losses)
        train, val, test = self.datasets(seed)
        m = self.model
        if self.task == "reweighting":
            spec = ReweightingSpec(train.input_dim, int(m["hidden_dim"]), train.num_classes, len(train))
            losses = reweighting_losses(spec)
        else:
            spec = FeatureLearningSpec(
                train.input_dim, int(m["feature_dim"]), int(m["hidden_dim"]), train.num_classes
            )
            losses = feature_learning_losses(spec)
        return BilevelProblem(train, val, test, losses)

    def datasets(self, seed):
        d = self.data
        data_seed = seed if d.get("seed") is None else int(d["seed"])
        sizes = SplitSpec(int(d["n_train"]), int(d["n_val"]), int(d["n_test"]), seed=data_seed)
        total = sizes.n_train + sizes.n_val + sizes.n_test
        if d["source"] == "idx":
            try:
                # class count comes from the labels unless the user set it
                full = load_idx(d["images"], d["labels"], self.raw.get("data", {}).get("num_classes"))
            except KeyError as err:
                raise ConfigError(f"data.{err.args[0]}: required for idx source") from None
        elif d["source"] == "synthetic":
            k = int(d["num_classes"])
            pool = max(total, int(d.get("pool_size") or 0))
            per_class = -(-pool // k)
            full = synth_blobs(k, int(d["input_dim"]), per_class, float(d["class_sep"]), data_seed)
        else:
            raise ConfigError(f"data.source: must be synthetic or idx, got {d['source']!r}")
        try:
            train, val, test = split(full, sizes)
        except ContractViolation as err:
            raise ConfigError(f"data: {err}") from None
        noise = float(d.get("noise", 0.0))
        if noise:
            # validation and test stay clean
            train = inject_label_noise(train, noise, data_seed)
        return train, val, test


def _init_scale(problem):
    """Typical magnitude of the initial hyperparameter (fallback 1)."""
    if problem is None:
        return 1.0
    lam = problem.init_lam(0)
    flat = np.concatenate([np.ravel(v) for v in lam])
    scale = float(np.abs(flat).max()) if flat.size else 0.0
    return scale if scale > 0 else 1.0


def parse_seeds(text):
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seeds: expected a comma-separated list of integers, got {text!r}") from None


def load_config(path=None, task=None, profile=None, overrides=None, env=None):
    """Build an :class:`ExperimentConfig` from defaults, a YAML file and overrides.

    Precedence (lowest first): profile defaults, the file, the ``BILEVEL_SEED``
    environment variable (seeds only), then explicit ``overrides``.
    """
    env = os.environ if env is None else env
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as err:
            raise ConfigError(f"config: cannot read {path}: {err.strerror}") from None
        except yaml.YAMLError as err:
            raise ConfigError(f"config: invalid YAML in {path}: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a mapping")
    overrides = dict(overrides or {})
    task = overrides.pop("task", None) or task or raw.get("task", "reweighting")
    profile = overrides.pop("profile", None) or profile or raw.get("profile", "desk")
    cfg = defaults(task, profile)
    _check_keys(raw, dict(cfg, task=None, profile=None))
    _merge(cfg, {k: v for k, v in raw.items() if k not in ("task", "profile")}, "")
    if env.get("BILEVEL_SEED"):
        cfg["seeds"] = parse_seeds(env["BILEVEL_SEED"])
    _merge(cfg, overrides, "")
    user = copy.deepcopy(raw)
    for key, value in overrides.items():
        if isinstance(value, dict):
            user.setdefault(key, {}).update(value)
        else:
            user[key] = value

    seeds = cfg["seeds"]
    if isinstance(seeds, (int, str)):
        seeds = parse_seeds(seeds)
    if not seeds:
        raise ConfigError("seeds: must be non-empty")
    cfg["seeds"] = [int(s) for s in seeds]
    for axis in ("K", "mu", "nu", "T"):
        values = cfg["sweep"].get(axis)
        if isinstance(values, (int, float)) and not isinstance(values, bool):
            values = cfg["sweep"][axis] = [values]
        if values is not None:
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep.{axis}: expected a non-empty list, got {values!r}")
            if axis in ("K", "T") and any(int(v) != v or v < 0 for v in values):
                raise ConfigError(f"sweep.{axis}: values must be nonnegative integers")
            if axis in ("mu", "nu") and any(float(v) < 0 for v in values):
                raise ConfigError(f"sweep.{axis}: values must be nonnegative")
    try:
        workers = int(cfg["workers"])
    except (TypeError, ValueError):
        raise ConfigError(f"workers: expected an integer, got {cfg['workers']!r}") from None
    if workers < 1:
        raise ConfigError("workers: must be >= 1")
    return ExperimentConfig(
        task=task, profile=profile, data=cfg["data"], model=cfg["model"], ud=cfg["ud"],
        cv=cfg["cv"], sweep=cfg["sweep"], seeds=cfg["seeds"], out=str(cfg["out"]),
        workers=workers, raw=user,
    )
