"""Experiment configuration: JSON files merged over per-kind defaults.

A config has the sections ``scene``, ``estimator``, ``training`` and
``sweep`` plus ``kind``, ``out`` and ``seed``. Files and ``--override``
values may only set keys that exist in the defaults for their kind, so a
misspelt key is a config error rather than a silently ignored setting.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from ..estimators import config_hash

__all__ = ["ConfigError", "ExperimentConfig", "KINDS", "defaults", "load_config", "apply_override"]


class ConfigError(ValueError):
    pass


_SCENE = {
    "N": 16, "K": 4, "carrier": 28e9, "aperture": 0.5, "target": [20.0, 20.0], "pt_dbm": 20.0,
    "noise_dbm": -60.0, "sigma_r2": 5.0, "rcs": "fixed", "gamma0": 1.0,
}

_NET = {
    "hidden": [64, 64], "activation": "silu", "bias": True, "sigma_embedding": "sinusoidal",
    "sigma_features": 8, "class_embed": 16, "output": "scaled", "precondition": False,
}

_LINEAR_NET = {**_NET, "hidden": [], "activation": "identity", "bias": False, "sigma_embedding": "none"}

_TRAINING = {
    "iterations": 20000, "epochs": 0, "batch": 128, "lr": 1e-3, "lr_schedule": "constant",
    "ema_decay": 0.999, "grad_clip": 0.0, "p_uncond": 0.1, "samples": 20000, "probes": 1,
}

_GRID = {"levels": 64, "lo": 1e-3, "hi": 1e2}

_DEFAULTS = {
    "detection": {
        "scene": dict(_SCENE),
        "estimator": {
            "probe": "optimal",
            "grid": dict(_GRID),
            "net": dict(_LINEAR_NET),
            "eval": {"samples": 200000, "chunk": 8192, "target_pfa": 0.1, "lrt_trials": 0},
        },
        "training": {**_TRAINING, "iterations": 30000, "samples": 200000},
        "sweep": {"variable": "pt_dbm", "grid": [30.5, 35.0, 40.0, 45.0, 50.0]},
    },
    "localization": {
        "scene": dict(_SCENE),
        "estimator": {
            "cases": ["fixed", "exp"],
            "probe": "random",
            "probe_seed": 3,
            "net": {**_LINEAR_NET, "bias": True, "output": "score"},
            "eval": {"prior_samples": 6000, "measurements": 32},
        },
        "training": {**_TRAINING, "lr": 1e-2, "samples": 100000},
        "sweep": {"variable": "pt_dbm", "grid": [-10.0, 0.0, 10.0, 20.0, 30.0]},
    },
    "mi": {
        "scene": {},
        "estimator": {
            "scores": "learned",
            "signal_var": 1.0,
            "grid": dict(_GRID),
            "net": dict(_NET),
            "eval": {"samples": 20000, "chunk": 8192},
        },
        "training": {**_TRAINING, "p_uncond": 0.2},
        "sweep": {"variable": "snr", "grid": [0.0, 0.5, 1.0, 2.0, 5.0]},
    },
    "mmse": {
        "scene": {},
        "estimator": {
            "prior": {"kind": "gaussian", "var": 1.0, "separation": 3.0, "std": 0.6, "weight": 0.4},
            "dim": 32,
            "measurements": 16,
            "denoiser": "analytic",
            "var_rule": "second-order",
            "max_iter": 10,
            "tol": 1e-8,
            "damping": True,
            "grid": {"levels": 32, "lo": 1e-2, "hi": 1e1},
            "net": {**_NET, "output": "residual", "hidden": [128, 128]},
            "eval": {"trials": 20, "oracle_max_dim": 12},
        },
        "training": dict(_TRAINING),
        "sweep": {"variable": "snr", "grid": [0.5, 1.0, 2.0, 5.0, 10.0]},
    },
    "identities": {
        "scene": {},
        "estimator": {
            "dist": "mixture", "separation": 3.0, "std": 0.6, "weight": 0.4, "var": 1.0,
            "snrs": [0.1, 1.0, 10.0], "sigma2s": [0.1, 1.0, 10.0], "deltas": [1e-2, 5e-3],
            "tols": [0.02, 0.02, 0.02, 0.05], "mmse_scale": 1.0,
        },
        "training": {},
        "sweep": {},
    },
    "score-recovery": {
        "scene": {},
        "estimator": {
            "dim": 4,
            "covariance": "identity",
            "spd_seed": 0,
            "objective": "dsm",
            "grid": {"levels": 10, "lo": 1e-2, "hi": 1e1},
            "net": {**_LINEAR_NET},
        },
        "training": {**_TRAINING, "lr": 1e-2},
        "sweep": {},
    },
}

KINDS = tuple(_DEFAULTS)

# per-command default kind when no config file names one
COMMAND_KIND = {
    "detect-kld": "detection",
    "localize-bcrb": "localization",
    "mi": "mi",
    "mmse": "mmse",
    "identities": "identities",
    "scene-info": "detection",
}


def defaults(kind: str) -> dict:
    if kind not in _DEFAULTS:
        raise ConfigError(f"unknown experiment kind {kind!r}; choose from {', '.join(KINDS)}")
    return {"kind": kind, "seed": 0, "out": "runs", **copy.deepcopy(_DEFAULTS[kind])}


def _merge(base: dict, upd: dict, path=()) -> None:
    for k, v in upd.items():
        here = (*path, k)
        if k not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(here)!r} must be an object")
            _merge(base[k], v, here)
        else:
            base[k] = v


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Set a dotted key, e.g. ``training.iterations=500`` (value parsed as JSON if possible)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like KEY=VALUE")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(text)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    scene: dict
    estimator: dict
    training: dict
    sweep: dict
    out: str
    seed: int

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "out": self.out, "scene": self.scene,
                "estimator": self.estimator, "training": self.training, "sweep": self.sweep}

    @property
    def hash(self) -> str:
        """Identity of the experiment: everything except the output directory and the seed."""
        d = self.to_dict()
        d.pop("out")
        d.pop("seed")
        return config_hash(d)

    @property
    def train_hash(self) -> str:
        """Identity of the trained artifacts: evaluation-only settings are excluded."""
        est = {k: v for k, v in self.estimator.items() if k != "eval"}
        return config_hash({"kind": self.kind, "scene": self.scene, "estimator": est,
                            "training": self.training, "sweep": self.sweep})

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


def _validate(d: dict) -> None:
    if not isinstance(d["seed"], int) or isinstance(d["seed"], bool) or not 0 <= d["seed"] < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    sw = d["sweep"]
    if sw:
        grid = sw.get("grid")
        if not isinstance(grid, list) or not grid or not all(isinstance(v, (int, float)) for v in grid):
            raise ConfigError("sweep.grid must be a nonempty list of numbers")
    tr = d["training"]
    for k in ("iterations", "batch", "samples"):
        if k in tr and (not isinstance(tr[k], int) or tr[k] < 1):
            raise ConfigError(f"training.{k} must be a positive integer")
    if "lr" in tr and not (isinstance(tr["lr"], (int, float)) and tr["lr"] > 0):
        raise ConfigError("training.lr must be positive")


def load_config(path=None, *, command: str | None = None, overrides=(), seed: int | None = None,
                out: str | None = None) -> ExperimentConfig:
    """Defaults for the kind named in the file (or implied by ``command``), then file, then overrides."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    kind = raw.get("kind") or COMMAND_KIND.get(command or "")
    if kind is None:
        raise ConfigError("config does not name an experiment kind")
    d = defaults(kind)
    d["out"] = str(Path("runs") / kind)
    _merge(d, {k: v for k, v in raw.items() if k != "kind"})
    for ov in overrides:
        apply_override(d, ov)
    if d["kind"] != kind:
        raise ConfigError("the experiment kind cannot be overridden")
    if seed is not None:
        d["seed"] = seed
    if out is not None:
        d["out"] = str(out)
    _validate(d)
    return ExperimentConfig(kind, d["scene"], d["estimator"], d["training"], d["sweep"], d["out"], d["seed"])
