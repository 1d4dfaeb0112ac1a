"""Subcommand implementations: checkpoints, row-buffered CSV and JSON reports."""

from __future__ import annotations

import csv
import functools
import json
import subprocess
from pathlib import Path

import numpy as np

from .. import __version__
from ..estimators import MetricReport, format_value
from ..scorenet import CheckpointError, load_checkpoint, save_checkpoint, train
from . import experiments
from .config import ConfigError, ExperimentConfig

__all__ = ["MissingArtifact", "checkpoint_path", "cmd_train", "cmd_eval", "cmd_identities", "cmd_scene_info",
           "git_describe", "RowWriter", "COMMANDS"]


class MissingArtifact(FileNotFoundError):
    pass


class ChecksFailed(RuntimeError):
    pass


@functools.lru_cache(maxsize=1)
def git_describe() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "-C", str(here), "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    desc = out.stdout.strip()
    return desc if out.returncode == 0 and desc else f"v{__version__}"


class RowWriter:
    """CSV writer that flushes after every row, so an interrupted sweep keeps its finished rows.

    Columns come from the first row; later rows may only use those keys.
    Every row is prefixed with the config hash, seed and source revision.
    """

    def __init__(self, path: Path, cfg: ExperimentConfig):
        self.path = Path(path)
        self.meta = {"config_hash": cfg.hash, "seed": cfg.seed, "git_describe": git_describe()}
        self._fh = None
        self._writer = None
        self.rows = []

    def write(self, row: dict) -> None:
        full = {**self.meta, **row}
        if self._writer is None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=list(full), lineterminator="\n",
                                          restval="", extrasaction="raise")
            self._writer.writeheader()
        self._writer.writerow({k: format_value(v) for k, v in full.items()})
        self._fh.flush()
        self.rows.append(full)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def checkpoint_path(cfg: ExperimentConfig, name: str) -> Path:
    return cfg.out_dir / "checkpoints" / f"{name}-{cfg.train_hash}-s{cfg.seed}.sbnet"


def _loss_csv_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".loss.csv")


def _write_loss_csv(path: Path, losses: np.ndarray, window: int = 500) -> None:
    c = np.cumsum(losses)
    n = np.arange(1, losses.size + 1)
    lo = np.maximum(n - window, 0)
    ma = (c - np.concatenate([[0.0], c])[lo]) / (n - lo)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "moving_average"])
        for i in range(losses.size):
            w.writerow([i, format_value(losses[i]), format_value(ma[i])])


def _checkpoint_current(path: Path, cfg: ExperimentConfig) -> bool:
    if not path.exists() or not _loss_csv_path(path).exists():
        return False
    try:
        _, extra = load_checkpoint(path)
    except CheckpointError:
        return False
    return extra.get("train_hash") == cfg.train_hash and extra.get("seed") == cfg.seed


def cmd_train(cfg: ExperimentConfig, log=print) -> list[Path]:
    """Fit every network the experiment needs; existing up-to-date checkpoints are kept as they are."""
    job_list = experiments.jobs(cfg)
    if not job_list:
        raise ConfigError(f"experiment kind {cfg.kind!r} with this estimator has nothing to train")
    paths = []
    for j, job in enumerate(job_list):
        path = checkpoint_path(cfg, job.name)
        paths.append(path)
        if _checkpoint_current(path, cfg):
            log(f"{job.name}: up to date ({path})")
            continue
        net, loss, data, n = job.build()
        tcfg = experiments.train_config(cfg, n, j)
        res = train(net, loss, data, tcfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        ma = res.moving_average()
        extra = {"name": job.name, "kind": cfg.kind, "train_hash": cfg.train_hash, "seed": cfg.seed,
                 "iterations": tcfg.iterations, "final_loss_ma": float(ma[-1]), "git_describe": git_describe()}
        save_checkpoint(path, res.net, extra)
        _write_loss_csv(_loss_csv_path(path), res.losses)
        log(f"{job.name}: {tcfg.iterations} iterations, final loss (moving average) {ma[-1]:.6g} -> {path}")
    return paths


def load_nets(cfg: ExperimentConfig) -> dict:
    nets = {}
    for job in experiments.jobs(cfg):
        path = checkpoint_path(cfg, job.name)
        if not path.exists():
            raise MissingArtifact(f"missing checkpoint {path}; run `scorebench train` with the same config "
                                  "and seed first")
        try:
            nets[job.name], _ = load_checkpoint(path)
        except CheckpointError as e:
            raise MissingArtifact(str(e)) from e
    return nets


# main metric of each kind, written as JSON reports alongside the CSV
_REPORT = {"detection": ("learned_kld", "stderr"), "localization": ("learned_bcrb", "learned_stderr"),
           "mi": ("mi", "stderr"), "mmse": ("stmp_mse", None)}


def _sweep_rows(cfg: ExperimentConfig, command: str, log=print) -> list[dict]:
    nets = load_nets(cfg)
    csv_path = cfg.out_dir / f"{command}.csv"
    rep_path = cfg.out_dir / f"{command}.jsonl"
    metric, err = _REPORT.get(cfg.kind, (None, None))
    with RowWriter(csv_path, cfg) as w:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        with open(rep_path, "w") as rep:
            for row in experiments.evaluate(cfg, nets):
                w.write(row)
                if metric is not None:
                    r = MetricReport(f"{cfg.kind}.{metric}", row[metric], row[err] if err else float("nan"),
                                     cfg.hash, grid=cfg.sweep, samples=cfg.estimator.get("eval", {}),
                                     extra={k: v for k, v in row.items() if k not in (metric, err)})
                    rep.write(r.to_json() + "\n")
                    rep.flush()
                log(", ".join(f"{k}={format_value(v)}" for k, v in row.items()))
        rows = w.rows
    return rows


def _require_kind(cfg: ExperimentConfig, kind: str, command: str) -> None:
    if cfg.kind != kind:
        raise ConfigError(f"`{command}` needs a {kind!r} experiment config, got {cfg.kind!r}")


def cmd_eval(cfg: ExperimentConfig, command: str, log=print) -> list[dict]:
    kind = {"detect-kld": "detection", "localize-bcrb": "localization", "mi": "mi", "mmse": "mmse"}[command]
    _require_kind(cfg, kind, command)
    return _sweep_rows(cfg, command, log)


def cmd_identities(cfg: ExperimentConfig, log=print) -> list[dict]:
    _require_kind(cfg, "identities", "identities")
    rows = _sweep_rows(cfg, "identities", log)
    failed = [r for r in rows if not r["passed"]]
    if failed:
        names = ", ".join(f"{r['check']}@{r['point']:g}" for r in failed)
        raise ChecksFailed(f"{len(failed)} identity check(s) failed: {names}")
    return rows


def cmd_scene_info(cfg: ExperimentConfig, log=print) -> dict:
    if not cfg.scene:
        raise ConfigError(f"experiment kind {cfg.kind!r} has no scene")
    info = experiments._scene(cfg).describe()
    info = {"config_hash": cfg.hash, "seed": cfg.seed, "git_describe": git_describe(), **info}
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(info, sort_keys=True, indent=1, default=float)
    (cfg.out_dir / "scene-info.json").write_text(text + "\n")
    log(text)
    return info


COMMANDS = ("train", "detect-kld", "localize-bcrb", "mmse", "mi", "identities", "scene-info")
