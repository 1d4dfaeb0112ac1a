import csv
import json
import math

import numpy as np
import pytest

from scorebench.bench import experiments
from scorebench.bench.cli import preset_path, run
from scorebench.bench.commands import RowWriter, checkpoint_path, git_describe
from scorebench.bench.config import ConfigError, apply_override, defaults, load_config
from scorebench.losses import SigmaSchedule
from scorebench.scorenet import load_checkpoint


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _cli(*args):
    return run([*args, "--quiet"])


# ----- config ----------------------------------------------------------------------

def test_defaults_cover_every_kind():
    for kind in ("detection", "localization", "mi", "mmse", "identities", "score-recovery"):
        d = defaults(kind)
        assert d["kind"] == kind and set(d) >= {"scene", "estimator", "training", "sweep", "out", "seed"}
    with pytest.raises(ConfigError):
        defaults("nope")


def test_override_parses_json_and_rejects_unknown_keys():
    d = defaults("detection")
    apply_override(d, "training.iterations=123")
    apply_override(d, "sweep.grid=[1, 2.5]")
    apply_override(d, "scene.rcs=exp")
    assert d["training"]["iterations"] == 123 and d["sweep"]["grid"] == [1, 2.5] and d["scene"]["rcs"] == "exp"
    for bad in ("training.iteration=1", "nosuch.key=1", "training", "scene.N.x=1"):
        with pytest.raises(ConfigError):
            apply_override(d, bad)


def test_config_hash_ignores_output_dir_and_seed():
    a = load_config(preset_path("fig4_small"), out="/tmp/a", seed=1)
    b = load_config(preset_path("fig4_small"), out="/tmp/b", seed=2)
    c = load_config(preset_path("fig4_small"), overrides=["training.iterations=10"])
    assert a.hash == b.hash and a.hash != c.hash
    # evaluation settings change the row identity but not the trained artifacts
    e = load_config(preset_path("fig4_small"), overrides=["estimator.eval.samples=10"])
    assert e.hash != a.hash and e.train_hash == a.train_hash


def test_config_file_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"kind": "mi", "training": {"lr": -1}}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"kind": "mi", "estimator": {"typo": 1}}))
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(None)  # no kind and no command
    assert load_config(None, command="mmse").kind == "mmse"


def test_presets_load():
    for name in ("fig4_small", "fig5_small", "fig6_small", "mi", "mmse", "mmse_mixture", "identities",
                 "score_recovery"):
        cfg = load_config(preset_path(name))
        json.dumps(cfg.to_dict())
    f4 = load_config(preset_path("fig4_small"))
    assert f4.scene["N"] == 16 and f4.training["iterations"] == 30000
    f6 = load_config(preset_path("fig6_small"))
    assert f6.training["epochs"] == 200 and len(f6.sweep["grid"]) + 1 == 10


# ----- exit codes ------------------------------------------------------------------

def test_exit_codes(tmp_path):
    assert _cli("detect-kld", "--preset", "fig4_small", "--out", str(tmp_path)) == 4
    assert _cli("mi", "--preset", "mi", "--out", str(tmp_path)) == 4
    assert _cli("mi", "--preset", "nosuch", "--out", str(tmp_path)) == 2
    assert _cli("detect-kld", "--preset", "mi", "--out", str(tmp_path)) == 2
    assert _cli("mmse", "--preset", "mmse", "--override", "estimator.prior.kind=laplace",
                "--out", str(tmp_path)) == 2
    assert _cli("train", "--preset", "mmse", "--out", str(tmp_path)) == 2  # analytic denoiser: nothing to fit
    # a noise-level range that misses the integrand's support is a numerical failure
    assert _cli("mi", "--preset", "mi", "--out", str(tmp_path), "--override", 'estimator.scores="analytic"',
                "--override", "estimator.grid.lo=0.5", "--override", "estimator.grid.hi=1.0") == 3


def test_missing_checkpoint_message(tmp_path, capsys):
    assert run(["localize-bcrb", "--preset", "fig5_small", "--out", str(tmp_path)]) == 4
    err = capsys.readouterr().err
    assert "scorebench train" in err and "prior-fixed" in err


# ----- rows ----------------------------------------------------------------------------

def test_row_writer_round_trips_floats_and_flushes(tmp_path):
    cfg = load_config(None, command="mi", out=str(tmp_path))
    vals = [math.pi, 1e-300, -2.0 / 3.0, 123456789.123456789]
    w = RowWriter(tmp_path / "r.csv", cfg)
    w.write({"a": vals[0], "b": None, "c": 3})
    # the first row is on disk before the writer closes
    assert len(_rows(tmp_path / "r.csv")) == 1
    for v in vals[1:]:
        w.write({"a": v, "b": "x", "c": 1})
    w.close()
    rows = _rows(tmp_path / "r.csv")
    assert [float(r["a"]) for r in rows] == vals
    assert rows[0]["b"] == "" and rows[0]["config_hash"] == cfg.hash and rows[0]["seed"] == "0"
    assert rows[0]["git_describe"] == git_describe()


def test_interrupted_sweep_keeps_finished_rows(tmp_path, monkeypatch):
    cfg = load_config(preset_path("mmse"), out=str(tmp_path), overrides=["estimator.eval.trials=2"])
    real = experiments._mmse_rows

    def broken(c, nets):
        gen = real(c, nets)
        yield next(gen)
        yield next(gen)
        raise KeyboardInterrupt
    monkeypatch.setitem(experiments._ROWS, "mmse", broken)
    with pytest.raises(KeyboardInterrupt):
        run(["mmse", "--preset", "mmse", "--out", str(tmp_path), "--override", "estimator.eval.trials=2",
             "--quiet"])
    assert len(_rows(tmp_path / "mmse.csv")) == 2
    assert cfg.hash == _rows(tmp_path / "mmse.csv")[0]["config_hash"]


# ----- identities ------------------------------------------------------------------------

def test_identities_default_suite_passes(tmp_path):
    assert _cli("identities", "--preset", "identities", "--out", str(tmp_path)) == 0
    rows = _rows(tmp_path / "identities.csv")
    assert {r["check"] for r in rows} == {"i-mmse", "de-bruijn", "brown", "kld-fim"}
    assert all(r["passed"] == "1" for r in rows)


def test_identities_gaussian_suite_is_exact(tmp_path):
    assert _cli("identities", "--preset", "identities", "--out", str(tmp_path),
                "--override", "estimator.dist=gaussian") == 0
    rows = [r for r in _rows(tmp_path / "identities.csv") if r["check"] == "i-mmse"]
    assert max(float(r["rel_err"]) for r in rows) < 1e-6


def test_identities_flag_corrupted_mmse(tmp_path):
    assert _cli("identities", "--preset", "identities", "--out", str(tmp_path),
                "--override", "estimator.mmse_scale=1.1") == 1
    rows = _rows(tmp_path / "identities.csv")
    assert all(r["passed"] == "0" for r in rows if r["check"] == "i-mmse")


# ----- mmse ------------------------------------------------------------------------------

def test_mmse_gaussian_rows_match_closed_form(tmp_path):
    assert _cli("mmse", "--preset", "mmse", "--out", str(tmp_path), "--override", "estimator.eval.trials=5") == 0
    rows = _rows(tmp_path / "mmse.csv")
    assert len(rows) == 5
    for r in rows:
        s, l, o = float(r["stmp_mse"]), float(r["lmmse_mse"]), float(r["oracle_mmse"])
        assert abs(s - o) <= 1e-6 * o and abs(l - o) <= 1e-6 * o
        assert int(r["iterations"]) <= 10 and r["diverged"] == "0"
    assert (tmp_path / "mmse.jsonl").read_text().count("\n") == 5


def test_mmse_mixture_beats_lmmse_at_unit_snr(tmp_path):
    assert _cli("mmse", "--preset", "mmse_mixture", "--out", str(tmp_path), "--override", "sweep.grid=[1.0]") == 0
    (r,) = _rows(tmp_path / "mmse.csv")
    assert float(r["stmp_mse"]) < float(r["lmmse_mse"])
    # the exact posterior mean bounds everything from below, up to the trial noise
    assert float(r["oracle_mmse"]) < float(r["lmmse_mse"])


def test_mixture_posterior_enumeration_matches_scalar_quadrature():
    from scorebench.identities import Mixture1D
    from scorebench.distributions import two_mode_mixture
    q = Mixture1D.from_mixture(two_mode_mixture(3.0, 0.6, 0.4))
    for yv in (-1.0, 0.2, 2.0):
        got = experiments.exact_mixture_posterior_mean(np.eye(1), np.array([yv]), 0.5, q)
        assert got[0] == pytest.approx(float(q.posterior_mean(yv, 0.5)), rel=1e-10)
    # a diagonal channel factorizes across coordinates
    A = np.diag([1.0, 2.0])
    y = np.array([0.3, -1.0])
    got = experiments.exact_mixture_posterior_mean(A, y, 0.25, q)
    ref = [float(q.posterior_mean(y[i] / A[i, i], 0.25 / A[i, i] ** 2)) for i in range(2)]
    assert np.allclose(got, ref, rtol=1e-10)


def test_mixture_denoiser_derivative_matches_fd():
    from scorebench.identities import Mixture1D
    from scorebench.distributions import two_mode_mixture
    q = Mixture1D.from_mixture(two_mode_mixture(3.0, 0.6, 0.4))
    r = np.linspace(-3, 3, 7)
    s, ds = experiments.mixture_score(q, r, 0.4)
    h = 1e-6
    fd = (experiments.mixture_score(q, r + h, 0.4)[0] - experiments.mixture_score(q, r - h, 0.4)[0]) / (2 * h)
    assert np.allclose(ds, fd, rtol=1e-6, atol=1e-8)
    assert np.allclose(s, q.smooth(0.16).dlogpdf(r), rtol=1e-12)


# ----- mi -----------------------------------------------------------------------------------

def test_mi_analytic_scores(tmp_path):
    assert _cli("mi", "--preset", "mi", "--out", str(tmp_path), "--override", 'estimator.scores="analytic"',
                "--override", "estimator.eval.samples=20000") == 0
    rows = _rows(tmp_path / "mi.csv")
    for r in rows:
        a, v, se = float(r["analytic_mi"]), float(r["mi"]), float(r["stderr"])
        if a == 0:
            assert v == 0.0  # identical scores: the shared-noise integrand vanishes exactly
        else:
            assert abs(v - a) < 0.05 * a


# ----- detection at zero power -------------------------------------------------------------

def test_zero_power_row_learned_kld_is_zero(tmp_path):
    args = ["--preset", "fig4_small", "--out", str(tmp_path), "--override", "training.iterations=300",
            "--override", "sweep.grid=[-Infinity, 40.0]", "--override", "estimator.eval.samples=4000",
            "--override", "estimator.eval.lrt_trials=0"]
    assert _cli("train", *args) == 0
    assert _cli("detect-kld", *args) == 0
    zero, other = _rows(tmp_path / "detect-kld.csv")
    assert float(zero["analytic_kld"]) == 0.0
    assert abs(float(zero["learned_kld"])) <= 3 * float(zero["stderr"])
    assert float(other["learned_kld"]) > 0


# ----- training ------------------------------------------------------------------------------

def _recovery_args(tmp_path, seed):
    return ["--preset", "score_recovery", "--out", str(tmp_path), "--seed", str(seed)]


@pytest.fixture(scope="module")
def recovery_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("recovery")
    for seed in (0, 1):
        assert _cli("train", *_recovery_args(base, seed)) == 0
    return base


def _final_ma(ckpt):
    rows = _rows(ckpt.with_suffix(".loss.csv"))
    return float(rows[-1]["moving_average"])


def test_train_reaches_analytic_optimum(recovery_runs):
    cfg = load_config(preset_path("score_recovery"), out=str(recovery_runs), seed=0)
    path = checkpoint_path(cfg, "score")
    e = cfg.estimator
    opt = experiments.dsm_optimal_loss(SigmaSchedule.log_grid(e["grid"]["lo"], e["grid"]["hi"],
                                                              e["grid"]["levels"]), np.eye(e["dim"]))
    assert abs(_final_ma(path) - opt) < 0.01 * opt
    net, extra = load_checkpoint(path)
    assert extra["train_hash"] == cfg.train_hash and extra["seed"] == 0
    assert np.allclose(net.params["W0"], -np.eye(4), atol=0.05)


def test_train_is_idempotent_and_reproducible(recovery_runs, tmp_path):
    cfg = load_config(preset_path("score_recovery"), out=str(recovery_runs), seed=0)
    path = checkpoint_path(cfg, "score")
    before = path.read_bytes()
    mtime = path.stat().st_mtime_ns
    assert _cli("train", *_recovery_args(recovery_runs, 0)) == 0
    assert path.stat().st_mtime_ns == mtime  # up to date: not retrained
    # a fresh directory retrains from scratch and lands on identical bytes
    assert _cli("train", *_recovery_args(tmp_path, 0)) == 0
    fresh = checkpoint_path(load_config(preset_path("score_recovery"), out=str(tmp_path), seed=0), "score")
    assert fresh.read_bytes() == before
    assert fresh.with_suffix(".loss.csv").read_bytes() == path.with_suffix(".loss.csv").read_bytes()


def test_train_other_seed_differs_but_converges_alike(recovery_runs):
    p0 = checkpoint_path(load_config(preset_path("score_recovery"), out=str(recovery_runs), seed=0), "score")
    p1 = checkpoint_path(load_config(preset_path("score_recovery"), out=str(recovery_runs), seed=1), "score")
    assert p0 != p1 and p0.read_bytes() != p1.read_bytes()
    assert abs(_final_ma(p0) - _final_ma(p1)) < 0.02 * abs(_final_ma(p0))


def test_scene_info(tmp_path):
    assert _cli("scene-info", "--preset", "fig4_small", "--out", str(tmp_path)) == 0
    info = json.loads((tmp_path / "scene-info.json").read_text())
    assert info["N"] == 16 and info["kld_optimal_probe"] > 0
    assert _cli("scene-info", "--preset", "mi", "--out", str(tmp_path)) == 2


def test_class_net_noise_levels_follow_data_scale():
    cfg = load_config(preset_path("fig6_small"), overrides=["training.samples=200"])
    net, loss, data, _ = experiments.jobs(cfg)[0].build()
    s = net.config.scale
    assert s != 1.0 and math.isclose(s, float(np.std(data["x"][data["y"] == 0])), rel_tol=0.05)
    g = cfg.estimator["grid"]
    lv = loss.schedule.array
    assert np.isclose(lv.min(), g["lo"] * s) and np.isclose(lv.max(), g["hi"] * s)
