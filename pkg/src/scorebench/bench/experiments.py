"""Training jobs and evaluation sweeps for each experiment kind.

Every kind exposes ``jobs(cfg)`` (the networks ``train`` must fit, possibly
none) and an evaluation generator yielding one output row per sweep point.
Evaluation receives already-loaded networks and never trains.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from ..distributions import two_mode_mixture
from ..estimators import (
    ScoreDenoiser, StmpConfig, StmpDiverged, fim_from_scores,
    kld_score, lmmse_solve, mi_score, prior_fim_est, stmp_solve,
)
from ..identities import Mixture1D, run_identity_suite
from ..isac import (
    SensingScene, TargetState, analytic_bcrb_localization, analytic_kld_known_gamma, detection_pd,
    exp_gamma_snapshot_kld, gen_detection, lrt_montecarlo_pd, measurement_mean, measurement_score,
    optimal_probe, random_probe, sample_theta, sensing_channel,
)
from ..losses import LossSpec, SigmaSchedule
from ..numerics import RngStream, complex_to_real, inv_spd
from ..scorenet import NetConfig, ScoreNet, TrainConfig
from .config import ConfigError, ExperimentConfig

__all__ = ["NetJob", "jobs", "evaluate", "derived_seed", "train_config", "recovery_covariance",
           "dsm_optimal_loss", "mixture_score", "mixture_denoiser", "exact_mixture_posterior_mean"]

_KIND_ID = {"detection": 1, "localization": 2, "mi": 3, "mmse": 4, "identities": 5, "score-recovery": 6}


@dataclass
class NetJob:
    """One network to fit: ``build() -> (net, loss, data, n_data)``."""

    name: str
    build: Callable


def derived_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit seed for a named substream of the master seed."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


def _stream(cfg: ExperimentConfig, *keys: int) -> RngStream:
    return RngStream(cfg.seed, _KIND_ID[cfg.kind], tuple(int(k) for k in keys))


def net_config(net: dict, dim: int, **kw) -> NetConfig:
    return NetConfig(dim=dim, hidden=tuple(net["hidden"]), activation=net["activation"], bias=net["bias"],
                     sigma_embedding=net["sigma_embedding"], sigma_features=net["sigma_features"],
                     class_embed=net["class_embed"], output=net["output"],
                     precondition=net["precondition"], **kw)


def train_config(cfg: ExperimentConfig, n_data: int, job_index: int) -> TrainConfig:
    tr = cfg.training
    iters = tr["iterations"]
    if tr.get("epochs"):
        iters = int(tr["epochs"]) * math.ceil(n_data / tr["batch"])
    return TrainConfig(iterations=iters, batch=tr["batch"], lr=float(tr["lr"]), lr_schedule=tr["lr_schedule"],
                       ema_decay=float(tr["ema_decay"]), seed=derived_seed(cfg.seed, _KIND_ID[cfg.kind], 1,
                                                                           job_index),
                       grad_clip=float(tr["grad_clip"]))


def _grid(g: dict, std: float = 1.0) -> SigmaSchedule:
    return SigmaSchedule.log_grid(g["lo"] * std, g["hi"] * std, int(g["levels"]))


def _sweep(cfg: ExperimentConfig) -> list:
    return [float(v) for v in cfg.sweep.get("grid", [])]


# ----- detection ---------------------------------------------------------------

def _scene(cfg: ExperimentConfig, value=None) -> SensingScene:
    d = dict(cfg.scene)
    if value is not None:
        var = cfg.sweep["variable"]
        if var not in d:
            raise ConfigError(f"sweep variable {var!r} is not a scene field")
        d[var] = value
    try:
        return SensingScene.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid scene: {e}") from e


def _probe(cfg: ExperimentConfig, sc: SensingScene) -> np.ndarray:
    kind = cfg.estimator["probe"]
    if kind == "optimal":
        return optimal_probe(sc.geometry, sc.mu_r, sc.pt)
    if kind == "random":
        return random_probe(sc.N, sc.pt, RngStream(int(cfg.estimator.get("probe_seed", 0))))
    raise ConfigError(f"unknown probe {kind!r}")


def _signal(sc: SensingScene, x) -> np.ndarray:
    """Real-embedded noiseless echo h for gamma = 1."""
    return complex_to_real(sensing_channel(sc.geometry, TargetState(*sc.target, 1.0), sc.beta0) @ x)


def _noise_std(sc: SensingScene) -> float:
    return math.sqrt(sc.noise_power / 2.0)


def _detection_jobs(cfg: ExperimentConfig) -> list[NetJob]:
    base = _scene(cfg)
    D = 2 * base.N
    tr = cfg.training
    sched = _grid(cfg.estimator["grid"])
    if base.rcs == "fixed":
        # one net for u ~ N(0, I); both hypotheses are affine images of it
        def build():
            u = _stream(cfg, 0, 0).generator().standard_normal((tr["samples"], D))
            return (ScoreNet(net_config(cfg.estimator["net"], D)), LossSpec("dsm", sched), {"x": u},
                    tr["samples"])
        return [NetJob("unit-gaussian", build)]

    grid = _sweep(cfg)

    def build_classes():
        # class 0 is H0, class i the H1 law at sweep point i - 1; noise levels in units of the noise std
        s = _noise_std(base)
        sched = _grid(cfg.estimator["grid"], s)
        blocks = math.ceil(tr["samples"] / base.K)
        xs, ys = [], []
        for c, value in enumerate([None, *grid]):
            sc = base if value is None else _scene(cfg, value)
            ds = gen_detection(sc, 0 if value is None else 1, blocks, _stream(cfg, 0, c), x=_probe(cfg, sc),
                               gamma_per_snapshot=True)
            snaps = ds.flat_snapshots()[: tr["samples"]]
            xs.append(snaps)
            ys.append(np.full(snaps.shape[0], c))
        nc = net_config(cfg.estimator["net"], D, condition="class", num_classes=len(grid) + 1, scale=s)
        loss = LossSpec("cond-dsm", sched, p_uncond=float(tr["p_uncond"]))
        X = np.concatenate(xs)
        return ScoreNet(nc), loss, {"x": X, "y": np.concatenate(ys)}, X.shape[0]
    return [NetJob("classes", build_classes)]


def _detection_rows(cfg: ExperimentConfig, nets: dict) -> Iterator[dict]:
    ev = cfg.estimator["eval"]
    pfa = float(ev["target_pfa"])
    for i, value in enumerate(_sweep(cfg)):
        sc = _scene(cfg, value)
        x = _probe(cfg, sc)
        s = _noise_std(sc)
        grid = _grid(cfg.estimator["grid"], s)
        blocks = math.ceil(ev["samples"] / sc.K)
        y0 = gen_detection(sc, 0, blocks, _stream(cfg, 2, i), x=x).flat_snapshots()[: ev["samples"]]
        if sc.rcs == "fixed":
            unit = nets["unit-gaussian"]
            h = _signal(sc, x)
            p0 = unit.with_standardization(shift=np.zeros_like(h), scale=s)
            p1 = unit.with_standardization(shift=h, scale=s)
            est = kld_score(lambda v, sg: p0(v, sg), lambda v, sg: p1(v, sg), y0, grid, _stream(cfg, 3, i),
                            chunk=ev["chunk"])
        else:
            net = nets["classes"]
            c0 = np.zeros(ev["chunk"], dtype=int)
            ci = np.full(ev["chunk"], i + 1)
            est = kld_score(lambda v, sg: net(v, sg, cond=c0[: len(v)]),
                            lambda v, sg: net(v, sg, cond=ci[: len(v)]),
                            y0, grid, _stream(cfg, 3, i), chunk=ev["chunk"])
        learned = sc.K * est.value
        row = {"variable": cfg.sweep["variable"], "value": value, "P_t": sc.pt_dbm}
        if sc.rcs == "fixed":
            analytic = analytic_kld_known_gamma(sc, x)
            row.update(analytic_kld=analytic, learned_kld=learned, stderr=sc.K * est.stderr,
                       P_d=detection_pd(pfa, max(learned, 0.0)), P_d_analytic=detection_pd(pfa, analytic))
        else:
            row.update(analytic_kld=None, learned_kld=learned, stderr=sc.K * est.stderr, P_d=None,
                       quadrature_kld=sc.K * exp_gamma_snapshot_kld(sc, x))
        if ev["lrt_trials"]:
            mc = lrt_montecarlo_pd(sc, x, int(ev["lrt_trials"]), _stream(cfg, 4, i), target_pfa=pfa)
            if sc.rcs != "fixed":
                row["P_d"] = mc.pd
            row.update(P_d_mc=mc.pd, P_d_mc_stderr=mc.pd_stderr, P_fa_mc=mc.pfa_validation)
        yield row


# ----- localization --------------------------------------------------------------

def _loc_cases(cfg: ExperimentConfig) -> list[str]:
    cases = list(cfg.estimator["cases"])
    if not cases or any(c not in ("fixed", "exp") for c in cases):
        raise ConfigError("estimator.cases must list 'fixed' and/or 'exp'")
    return cases


def _localization_jobs(cfg: ExperimentConfig) -> list[NetJob]:
    out = []
    for j, case in enumerate(_loc_cases(cfg)):
        def build(case=case, j=j):
            sc = _scene(cfg).with_(rcs=case)
            th = sample_theta(sc, cfg.training["samples"], _stream(cfg, 0, j))
            nc = net_config(cfg.estimator["net"], th.shape[1], shift=tuple(th.mean(axis=0)))
            return ScoreNet(nc), LossSpec("ism"), {"x": th}, th.shape[0]
        out.append(NetJob(f"prior-{case}", build))
    return out


def _measurement_scores(sc: SensingScene, theta, x, L: int, stream: RngStream) -> np.ndarray:
    """Closed-form scores (M, L, d), with the L measurements per draw generated on the fly."""
    rng = stream.generator()
    M, d = theta.shape
    S = np.empty((M, L, d))
    w = math.sqrt(sc.noise_power / 2.0)
    for m in range(M):
        f = measurement_mean(sc, theta[m], x)
        Y = f + w * (rng.standard_normal((L, sc.K, sc.N)) + 1j * rng.standard_normal((L, sc.K, sc.N)))
        S[m] = measurement_score(sc, theta[m], x, Y)
    return S


def _localization_rows(cfg: ExperimentConfig, nets: dict) -> Iterator[dict]:
    ev = cfg.estimator["eval"]
    for j, case in enumerate(_loc_cases(cfg)):
        prior = nets[f"prior-{case}"]
        for i, value in enumerate(_sweep(cfg)):
            sc = _scene(cfg, value).with_(rcs=case)
            x = _probe(cfg, sc)
            theta = sample_theta(sc, int(ev["prior_samples"]), _stream(cfg, 2, j, i))
            Jp = prior_fim_est(lambda t: prior(t), theta)
            S = _measurement_scores(sc, theta, x, int(ev["measurements"]), _stream(cfg, 3, j, i))
            Jd = fim_from_scores(S, "known-likelihood")
            J = Jp + Jd
            an = analytic_bcrb_localization(sc, x, theta=theta, case=case)
            yield {"case": case, "variable": cfg.sweep["variable"], "value": value, "P_t": sc.pt_dbm,
                   "analytic_bcrb": an["bcrb"], "learned_bcrb": J.bcrb(keep=(0, 1)),
                   "learned_stderr": J.bcrb_stderr(keep=(0, 1)), "analytic_crb": an["crb"]}


# ----- mutual information ------------------------------------------------------------

def _mi_pair(cfg: ExperimentConfig, snr: float, M: int, stream: RngStream):
    """x ~ N(0, v), y = sqrt(snr) x + w with w ~ N(0, 1); I(x; y) = log(1 + snr v) / 2."""
    g = stream.generator()
    v = float(cfg.estimator["signal_var"])
    x = math.sqrt(v) * g.standard_normal((M, 1))
    y = math.sqrt(snr) * x + g.standard_normal((M, 1))
    return x, y


def _mi_jobs(cfg: ExperimentConfig) -> list[NetJob]:
    if cfg.estimator["scores"] == "analytic":
        return []
    v = float(cfg.estimator["signal_var"])
    sched = _grid(cfg.estimator["grid"], math.sqrt(v))
    out = []
    for i, snr in enumerate(_sweep(cfg)):
        def build(i=i, snr=snr):
            x, y = _mi_pair(cfg, snr, cfg.training["samples"], _stream(cfg, 0, i))
            nc = net_config(cfg.estimator["net"], 1, condition="vector", cond_dim=1, scale=math.sqrt(v),
                            cond_shift=(0.0,), cond_scale=(math.sqrt(1.0 + snr * v),))
            loss = LossSpec("cond-dsm", sched, p_uncond=float(cfg.training["p_uncond"]))
            return ScoreNet(nc), loss, {"x": x, "y": y}, x.shape[0]
        out.append(NetJob(f"cond-{i}", build))
    return out


def _mi_rows(cfg: ExperimentConfig, nets: dict) -> Iterator[dict]:
    ev = cfg.estimator["eval"]
    v = float(cfg.estimator["signal_var"])
    grid = _grid(cfg.estimator["grid"], math.sqrt(v))
    for i, snr in enumerate(_sweep(cfg)):
        if snr < 0:
            raise ConfigError("snr must be non-negative")
        x, y = _mi_pair(cfg, snr, int(ev["samples"]), _stream(cfg, 2, i))
        if cfg.estimator["scores"] == "analytic":
            a = math.sqrt(snr) * v / (1.0 + snr * v)
            pv = v / (1.0 + snr * v)

            def su(xt, sg):
                return -xt / (v + np.asarray(sg)[:, None] ** 2)

            def sc(xt, sg, cond, a=a, pv=pv):
                return -(xt - a * cond) / (pv + np.asarray(sg)[:, None] ** 2)
        else:
            net = nets[f"cond-{i}"]

            def su(xt, sg, net=net):
                return net(xt, sg, null=np.ones(xt.shape[0], dtype=bool))

            def sc(xt, sg, cond, net=net):
                return net(xt, sg, cond=cond)
        est = mi_score(su, sc, x, y, grid, _stream(cfg, 3, i), chunk=ev["chunk"])
        yield {"snr": snr, "analytic_mi": 0.5 * math.log1p(snr * v), "mi": est.value, "stderr": est.stderr,
               "scores": cfg.estimator["scores"]}


# ----- MMSE via message passing --------------------------------------------------------

def _mmse_prior(cfg: ExperimentConfig) -> Mixture1D:
    p = cfg.estimator["prior"]
    if p["kind"] == "gaussian":
        return Mixture1D.gaussian(0.0, float(p["var"]))
    if p["kind"] == "mixture":
        return Mixture1D.from_mixture(two_mode_mixture(float(p["separation"]), float(p["std"]),
                                                       float(p["weight"])))
    raise ConfigError(f"unknown prior kind {p['kind']!r}")


def _sample_prior(prior: Mixture1D, shape, rng) -> np.ndarray:
    w, mu, v = (np.array(a) for a in (prior.weights, prior.means, prior.variances))
    k = rng.choice(w.size, size=shape, p=w)
    return mu[k] + np.sqrt(v[k]) * rng.standard_normal(shape)


def mixture_score(prior: Mixture1D, r, sigma):
    """Coordinate-wise smoothed score and its derivative for an i.i.d. scalar-mixture prior."""
    w, mu, v = (np.array(a) for a in (prior.weights, prior.means, prior.variances))
    vt = v + float(sigma) ** 2
    r = np.asarray(r, dtype=float)[..., None]
    lp = np.log(w) - 0.5 * np.log(vt) - 0.5 * (r - mu) ** 2 / vt
    lp -= lp.max(axis=-1, keepdims=True)
    q = np.exp(lp)
    q /= q.sum(axis=-1, keepdims=True)
    g = (mu - r) / vt
    s = np.sum(q * g, axis=-1)
    ds = np.sum(q * (g * g - 1.0 / vt), axis=-1) - s * s
    return s, ds


def mixture_denoiser(prior: Mixture1D, var_rule: str = "second-order") -> ScoreDenoiser:
    """Closed-form smoothed-score denoiser for an i.i.d. scalar-mixture prior."""
    def score(r, sg):
        return mixture_score(prior, r, np.atleast_1d(sg)[0])[0]

    def htrace(r, sg):
        return mixture_score(prior, r, sg)[1]
    return ScoreDenoiser(score, var_rule=var_rule, hessian_trace=htrace)


def exact_mixture_posterior_mean(A, y, sigma2: float, prior: Mixture1D) -> np.ndarray:
    """E[x | y] for x with i.i.d. mixture coordinates, by enumerating component assignments."""
    w, mu, v = (np.array(a) for a in (prior.weights, prior.means, prior.variances))
    Nm, D = A.shape
    logs, means = [], []
    for combo in itertools.product(range(w.size), repeat=D):
        c = np.array(combo)
        m0, V0 = mu[c], v[c]
        C = (A * V0) @ A.T + sigma2 * np.eye(Nm)
        Ci = inv_spd(C, max_cond=1e15)
        r = y - A @ m0
        _, logdet = np.linalg.slogdet(C)
        logs.append(np.sum(np.log(w[c])) - 0.5 * logdet - 0.5 * r @ Ci @ r)
        means.append(m0 + V0 * (A.T @ (Ci @ r)))
    logs = np.array(logs)
    p = np.exp(logs - logs.max())
    p /= p.sum()
    return p @ np.array(means)


def _mmse_jobs(cfg: ExperimentConfig) -> list[NetJob]:
    est = cfg.estimator
    if est["denoiser"] == "analytic":
        return []
    if est["denoiser"] != "learned":
        raise ConfigError(f"unknown denoiser {est['denoiser']!r}")
    prior = _mmse_prior(cfg)
    std = math.sqrt(prior.variance())
    D = int(est["dim"])

    def build():
        x = _sample_prior(prior, (cfg.training["samples"], D), _stream(cfg, 0, 0).generator())
        nc = net_config(est["net"], D, shift=(prior.mean(),) * D, scale=std)
        return ScoreNet(nc), LossSpec("dsm", _grid(est["grid"], std)), {"x": x}, x.shape[0]
    return [NetJob("prior-denoiser", build)]


def _mmse_rows(cfg: ExperimentConfig, nets: dict) -> Iterator[dict]:
    est = cfg.estimator
    prior = _mmse_prior(cfg)
    D, Nm = int(est["dim"]), int(est["measurements"])
    pm, pv = prior.mean(), prior.variance()
    if est["denoiser"] == "analytic":
        den = mixture_denoiser(prior, est["var_rule"])
    else:
        den = ScoreDenoiser(nets["prior-denoiser"], var_rule=est["var_rule"])
    scfg = StmpConfig(max_iter=int(est["max_iter"]), tol=float(est["tol"]), damping=bool(est["damping"]),
                      prior_mean=pm, prior_var=pv)
    gaussian = est["prior"]["kind"] == "gaussian"
    can_oracle = gaussian or D <= int(est["eval"]["oracle_max_dim"])
    T = int(est["eval"]["trials"])
    for i, snr in enumerate(_sweep(cfg)):
        if not snr > 0:
            raise ConfigError("snr must be positive")
        s2 = D * pv / (Nm * snr)
        e_stmp, e_lmmse, e_orc, iters, diverged, unconverged = [], [], [], 0, 0, 0
        for t in range(T):
            g = _stream(cfg, 2, i, t).generator()
            A = g.standard_normal((Nm, D)) / math.sqrt(Nm)
            x = _sample_prior(prior, D, g)
            y = A @ x + math.sqrt(s2) * g.standard_normal(Nm)
            m_l, _ = lmmse_solve(A, y, s2, pm, pv)
            e_lmmse.append(np.mean((m_l - x) ** 2))
            if can_oracle:
                m_o = m_l if gaussian else exact_mixture_posterior_mean(A, y, s2, prior)
                e_orc.append(np.mean((m_o - x) ** 2))
            try:
                res = stmp_solve(A, y, math.sqrt(s2), den, scfg)
            except StmpDiverged:
                diverged += 1
                continue
            iters = max(iters, res.iterations)
            unconverged += not res.converged
            e_stmp.append(np.mean((res.mean - x) ** 2))
        yield {"snr": snr, "stmp_mse": float(np.mean(e_stmp)) if e_stmp else None,
               "lmmse_mse": float(np.mean(e_lmmse)), "oracle_mmse": float(np.mean(e_orc)) if e_orc else None,
               "iterations": iters, "trials": T, "diverged": diverged, "unconverged": unconverged,
               "prior": est["prior"]["kind"], "denoiser": est["denoiser"]}


# ----- identities -------------------------------------------------------------------

def _identity_rows(cfg: ExperimentConfig, nets: dict) -> Iterator[dict]:
    e = cfg.estimator
    if e["dist"] == "gaussian":
        dist = Mixture1D.gaussian(0.0, float(e["var"]))
    elif e["dist"] == "mixture":
        dist = Mixture1D.from_mixture(two_mode_mixture(float(e["separation"]), float(e["std"]),
                                                       float(e["weight"])))
    else:
        raise ConfigError(f"unknown identity distribution {e['dist']!r}")
    checks = run_identity_suite(dist, snrs=tuple(e["snrs"]), sigma2s=tuple(e["sigma2s"]),
                                deltas=tuple(e["deltas"]), tols=tuple(e["tols"]),
                                mmse_scale=float(e["mmse_scale"]))
    for c in checks:
        yield {"check": c.name, "point": c.point, "lhs": c.lhs, "rhs": c.rhs, "rel_err": c.rel_err,
               "tol": c.tol, "passed": int(c.passed)}


# ----- score recovery (training only) ------------------------------------------------------

def recovery_covariance(cfg: ExperimentConfig) -> np.ndarray:
    D = int(cfg.estimator["dim"])
    if cfg.estimator["covariance"] == "identity":
        return np.eye(D)
    if cfg.estimator["covariance"] == "random-spd":
        B = RngStream(int(cfg.estimator["spd_seed"]), 0x5D).generator().standard_normal((D, D))
        return B @ B.T / D + 0.5 * np.eye(D)
    raise ConfigError(f"unknown covariance {cfg.estimator['covariance']!r}")


def dsm_optimal_loss(schedule: SigmaSchedule, cov) -> float:
    """Minimum DSM loss for N(0, cov) data with levels drawn uniformly.

    Equals the mean over sigma of sum_i c_i / (2 (c_i + sigma^2)) for eigenvalues c_i.
    """
    c = np.linalg.eigvalsh(np.asarray(cov))
    s2 = schedule.array ** 2
    return float(np.mean(0.5 * np.sum(c[None, :] / (c[None, :] + s2[:, None]), axis=1)))


def _recovery_jobs(cfg: ExperimentConfig) -> list[NetJob]:
    e = cfg.estimator
    obj = e["objective"]
    if obj not in ("dsm", "ism", "ssm"):
        raise ConfigError("score-recovery objective must be dsm, ism or ssm")

    def build():
        S = recovery_covariance(cfg)
        L = np.linalg.cholesky(S)
        x = _stream(cfg, 0, 0).generator().standard_normal((cfg.training["samples"], S.shape[0])) @ L.T
        sched = _grid(e["grid"]) if obj == "dsm" else None
        loss = LossSpec(obj, sched, probes=int(cfg.training["probes"]))
        return ScoreNet(net_config(e["net"], S.shape[0])), loss, {"x": x}, x.shape[0]
    return [NetJob("score", build)]


# ----- dispatch -----------------------------------------------------------------------

_JOBS = {"detection": _detection_jobs, "localization": _localization_jobs, "mi": _mi_jobs,
         "mmse": _mmse_jobs, "score-recovery": _recovery_jobs}

_ROWS = {"detection": _detection_rows, "localization": _localization_rows, "mi": _mi_rows,
         "mmse": _mmse_rows, "identities": _identity_rows}


def jobs(cfg: ExperimentConfig) -> list[NetJob]:
    if cfg.kind not in _JOBS:
        return []
    return _JOBS[cfg.kind](cfg)


def evaluate(cfg: ExperimentConfig, nets: dict) -> Iterator[dict]:
    if cfg.kind not in _ROWS:
        raise ConfigError(f"experiment kind {cfg.kind!r} has no evaluation sweep")
    return _ROWS[cfg.kind](cfg, nets)
