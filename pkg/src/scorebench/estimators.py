"""Score-based metric estimators.

Fisher information (posterior, prior and measurement routes), Tweedie
denoising, score-based turbo message passing for MMSE estimation, data
consistency projections, and mutual information / KL divergence by
integrating denoising residuals over the noise level.

Score models are plain callables ``score(x, sigma=None, cond=None)``; trained
:class:`~scorebench.scorenet.ScoreNet` instances and analytic scores both fit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .losses import SigmaSchedule
from .numerics import _as_generator, inv_spd, lstsq_min_norm, symmetrize

__all__ = [
    "FimEstimate",
    "fim_from_scores",
    "bfim_posterior",
    "prior_fim_est",
    "data_fim_known",
    "data_fim_fsm",
    "bcrb",
    "tweedie_denoise",
    "ScoreDenoiser",
    "StmpConfig",
    "StmpResult",
    "StmpDiverged",
    "stmp_solve",
    "lmmse_solve",
    "hard_consistency",
    "soft_consistency",
    "MiEstimate",
    "IntegrandError",
    "mi_score",
    "kld_score",
    "default_mi_grid",
    "MetricReport",
    "config_hash",
    "format_value",
]


# ----- Fisher information ------------------------------------------------------

@dataclass
class FimEstimate:
    """A Fisher information estimate with per-draw contributions.

    ``contributions[m]`` is the mean outer product for the m-th parameter draw
    (averaged over its L measurement draws), so estimates built on the same
    draws can be combined with paired standard errors.
    """

    matrix: np.ndarray
    route: str
    M: int
    L: int = 1
    stderr: np.ndarray | None = None
    contributions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        J = symmetrize(np.atleast_2d(np.asarray(self.matrix, dtype=float)))
        w, U = np.linalg.eigh(J)
        tol = 1e-8 * max(np.linalg.norm(J, 2), 1e-300)
        if w.min() < -tol:
            raise ValueError(f"FIM estimate is not PSD (min eigenvalue {w.min():.3g})")
        if w.min() < 0:
            J = symmetrize((U * np.clip(w, 0.0, None)) @ U.T)
        self.matrix = J
        if self.stderr is None:
            self.stderr = np.zeros_like(J)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __add__(self, other: "FimEstimate") -> "FimEstimate":
        if self.dim != other.dim:
            raise ValueError("cannot add FIMs of different dimension")
        paired = (self.contributions is not None and other.contributions is not None
                  and self.contributions.shape == other.contributions.shape)
        if paired:
            c = self.contributions + other.contributions
            se = c.std(axis=0, ddof=1) / math.sqrt(c.shape[0])
        else:
            c = None
            se = np.sqrt(self.stderr ** 2 + other.stderr ** 2)
        return FimEstimate(self.matrix + other.matrix, f"{self.route}+{other.route}",
                           min(self.M, other.M), max(self.L, other.L), se, c)

    def difference_stderr(self, other: "FimEstimate") -> np.ndarray:
        """Entrywise stderr of ``self - other`` (paired when draws coincide)."""
        if (self.contributions is not None and other.contributions is not None
                and self.contributions.shape == other.contributions.shape):
            d = self.contributions - other.contributions
            return d.std(axis=0, ddof=1) / math.sqrt(d.shape[0])
        return np.sqrt(self.stderr ** 2 + other.stderr ** 2)

    def bcrb(self, keep=None) -> float:
        return bcrb(self.matrix, keep)

    def bcrb_stderr(self, keep=None, h: float = 1e-6) -> float:
        """Delta-method stderr of :meth:`bcrb` from the per-draw contributions."""
        if self.contributions is None:
            return float("nan")
        J = self.matrix
        d = self.dim
        G = np.zeros((d, d))
        scale = np.linalg.norm(J)
        for i in range(d):
            for j in range(i, d):
                E = np.zeros((d, d))
                E[i, j] = E[j, i] = h * scale
                G[i, j] = G[j, i] = (bcrb(J + E, keep) - bcrb(J - E, keep)) / (2 * h * scale)
        # only the symmetric part of each contribution matters
        lin = np.einsum("mij,ij->m", self.contributions, np.where(np.eye(d, dtype=bool), G, G / 2))
        return float(lin.std(ddof=1) / math.sqrt(lin.shape[0]))

    def as_dict(self) -> dict:
        return {"route": self.route, "M": self.M, "L": self.L, "matrix": self.matrix.tolist(),
                "stderr": self.stderr.tolist()}


def fim_from_scores(S, route: str) -> FimEstimate:
    """Mean outer product of scores ``S`` with shape (M, L, d) or (M, d)."""
    S = np.asarray(S, dtype=float)
    if S.ndim == 2:
        S = S[:, None, :]
    M, L, d = S.shape
    if M * L < 2:
        raise ValueError("need at least two score samples")
    outer = np.einsum("mli,mlj->mij", S, S) / L
    J = outer.mean(axis=0)
    if M >= 2:
        se = outer.std(axis=0, ddof=1) / math.sqrt(M)
    else:
        per = np.einsum("li,lj->lij", S[0], S[0])
        se = per.std(axis=0, ddof=1) / math.sqrt(L)
    return FimEstimate(J, route, M, L, se, outer if M >= 2 else None)


def _pairs(theta, y):
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    M, d = theta.shape
    y = np.asarray(y)
    if y.ndim < 2 or y.shape[0] != M:
        raise ValueError("y must have shape (M, L, ...) matching theta (M, d)")
    L = y.shape[1]
    return np.repeat(theta, L, axis=0), y.reshape(M * L, *y.shape[2:]), M, L, d


def bfim_posterior(cond_score: Callable, theta, y) -> FimEstimate:
    """Route 1: mean outer product of posterior scores s(theta_m | y_ml).

    ``y`` has shape (M, L, ...) (L measurement draws per parameter draw);
    ``cond_score(theta, cond=y)`` is evaluated on the flattened pairs.
    """
    th, yf, M, L, d = _pairs(theta, y)
    S = np.asarray(cond_score(th, cond=yf)).reshape(M, L, d)
    return fim_from_scores(S, "posterior")


def prior_fim_est(prior_score: Callable, theta) -> FimEstimate:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if theta.shape[0] < 2:
        raise ValueError("need at least two parameter draws")
    return fim_from_scores(np.asarray(prior_score(theta)), "prior")


def data_fim_known(measurement_score: Callable, theta, y) -> FimEstimate:
    """Mean outer product of a closed-form measurement score grad_theta log p(y | theta).

    ``measurement_score(theta_m, y_m)`` receives one parameter row and its L
    measurements and returns an (L, d) array.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    S = np.stack([np.atleast_2d(measurement_score(theta[m], y[m])) for m in range(theta.shape[0])])
    return fim_from_scores(S, "known-likelihood")


def data_fim_fsm(fsm_score: Callable, theta, y) -> FimEstimate:
    th, yf, M, L, d = _pairs(theta, y)
    S = np.asarray(fsm_score(th, cond=yf)).reshape(M, L, d)
    return fim_from_scores(S, "fsm")


def bcrb(J, keep=None) -> float:
    """Tr(J^-1), or with ``keep`` the trace of the inverse Schur complement on that block."""
    J = symmetrize(J.matrix if isinstance(J, FimEstimate) else J)
    if keep is None:
        return float(np.trace(inv_spd(J)))
    keep = list(keep)
    rest = [i for i in range(J.shape[0]) if i not in keep]
    A = J[np.ix_(keep, keep)]
    if rest:
        B = J[np.ix_(keep, rest)]
        A = A - B @ inv_spd(J[np.ix_(rest, rest)]) @ B.T
    return float(np.trace(inv_spd(A)))


# ----- denoising and message passing ------------------------------------------

def tweedie_denoise(score: Callable, x_t, sigma_t):
    """E[x | x_t] = x_t + sigma_t^2 score(x_t, sigma_t)."""
    if not np.all(np.asarray(sigma_t) > 0):
        raise ValueError("sigma_t must be positive")
    x_t = np.asarray(x_t, dtype=float)
    return x_t + np.asarray(sigma_t) ** 2 * np.asarray(score(x_t, sigma_t))


class ScoreDenoiser:
    """AWGN denoiser built from a smoothed score.

    ``denoise(r, v)`` treats ``r = x + sqrt(v) n`` and returns the posterior
    mean by Tweedie's formula together with a scalar posterior variance:

    * ``second-order``: v + v^2 / D * tr(Hessian of log p_v) at r, where the
      Hessian trace is the trace of the score Jacobian;
    * ``residual``: (||y - A x||^2 - N_meas sigma^2) / ||A||_F^2.
    """

    def __init__(self, score: Callable, var_rule: str = "second-order",
                 hessian_trace: Callable | None = None):
        if var_rule not in ("second-order", "residual"):
            raise ValueError(f"unknown variance rule {var_rule!r}")
        self.score = score
        self.var_rule = var_rule
        self.hessian_trace = hessian_trace

    def _trace(self, r, s):
        if self.hessian_trace is not None:
            return float(np.asarray(self.hessian_trace(r, s)).sum())
        if hasattr(self.score, "input_jacobian"):
            J = self.score.input_jacobian(r[None, :], s)
            return float(np.trace(J[0] if J.ndim == 3 else J))
        raise ValueError("second-order variance rule needs a Hessian trace or an input Jacobian")

    def denoise(self, r, v, A=None, y=None, sigma2=None):
        s = math.sqrt(v)
        mean = r + v * np.asarray(self.score(r[None, :], s))[0]
        D = r.shape[0]
        if self.var_rule == "second-order":
            var = v + v * v / D * self._trace(r, s)
        else:
            resid = y - A @ mean
            var = (float(resid @ resid) - A.shape[0] * sigma2) / float(np.sum(A * A))
        return mean, var


@dataclass(frozen=True)
class StmpConfig:
    max_iter: int = 10
    tol: float = 1e-8
    damping: bool = True
    prior_mean: float | np.ndarray = 0.0
    prior_var: float = 1.0
    var_floor: float = 1e-300


@dataclass
class StmpResult:
    mean: np.ndarray
    var: float
    iterations: int
    converged: bool
    trace: list
    lmmse_mean: np.ndarray | None = None


class StmpDiverged(FloatingPointError):
    pass


def lmmse_solve(A, y, sigma2: float, prior_mean, prior_var: float):
    """Posterior mean and mean posterior variance for x ~ N(m, v I), y = A x + noise."""
    D = A.shape[1]
    P = A.T @ A / sigma2 + np.eye(D) / prior_var
    V = inv_spd(P, max_cond=1e15)
    m = V @ (A.T @ y / sigma2 + np.broadcast_to(prior_mean, (D,)) / prior_var)
    return m, float(np.trace(V) / D)


def _extrinsic(x_post, v_post, x_pri, v_pri, prev_mean, damping, where):
    prec = 1.0 / v_post - 1.0 / v_pri
    if prec > 0:
        v_ext = 1.0 / prec
        return v_ext * (x_post / v_post - x_pri / v_pri), v_ext, False
    if not damping:
        raise StmpDiverged(f"non-positive extrinsic precision in {where} (enable damping)")
    # fallback: keep the message broad and move halfway to the posterior mean
    return 0.5 * x_post + 0.5 * prev_mean, 1e2 * v_post, True


def stmp_solve(A, y, sigma_noise: float, denoiser: ScoreDenoiser, config: StmpConfig = StmpConfig()):
    """Score-based turbo message passing for y = A x + N(0, sigma_noise^2 I).

    Module A is the LMMSE estimator under the Gaussian message
    N(x_A_pri, v_A_pri I); module B denoises its extrinsic output with the
    score denoiser. Messages are exchanged in extrinsic form until the
    posterior mean moves by less than ``tol`` (relative) or ``max_iter``.
    """
    if not sigma_noise > 0:
        raise ValueError("sigma_noise must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.asarray(y, dtype=float)
    Nm, D = A.shape
    s2 = sigma_noise ** 2
    xa_pri = np.broadcast_to(np.asarray(config.prior_mean, dtype=float), (D,)).copy()
    va_pri = float(config.prior_var)
    AtA, Aty = A.T @ A, A.T @ y
    xb_pri = xa_pri.copy()
    x_prev = None
    trace = []
    converged = False
    lm = None
    it = 0
    for it in range(1, config.max_iter + 1):
        V = inv_spd(AtA / s2 + np.eye(D) / va_pri, max_cond=1e15)
        xa_post = V @ (Aty / s2 + xa_pri / va_pri)
        va_post = float(np.trace(V) / D)
        if lm is None:
            lm = xa_post.copy()
        xb_pri, vb_pri, fb_a = _extrinsic(xa_post, va_post, xa_pri, va_pri, xb_pri, config.damping, "module A")
        xb_post, vb_post = denoiser.denoise(xb_pri, vb_pri, A, y, s2)
        vb_post = max(vb_post, config.var_floor)
        xa_pri_new, va_pri_new, fb_b = _extrinsic(xb_post, vb_post, xb_pri, vb_pri, xa_pri, config.damping,
                                                  "module B")
        if not (np.all(np.isfinite(xb_post)) and math.isfinite(vb_post)) or max(vb_pri, va_pri_new) > 1e12:
            raise StmpDiverged(f"message passing diverged at iteration {it}")
        trace.append({"iteration": it, "v_A_post": va_post, "v_B_pri": vb_pri, "v_B_post": vb_post,
                      "v_A_pri": va_pri_new, "fallback": bool(fb_a or fb_b)})
        xa_pri, va_pri = xa_pri_new, va_pri_new
        if x_prev is not None:
            change = np.linalg.norm(xb_post - x_prev) / max(np.linalg.norm(xb_post), 1e-300)
            trace[-1]["change"] = float(change)
            if change < config.tol:
                converged = True
                break
        x_prev = xb_post
    return StmpResult(xb_post, vb_post, it, converged, trace, lm)


def hard_consistency(x0, A, y):
    """Project x0 onto the least-squares solution set of A x = y."""
    return lstsq_min_norm(A, y, anchor=x0)


def soft_consistency(x0, A, y, gamma_t: float):
    """argmin_x gamma_t ||x - x0||^2 + ||y - A x||^2."""
    if not gamma_t > 0:
        raise ValueError("gamma_t must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    x0 = np.asarray(x0, dtype=float)
    if A.shape[1] != x0.shape[0] or A.shape[0] != np.shape(y)[0]:
        raise ValueError("dimension mismatch between A, x0 and y")
    P = gamma_t * np.eye(A.shape[1]) + A.T @ A
    return np.linalg.solve(P, gamma_t * x0 + A.T @ np.asarray(y, dtype=float))


# ----- mutual information / KL divergence -----------------------------------------

class IntegrandError(FloatingPointError):
    pass


@dataclass
class MiEstimate:
    value: float
    stderr: float
    sigmas: np.ndarray
    integrand: np.ndarray
    integrand_stderr: np.ndarray
    samples: int
    per_sample: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "samples": self.samples,
                "sigmas": self.sigmas.tolist(), "integrand": self.integrand.tolist()}


def default_mi_grid(data_std: float, n: int = 64, lo: float = 1e-3, hi: float = 1e2) -> SigmaSchedule:
    return SigmaSchedule.log_grid(lo * data_std, hi * data_std, n)


def _residual_integral(score_a: Callable, score_b: Callable, x, grid: SigmaSchedule, stream,
                       check_endpoints: bool, chunk: int):
    """Per-sample trapezoid integral of ||n + s sa||^2 - ||n + s sb||^2 over log sigma."""
    rng = _as_generator(stream)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    M, D = x.shape
    sig = grid.array
    w = grid.trapezoid_weights()
    F = np.empty((M, sig.size))
    for t, s in enumerate(sig):
        n = rng.standard_normal((M, D))
        for a in range(0, M, chunk):
            b = min(M, a + chunk)
            xt = x[a:b] + s * n[a:b]
            sv = np.full(b - a, s)
            ra = n[a:b] + s * np.asarray(score_a(xt, sv, slice(a, b)))
            rb = n[a:b] + s * np.asarray(score_b(xt, sv, slice(a, b)))
            F[a:b, t] = np.sum(ra * ra, axis=1) - np.sum(rb * rb, axis=1)
    if not np.all(np.isfinite(F)):
        bad = sig[~np.all(np.isfinite(F), axis=0)]
        raise IntegrandError(f"integrand is not finite at sigma = {bad[:3]}")
    per = F @ w
    mean_f = F.mean(axis=0)
    se_f = F.std(axis=0, ddof=1) / math.sqrt(M)
    if check_endpoints:
        peak = np.max(np.abs(mean_f))
        for idx in (0, -1):
            # endpoints that are statistically indistinguishable from a small value pass
            if abs(mean_f[idx]) >= 0.01 * peak and abs(mean_f[idx]) > 3 * se_f[idx]:
                raise IntegrandError(
                    f"integrand at sigma = {sig[idx]:.3g} is {abs(mean_f[idx]) / max(peak, 1e-300):.2%} of its "
                    "peak; widen the noise-level range")
    value = float(per.mean())
    stderr = float(per.std(ddof=1) / math.sqrt(M))
    return MiEstimate(value, stderr, sig, mean_f, se_f, M, per)


def mi_score(uncond_score: Callable, cond_score: Callable, x, y, grid: SigmaSchedule, stream,
             check_endpoints: bool = True, chunk: int = 8192) -> MiEstimate:
    """I(x; y) = E_{x,y} integral over log sigma of the unconditional minus conditional residual.

    ``uncond_score(x_t, sigma)`` and ``cond_score(x_t, sigma, cond=y)``. Both
    terms share the same noise draws, so identical scores give exactly zero.
    """
    y = np.asarray(y)

    def sa(xt, sv, sl):
        return uncond_score(xt, sv)

    def sb(xt, sv, sl):
        return cond_score(xt, sv, cond=y[sl])

    return _residual_integral(sa, sb, x, grid, stream, check_endpoints, chunk)


def kld_score(score_p: Callable, score_q: Callable, x_p, grid: SigmaSchedule, stream,
              check_endpoints: bool = True, chunk: int = 8192) -> MiEstimate:
    """KL(p || q) from samples of p and the smoothed scores of p and q.

    The integrand is ||n + sigma s_q||^2 - ||n + sigma s_p||^2 with shared noise.
    """

    def sa(xt, sv, sl):
        return score_q(xt, sv)

    def sb(xt, sv, sl):
        return score_p(xt, sv)

    return _residual_integral(sa, sb, x_p, grid, stream, check_endpoints, chunk)


# ----- reports ----------------------------------------------------------------------

def config_hash(cfg) -> str:
    js = json.dumps(cfg, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(js.encode("utf-8")).hexdigest()[:16]


def format_value(v):
    """CSV text for a value: floats with 17 significant digits, None as empty."""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


@dataclass
class MetricReport:
    metric: str
    value: float
    stderr: float
    config_hash: str = ""
    grid: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {"metric": self.metric, "value": self.value, "stderr": self.stderr,
             "config-hash": self.config_hash, "grid": self.grid, "samples": self.samples}
        if self.extra:
            d["extra"] = self.extra
        return json.dumps(d, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))

    def csv_row(self) -> dict:
        row = {"metric": self.metric, "value": format_value(self.value), "stderr": format_value(self.stderr),
               "config_hash": self.config_hash}
        for k, v in self.samples.items():
            row[f"samples_{k}"] = format_value(v)
        for k, v in self.extra.items():
            if np.isscalar(v) or v is None:
                row[k] = format_value(v)
        return row

    def csv_line(self) -> str:
        buf = io.StringIO()
        row = self.csv_row()
        csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n").writerow(row)
        return buf.getvalue()
