"""Score matching objectives.

Every loss takes a score model, a batch and a random generator and returns
``(loss, grads)``. ``grads`` is the parameter-gradient dict when the model is
a :class:`ScoreNet`, and ``None`` for plain callables (analytic scores), which
lets the same code evaluate oracle losses. Pass ``reduce=False`` to get the
per-sample loss terms instead.

Batches are dicts: ``x`` holds the variable whose score is learned, ``y`` the
condition (class labels or vectors) when there is one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import probe_vectors
from .scorenet import ScoreNet

__all__ = [
    "SigmaSchedule",
    "LossSpec",
    "AnalyticScore",
    "dsm_loss",
    "cond_dsm_loss",
    "ism_loss",
    "ssm_loss",
    "cond_ism_loss",
    "fsm_loss",
]


@dataclass(frozen=True)
class SigmaSchedule:
    """Noise levels sigma_1 > ... > sigma_T with weights lambda(sigma) = sigma^2."""

    levels: tuple

    def __post_init__(self):
        lv = tuple(float(s) for s in np.atleast_1d(self.levels))
        if len(lv) == 0:
            raise ValueError("schedule needs at least one level")
        if any(not (s > 0 and math.isfinite(s)) for s in lv):
            raise ValueError("noise levels must be positive and finite")
        if any(a <= b for a, b in zip(lv[:-1], lv[1:])):
            raise ValueError("noise levels must be strictly decreasing")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def geometric(cls, sigma_max: float, sigma_min: float, T: int = 10) -> "SigmaSchedule":
        if T == 1:
            return cls((float(sigma_max),))
        if not sigma_max > sigma_min > 0:
            raise ValueError("need sigma_max > sigma_min > 0")
        return cls(tuple(np.geomspace(sigma_max, sigma_min, T)))

    @classmethod
    def for_data(cls, x, T: int = 10) -> "SigmaSchedule":
        """sigma_max = 2 * max distance from the data mean, sigma_min = 0.01 * data std."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = float(np.max(np.linalg.norm(x - x.mean(axis=0), axis=1)))
        std = float(np.sqrt(np.mean(x.var(axis=0))))
        return cls.geometric(2.0 * r, 0.01 * std, T)

    @classmethod
    def log_grid(cls, lo: float, hi: float, n: int = 64) -> "SigmaSchedule":
        """Log-spaced integration grid over [lo, hi] (stored descending)."""
        return cls.geometric(hi, lo, n)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.levels)

    @property
    def T(self) -> int:
        return len(self.levels)

    def weights(self) -> np.ndarray:
        return self.array ** 2

    def sample(self, rng, size: int) -> np.ndarray:
        return self.array[rng.integers(0, self.T, size=size)]

    def trapezoid_weights(self) -> np.ndarray:
        """Weights w with sum_t w_t f(sigma_t) = trapezoid integral of f over u = log sigma."""
        u = np.log(self.array)
        w = np.zeros(self.T)
        du = np.abs(np.diff(u))
        w[:-1] += 0.5 * du
        w[1:] += 0.5 * du
        return w

    def to_dict(self) -> dict:
        return {"levels": list(self.levels)}


class AnalyticScore:
    """Wrap a closed-form score so it can stand in for a network."""

    def __init__(self, fn: Callable, jacobian: Callable | None = None):
        self.fn = fn
        self.jacobian = jacobian

    def __call__(self, x, sigma=None, cond=None, null=None):
        return self.fn(x, sigma, cond)

    def input_jacobian(self, x, sigma=None, cond=None, null=None, h: float = 1e-5):
        X = np.atleast_2d(np.asarray(x, dtype=float))
        if self.jacobian is not None:
            return np.broadcast_to(self.jacobian(X, sigma, cond), (X.shape[0], X.shape[1], X.shape[1]))
        D = X.shape[1]
        J = np.empty((X.shape[0], D, D))
        for j in range(D):
            e = np.zeros_like(X)
            e[:, j] = h * (1 + np.abs(X[:, j]))
            J[:, :, j] = (self(X + e, sigma, cond) - self(X - e, sigma, cond)) / (2 * e[:, j:j + 1])
        return J


def _run(model, params, x, sigma, cond, null, loss_fn, V=None, reduce=True):
    """Dispatch between backprop through a ScoreNet and plain evaluation."""
    if isinstance(model, ScoreNet) and reduce:
        p = model.params if params is None else params
        return model.loss_and_grad(p, x, sigma, cond, null, loss_fn, V)
    if isinstance(model, ScoreNet):
        if V is None:
            s, sd = model(x, sigma, cond, null, params=params), None
        else:
            s, sd = model.score_and_jvp(x, V, sigma, cond, null, params=params)
    else:
        s = np.asarray(model(x, sigma, cond, null) if null is not None else model(x, sigma, cond))
        sd = None
        if V is not None:
            J = model.input_jacobian(x, sigma, cond)
            sd = np.einsum("bij,bpj->bpi", J, V)
    per = loss_fn(s, sd, None, per_sample=True)
    if reduce:
        return float(np.mean(per)), None
    return per


# ----- denoising ------------------------------------------------------------

def _dsm_terms(x, n, sig):
    def loss_fn(s, sd, ctx, per_sample=False):
        r = s + n / sig[:, None]
        lam = sig ** 2
        per = 0.5 * lam * np.sum(r * r, axis=1)
        if per_sample:
            return per
        B = x.shape[0]
        return per.mean(), (lam[:, None] * r) / B, None
    return loss_fn


def dsm_loss(net, x, schedule: SigmaSchedule, rng, params=None, reduce: bool = True,
             cond=None, null=None):
    """Multi-level denoising score matching.

    Per sample: sigma uniform over the schedule, n ~ N(0, I),
    x_t = x + sigma n and term = lambda(sigma) / 2 * ||s(x_t, sigma) + n / sigma||^2.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    sig = schedule.sample(rng, x.shape[0])
    n = rng.standard_normal(x.shape)
    xt = x + sig[:, None] * n
    return _run(net, params, xt, sig, cond, null, _dsm_terms(x, n, sig), reduce=reduce)


def cond_dsm_loss(net, x, y, schedule: SigmaSchedule, rng, p_uncond: float = 0.1, params=None,
                  reduce: bool = True):
    """Conditional DSM; each condition is replaced by the null token w.p. ``p_uncond``."""
    if not 0.0 <= p_uncond <= 1.0:
        raise ValueError("p_uncond must lie in [0, 1]")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    null = rng.random(x.shape[0]) < p_uncond
    return dsm_loss(net, x, schedule, rng, params=params, reduce=reduce, cond=y, null=null)


# ----- implicit / sliced ----------------------------------------------------

def _trace_terms(V, scale_tr, prior=None):
    def loss_fn(s, sd, ctx, per_sample=False):
        tr = np.einsum("bpd,bpd->b", sd, V) * scale_tr
        per = tr + 0.5 * np.sum(s * s, axis=1)
        if prior is not None:
            per = per + np.sum(s * prior, axis=1)
        if per_sample:
            return per
        B = s.shape[0]
        ds = s if prior is None else s + prior
        return per.mean(), ds / B, V * (scale_tr / B)
    return loss_fn


def ism_loss(net, x, rng=None, params=None, reduce: bool = True, cond=None, sigma=None):
    """Implicit score matching: mean of tr(d s / d x) + ||s||^2 / 2."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    B, D = x.shape
    V = np.broadcast_to(np.eye(D), (B, D, D))
    return _run(net, params, x, sigma, cond, None, _trace_terms(V, 1.0), V, reduce)


def ssm_loss(net, x, rng, probes: int = 1, params=None, reduce: bool = True, cond=None,
             sigma=None, kind: str = "rademacher"):
    """Sliced score matching: the trace replaced by mean_p v_p^T (d s / d x) v_p."""
    if probes < 1:
        raise ValueError("need at least one probe")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    B, D = x.shape
    V = probe_vectors(rng, (B, probes, D), kind)
    return _run(net, params, x, sigma, cond, None, _trace_terms(V, 1.0 / probes), V, reduce)


def cond_ism_loss(net, theta, y, rng=None, params=None, reduce: bool = True):
    """ISM for the posterior score s(theta | y); derivatives taken in theta."""
    return ism_loss(net, theta, rng, params=params, reduce=reduce, cond=y)


def fsm_loss(net, theta, y, prior_score: Callable | None, rng=None, params=None,
             reduce: bool = True):
    """Fisher score matching for the measurement score s(y | theta).

    Mean of tr(d s / d theta) + ||s||^2 / 2 + s^T prior_score(theta), with the
    prior score held fixed.
    """
    if prior_score is None:
        raise ValueError("FSM needs a frozen prior-score surrogate")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    B, D = theta.shape
    prior = np.asarray(prior_score(theta), dtype=float).reshape(B, D)
    V = np.broadcast_to(np.eye(D), (B, D, D))
    return _run(net, params, theta, None, y, None, _trace_terms(V, 1.0, prior), V, reduce)


# ----- objective selection ----------------------------------------------------

_OBJECTIVES = ("ism", "ssm", "dsm", "cond-dsm", "cond-ism", "fsm")


@dataclass(frozen=True)
class LossSpec:
    """Training objective; callable as ``spec(net, params, batch, rng)``."""

    objective: str
    schedule: SigmaSchedule | None = None
    p_uncond: float = 0.1
    probes: int = 1
    prior_score: Callable | None = None
    probe_kind: str = "rademacher"

    def __post_init__(self):
        if self.objective not in _OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective in ("dsm", "cond-dsm") and self.schedule is None:
            raise ValueError(f"{self.objective} needs a sigma schedule")
        if self.objective == "fsm" and self.prior_score is None:
            raise ValueError("fsm needs a frozen prior-score surrogate")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")

    def __call__(self, net, params, batch, rng):
        o = self.objective
        if o == "dsm":
            return dsm_loss(net, batch["x"], self.schedule, rng, params=params)
        if o == "cond-dsm":
            return cond_dsm_loss(net, batch["x"], batch["y"], self.schedule, rng, self.p_uncond, params=params)
        if o == "ism":
            return ism_loss(net, batch["x"], rng, params=params)
        if o == "ssm":
            return ssm_loss(net, batch["x"], rng, self.probes, params=params, kind=self.probe_kind)
        if o == "cond-ism":
            return cond_ism_loss(net, batch["x"], batch["y"], rng, params=params)
        return fsm_loss(net, batch["x"], batch["y"], self.prior_score, rng, params=params)
