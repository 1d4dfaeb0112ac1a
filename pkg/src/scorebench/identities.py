"""Quadrature oracles for 1-D Gaussian mixtures and the information identities.

All integrals are adaptive Gauss-Kronrod (``scipy.integrate.quad``) over
``[min mu - 12 s_max, max mu + 12 s_max]``, where ``s_max`` is the largest
component standard deviation after smoothing. Nothing here touches a
learned score; these are the ground truths that learned estimators are
compared against.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate, special

from .distributions import GaussianDist, GaussianMixture, two_mode_mixture

__all__ = [
    "Mixture1D",
    "IdentityCheck",
    "check_i_mmse",
    "check_de_bruijn",
    "check_brown",
    "check_kld_fim",
    "run_identity_suite",
    "default_mixture",
    "gaussian_closed_forms",
    "as_mixture1d",
]

_QUAD = dict(limit=400, epsabs=1e-13, epsrel=1e-12)


@dataclass(frozen=True)
class Mixture1D:
    """Scalar Gaussian mixture sum_k w_k N(mu_k, v_k) with closed-form helpers."""

    weights: tuple
    means: tuple
    variances: tuple

    @classmethod
    def from_mixture(cls, mix: GaussianMixture) -> "Mixture1D":
        if mix.dim != 1:
            raise ValueError("quadrature oracles are one-dimensional")
        return cls(tuple(float(w) for w in mix.weights),
                   tuple(float(c.mean[0]) for c in mix.components),
                   tuple(float(c.cov[0, 0]) for c in mix.components))

    @classmethod
    def gaussian(cls, mean=0.0, var=1.0) -> "Mixture1D":
        return cls((1.0,), (float(mean),), (float(var),))

    def _arrays(self):
        return np.array(self.weights), np.array(self.means), np.array(self.variances)

    def smooth(self, sigma2: float) -> "Mixture1D":
        """Law of x + sqrt(sigma2) n."""
        return Mixture1D(self.weights, self.means, tuple(v + sigma2 for v in self.variances))

    def scale(self, a: float) -> "Mixture1D":
        return Mixture1D(self.weights, tuple(a * m for m in self.means),
                         tuple(a * a * v for v in self.variances))

    def shift(self, d: float) -> "Mixture1D":
        return Mixture1D(self.weights, tuple(m + d for m in self.means), self.variances)

    def bounds(self):
        _, mu, v = self._arrays()
        s = math.sqrt(v.max())
        return float(mu.min() - 12 * s), float(mu.max() + 12 * s)

    def logpdf(self, x):
        w, mu, v = self._arrays()
        x = np.asarray(x, dtype=float)[..., None]
        lp = np.log(w) - 0.5 * np.log(2 * np.pi * v) - 0.5 * (x - mu) ** 2 / v
        return special.logsumexp(lp, axis=-1)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def dlogpdf(self, x):
        w, mu, v = self._arrays()
        x = np.asarray(x, dtype=float)[..., None]
        lp = np.log(w) - 0.5 * np.log(2 * np.pi * v) - 0.5 * (x - mu) ** 2 / v
        r = np.exp(lp - special.logsumexp(lp, axis=-1, keepdims=True))
        return np.sum(r * (mu - x) / v, axis=-1)

    def mean(self) -> float:
        w, mu, _ = self._arrays()
        return float(w @ mu)

    def variance(self) -> float:
        w, mu, v = self._arrays()
        return float(w @ (v + mu ** 2) - (w @ mu) ** 2)

    def _integrate(self, f, bounds=None):
        lo, hi = bounds if bounds is not None else self.bounds()
        # split at component means so quad sees every mode
        pts = sorted(set([lo, *[m for m in self.means if lo < m < hi], hi]))
        return sum(integrate.quad(f, a, b, **_QUAD)[0] for a, b in zip(pts[:-1], pts[1:]))

    def entropy(self) -> float:
        def f(x):
            lp = float(self.logpdf(x))
            return -math.exp(lp) * lp
        return self._integrate(f)

    def fisher_information(self) -> float:
        return self._integrate(lambda x: float(self.pdf(x) * self.dlogpdf(x) ** 2))

    def posterior_moments(self, y, sigma2: float):
        """E[x | y] and E[x^2 | y] for y = x + sqrt(sigma2) n, by component-wise Bayes."""
        w, mu, v = self._arrays()
        y = np.asarray(y, dtype=float)[..., None]
        vt = v + sigma2
        lp = np.log(w) - 0.5 * np.log(2 * np.pi * vt) - 0.5 * (y - mu) ** 2 / vt
        r = np.exp(lp - special.logsumexp(lp, axis=-1, keepdims=True))
        m_post = (sigma2 * mu + v * y) / vt
        v_post = v * sigma2 / vt
        m1 = np.sum(r * m_post, axis=-1)
        m2 = np.sum(r * (v_post + m_post ** 2), axis=-1)
        return m1, m2

    def posterior_mean(self, y, sigma2: float):
        return self.posterior_moments(y, sigma2)[0]

    def mmse(self, sigma2: float) -> float:
        """E[(x - E[x|y])^2] for y = x + sqrt(sigma2) n."""
        if sigma2 <= 0:
            return 0.0
        sm = self.smooth(sigma2)

        def f(y):
            m1, m2 = self.posterior_moments(y, sigma2)
            return float(sm.pdf(y) * (m2 - m1 * m1))
        return sm._integrate(f)

    def mutual_information(self, snr: float) -> float:
        """I(x; sqrt(snr) x + n) in nats."""
        if snr <= 0:
            return 0.0
        out = self.scale(math.sqrt(snr)).smooth(1.0)
        return out.entropy() - 0.5 * math.log(2 * math.pi * math.e)

    def kld(self, other: "Mixture1D") -> float:
        lo1, hi1 = self.bounds()
        lo2, hi2 = other.bounds()
        bounds = (min(lo1, lo2), max(hi1, hi2))

        def f(x):
            lp = float(self.logpdf(x))
            return math.exp(lp) * (lp - float(other.logpdf(x)))
        return self._integrate(f, bounds)


def default_mixture() -> Mixture1D:
    """The fixed two-mode mixture used by the identity suite."""
    return Mixture1D.from_mixture(two_mode_mixture(separation=3.0, std=0.6, weight=0.4))


@dataclass
class IdentityCheck:
    name: str
    point: float
    lhs: float
    rhs: float
    rel_err: float
    tol: float
    passed: bool
    note: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def _check(name, point, lhs, rhs, tol, note=""):
    rel = abs(lhs - rhs) / max(abs(rhs), 1e-300)
    return IdentityCheck(name, float(point), float(lhs), float(rhs), float(rel), tol, bool(rel < tol), note)


def check_i_mmse(dist: Mixture1D, snr: float, tol: float = 0.02, mmse_scale: float = 1.0,
                 rel_step: float = 1e-3) -> IdentityCheck:
    """dI/dsnr (central differences on quadrature MI) against MMSE / 2.

    ``mmse_scale`` corrupts the MMSE side; it exists for negative controls.
    """
    h = rel_step * snr
    lhs = (dist.mutual_information(snr + h) - dist.mutual_information(snr - h)) / (2 * h)
    rhs = 0.5 * dist.mmse(1.0 / snr) * mmse_scale
    return _check("i-mmse", snr, lhs, rhs, tol)


def check_de_bruijn(dist: Mixture1D, sigma2: float, tol: float = 0.02,
                    rel_step: float = 1e-3) -> IdentityCheck:
    """d h(x + sigma n) / d sigma^2 against J(x + sigma n) / 2."""
    h = rel_step * sigma2
    lhs = (dist.smooth(sigma2 + h).entropy() - dist.smooth(sigma2 - h).entropy()) / (2 * h)
    rhs = 0.5 * dist.smooth(sigma2).fisher_information()
    return _check("de-bruijn", sigma2, lhs, rhs, tol)


def check_brown(dist: Mixture1D, snr: float, tol: float = 0.02) -> IdentityCheck:
    """J(sqrt(snr) x + n) against 1 - snr * MMSE with noise variance 1/snr."""
    lhs = dist.scale(math.sqrt(snr)).smooth(1.0).fisher_information()
    rhs = 1.0 - snr * dist.mmse(1.0 / snr)
    return _check("brown", snr, lhs, rhs, tol)


def check_kld_fim(dist: Mixture1D, delta: float, tol: float = 0.05,
                  constant: float = 0.5) -> IdentityCheck:
    """Small-shift curvature of KL for the location family p(y - theta).

    Tests KL(p_theta || p_theta+delta) = constant * delta^2 J. The textbook
    second-order expansion gives ``constant = 1/2``; the ratio actually
    observed is reported in ``note`` so other conventions can be judged.
    """
    J = dist.fisher_information()
    kl = dist.kld(dist.shift(delta))
    ratio = kl / (delta * delta * J)
    return _check("kld-fim", delta, kl, constant * delta * delta * J, tol,
                  note=f"observed KL/(delta^2 J) = {ratio:.6f}")


def run_identity_suite(dist: Mixture1D | None = None, *, snrs=(0.1, 1.0, 10.0),
                       sigma2s=(0.1, 1.0, 10.0), deltas=(1e-2, 5e-3), tols=(0.02, 0.02, 0.02, 0.05),
                       mmse_scale: float = 1.0) -> list[IdentityCheck]:
    if dist is None:
        dist = default_mixture()
    t_immse, t_db, t_brown, t_kf = tols
    out = [check_i_mmse(dist, s, t_immse, mmse_scale=mmse_scale) for s in snrs]
    out += [check_de_bruijn(dist, s2, t_db) for s2 in sigma2s]
    out += [check_brown(dist, s, t_brown) for s in snrs]
    out += [check_kld_fim(dist, d, t_kf) for d in deltas]
    return out


def gaussian_closed_forms(var: float, snr: float) -> dict:
    """Closed forms for a scalar N(0, var) input, used as the exact reference."""
    return {
        "mi": 0.5 * math.log1p(snr * var),
        "mmse": var / (1.0 + snr * var),
        "entropy": 0.5 * math.log(2 * math.pi * math.e * var),
        "fisher": 1.0 / var,
    }


def as_mixture1d(dist) -> Mixture1D:
    if isinstance(dist, Mixture1D):
        return dist
    if isinstance(dist, GaussianMixture):
        return Mixture1D.from_mixture(dist)
    if isinstance(dist, GaussianDist):
        if dist.dim != 1:
            raise ValueError("quadrature oracles are one-dimensional")
        return Mixture1D.gaussian(float(dist.mean[0]), float(dist.cov[0, 0]))
    raise TypeError(f"unsupported distribution type {type(dist).__name__}")
