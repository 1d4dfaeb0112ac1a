"""Analytic distributions with exact log-densities and scores.

Each distribution exposes ``sample``, ``log_pdf`` and ``score``, plus the
noise-smoothed versions (the law of ``x + sigma * n`` with standard normal
``n``). Arrays are batched over leading axes; the trailing axis is the
coordinate axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .numerics import RngStream, _as_generator, inv_spd, symmetrize

__all__ = [
    "GaussianDist",
    "ExponentialDist",
    "GaussianMixture",
    "complex_gaussian",
    "smoothed_score_gaussian",
    "gaussian_kld",
    "mmse_gaussian_reference",
    "two_mode_mixture",
]


def _check_dim(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class GaussianDist:
    """N(mean, cov) with ``cov`` either a scalar (times I) or a full SPD matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __init__(self, mean, cov=1.0):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        d = mean.shape[0]
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(d)
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match dimension {d}")
        cov = symmetrize(cov)
        # raises LinAlgError when not SPD
        chol = np.linalg.cholesky(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_prec", inv_spd(cov, max_cond=1e15))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def precision(self) -> np.ndarray:
        return self._prec

    def sample(self, stream, M: int) -> np.ndarray:
        rng = _as_generator(stream)
        z = rng.standard_normal((M, self.dim))
        return self.mean + z @ self._chol.T

    def log_pdf(self, x):
        x = _check_dim(x, self.dim)
        r = x - self.mean
        quad = np.einsum("...i,ij,...j->...", r, self._prec, r)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (quad + logdet + self.dim * math.log(2 * math.pi))

    def score(self, x):
        x = _check_dim(x, self.dim)
        return -(x - self.mean) @ self._prec

    def smoothed(self, sigma: float) -> "GaussianDist":
        return GaussianDist(self.mean, self.cov + float(sigma) ** 2 * np.eye(self.dim))

    def smoothed_score(self, x, sigma):
        return self.smoothed(sigma).score(x)

    def smoothed_log_pdf(self, x, sigma):
        return self.smoothed(sigma).log_pdf(x)

    def smoothed_hessian_trace(self, x, sigma):
        sm = self.smoothed(sigma)
        x = _check_dim(x, self.dim)
        return np.full(x.shape[:-1], -np.trace(sm.precision))

    def posterior_mean(self, x_t, sigma):
        """E[x | x + sigma n = x_t]."""
        return np.asarray(x_t) + float(sigma) ** 2 * self.smoothed_score(x_t, sigma)

    def prior_fim(self) -> np.ndarray:
        return self._prec.copy()

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.cov).copy()


@dataclass(frozen=True)
class ExponentialDist:
    """Exp(mean) on (0, inf): p(g) = exp(-g / mean) / mean."""

    mean: float = 1.0

    def __post_init__(self):
        if not self.mean > 0:
            raise ValueError("exponential mean must be positive")

    @property
    def dim(self) -> int:
        return 1

    @property
    def rate(self) -> float:
        return 1.0 / self.mean

    def sample(self, stream, M: int) -> np.ndarray:
        rng = _as_generator(stream)
        return rng.exponential(self.mean, size=(M, 1))

    def _support(self, x):
        x = _check_dim(x, 1)
        if np.any(x <= 0):
            raise ValueError("exponential distribution evaluated outside its support (x <= 0)")
        return x

    def log_pdf(self, x):
        x = self._support(x)
        return -np.log(self.mean) - x[..., 0] / self.mean

    def score(self, x):
        x = self._support(x)
        return np.full_like(x, -1.0 / self.mean)

    def smoothed_log_pdf(self, x, sigma):
        """Log-density of g + sigma n (exponentially modified Gaussian)."""
        x = _check_dim(x, 1)[..., 0]
        lam, s = self.rate, float(sigma)
        z = x / s - lam * s
        return math.log(lam) + 0.5 * (lam * s) ** 2 - lam * x + special.log_ndtr(z)

    def smoothed_score(self, x, sigma):
        x = _check_dim(x, 1)
        lam, s = self.rate, float(sigma)
        z = x[..., 0] / s - lam * s
        mills = np.exp(-0.5 * z * z - 0.5 * math.log(2 * math.pi) - special.log_ndtr(z))
        return (-lam + mills / s)[..., None]

    def prior_fim(self) -> np.ndarray:
        return np.array([[1.0 / self.mean ** 2]])

    @property
    def variance(self) -> np.ndarray:
        return np.array([self.mean ** 2])


@dataclass(frozen=True)
class GaussianMixture:
    """Finite mixture of Gaussians sharing one dimension."""

    weights: np.ndarray
    components: tuple = field(default_factory=tuple)

    def __init__(self, weights, components):
        w = np.asarray(weights, dtype=float)
        comps = tuple(components)
        if w.ndim != 1 or w.shape[0] != len(comps) or len(comps) == 0:
            raise ValueError("weights and components must be non-empty and of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ValueError("all components must share a dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def sample(self, stream, M: int) -> np.ndarray:
        rng = _as_generator(stream)
        labels = rng.choice(len(self.components), size=M, p=self.weights)
        z = rng.standard_normal((M, self.dim))
        out = np.empty((M, self.dim))
        for k, c in enumerate(self.components):
            idx = labels == k
            out[idx] = c.mean + z[idx] @ c._chol.T
        return out

    def sample_with_labels(self, stream, M: int):
        rng = _as_generator(stream)
        labels = rng.choice(len(self.components), size=M, p=self.weights)
        z = rng.standard_normal((M, self.dim))
        out = np.empty((M, self.dim))
        for k, c in enumerate(self.components):
            idx = labels == k
            out[idx] = c.mean + z[idx] @ c._chol.T
        return out, labels

    def _log_joint(self, x, comps):
        return np.stack([np.log(w) + c.log_pdf(x) if w > 0 else np.full(np.shape(x)[:-1], -np.inf)
                         for w, c in zip(self.weights, comps)], axis=-1)

    def responsibilities(self, x, sigma: float = 0.0):
        comps = self._smoothed_components(sigma)
        lj = self._log_joint(_check_dim(x, self.dim), comps)
        return np.exp(lj - special.logsumexp(lj, axis=-1, keepdims=True))

    def _smoothed_components(self, sigma):
        if sigma == 0:
            return self.components
        return tuple(c.smoothed(sigma) for c in self.components)

    def log_pdf(self, x):
        return self.smoothed_log_pdf(x, 0.0)

    def score(self, x):
        return self.smoothed_score(x, 0.0)

    def smoothed(self, sigma: float) -> "GaussianMixture":
        return GaussianMixture(self.weights, self._smoothed_components(sigma))

    def smoothed_log_pdf(self, x, sigma):
        comps = self._smoothed_components(sigma)
        return special.logsumexp(self._log_joint(_check_dim(x, self.dim), comps), axis=-1)

    def smoothed_score(self, x, sigma):
        x = _check_dim(x, self.dim)
        comps = self._smoothed_components(sigma)
        lj = self._log_joint(x, comps)
        r = np.exp(lj - special.logsumexp(lj, axis=-1, keepdims=True))
        scores = np.stack([c.score(x) for c in comps], axis=-2)
        return np.einsum("...k,...kd->...d", r, scores)

    def smoothed_hessian_trace(self, x, sigma):
        """tr of the Hessian of the smoothed log-density."""
        x = _check_dim(x, self.dim)
        comps = self._smoothed_components(sigma)
        lj = self._log_joint(x, comps)
        r = np.exp(lj - special.logsumexp(lj, axis=-1, keepdims=True))
        scores = np.stack([c.score(x) for c in comps], axis=-2)
        s = np.einsum("...k,...kd->...d", r, scores)
        tr_h = np.array([-np.trace(c.precision) for c in comps])
        second = np.einsum("...k,...k->...", r, tr_h + np.sum(scores ** 2, axis=-1))
        return second - np.sum(s ** 2, axis=-1)

    def posterior_mean(self, x_t, sigma):
        """E[x | x + sigma n = x_t] by component-wise Bayes (no score involved)."""
        x_t = _check_dim(x_t, self.dim)
        s2 = float(sigma) ** 2
        r = self.responsibilities(x_t, sigma)
        means = []
        for c in self.components:
            gain = c.cov @ np.linalg.inv(c.cov + s2 * np.eye(self.dim))
            means.append(c.mean + (x_t - c.mean) @ gain.T)
        return np.einsum("...k,...kd->...d", r, np.stack(means, axis=-2))

    def prior_fim_mc(self, stream, M: int = 100_000):
        """Monte Carlo E[score score^T] with entrywise standard errors."""
        x = self.sample(stream, M)
        s = self.score(x)
        outer = s[:, :, None] * s[:, None, :]
        J = symmetrize(outer.mean(axis=0))
        se = outer.std(axis=0, ddof=1) / math.sqrt(M)
        return J, se

    def prior_fim(self, stream=None, M: int = 100_000) -> np.ndarray:
        if stream is None:
            stream = RngStream(0)
        return self.prior_fim_mc(stream, M)[0]

    @property
    def mean(self) -> np.ndarray:
        return np.einsum("k,kd->d", self.weights, np.stack([c.mean for c in self.components]))

    @property
    def variance(self) -> np.ndarray:
        m = self.mean
        second = sum(w * (np.diag(c.cov) + c.mean ** 2) for w, c in zip(self.weights, self.components))
        return second - m ** 2


def two_mode_mixture(separation: float = 2.0, std: float = 0.5, weight: float = 0.5,
                     dim: int = 1) -> GaussianMixture:
    """Two isotropic modes at +-separation/2 along the first axis."""
    mu = np.zeros(dim)
    mu[0] = separation / 2
    return GaussianMixture([weight, 1 - weight],
                           [GaussianDist(-mu, std ** 2), GaussianDist(mu, std ** 2)])


def complex_gaussian(mean, s2: float) -> GaussianDist:
    """CN(mean, s2 I) expressed through the real embedding [Re; Im]."""
    mean = np.atleast_1d(np.asarray(mean, dtype=complex))
    return GaussianDist(np.concatenate([mean.real, mean.imag]), s2 / 2.0)


def smoothed_score_gaussian(dist: GaussianDist, x_t, sigma_t):
    if sigma_t < 0:
        raise ValueError("sigma_t must be non-negative")
    return dist.smoothed_score(x_t, sigma_t)


def gaussian_kld(p: GaussianDist, q: GaussianDist) -> float:
    """KL(p || q) for two Gaussians, in nats."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    d = q.mean - p.mean
    _, logdet_p = np.linalg.slogdet(p.cov)
    _, logdet_q = np.linalg.slogdet(q.cov)
    return float(0.5 * (np.trace(q.precision @ p.cov) + d @ q.precision @ d - p.dim
                        + logdet_q - logdet_p))


def mmse_gaussian_reference(x, sigma_t: float, D: int | None = None) -> float:
    """Conditional MMSE of the N(0, I) reference given clean point ``x``.

    Equals (||x||^2 + D / sigma_t^2) / (1 + 1 / sigma_t^2)^2.
    """
    if not sigma_t > 0:
        raise ValueError("sigma_t must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if D is None:
        D = x.shape[-1]
    snr = sigma_t ** -2
    return float((np.sum(x ** 2) + D * snr) / (1.0 + snr) ** 2)
