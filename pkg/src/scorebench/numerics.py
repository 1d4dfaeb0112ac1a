"""Numerical building blocks shared by every other module.

Reproducible random streams, Gaussian tail functions, the complex/real
embedding, small dense linear algebra and Monte Carlo helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

__all__ = [
    "RngStream",
    "q_function",
    "q_inverse",
    "log_q_function",
    "complex_to_real",
    "real_to_complex",
    "symmetrize",
    "inv_spd",
    "mc_mean",
    "hutchinson_trace",
    "probe_vectors",
    "lstsq_min_norm",
]


@dataclass(frozen=True)
class RngStream:
    """A reproducible, splittable random stream.

    Draws come from a Philox (counter-based) generator keyed by
    ``(seed, stream_id, *path)``, so any substream can be regenerated
    independently of how many other substreams were consumed.
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self.path))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    def substream(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, int(stream_id), ())


def _as_generator(stream: RngStream | np.random.Generator) -> np.random.Generator:
    if isinstance(stream, np.random.Generator):
        return stream
    return stream.generator()


# --- Gaussian tail -------------------------------------------------------

def q_function(x):
    """P{Z > x} for standard normal Z.

    Uses the scaled complementary error function on the right tail so that
    values far below 1e-300 underflow gracefully instead of losing digits.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    xp = x[pos] / math.sqrt(2.0)
    out[pos] = 0.5 * special.erfcx(xp) * np.exp(-xp * xp)
    out[~pos] = 1.0 - 0.5 * special.erfc(-x[~pos] / math.sqrt(2.0))
    return out if out.ndim else float(out)


def log_q_function(x):
    """log Q(x), finite even where Q(x) underflows."""
    x = np.asarray(x, dtype=float)
    return special.log_ndtr(-x)


def q_inverse(p):
    """Inverse of :func:`q_function` on (0, 1)."""
    p_arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p_arr)) or np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ValueError("q_inverse requires 0 < p < 1")
    # Q^{-1}(p) = -Phi^{-1}(p); ndtri keeps full precision for tiny p
    x = -special.ndtri(p_arr)
    # one Newton step on log Q tightens the upper tail
    lq = special.log_ndtr(-x)
    dlq = -np.exp(-0.5 * x * x - lq) / math.sqrt(2.0 * math.pi)
    x = x - (lq - np.log(p_arr)) / dlq
    return x if x.ndim else float(x)


# --- complex / real embedding -------------------------------------------

def complex_to_real(v):
    """Stack ``[Re v; Im v]`` along the last axis.

    Per real coordinate, CN(0, s2 I) noise has variance ``s2 / 2``; callers
    converting noise powers must halve them.
    """
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=-1).astype(float)


def real_to_complex(r):
    r = np.asarray(r, dtype=float)
    n2 = r.shape[-1]
    if n2 % 2:
        raise ValueError(f"real_to_complex needs an even trailing length, got {n2}")
    n = n2 // 2
    return r[..., :n] + 1j * r[..., n:]


# --- small dense linear algebra -----------------------------------------

def symmetrize(a):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


def inv_spd(a, max_cond: float = 1e12):
    """Invert a small symmetric matrix after symmetrization.

    Raises ``np.linalg.LinAlgError`` when the condition number exceeds
    ``max_cond``.
    """
    a = symmetrize(a)
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > max_cond:
        raise np.linalg.LinAlgError(f"matrix is singular to working precision (cond={cond:.3g})")
    return symmetrize(np.linalg.inv(a))


def lstsq_min_norm(A, y, anchor=None):
    """Least-squares solution of ``A x = y`` closest to ``anchor``.

    Among all minimizers of ||y - A x||^2 this returns
    ``anchor + pinv(A) (y - A anchor)``; with no anchor it is the
    minimum-norm solution.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.shape[0] != A.shape[0]:
        raise ValueError(f"A has {A.shape[0]} rows but y has length {y.shape[0]}")
    if anchor is None:
        anchor = np.zeros(A.shape[1])
    anchor = np.asarray(anchor, dtype=float)
    if anchor.shape[0] != A.shape[1]:
        raise ValueError(f"anchor length {anchor.shape[0]} != A columns {A.shape[1]}")
    return anchor + np.linalg.pinv(A) @ (y - A @ anchor)


# --- Monte Carlo ----------------------------------------------------------

def mc_mean(stream: RngStream | np.random.Generator,
            f: Callable[[np.random.Generator, int], np.ndarray],
            M: int) -> tuple[float, float]:
    """Monte Carlo mean and standard error of ``f``.

    ``f(rng, M)`` must return ``M`` i.i.d. real values.
    """
    if M < 2:
        raise ValueError("mc_mean needs at least two samples")
    vals = np.asarray(f(_as_generator(stream), M), dtype=float).reshape(-1)
    if vals.shape[0] != M:
        raise ValueError(f"f returned {vals.shape[0]} values, expected {M}")
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(M))


def probe_vectors(rng: np.random.Generator, shape, kind: str = "rademacher"):
    if kind == "rademacher":
        return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0
    if kind == "gaussian":
        return rng.standard_normal(shape)
    raise ValueError(f"unknown probe kind {kind!r}")


def hutchinson_trace(matvec: Callable[[np.ndarray], np.ndarray], dim: int, probes: int,
                     stream: RngStream | np.random.Generator, kind: str = "rademacher",
                     return_stderr: bool = False):
    """Hutchinson estimate of tr(A) given only ``v -> A v``."""
    if probes < 1:
        raise ValueError("need at least one probe")
    rng = _as_generator(stream)
    V = probe_vectors(rng, (probes, dim), kind)
    vals = np.empty(probes)
    for i, v in enumerate(V):
        av = np.asarray(matvec(v), dtype=float)
        if av.shape != (dim,):
            raise ValueError(f"matvec returned shape {av.shape}, expected ({dim},)")
        vals[i] = v @ av
    est = float(vals.mean())
    if return_stderr:
        se = float(vals.std(ddof=1) / math.sqrt(probes)) if probes > 1 else float("nan")
        return est, se
    return est
