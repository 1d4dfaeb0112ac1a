"""Near-field ULA sensing model: channels, detection data and analytic baselines.

The array lies on the x-axis centred at the origin; a point target sits at
``r = (x, y)`` with ``y > 0``. Complex quantities are converted to the real
embedding ``[Re; Im]`` only at dataset boundaries, where CN(0, s2) noise
becomes N(0, s2 / 2) per real coordinate.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import integrate, special

from .numerics import RngStream, _as_generator, complex_to_real, inv_spd, q_function, q_inverse, symmetrize

__all__ = [
    "SPEED_OF_LIGHT",
    "dbm_to_watt",
    "watt_to_dbm",
    "UlaGeometry",
    "TargetState",
    "SensingScene",
    "steering_vector",
    "sensing_channel",
    "optimal_probe",
    "random_probe",
    "DetectionDataset",
    "gen_detection",
    "scene_hash",
    "save_dataset",
    "load_dataset",
    "analytic_kld_known_gamma",
    "detection_pd",
    "LrtResult",
    "lrt_montecarlo_pd",
    "exp_gamma_snapshot_kld",
    "measurement_mean",
    "measurement_jacobian",
    "measurement_score",
    "analytic_fim",
    "sample_theta",
    "gen_localization",
    "schur_bound",
    "analytic_bcrb_localization",
]

SPEED_OF_LIGHT = 299_792_458.0


def dbm_to_watt(dbm):
    w = 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)
    return float(w) if w.ndim == 0 else w


def watt_to_dbm(w):
    return 10.0 * np.log10(w) + 30.0


@dataclass(frozen=True)
class UlaGeometry:
    N: int = 64
    aperture: float = 0.5
    carrier: float = 28e9

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("a ULA needs at least two antennas")
        if not (self.aperture > 0 and self.carrier > 0):
            raise ValueError("aperture and carrier must be positive")

    @property
    def spacing(self) -> float:
        return self.aperture / (self.N - 1)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier

    @property
    def offsets(self) -> np.ndarray:
        """delta_n = n - 1 - (N - 1) / 2 for n = 1..N."""
        return np.arange(self.N) - (self.N - 1) / 2.0

    @property
    def positions(self) -> np.ndarray:
        return self.offsets * self.spacing

    def distances(self, r) -> np.ndarray:
        x, y = float(r[0]), float(r[1])
        dn = self.positions
        return np.sqrt(x * x + y * y - 2.0 * dn * x + dn * dn)


@dataclass(frozen=True)
class TargetState:
    x: float = 20.0
    y: float = 20.0
    gamma: float = 1.0

    def __post_init__(self):
        if not self.y > 0:
            raise ValueError("target must lie in front of the array (y > 0)")
        if not self.gamma > 0:
            raise ValueError("RCS gamma must be positive")

    @property
    def r(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class SensingScene:
    """Array, priors, noise and power; dBm fields are converted on access."""

    N: int = 64
    K: int = 4
    carrier: float = 28e9
    aperture: float = 0.5
    target: tuple = (20.0, 20.0)
    pt_dbm: float = 20.0
    noise_dbm: float = -60.0
    sigma_r2: float = 5.0
    rcs: str = "fixed"  # fixed | exp
    gamma0: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.rcs not in ("fixed", "exp"):
            raise ValueError("rcs must be 'fixed' or 'exp'")
        if not (self.sigma_r2 > 0 and self.gamma0 > 0):
            raise ValueError("prior parameters must be positive")
        UlaGeometry(self.N, self.aperture, self.carrier)

    @property
    def geometry(self) -> UlaGeometry:
        return UlaGeometry(self.N, self.aperture, self.carrier)

    @property
    def pt(self) -> float:
        return float(dbm_to_watt(self.pt_dbm))

    @property
    def noise_power(self) -> float:
        return float(dbm_to_watt(self.noise_dbm))

    @property
    def beta0(self) -> float:
        lam = self.geometry.wavelength
        return math.sqrt(lam * lam / (4.0 * math.pi) ** 3)

    @property
    def mu_r(self) -> np.ndarray:
        return np.array(self.target)

    def with_(self, **kw) -> "SensingScene":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target"] = list(self.target)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SensingScene":
        return cls(**d)

    def describe(self) -> dict:
        """Derived quantities in SI units (for reports and ``scene-info``)."""
        g = self.geometry
        a = steering_vector(g, self.mu_r)
        return {
            **self.to_dict(),
            "pt_watt": self.pt,
            "noise_watt": self.noise_power,
            "wavelength_m": g.wavelength,
            "spacing_m": g.spacing,
            "beta0": self.beta0,
            "steering_norm2": float(np.sum(np.abs(a) ** 2)),
            "kld_optimal_probe": analytic_kld_known_gamma(self, optimal_probe(g, self.mu_r, self.pt)),
        }


def steering_vector(geom: UlaGeometry, r) -> np.ndarray:
    """[a]_n = exp(-j 2 pi r_n / lambda) / r_n."""
    rn = geom.distances(r)
    if np.any(rn <= 1e-12):
        raise ValueError("target coincides with an antenna element")
    return np.exp(-2j * math.pi * rn / geom.wavelength) / rn


def sensing_channel(geom: UlaGeometry, target: TargetState, beta0: float | None = None) -> np.ndarray:
    """Round-trip channel beta a a^T with beta = beta0 * gamma (plain transpose)."""
    if beta0 is None:
        beta0 = math.sqrt(geom.wavelength ** 2 / (4.0 * math.pi) ** 3)
    a = steering_vector(geom, target.r)
    return beta0 * target.gamma * np.outer(a, a)


def optimal_probe(geom: UlaGeometry, r, P_t: float) -> np.ndarray:
    """sqrt(P_t) conj(a) / ||a||, the dominant right singular vector of a a^T."""
    if not P_t >= 0:
        raise ValueError("transmit power must be non-negative")
    a = steering_vector(geom, r)
    return math.sqrt(P_t) * np.conj(a) / np.linalg.norm(a)


def random_probe(N: int, P_t: float, stream) -> np.ndarray:
    """x ~ CN(0, P_t / N I)."""
    rng = _as_generator(stream)
    return math.sqrt(P_t / (2.0 * N)) * (rng.standard_normal(N) + 1j * rng.standard_normal(N))


# ----- detection ------------------------------------------------------------

@dataclass
class DetectionDataset:
    """Real-embedded snapshots ``y`` of shape (blocks, K, 2N) with labels."""

    y: np.ndarray
    labels: np.ndarray
    gammas: np.ndarray
    noise_var_real: float
    meta: dict = field(default_factory=dict)

    def flat_snapshots(self) -> np.ndarray:
        return self.y.reshape(-1, self.y.shape[-1])


def _complex_noise(rng, shape, s2):
    return math.sqrt(s2 / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def gen_detection(scene: SensingScene, hypothesis: int, blocks: int, stream, x=None,
                  gamma_per_snapshot: bool = False) -> DetectionDataset:
    """Snapshots under H0 (noise only) or H1 (H_s x + noise).

    gamma is drawn per coherent block and held over its K snapshots, unless
    ``gamma_per_snapshot`` asks for the factorized per-snapshot model.
    """
    if hypothesis not in (0, 1):
        raise ValueError("hypothesis must be 0 or 1")
    rng = _as_generator(stream)
    g = scene.geometry
    if x is None:
        x = optimal_probe(g, scene.mu_r, scene.pt)
    h = sensing_channel(g, TargetState(*scene.target, 1.0), scene.beta0) @ x
    K, N, s2 = scene.K, scene.N, scene.noise_power
    noise = _complex_noise(rng, (blocks, K, N), s2)
    if hypothesis == 0:
        gam = np.zeros((blocks, K))
    elif scene.rcs == "fixed":
        gam = np.ones((blocks, K))
    elif gamma_per_snapshot:
        gam = rng.exponential(scene.gamma0, size=(blocks, K))
    else:
        gam = np.repeat(rng.exponential(scene.gamma0, size=(blocks, 1)), K, axis=1)
    y = gam[:, :, None] * h + noise
    return DetectionDataset(complex_to_real(y), np.full(blocks, hypothesis), gam[:, 0].copy(), s2 / 2.0,
                            {"snr_per_snapshot": float(np.sum(np.abs(h) ** 2) / s2), "pt_dbm": scene.pt_dbm})


def scene_hash(scene: SensingScene) -> str:
    js = json.dumps(scene.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(js.encode("utf-8")).hexdigest()[:16]


def save_dataset(path, ds: DetectionDataset, scene: SensingScene, seed: int | None = None) -> Path:
    """Write ``path.npz`` (y, labels, gammas) and a ``path.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    npz = path.with_suffix(".npz")
    with open(npz, "wb") as fh:
        np.savez(fh, y=ds.y, labels=ds.labels, gammas=ds.gammas)
    side = {
        "shapes": {"y": list(ds.y.shape), "labels": list(ds.labels.shape), "gammas": list(ds.gammas.shape)},
        "dtype": str(ds.y.dtype),
        "seed": seed,
        "scene": scene.to_dict(),
        "scene_hash": scene_hash(scene),
        "noise_var_real": ds.noise_var_real,
        "meta": ds.meta,
    }
    path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True, indent=1))
    return npz


def load_dataset(path) -> tuple[DetectionDataset, dict]:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    with np.load(path.with_suffix(".npz")) as z:
        y, labels, gammas = z["y"], z["labels"], z["gammas"]
    if list(y.shape) != side["shapes"]["y"]:
        raise ValueError("dataset tensor does not match its sidecar")
    return DetectionDataset(y, labels, gammas, side["noise_var_real"], side["meta"]), side


def analytic_kld_known_gamma(scene: SensingScene, x) -> float:
    """K ||H_s x||^2 / sigma_s^2 for gamma = 1 (total over the K snapshots)."""
    g = scene.geometry
    h = sensing_channel(g, TargetState(*scene.target, 1.0), scene.beta0) @ np.asarray(x)
    return float(scene.K * np.sum(np.abs(h) ** 2) / scene.noise_power)


def detection_pd(P_fa: float, kld: float, K: int = 1) -> float:
    """Q(Q^{-1}(P_fa) - sqrt(2 kld)), with ``kld`` the total over all K snapshots.

    ``K`` only documents that convention and is validated; it does not rescale.
    """
    if not 0.0 < P_fa < 1.0:
        raise ValueError("P_fa must lie in (0, 1)")
    if not kld >= 0:
        raise ValueError("kld must be non-negative")
    if K < 1:
        raise ValueError("K must be at least 1")
    return float(q_function(q_inverse(P_fa) - math.sqrt(2.0 * kld)))


@dataclass
class LrtResult:
    pd: float
    pfa: float
    pd_stderr: float
    threshold: float
    trials: int
    pfa_validation: float = float("nan")


def _lrt_stat(y_complex, h):
    # matched filter summed over the coherent block
    return np.real(np.einsum("n,bkn->b", np.conj(h), y_complex))


def lrt_montecarlo_pd(scene: SensingScene, x, trials: int, stream, target_pfa: float = 0.1,
                      chunk: int = 20_000) -> LrtResult:
    """Monte Carlo P_d of the gamma = 1 optimal detector at a calibrated threshold.

    The statistic is Re(h^H sum_k y_k) with h = H_s(gamma=1) x. The threshold
    is the empirical (1 - target_pfa) quantile of ``trials`` H0 blocks; P_d is
    the hit rate on ``trials`` independent H1 blocks (gamma per ``scene.rcs``,
    held fixed within a block). The reported stderr combines the binomial
    term with the threshold's own sampling error.
    """
    if trials < 10_000:
        raise ValueError("need at least 10^4 trials to calibrate the threshold")
    rng_stream = stream if isinstance(stream, RngStream) else None
    gen = _as_generator(stream)
    g = scene.geometry
    h = sensing_channel(g, TargetState(*scene.target, 1.0), scene.beta0) @ np.asarray(x)
    K, N, s2 = scene.K, scene.N, scene.noise_power
    # the statistic only needs the signal direction; at zero power fall back to a(r)
    filt = h if np.any(h != 0) else steering_vector(g, scene.mu_r)

    def draw(hyp, n, r):
        out = np.empty(n)
        for start in range(0, n, chunk):
            m = min(chunk, n - start)
            y = _complex_noise(r, (m, K, N), s2)
            if hyp == 1:
                if scene.rcs == "fixed":
                    gam = np.ones(m)
                else:
                    gam = r.exponential(scene.gamma0, size=m)
                y = y + gam[:, None, None] * h
            out[start:start + m] = _lrt_stat(y, filt)
        return out

    if rng_stream is not None:
        r0, r1, rv = (rng_stream.child(i).generator() for i in range(3))
    else:
        r0 = r1 = rv = gen
    t0 = draw(0, trials, r0)
    t1 = draw(1, trials, r1)
    thr = float(np.quantile(t0, 1.0 - target_pfa))
    pfa = float(np.mean(t0 > thr))
    pd = float(np.mean(t1 > thr))
    # threshold uncertainty: dP_d = (f1 / f0)(thr) * dP_fa, densities from a local window
    w = 0.25 * np.std(t0)
    f0 = np.mean(np.abs(t0 - thr) < w) / (2 * w)
    f1 = np.mean(np.abs(t1 - thr) < w) / (2 * w)
    ratio = f1 / f0 if f0 > 0 else 0.0
    var = pd * (1 - pd) / trials + ratio ** 2 * pfa * (1 - pfa) / trials
    tv = draw(0, trials, rv)
    return LrtResult(pd, pfa, math.sqrt(var), thr, trials, float(np.mean(tv > thr)))


def exp_gamma_snapshot_kld(scene: SensingScene, x, block: bool = False) -> float:
    """Quadrature KL(H0 || H1) for gamma ~ Exp(gamma0), in nats.

    Along the signal direction the H1 law is N(gamma m, 1) mixed over gamma in
    standardized units, with m = ||h|| / sqrt(s2 / 2); directions orthogonal
    to h carry no information. With ``block=True`` gamma is shared by the K
    snapshots of a block, whose sufficient statistic has m -> m sqrt(K);
    otherwise the value is for a single snapshot.
    """
    g = scene.geometry
    h = sensing_channel(g, TargetState(*scene.target, 1.0), scene.beta0) @ np.asarray(x)
    m = float(np.linalg.norm(complex_to_real(h)) / math.sqrt(scene.noise_power / 2.0))
    if block:
        m *= math.sqrt(scene.K)
    if m == 0:
        return 0.0
    # z = gamma m + n with gamma m ~ Exp(rate a): exponentially modified Gaussian
    a = 1.0 / (scene.gamma0 * m)

    def f(z):
        lp0 = -0.5 * z * z - 0.5 * math.log(2 * math.pi)
        lp1 = math.log(a) + 0.5 * a * a - a * z + special.log_ndtr(z - a)
        return math.exp(lp0) * (lp0 - lp1)

    val = integrate.quad(f, -40, 40, limit=400, epsabs=1e-14, epsrel=1e-12)[0]
    return float(val)


# ----- localization -----------------------------------------------------------

def _theta_parts(theta):
    theta = np.asarray(theta, dtype=float)
    gamma = theta[2] if theta.shape[0] > 2 else 1.0
    return theta[:2], gamma


def measurement_mean(scene: SensingScene, theta, x) -> np.ndarray:
    """f(theta) = beta0 gamma a(r) a(r)^T x."""
    r, gamma = _theta_parts(theta)
    a = steering_vector(scene.geometry, r)
    return scene.beta0 * gamma * a * (a @ np.asarray(x))


def measurement_jacobian(scene: SensingScene, theta, x) -> np.ndarray:
    """d f / d theta, complex (N, len(theta)), theta = (x, y) or (x, y, gamma)."""
    r, gamma = _theta_parts(theta)
    geom = scene.geometry
    rn = geom.distances(r)
    if np.any(rn <= 1e-12):
        raise ValueError("degenerate geometry: target on an antenna")
    a = np.exp(-2j * math.pi * rn / geom.wavelength) / rn
    x = np.asarray(x)
    ax = a @ x
    dn = geom.positions
    # d a_n / d r_n = a_n (-1/r_n - j 2 pi / lambda)
    da_dr = a * (-1.0 / rn - 2j * math.pi / geom.wavelength)
    drn = np.stack([(r[0] - dn) / rn, r[1] / rn], axis=1)
    cols = []
    for c in range(2):
        adot = da_dr * drn[:, c]
        cols.append(scene.beta0 * gamma * (adot * ax + a * (adot @ x)))
    if np.asarray(theta).shape[0] > 2:
        cols.append(scene.beta0 * a * ax)
    return np.stack(cols, axis=1)


def measurement_score(scene: SensingScene, theta, x, Y) -> np.ndarray:
    """grad_theta log p(Y | theta) = sum_k (2 / s2) Re{J^H (y_k - f)}.

    ``Y`` is complex with shape (..., K, N); the result has shape (..., d).
    """
    J = measurement_jacobian(scene, theta, x)
    f = measurement_mean(scene, theta, x)
    resid = np.asarray(Y) - f
    return (2.0 / scene.noise_power) * np.real(np.einsum("nd,...kn->...d", np.conj(J), resid))


def analytic_fim(scene: SensingScene, theta, x, K: int | None = None) -> np.ndarray:
    """K (2 / s2) Re{J^H J}."""
    K = scene.K if K is None else K
    J = measurement_jacobian(scene, theta, x)
    return symmetrize(K * (2.0 / scene.noise_power) * np.real(np.conj(J).T @ J))


def sample_theta(scene: SensingScene, M: int, stream, with_gamma: bool | None = None) -> np.ndarray:
    """Draw theta = r (or (r, gamma)) from the scene prior."""
    rng = _as_generator(stream)
    if with_gamma is None:
        with_gamma = scene.rcs == "exp"
    r = scene.mu_r + math.sqrt(scene.sigma_r2) * rng.standard_normal((M, 2))
    if not with_gamma:
        return r
    return np.concatenate([r, rng.exponential(scene.gamma0, size=(M, 1))], axis=1)


def gen_localization(scene: SensingScene, theta, x, L: int, stream) -> np.ndarray:
    """Complex measurements Y of shape (M, L, K, N) for each theta row."""
    rng = _as_generator(stream)
    theta = np.atleast_2d(theta)
    M = theta.shape[0]
    out = _complex_noise(rng, (M, L, scene.K, scene.N), scene.noise_power)
    for m in range(M):
        out[m] += measurement_mean(scene, theta[m], x)
    return out


def schur_bound(J, keep=(0, 1)) -> float:
    """Tr of the inverse Schur complement of J on the ``keep`` block."""
    J = symmetrize(J)
    keep = list(keep)
    rest = [i for i in range(J.shape[0]) if i not in keep]
    A = J[np.ix_(keep, keep)]
    if rest:
        Bm = J[np.ix_(keep, rest)]
        C = J[np.ix_(rest, rest)]
        A = A - Bm @ inv_spd(C) @ Bm.T
    return float(np.trace(inv_spd(A)))


def analytic_bcrb_localization(scene: SensingScene, x, M_mc: int = 6000, stream=None,
                               case: str | None = None, theta=None) -> dict:
    """Analytic BCRB and CRB on r, with the data FIM averaged over the prior.

    ``case`` is 'fixed' (theta = r) or 'exp' (theta = (r, gamma), gamma
    treated as a nuisance through the Schur complement).
    """
    case = scene.rcs if case is None else case
    if M_mc < 100:
        raise ValueError("need at least 100 prior draws for the data FIM average")
    with_gamma = case == "exp"
    if theta is None:
        theta = sample_theta(scene, M_mc, stream if stream is not None else RngStream(0), with_gamma)
    Js = np.stack([analytic_fim(scene, t, x) for t in theta])
    Jd = symmetrize(Js.mean(axis=0))
    Jd_se = Js.std(axis=0, ddof=1) / math.sqrt(Js.shape[0])
    d = 3 if with_gamma else 2
    Jp = np.eye(d) / scene.sigma_r2
    if with_gamma:
        Jp[2, 2] = 1.0 / scene.gamma0 ** 2
    Jb = Jp + Jd
    return {
        "bcrb": schur_bound(Jb),
        "crb": schur_bound(Jd),
        "J_b": Jb,
        "J_d": Jd,
        "J_d_stderr": Jd_se,
        "J_p": Jp,
        "theta": theta,
    }
