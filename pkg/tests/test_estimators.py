import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scorebench.distributions import ExponentialDist, GaussianDist, two_mode_mixture
from scorebench.estimators import (
    FimEstimate,
    IntegrandError,
    MetricReport,
    ScoreDenoiser,
    StmpConfig,
    StmpDiverged,
    bcrb,
    bfim_posterior,
    config_hash,
    data_fim_fsm,
    data_fim_known,
    default_mi_grid,
    fim_from_scores,
    hard_consistency,
    kld_score,
    lmmse_solve,
    mi_score,
    prior_fim_est,
    soft_consistency,
    stmp_solve,
    tweedie_denoise,
)
from scorebench.identities import Mixture1D
from scorebench.isac import SensingScene, analytic_bcrb_localization, analytic_fim, gen_localization, \
    measurement_score, random_probe, sample_theta
from scorebench.losses import SigmaSchedule
from scorebench.numerics import RngStream


class LinearGaussian:
    """theta ~ N(0, I), y = A theta + N(0, s2 I), with every score in closed form."""

    def __init__(self, A, s2):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.s2 = s2
        self.d = self.A.shape[1]
        self.P = np.eye(self.d) + self.A.T @ self.A / s2

    def sample(self, stream, M, L):
        g = stream.generator()
        th = g.standard_normal((M, self.d))
        y = th[:, None, :] @ self.A.T + math.sqrt(self.s2) * g.standard_normal((M, L, self.A.shape[0]))
        return th, y

    def posterior_score(self, th, cond):
        mu = np.linalg.solve(self.P, (cond @ self.A / self.s2).T).T
        return -(th - mu) @ self.P.T

    def prior_score(self, th):
        return -th

    def measurement_score(self, th, ys):
        return (ys - th @ self.A.T) @ self.A / self.s2

    def measurement_score_pairs(self, th, cond):
        return (cond - th @ self.A.T) @ self.A / self.s2


def _model():
    A = np.array([[1.0, 0.4], [-0.3, 0.8], [0.5, 0.2]])
    return LinearGaussian(A, 0.5)


# ----- FimEstimate and bcrb ----------------------------------------------------

def test_fim_estimate_psd_projection():
    J = np.diag([1.0, -1e-12])
    est = FimEstimate(J, "analytic", 1)
    assert np.all(np.linalg.eigvalsh(est.matrix) >= 0)
    with pytest.raises(ValueError):
        FimEstimate(np.diag([1.0, -1e-3]), "analytic", 1)
    est = FimEstimate(np.array([[2.0, 1.0], [0.0, 2.0]]), "analytic", 1)
    assert np.allclose(est.matrix, est.matrix.T)


def test_fim_from_scores_needs_two():
    with pytest.raises(ValueError):
        fim_from_scores(np.ones((1, 1, 2)), "x")


def test_bcrb_trivial_and_schur():
    assert bcrb(np.diag([4.0, 1.0])) == pytest.approx(1.25)
    assert bcrb(np.diag([4.0, 1.0, 9.0]), keep=(0, 1)) == pytest.approx(1.25)
    with pytest.raises(np.linalg.LinAlgError):
        bcrb(np.diag([1.0, 0.0]))


def test_bcrb_schur_matches_full_inverse_on_localization():
    scene = SensingScene(rcs="exp")
    x = random_probe(scene.N, scene.pt, RngStream(3))
    Jb = analytic_bcrb_localization(scene, x, 500, RngStream(5))["J_b"]
    assert bcrb(Jb, keep=(0, 1)) == pytest.approx(np.trace(np.linalg.inv(Jb)[:2, :2]), rel=1e-10)


# ----- FIM routes -----------------------------------------------------------------

def test_posterior_route_conjugate():
    m = LinearGaussian(np.eye(2), 0.5)
    th, y = m.sample(RngStream(1), 4000, 2)
    est = bfim_posterior(m.posterior_score, th, y)
    expect = (1 + 1 / 0.5) * np.eye(2)
    assert np.all(np.abs(est.matrix - expect) < 3 * est.stderr + 1e-12)
    assert est.route == "posterior" and est.M == 4000 and est.L == 2


def test_posterior_route_independent_data_is_prior():
    m = LinearGaussian(np.zeros((2, 2)), 1.0)
    th, y = m.sample(RngStream(2), 5000, 1)
    est = bfim_posterior(m.posterior_score, th, y)
    assert np.all(np.abs(est.matrix - np.eye(2)) < 3 * est.stderr)


def test_prior_fim_gaussian_and_exponential():
    g = GaussianDist([20.0, 20.0], 5.0)
    th = g.sample(RngStream(3), 20000)
    est = prior_fim_est(g.score, th)
    assert np.all(np.abs(est.matrix - 0.2 * np.eye(2)) < 3 * est.stderr + 1e-15)
    e = ExponentialDist(1.0)
    gam = e.sample(RngStream(4), 1000)
    est = prior_fim_est(e.score, gam)
    # the Exp score is constant, so the estimate is exact
    assert est.matrix[0, 0] == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(ValueError):
        prior_fim_est(g.score, th[:1])


def test_data_fim_known_gaussian_1d():
    m = LinearGaussian([[1.0]], 0.25)
    th, y = m.sample(RngStream(5), 3000, 4)
    est = data_fim_known(m.measurement_score, th, y)
    assert abs(est.matrix[0, 0] - 4.0) < 3 * est.stderr[0, 0]


def test_data_fim_known_localization_matches_analytic():
    scene = SensingScene(N=16, K=4, pt_dbm=30.0)
    x = random_probe(scene.N, scene.pt, RngStream(3))
    th = sample_theta(scene, 400, RngStream(6), with_gamma=False)
    Y = gen_localization(scene, th, x, 5, RngStream(7))
    est = data_fim_known(lambda t, ys: measurement_score(scene, t, x, ys), th, Y)
    Jd = np.mean([analytic_fim(scene, t, x) for t in th], axis=0)
    # both use the same theta draws, so only the measurement noise differs
    assert np.all(np.abs(est.matrix - Jd) < 3 * est.stderr)


def test_data_fim_linear_in_k():
    scene = SensingScene(N=16, K=2, pt_dbm=30.0)
    x = random_probe(scene.N, scene.pt, RngStream(3))
    th = sample_theta(scene, 300, RngStream(6), with_gamma=False)
    vals = []
    for K in (2, 8):
        s = scene.with_(K=K)
        Y = gen_localization(s, th, x, 8, RngStream(8))
        vals.append(data_fim_known(lambda t, ys: measurement_score(s, t, x, ys), th, Y))
    ratio = vals[1].matrix / vals[0].matrix
    se = np.abs(ratio) * np.sqrt((vals[1].stderr / vals[1].matrix) ** 2 + (vals[0].stderr / vals[0].matrix) ** 2)
    assert np.all(np.abs(ratio - 4.0) < 3 * se)


def test_route_consistency_conjugate():
    m = _model()
    th, y = m.sample(RngStream(9), 5000, 1)
    post = bfim_posterior(m.posterior_score, th, y)
    prior = prior_fim_est(m.prior_score, th)
    data = data_fim_known(m.measurement_score, th, y)
    both = prior + data
    assert both.route == "prior+known-likelihood"
    se = np.sqrt(post.stderr ** 2 + both.stderr ** 2)
    assert np.all(np.abs(post.matrix - both.matrix) < 3 * se)
    assert np.allclose(post.matrix, m.P, rtol=0.1)


def test_fsm_route_with_exact_measurement_score():
    m = _model()
    th, y = m.sample(RngStream(10), 5000, 1)
    known = data_fim_known(m.measurement_score, th, y)
    fsm = data_fim_fsm(m.measurement_score_pairs, th, y)
    assert np.allclose(fsm.matrix, known.matrix, rtol=1e-12)
    zero = LinearGaussian(np.zeros((3, 2)), 1.0)
    th, y = zero.sample(RngStream(11), 2000, 1)
    est = data_fim_fsm(zero.measurement_score_pairs, th, y)
    assert np.all(np.abs(est.matrix) <= 3 * est.stderr + 1e-15)


def test_paired_difference_stderr_smaller():
    m = _model()
    th, y = m.sample(RngStream(12), 3000, 1)
    post = bfim_posterior(m.posterior_score, th, y)
    both = prior_fim_est(m.prior_score, th) + data_fim_known(m.measurement_score, th, y)
    paired = post.difference_stderr(both)
    unpaired = np.sqrt(post.stderr ** 2 + both.stderr ** 2)
    assert np.all(paired <= unpaired * 1.5)


def test_bcrb_stderr_tracks_replicates():
    m = _model()
    vals, ses = [], []
    for r in range(30):
        th, y = m.sample(RngStream(100, path=(r,)), 400, 1)
        est = bfim_posterior(m.posterior_score, th, y)
        vals.append(est.bcrb())
        ses.append(est.bcrb_stderr())
    spread = np.std(vals, ddof=1)
    assert 0.6 < np.mean(ses) / spread < 1.6
    assert np.mean(vals) == pytest.approx(np.trace(np.linalg.inv(m.P)), rel=0.05)


# ----- Tweedie and consistency ---------------------------------------------------

def test_tweedie_gaussian_shrinkage():
    xt = np.array([[1.0, -2.0], [0.5, 3.0]])
    for s in (0.1, 1.0, 3.0):
        out = tweedie_denoise(lambda x, sg: -x / (1 + sg ** 2), xt, s)
        assert np.allclose(out, xt / (1 + s ** 2), rtol=1e-14)
    assert np.allclose(tweedie_denoise(lambda x, sg: -x / (1 + sg ** 2), xt, 1e-8), xt, rtol=1e-12)
    with pytest.raises(ValueError):
        tweedie_denoise(lambda x, sg: x, xt, 0.0)


@pytest.mark.parametrize("sigma", [0.2, 0.7, 2.0])
def test_tweedie_mixture_matches_quadrature(sigma):
    mix = two_mode_mixture(3.0, 0.6, 0.4)
    q = Mixture1D.from_mixture(mix)
    ys = np.linspace(-4, 4, 17)
    out = tweedie_denoise(lambda x, s: mix.smoothed_score(x, s), ys[:, None], sigma)[:, 0]
    ref = np.array([q.posterior_mean(v, sigma ** 2) for v in ys])
    assert np.max(np.abs(out - ref)) < 1e-3


def test_hard_and_soft_consistency_identity():
    rng = np.random.default_rng(0)
    x0, y = rng.standard_normal(5), rng.standard_normal(5)
    assert np.allclose(hard_consistency(x0, np.eye(5), y), y, atol=1e-12)
    g = 0.7
    assert np.allclose(soft_consistency(x0, np.eye(5), y, g), (g * x0 + y) / (g + 1), atol=1e-12)
    assert np.allclose(soft_consistency(x0, np.eye(5), y, 1e12), x0, atol=1e-9)
    with pytest.raises(ValueError):
        soft_consistency(x0, np.eye(5), y, 0.0)
    with pytest.raises(ValueError):
        soft_consistency(x0, np.eye(4), y[:4], 1.0)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_hard_consistency_fits_least_squares(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 6))
    y = rng.standard_normal(3)
    x0 = rng.standard_normal(6)
    xh = hard_consistency(x0, A, y)
    assert np.linalg.norm(A @ xh - y) < 1e-10 * (1 + np.linalg.norm(y))
    # the projection moves x0 only within the row space of A
    null = np.linalg.svd(A)[2][3:]
    assert np.allclose(null @ (xh - x0), 0, atol=1e-10)


# ----- STMP --------------------------------------------------------------------------

def _gauss_denoiser():
    return ScoreDenoiser(lambda r, s: -r / (1 + np.asarray(s) ** 2),
                         hessian_trace=lambda r, s: -r.size / (1 + s ** 2))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stmp_gaussian_fixed_point(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((16, 32)) / 4
    x = rng.standard_normal(32)
    s = 0.2
    y = A @ x + s * rng.standard_normal(16)
    res = stmp_solve(A, y, s, _gauss_denoiser())
    D = 32
    closed = np.linalg.solve(A.T @ A / s ** 2 + np.eye(D), A.T @ y / s ** 2)
    assert res.converged and res.iterations <= 10
    assert np.linalg.norm(res.mean - closed) < 1e-8 * np.linalg.norm(closed)
    vs = [t["v_B_post"] for t in res.trace[1:]]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(vs[:-1], vs[1:]))


def test_stmp_awgn_matches_tweedie():
    rng = np.random.default_rng(3)
    y = rng.standard_normal(8)
    s = 0.5
    res = stmp_solve(np.eye(8), y, s, _gauss_denoiser())
    assert np.allclose(res.mean, tweedie_denoise(lambda x, sg: -x / (1 + sg ** 2), y, s), rtol=1e-10)


def test_stmp_mixture_matches_quadrature():
    mix = two_mode_mixture(3.0, 0.6, 0.4)
    q = Mixture1D.from_mixture(mix)
    den = ScoreDenoiser(lambda r, s: mix.smoothed_score(r, float(np.atleast_1d(s)[0])),
                        hessian_trace=lambda r, s: mix.smoothed_hessian_trace(r[None], s))
    for yv in (-2.0, -0.3, 0.4, 1.5):
        for s in (0.3, 1.0):
            res = stmp_solve(np.eye(1), np.array([yv]), s, den, StmpConfig(prior_var=float(q.variance())))
            ref = q.posterior_mean(yv, s * s)
            assert res.mean[0] == pytest.approx(ref, rel=0.02, abs=1e-3)


def test_stmp_residual_rule_runs():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((24, 8))
    x = rng.standard_normal(8)
    y = A @ x + 0.1 * rng.standard_normal(24)
    den = ScoreDenoiser(lambda r, s: -r / (1 + np.asarray(s) ** 2), var_rule="residual")
    res = stmp_solve(A, y, 0.1, den)
    closed = np.linalg.solve(A.T @ A / 0.01 + np.eye(8), A.T @ y / 0.01)
    assert np.linalg.norm(res.mean - closed) < 0.05 * np.linalg.norm(closed)


def test_stmp_requires_damping_for_negative_precision():
    mix = two_mode_mixture(3.0, 0.6, 0.4)
    den = ScoreDenoiser(lambda r, s: mix.smoothed_score(r, float(np.atleast_1d(s)[0])),
                        hessian_trace=lambda r, s: mix.smoothed_hessian_trace(r[None], s))
    with pytest.raises(StmpDiverged):
        stmp_solve(np.eye(1), np.array([0.0]), 0.3, den, StmpConfig(damping=False, prior_var=2.5))
    out = stmp_solve(np.eye(1), np.array([0.0]), 0.3, den, StmpConfig(damping=True, prior_var=2.5))
    assert any(t["fallback"] for t in out.trace)


def test_stmp_bad_inputs():
    with pytest.raises(ValueError):
        stmp_solve(np.eye(2), np.zeros(2), 0.0, _gauss_denoiser())
    with pytest.raises(ValueError):
        ScoreDenoiser(lambda r, s: r, var_rule="magic")


def test_lmmse_solve_closed_form():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((4, 3))
    y = rng.standard_normal(4)
    m, v = lmmse_solve(A, y, 0.3, 0.0, 2.0)
    P = A.T @ A / 0.3 + np.eye(3) / 2.0
    assert np.allclose(m, np.linalg.solve(P, A.T @ y / 0.3))
    assert v == pytest.approx(np.trace(np.linalg.inv(P)) / 3)


def test_mmse_above_bcrb():
    # information ordering: Monte Carlo MSE of the MMSE estimator >= BCRB
    mix = two_mode_mixture(3.0, 0.6, 0.4)
    s = 0.8
    x = mix.sample(RngStream(13), 40000)
    y = x + s * RngStream(14).generator().standard_normal(x.shape)
    xhat = tweedie_denoise(lambda v, sg: mix.smoothed_score(v, sg), y, s)
    err = np.sum((xhat - x) ** 2, axis=1)
    mse, se = err.mean(), err.std(ddof=1) / math.sqrt(err.size)
    Jp = prior_fim_est(mix.score, x)
    Jd = FimEstimate(np.array([[1 / s ** 2]]), "analytic", 1)
    assert mse >= (Jp + Jd).bcrb() - 3 * se


# ----- MI / KLD ------------------------------------------------------------------

def _gauss_pair(snr, M, seed):
    g = RngStream(seed).generator()
    sw2 = 1.0 / snr
    x = g.standard_normal((M, 1))
    y = x + math.sqrt(sw2) * g.standard_normal((M, 1))
    return x, y, sw2


def _gauss_scores(sw2):
    pv = sw2 / (1 + sw2)

    def su(xt, s):
        return -xt / (1 + np.asarray(s)[:, None] ** 2)

    def sc(xt, s, cond):
        return -(xt - cond / (1 + sw2)) / (pv + np.asarray(s)[:, None] ** 2)

    return su, sc


@pytest.mark.parametrize("snr", [0.5, 1.0, 2.0, 5.0])
def test_mi_gaussian_analytic_scores(snr):
    x, y, sw2 = _gauss_pair(snr, 10000, 1)
    su, sc = _gauss_scores(sw2)
    est = mi_score(su, sc, x, y, default_mi_grid(1.0), RngStream(2))
    assert est.value == pytest.approx(0.5 * math.log1p(snr), rel=0.05)
    assert est.integrand.shape == (64,) and np.all(np.isfinite(est.integrand))


def test_mi_identical_scores_exactly_zero():
    x, y, sw2 = _gauss_pair(1.0, 500, 3)
    su, _ = _gauss_scores(sw2)
    est = mi_score(su, lambda xt, s, cond: su(xt, s), x, y, default_mi_grid(1.0), RngStream(4))
    assert est.value == 0.0 and np.all(est.per_sample == 0.0)


def test_mi_independent_pair():
    g = RngStream(5).generator()
    x = g.standard_normal((4000, 1))
    y = g.standard_normal((4000, 1))
    su, _ = _gauss_scores(1.0)
    # the conditional score of x given an independent y is the marginal one
    est = mi_score(su, lambda xt, s, cond: -xt / (1 + s[:, None] ** 2) + 0 * cond, x, y,
                   default_mi_grid(1.0), RngStream(6))
    assert abs(est.value) <= 3 * est.stderr + 1e-15


def test_mi_symmetry_swapped_roles():
    snr = 2.0
    x, y, sw2 = _gauss_pair(snr, 8000, 7)
    su, sc = _gauss_scores(sw2)
    fwd = mi_score(su, sc, x, y, default_mi_grid(1.0), RngStream(8))
    vy = 1 + sw2

    def uy(yt, s):
        return -yt / (vy + s[:, None] ** 2)

    def cy(yt, s, cond):
        return -(yt - cond) / (sw2 + s[:, None] ** 2)

    rev = mi_score(uy, cy, y, x, default_mi_grid(math.sqrt(vy)), RngStream(9))
    assert abs(fwd.value - rev.value) < 3 * math.hypot(fwd.stderr, rev.stderr)


def test_kld_gaussian_shift():
    mu = np.array([1.0, -0.5])
    p = lambda xt, s: -xt / (1 + s[:, None] ** 2)
    q = lambda xt, s: -(xt - mu) / (1 + s[:, None] ** 2)
    x = RngStream(10).generator().standard_normal((10000, 2))
    est = kld_score(p, q, x, default_mi_grid(1.0), RngStream(11))
    assert est.value == pytest.approx(0.5 * mu @ mu, rel=0.05)
    same = kld_score(p, p, x, default_mi_grid(1.0), RngStream(11))
    assert same.value == 0.0


@given(st.floats(0.05, 2.0), st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_kld_nonnegative(shift, seed):
    p = lambda xt, s: -xt / (1 + s[:, None] ** 2)
    q = lambda xt, s: -(xt - shift) / (1 + s[:, None] ** 2)
    x = RngStream(seed).generator().standard_normal((500, 1))
    est = kld_score(p, q, x, default_mi_grid(1.0), RngStream(seed + 1))
    assert est.value >= -3 * est.stderr


def test_integrand_errors():
    x = np.zeros((10, 1))
    p = lambda xt, s: -xt / (1 + s[:, None] ** 2)
    bad = lambda xt, s: np.full_like(xt, np.nan)
    with pytest.raises(IntegrandError):
        kld_score(p, bad, x, default_mi_grid(1.0), RngStream(0))
    # a grid that stops before the integrand decays trips the endpoint guard
    q = lambda xt, s: -(xt - 1.0) / (1 + s[:, None] ** 2)
    x = RngStream(1).generator().standard_normal((2000, 1))
    with pytest.raises(IntegrandError):
        kld_score(p, q, x, SigmaSchedule.log_grid(1e-3, 0.5, 32), RngStream(2))
    ok = kld_score(p, q, x, SigmaSchedule.log_grid(1e-3, 0.5, 32), RngStream(2), check_endpoints=False)
    assert ok.value < 0.5


# ----- reports --------------------------------------------------------------------

def test_metric_report_json_and_csv():
    v = 1 / 3
    rep = MetricReport("kld", v, 0.01, config_hash({"a": 1}), {"nodes": 64}, {"M": 100}, {"pt_dbm": 31.5})
    d = json.loads(rep.to_json())
    assert set(d) >= {"metric", "value", "stderr", "config-hash", "grid", "samples"}
    row = next(csv.DictReader(io.StringIO(",".join(rep.csv_row()) + "\n" + rep.csv_line())))
    assert float(row["value"]) == v
    assert row["config_hash"] == config_hash({"a": 1})


def test_config_hash_order_invariant():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
