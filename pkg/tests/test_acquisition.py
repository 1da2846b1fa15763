from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from emubo.acqopt import AcqOptConfig, batch_select, optimize_acq, pool_argmax
from emubo.acquisition import (DEFAULT_COST_ALPHA, GIBBON, MES, UCB, AcqState, AcquisitionError,
                               AcquisitionSpec, LogEI, LogNEI, PosteriorMean, cost_scaled,
                               expected_improvement, gumbel_sample_max, log_h, log_softplus,
                               make_acquisition, thompson_select, ucb_beta_schedule)
from emubo.gp import Hyper, KernelSpec, build_gp
from emubo.policy import select
from emubo.spaces import CONTINUOUS, ParamSpec, SearchSpace, unit_box


def _model(seed, n=6, d=2, noise=1e-3, ls=0.3):
    rng = np.random.default_rng(seed)
    X, y = rng.random((n, d)), rng.standard_normal(n)
    h = Hyper(np.full(d, ls), np.zeros(0), np.ones(1), noise, 0.0)
    return build_gp(X, y, KernelSpec.for_dim(d), h), rng


def _fixed_gp(mu_target, sd_target):
    """A 1-d GP whose posterior at x=0.5 has the given mean and sd (prior only)."""
    h = Hyper(np.ones(1), np.zeros(0), np.array([sd_target ** 2]), 0.0, mu_target)
    return build_gp(np.zeros((0, 1)), np.zeros(0), KernelSpec.for_dim(1), h)


def test_ucb_formula():
    gp = _fixed_gp(0.2, 0.05)
    assert UCB(gp, 4.0)(np.array([[0.5]]))[0] == pytest.approx(0.3, abs=1e-12)


def test_log_ei_degenerate_sigma():
    gp = _fixed_gp(0.6, 0.0)
    assert LogEI(gp, 0.5)(np.array([[0.5]]))[0] == pytest.approx(math.log(0.1), abs=1e-9)


def test_log_h_matches_direct_where_representable():
    z = np.linspace(-30, 5, 400)
    direct = np.log(stats.norm.pdf(z) + z * stats.norm.cdf(z))
    ok = np.isfinite(direct) & (direct > -600)
    np.testing.assert_allclose(log_h(z)[ok], direct[ok], rtol=1e-6, atol=1e-9)
    assert np.all(np.isfinite(log_h(np.array([-1e3, -1e9, -1e200]))))


def test_log_softplus_tracks_log_max():
    x = np.array([1e-2, 0.5, 3.0])
    np.testing.assert_allclose(log_softplus(x), np.log(x), atol=1e-4)
    assert np.all(np.isfinite(log_softplus(np.array([-1.0, -1e6, 0.0]))))


@pytest.mark.parametrize("seed", range(5))
def test_log_ei_argmax_equals_ei_argmax(seed):
    gp, rng = _model(seed)
    best = float(gp.mean_var(gp.X)[0].max())
    cand = rng.random((20000, 2))
    mu, var = gp.mean_var(cand)
    pool = cand[expected_improvement(mu, np.sqrt(var), best) > 0][:1000]
    assert len(pool) == 1000
    mu, var = gp.mean_var(pool)
    ei = expected_improvement(mu, np.sqrt(var), best)
    assert int(np.argmax(LogEI(gp, best)(pool))) == int(np.argmax(ei))


def test_ucb_beta_zero_is_mean_argmax():
    gp, rng = _model(1)
    pool = rng.random((500, 2))
    assert np.argmax(UCB(gp, 0.0)(pool)) == np.argmax(PosteriorMean(gp)(pool))


@pytest.mark.parametrize("seed", range(20))
def test_log_nei_matches_analytic_ei_without_noise(seed):
    gp, rng = _model(seed, n=int(np.random.default_rng(seed).integers(1, 6)), noise=1e-9)
    Xq = rng.random((200, 2))
    ei = LogEI(gp, float(gp.y.max()))(Xq)
    keep = ei > -1000  # beyond this both sides only differ by float rounding of ~z**2/2
    nei = LogNEI(gp, 128, seed=seed)(Xq[keep])
    assert keep.sum() > 100
    assert np.max(np.abs(nei - ei[keep])) < 0.05


def test_log_nei_finite_everywhere():
    gp, rng = _model(3)
    v = LogNEI(gp, 64, seed=0)(np.vstack([rng.random((50, 2)), gp.X]))
    assert np.all(np.isfinite(v))


def test_mes_nonnegative_with_max_sample():
    gp, rng = _model(4)
    cands = rng.random((3, 2))
    fmax = np.array([gp.mean_var(cands)[0].max()])
    assert np.all(MES(gp, fmax)(cands) >= 0)


def test_mes_matches_scalar_entropy_formula():
    gp, rng = _model(5)
    x = rng.random((4, 2))
    fmax = np.array([1.5, 2.0])
    mu, var = gp.mean_var(x)
    sd = np.sqrt(var)
    vals = []
    for f in fmax:
        g = (f - mu) / sd
        vals.append(g * stats.norm.pdf(g) / (2 * stats.norm.cdf(g)) - np.log(stats.norm.cdf(g)))
    np.testing.assert_allclose(MES(gp, fmax)(x), np.mean(vals, axis=0), rtol=1e-9, atol=1e-12)


def test_gibbon_pending_lowers_value_near_pending():
    gp, rng = _model(6)
    fmax = np.array([2.0, 2.5])
    x = np.array([[0.3, 0.3]])
    plain = GIBBON(gp, fmax)(x)[0]
    near = GIBBON(gp, fmax, pending=np.array([[0.301, 0.3]]))(x)[0]
    far = GIBBON(gp, fmax, pending=np.array([[0.99, 0.01]]))(x)[0]
    assert near < far <= plain + 1e-12


def test_cost_scaling_examples():
    gp, rng = _model(7)
    state = AcqState(X_obs=gp.X)
    X = rng.random((10, 2))
    fid = lambda Z: np.atleast_2d(Z)[:, 1]
    base = LogNEI(gp, 128, seed=0)
    np.testing.assert_allclose(cost_scaled(base, "log_nei", fid, 0.0)(X), base(X))
    X1 = X.copy()
    X1[:, 1] = 1.0
    np.testing.assert_allclose(cost_scaled(base, "log_nei", fid, 0.05)(X1), base(X1) - math.log(1.05))
    X0 = X.copy()
    X0[:, 1] = 0.0
    u = UCB(gp, 2.0)
    np.testing.assert_allclose(cost_scaled(u, "ucb", fid)(X0), u(X0))
    np.testing.assert_allclose(cost_scaled(u, "ucb", fid)(X1), u(X1) / 1.005)
    with pytest.raises(AcquisitionError):
        cost_scaled(u, "ucb", None)
    del state


def test_default_cost_alphas():
    assert DEFAULT_COST_ALPHA == {"ucb": 0.005, "log_ei": 0.01, "log_nei": 0.05, "mes": 0.05,
                                  "gibbon": 0.05}


@pytest.mark.parametrize("kind", ["log_ei", "log_nei", "ucb", "mes", "gibbon"])
def test_cost_scaled_alpha_zero_argmax_invariant(kind):
    gp, rng = _model(8)
    pool = rng.random((400, 2))
    state = AcqState(X_obs=gp.X, fmax_samples=np.array([2.0, 2.4, 3.0]))
    spec = AcquisitionSpec(kind, beta=2.0)
    plain = make_acquisition(spec, gp, state, seed=1)
    scaled = make_acquisition(AcquisitionSpec(kind, beta=2.0, cost_alpha=0.0), gp, state, seed=1,
                              fid_of=lambda Z: np.atleast_2d(Z)[:, 0])
    assert pool_argmax(plain, pool)[0] == pool_argmax(scaled, pool)[0]


def test_beta_schedule():
    assert ucb_beta_schedule(10, 7, 0.1) == pytest.approx(2 * math.log(7 * 100 * math.pi ** 2 / 0.6))
    assert ucb_beta_schedule(10, 7, 0.1) == pytest.approx(18.7, abs=0.05)
    assert ucb_beta_schedule(1, 1, math.pi ** 2 / 6) == 0.01
    assert ucb_beta_schedule(20, 3, 0.1) > ucb_beta_schedule(10, 3, 0.1)
    with pytest.raises(AcquisitionError):
        ucb_beta_schedule(0, 1, 0.1)


def test_spec_validation():
    with pytest.raises(AcquisitionError):
        AcquisitionSpec("kg")
    with pytest.raises(AcquisitionError):
        AcquisitionSpec("log_nei", mc_samples=0)
    with pytest.raises(AcquisitionError):
        AcquisitionSpec("ucb")
    with pytest.raises(AcquisitionError):
        AcquisitionSpec("log_ei", cost_alpha=-1.0)
    assert AcquisitionSpec().mc_samples == 128


def test_thompson_picks_interpolated_high_point():
    h = Hyper(np.full(1, 0.02), np.zeros(0), np.ones(1), 1e-10, 0.0)
    gp = build_gp(np.array([[0.5]]), np.array([4.0]), KernelSpec.for_dim(1), h)
    cands = np.array([[0.1], [0.3], [0.5], [0.7], [0.9]])
    rng = np.random.default_rng(0)
    hits = sum(thompson_select(gp, cands, rng)[0] == 0.5 for _ in range(100))
    assert hits > 90


def test_thompson_prior_symmetric_is_uniform():
    h = Hyper(np.full(1, 0.01), np.zeros(0), np.ones(1), 0.0, 0.0)
    gp = build_gp(np.zeros((0, 1)), np.zeros(0), KernelSpec.for_dim(1), h)
    cands = np.array([[0.1], [0.4], [0.7], [0.95]])
    rng = np.random.default_rng(1)
    n = 10_000
    picks = [float(thompson_select(gp, cands, rng)[0]) for _ in range(n)]
    counts = np.array([picks.count(float(c)) for c in cands[:, 0]])
    sd = math.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) < 3 * sd)
    assert thompson_select(gp, cands[:1], rng)[0] == 0.1


def test_gumbel_max_matches_monte_carlo():
    h = Hyper(np.full(1, 1e-4), np.zeros(0), np.ones(1), 0.0, 0.0)
    gp = build_gp(np.zeros((0, 1)), np.zeros(0), KernelSpec.for_dim(1), h)
    cands = np.linspace(0, 1, 1000)[:, None]
    rng = np.random.default_rng(2)
    mc = np.mean([rng.standard_normal(1000).max() for _ in range(10_000)])
    g = gumbel_sample_max(gp, cands, 10_000, rng=3)
    assert abs(g.mean() - mc) < 0.1 * mc
    np.testing.assert_array_equal(gumbel_sample_max(gp, cands, 5, rng=4), gumbel_sample_max(gp, cands, 5, rng=4))


def test_gumbel_degenerate_returns_max_mean():
    gp = _fixed_gp(0.7, 0.0)
    np.testing.assert_allclose(gumbel_sample_max(gp, np.array([[0.1], [0.9]]), 6, rng=0), 0.7)


def test_optimize_acq_known_optimum_box():
    x0 = np.array([0.3, 0.8, 0.55])
    x, v = optimize_acq(lambda X: -((np.atleast_2d(X) - x0) ** 2).sum(1), unit_box(3), rng=0)
    assert np.max(np.abs(x - x0)) < 1e-3


def test_optimize_acq_simplex_sums_to_one():
    space = SearchSpace(tuple(ParamSpec(f"w{i}", CONTINUOUS, 0.0, 1.0) for i in range(4))
                        + (ParamSpec("lr", CONTINUOUS, 0.0, 1.0),), simplex_groups=((0, 1, 2, 3),))
    target = np.array([0.1, 0.6, 0.2, 0.1])
    x, _ = optimize_acq(lambda X: -((np.atleast_2d(X)[:, :4] - target) ** 2).sum(1), space, rng=0)
    assert abs(x[:4].sum() - 1.0) < 1e-9
    assert np.max(np.abs(x[:4] - target)) < 0.02


def test_pool_argmax_full_scan():
    rng = np.random.default_rng(0)
    pool = rng.random((300, 3))
    f = lambda X: np.sin(7 * X[:, 0]) + X[:, 1] * X[:, 2]
    i, v = optimize_acq(f, unit_box(3), AcqOptConfig(candidate_pool=pool))
    assert np.array_equal(i, pool[np.argmax(f(pool))])


def test_batch_q1_matches_single_optimize():
    gp, rng = _model(9)
    pool = rng.random((200, 2))
    acq = UCB(gp, 2.0)
    res = batch_select(lambda g, p: UCB(g, 2.0), gp, 1, None, AcqOptConfig(candidate_pool=pool))
    assert res.indices[0] == pool_argmax(acq, pool)[0]


def test_batch_tabular_distinct_and_negative_control():
    gp, rng = _model(10)
    pool = rng.random((300, 2))
    cfg = AcqOptConfig(candidate_pool=pool)
    make = lambda g, p: LogEI(g, float(gp.y.max()))
    res = batch_select(make, gp, 5, None, cfg)
    assert len(set(res.indices)) == 5
    ctrl = batch_select(make, gp, 5, None, cfg, fantasize=False, distinct=False)
    assert len(set(ctrl.indices)) == 1


def test_batch_fantasy_collapses_variance_at_first_point():
    h = Hyper(np.full(1, 0.2), np.zeros(0), np.ones(1), 1e-6, 0.0)
    gp = build_gp(np.zeros((0, 1)), np.zeros(0), KernelSpec.for_dim(1), h)
    res = batch_select(lambda g, p: UCB(g, 4.0), gp, 2, unit_box(1), AcqOptConfig(), rng=0)
    from emubo.gp import condition_on_fantasy
    x1 = res.points[0]
    g1 = condition_on_fantasy(gp, x1, gp.mean_var(x1[None])[0])
    assert g1.mean_var(x1[None])[1][0] < 1e-4
    assert not np.allclose(res.points[0], res.points[1])


@pytest.mark.parametrize("kind", ["ts", "log_ei", "log_nei", "ucb", "mes", "gibbon"])
def test_select_every_kind_on_pool(kind):
    gp, rng = _model(11)
    pool = rng.random((150, 2))
    spec = AcquisitionSpec(kind, beta=2.0)
    res = select(spec, gp, 3, rng, pool=pool, state=AcqState(X_obs=gp.X))
    assert len(set(res.indices)) == 3


def test_select_continuous_space_valid_points():
    gp, rng = _model(12)
    res = select(AcquisitionSpec("log_nei"), gp, 2, rng, space=unit_box(2),
                 state=AcqState(X_obs=gp.X), opt=AcqOptConfig(raw_samples=128, cont_iters=10))
    for x in res.points:
        assert np.all((x >= 0) & (x <= 1))
