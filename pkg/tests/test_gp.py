from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emubo.gp import (GPError, Hyper, KernelSpec, NoiseSpec, build_gp, condition_on_fantasy,
                      default_hyper, fit_gp, kernel, mlhgp_fit, robust_cholesky, sample_posterior)


def _hyper(d, ls=0.4, scale=1.3, noise=0.05, mean=0.2, dh=0, ns=1):
    return Hyper(np.full(d, ls), np.full(dh, 0.7), np.full(ns, scale), noise, mean)


def _rbf_oracle(A, B, ls, s):
    d2 = ((A[:, None, :] - B[None, :, :]) ** 2 / ls ** 2).sum(-1)
    return s * np.exp(-0.5 * d2)


def _oracle_posterior(X, y, Xq, ls, s, noise, mean):
    K = _rbf_oracle(X, X, ls, s) + noise * np.eye(len(X))
    Ki = np.linalg.inv(K)
    Ks = _rbf_oracle(X, Xq, ls, s)
    mu = mean + Ks.T @ Ki @ (y - mean)
    S = _rbf_oracle(Xq, Xq, ls, s) - Ks.T @ Ki @ Ks
    return mu, S


def test_posterior_matches_explicit_inverse_two_points():
    X = np.array([[0.1, 0.2], [0.7, 0.4]])
    y = np.array([0.5, -0.3])
    Xq = np.array([[0.3, 0.3], [0.9, 0.9], [0.1, 0.2]])
    h = _hyper(2)
    gp = build_gp(X, y, KernelSpec.for_dim(2), h)
    mu, S = gp.posterior(Xq)
    mu_o, S_o = _oracle_posterior(X, y, Xq, h.ls_cont, 1.3, 0.05, 0.2)
    np.testing.assert_allclose(mu, mu_o, atol=1e-10)
    np.testing.assert_allclose(S, S_o, atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_posterior_matches_oracle_small_n(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(1, 9), rng.integers(1, 5)
    X, Xq = rng.random((n, d)), rng.random((5, d))
    y = rng.standard_normal(n)
    ls = rng.uniform(0.2, 1.5, d)
    h = Hyper(ls, np.zeros(0), np.array([0.8]), 0.01, 0.1)
    gp = build_gp(X, y, KernelSpec.for_dim(d), h)
    mu, S = gp.posterior(Xq)
    mu_o, S_o = _oracle_posterior(X, y, Xq, ls, 0.8, 0.01, 0.1)
    np.testing.assert_allclose(mu, mu_o, atol=1e-8)
    np.testing.assert_allclose(S, S_o, atol=1e-8)
    m2, v2 = gp.mean_var(Xq)
    np.testing.assert_allclose(m2, mu, atol=1e-12)
    np.testing.assert_allclose(v2, np.maximum(np.diag(S_o), 0), atol=1e-8)


def test_cholesky_reproduces_matrix():
    rng = np.random.default_rng(0)
    X = rng.random((8, 3))
    gp = build_gp(X, rng.standard_normal(8), KernelSpec.for_dim(3), _hyper(3))
    K = kernel(gp.kspec, gp.hyper, gp.X, gp.X) + np.diag(gp.noise_vec)
    assert np.linalg.norm(gp.L @ gp.L.T - K) <= 1e-8 * np.linalg.norm(K)


def test_log_marginal_likelihood_matches_direct_formula():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = int(rng.integers(1, 9))
        X, y = rng.random((n, 2)), rng.standard_normal(n)
        h = _hyper(2, mean=0.0)
        gp = build_gp(X, y, KernelSpec.for_dim(2), h)
        K = _rbf_oracle(X, X, h.ls_cont, 1.3) + 0.05 * np.eye(n)
        direct = (-0.5 * y @ np.linalg.inv(K) @ y - 0.5 * np.linalg.slogdet(K)[1]
                  - 0.5 * n * math.log(2 * math.pi))
        assert gp.log_marginal_likelihood() == pytest.approx(direct, abs=1e-8)


def test_prior_without_data():
    gp = build_gp(np.zeros((0, 2)), np.zeros(0), KernelSpec.for_dim(2), _hyper(2))
    mu, S = gp.posterior(np.random.default_rng(0).random((4, 2)))
    np.testing.assert_allclose(mu, 0.2)
    np.testing.assert_allclose(np.diag(S), 1.3)


def test_interpolates_without_noise():
    X = np.array([[0.2], [0.6]])
    gp = build_gp(X, np.array([1.0, -1.0]), KernelSpec.for_dim(1), _hyper(1, noise=0.0))
    mu, var = gp.mean_var(X)
    np.testing.assert_allclose(mu, [1.0, -1.0], atol=1e-5)
    assert np.all(var <= 1e-5)


def test_single_point_shrinkage():
    h = _hyper(1, scale=2.0, noise=0.5, mean=0.0)
    gp = build_gp(np.array([[0.3]]), np.array([1.5]), KernelSpec.for_dim(1), h)
    mu, _ = gp.mean_var(np.array([[0.3]]))
    assert mu[0] == pytest.approx(1.5 * 2.0 / 2.5, abs=1e-12)


def test_dimension_mismatch_raises():
    gp = build_gp(np.random.default_rng(0).random((3, 2)), np.zeros(3), KernelSpec.for_dim(2), _hyper(2))
    with pytest.raises(GPError):
        gp.posterior(np.zeros((1, 3)))


def test_robust_cholesky_escalates_and_fails():
    K = np.ones((3, 3))
    L, j = robust_cholesky(K)
    assert j > 0
    with pytest.raises(GPError):
        robust_cholesky(-np.eye(2))


def test_fit_duplicates_fixed_noise_between_observations():
    X = np.array([[0.5, 0.5], [0.5, 0.5], [0.1, 0.9]])
    y = np.array([0.0, 1.0, 0.3])
    gp = fit_gp(X, y, KernelSpec.for_dim(2), NoiseSpec("fixed", noise_std=0.0), rng=0)
    mu, _ = gp.mean_var(X[:1])
    assert 0.0 <= mu[0] <= 1.0


def test_fit_constant_mean_near_zero_on_random_data():
    rng = np.random.default_rng(1)
    means = []
    for _ in range(5):
        X = rng.random((30, 3))
        gp = fit_gp(X, rng.standard_normal(30), KernelSpec.for_dim(3), rng=rng)
        means.append(gp.hyper.mean)
    assert max(abs(m) for m in means) < 0.2


def test_fit_improves_log_posterior_over_default():
    rng = np.random.default_rng(2)
    X = rng.random((25, 2))
    y = np.sin(6 * X[:, 0]) + 0.01 * rng.standard_normal(25)
    gp = fit_gp(X, y, KernelSpec.for_dim(2), rng=0)
    ys = (y - y.mean()) / y.std()
    base = build_gp(X, ys, KernelSpec.for_dim(2), default_hyper(KernelSpec.for_dim(2)))
    assert gp.log_marginal_likelihood() > base.log_marginal_likelihood()
    assert gp.hyper.ls_cont[0] < gp.hyper.ls_cont[1]


def test_mixed_kernel_fit_runs():
    rng = np.random.default_rng(4)
    X = np.column_stack([rng.random(20), rng.integers(0, 3, 20)])
    y = X[:, 0] + (X[:, 1] == 1)
    gp = fit_gp(X, y, KernelSpec((0,), (1,)), rng=0)
    assert gp.hyper.scales.shape == (3,)
    mu, _ = gp.mean_var(X)
    assert np.corrcoef(mu, y)[0, 1] > 0.95


def test_hamming_depends_on_mismatch_count_only():
    rng = np.random.default_rng(5)
    A, B = rng.integers(0, 3, (6, 4)).astype(float), rng.integers(0, 3, (5, 4)).astype(float)
    h = Hyper(np.zeros(0), np.full(4, 0.8), np.ones(1), 0.0, 0.0)
    ks = KernelSpec((), (0, 1, 2, 3))
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(kernel(ks, h, A, B), kernel(ks, h, A[:, perm], B[:, perm]))


def test_known_constant_noise_equals_homoscedastic():
    rng = np.random.default_rng(6)
    X, y = rng.random((8, 2)), rng.standard_normal(8)
    ks = KernelSpec.for_dim(2)
    h = _hyper(2, noise=0.04)
    a = build_gp(X, y, ks, h)
    b = build_gp(X, y, ks, h, noise_vec=np.full(8, 0.04))
    Xq = rng.random((6, 2))
    for u, v in zip(a.posterior(Xq), b.posterior(Xq)):
        np.testing.assert_allclose(u, v, atol=1e-10)


def test_known_noise_fit_equals_fixed_fit():
    rng = np.random.default_rng(7)
    X, y = rng.random((12, 2)), rng.standard_normal(12)
    ks = KernelSpec.for_dim(2)
    a = fit_gp(X, y, ks, NoiseSpec("fixed", noise_std=0.1), rng=0)
    b = fit_gp(X, y, ks, NoiseSpec("known", sigma_fn=lambda Z: np.full(len(Z), 0.1)), rng=0)
    Xq = rng.random((5, 2))
    for u, v in zip(a.posterior(Xq), b.posterior(Xq)):
        np.testing.assert_allclose(u, v, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_variance_non_increasing_under_data_growth(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(0, 8)), int(rng.integers(1, 4))
    X = rng.random((n + 1, d))
    y = rng.standard_normal(n + 1)
    h = Hyper(rng.uniform(0.1, 2.0, d), np.zeros(0), np.array([rng.uniform(0.2, 3)]),
              float(rng.uniform(1e-4, 0.5)), 0.0)
    ks = KernelSpec.for_dim(d)
    small, big = build_gp(X[:n], y[:n], ks, h), build_gp(X, y, ks, h)
    Xq = rng.random((20, d))
    assert np.all(big.mean_var(Xq)[1] <= small.mean_var(Xq)[1] + 1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_posterior_invariant_to_row_permutation(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    X, y = rng.random((n, 2)), rng.standard_normal(n)
    p = rng.permutation(n)
    ks, h = KernelSpec.for_dim(2), _hyper(2)
    Xq = rng.random((4, 2))
    for u, v in zip(build_gp(X, y, ks, h).posterior(Xq), build_gp(X[p], y[p], ks, h).posterior(Xq)):
        np.testing.assert_allclose(u, v, atol=1e-8)


def test_sample_posterior_moments_and_determinism():
    rng = np.random.default_rng(8)
    X, y = rng.random((5, 1)), rng.standard_normal(5)
    gp = build_gp(X, y, KernelSpec.for_dim(1), _hyper(1))
    xq = np.array([[0.37]])
    s = sample_posterior(gp, xq, 100_000, rng=1)[:, 0]
    mu, var = gp.mean_var(xq)
    assert s.mean() == pytest.approx(mu[0], abs=0.02 * math.sqrt(var[0]) + 0.02 * abs(mu[0]))
    assert s.var() == pytest.approx(var[0], rel=0.02)
    np.testing.assert_array_equal(sample_posterior(gp, xq, 10, rng=3), sample_posterior(gp, xq, 10, rng=3))
    twin = sample_posterior(gp, np.array([[0.2], [0.2]]), 50, rng=4)
    np.testing.assert_allclose(twin[:, 0], twin[:, 1], atol=1e-6)


def _fantasy_setup():
    rng = np.random.default_rng(9)
    X, y = rng.random((6, 2)), rng.standard_normal(6)
    return build_gp(X, y, KernelSpec.for_dim(2), _hyper(2, noise=1e-4)), rng


def test_fantasy_at_posterior_mean_keeps_mean():
    gp, rng = _fantasy_setup()
    x = np.array([[0.4, 0.6]])
    g2 = condition_on_fantasy(gp, x, gp.mean_var(x)[0])
    Xq = rng.random((10, 2))
    np.testing.assert_allclose(g2.mean_var(Xq)[0], gp.mean_var(Xq)[0], atol=1e-8)
    assert g2.mean_var(x)[1][0] <= 2e-4
    assert gp.n == 6 and g2.n == 7


def test_fantasy_matches_rebuild():
    gp, rng = _fantasy_setup()
    x = np.array([[0.1, 0.1]])
    g2 = condition_on_fantasy(gp, x, 0.7)
    ref = build_gp(np.vstack([gp.X, x]), np.r_[gp.y, 0.7], gp.kspec, gp.hyper)
    Xq = rng.random((8, 2))
    for u, v in zip(g2.posterior(Xq), ref.posterior(Xq)):
        np.testing.assert_allclose(u, v, atol=1e-8)


def test_repeat_noiseless_fantasy_is_noop():
    gp, rng = _fantasy_setup()
    x = np.array([[0.8, 0.3]])
    g1 = condition_on_fantasy(gp, x, 0.5, noise=0.0)
    g2 = condition_on_fantasy(g1, x, 0.5, noise=0.0)
    Xq = rng.random((8, 2))
    np.testing.assert_allclose(g2.mean_var(Xq)[0], g1.mean_var(Xq)[0], atol=1e-8)
    np.testing.assert_allclose(g2.mean_var(Xq)[1], g1.mean_var(Xq)[1], atol=1e-8)


def test_mlhgp_flat_noise_on_homoscedastic_data():
    rng = np.random.default_rng(10)
    X = rng.random((60, 1))
    y = np.sin(4 * X[:, 0]) + 0.1 * rng.standard_normal(60)
    _, ngp = mlhgp_fit(X, y, 3, rng=0)
    m, _ = ngp.mean_var(np.linspace(0.05, 0.95, 30)[:, None])
    sig = np.sqrt(np.exp(m))
    assert sig.max() / sig.min() < 3


def test_mlhgp_orders_two_noise_regions():
    rng = np.random.default_rng(11)
    X = rng.random((80, 1))
    sd = np.where(X[:, 0] < 0.5, 0.001, 0.1)
    y = np.sin(3 * X[:, 0]) + sd * rng.standard_normal(80)
    gp, _ = mlhgp_fit(X, y, 5, rng=0)
    nv = gp.noise_var(np.array([[0.25], [0.75]]))
    assert nv[0] < nv[1]
    assert gp.info["mlhgp_em"] == 5


def test_mlhgp_zero_iterations_equals_plain_fit():
    rng = np.random.default_rng(12)
    X, y = rng.random((15, 2)), rng.standard_normal(15)
    a, ngp = mlhgp_fit(X, y, 0, rng=5)
    b = fit_gp(X, y, KernelSpec.for_dim(2), NoiseSpec("inferred"), 2, np.random.default_rng(5))
    assert ngp is None
    Xq = rng.random((4, 2))
    np.testing.assert_allclose(a.mean_var(Xq)[0], b.mean_var(Xq)[0], atol=1e-10)


def test_mlhgp_needs_ten_points():
    with pytest.raises(GPError):
        mlhgp_fit(np.zeros((5, 1)), np.zeros(5))


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec("weird")
    with pytest.raises(ValueError):
        NoiseSpec("fixed")
    with pytest.raises(ValueError):
        NoiseSpec("known")
