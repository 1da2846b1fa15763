from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emubo.acqopt import pool_argmax
from emubo.acquisition import LogNEI
from emubo.gp import KernelSpec, fit_gp
from emubo.highdim import (HighDimError, SubspaceState, dbaxus_step, dim_schedule, dturbo_step,
                           dturbo_update, halvings, hesbo_project, initial_subspace,
                           initial_tr_state, knn, split_bins, tau_fail_for_stage, tr_observe,
                           tr_seed)

N_PO = 5014


def test_success_trace_doubles_and_caps():
    s = initial_tr_state(N_PO)
    assert s.k == 2507
    ks = []
    for _ in range(3):
        s = dturbo_update(s, True)
        ks.append(s.k)
    assert ks == [2507, 2507, 5014]
    for _ in range(3):
        s = dturbo_update(s, True)
    assert s.k == 5014


def test_failure_trace_halves():
    s = initial_tr_state(1000, k_init=100)
    for i in range(9):
        s = dturbo_update(s, False)
        assert s.k == 100
    s = dturbo_update(s, False)
    assert s.k == 50 and s.fail_streak == 0


def test_streak_reset_nontrigger():
    s = initial_tr_state(N_PO)
    for _ in range(2):
        s = dturbo_update(s, True)
    for _ in range(9):
        s = dturbo_update(s, False)
    assert s.k == 2507
    assert (s.succ_streak, s.fail_streak) == (0, 9)


def test_alternating_never_changes_k():
    s = initial_tr_state(N_PO)
    for i in range(200):
        s = dturbo_update(s, i % 2 == 0)
    assert s.k == 2507


def test_floor_at_k_min_and_contracted_flag():
    s = initial_tr_state(100, k_init=16)
    for _ in range(10):
        s = dturbo_update(s, False)
    assert s.k == 8 and s.contracted
    for _ in range(30):
        s = dturbo_update(s, False)
    assert s.k == 8 and not s.contracted


@settings(max_examples=200, deadline=None)
@given(st.integers(8, 6000), st.lists(st.booleans(), max_size=120))
def test_update_keeps_k_in_range(n, events):
    s = initial_tr_state(n)
    for e in events:
        s = dturbo_update(s, e)
        assert s.k_min <= s.k <= n


def test_observe_uses_strict_improvement():
    s = tr_seed(initial_tr_state(50), [3, 4], [0.5, 0.7])
    assert s.best_id == 4
    s2 = tr_observe(s, [9], [0.7])
    assert s2.best_id == 4 and s2.fail_streak == 1
    s3 = tr_observe(s, [9, 11], [0.2, 0.9])
    assert s3.best_id == 11 and s3.succ_streak == 1


def test_knn_examples():
    E = np.array([[0.0], [1.0], [3.0]])
    assert list(knn(E, 1, 3)) == [1, 0, 2]
    assert list(knn(E, 1, 2)[1:]) == [0]
    assert knn(E, 2, 1)[0] == 2
    assert list(knn(E, 1, 1, exclude=[1])) == [0]
    with pytest.raises(HighDimError):
        knn(E, 0, 3, exclude=[2])
    with pytest.raises(HighDimError):
        knn(E, 0, 0)


def test_knn_ties_lower_id_first():
    E = np.array([[0.0], [1.0], [-1.0], [1.0]])
    assert list(knn(E, 0, 4)) == [0, 1, 2, 3]


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    E = rng.standard_normal((200, 5))
    for c in range(0, 200, 37):
        d = np.linalg.norm(E - E[c], axis=1)
        assert list(knn(E, c, 15)) == list(np.argsort(d, kind="stable")[:15])


def test_halvings_and_tau_fail_stage():
    assert halvings(2507, 8) == 9
    assert tau_fail_for_stage(100, 2507, 8) == math.ceil(100 / 9)


def test_dim_schedule():
    assert dim_schedule(16, 768) == (16, 32, 64, 128, 256, 512, 768)
    assert dim_schedule(16, 128) == (16, 32, 64, 128)
    assert dim_schedule(16, 8) == (8,)


def test_hesbo_projection_examples():
    Z = np.random.default_rng(1).standard_normal((5, 4))
    np.testing.assert_array_equal(hesbo_project(np.arange(4), np.ones(4), Z, 4), Z)
    out = hesbo_project(np.array([0, 0, 1, 1]), np.array([1, -1, 1, 1]), Z, 2)
    np.testing.assert_allclose(out[:, 0], Z[:, 0] - Z[:, 1])
    with pytest.raises(HighDimError):
        hesbo_project(np.array([0, 1]), np.ones(2), Z, 2)


def test_hesbo_projection_linear():
    rng = np.random.default_rng(2)
    bins, signs = rng.integers(0, 6, 20), rng.choice([-1, 1], 20)
    A, B = rng.standard_normal((7, 20)), rng.standard_normal((7, 20))
    lhs = hesbo_project(bins, signs, 2.5 * A - 0.7 * B, 6)
    rhs = 2.5 * hesbo_project(bins, signs, A, 6) - 0.7 * hesbo_project(bins, signs, B, 6)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_projection_preserves_most_distance_orderings():
    rng = np.random.default_rng(3)
    Z = rng.standard_normal((60, 64)) * (1 + np.arange(64)) ** -0.5
    ss = initial_subspace(64, 100, rng, d_init=16)
    P = hesbo_project(ss.bins, ss.signs, Z, ss.target_dim)
    i, j, k = rng.integers(0, 60, (3, 4000))
    keep = (i != j) & (i != k) & (j != k)
    i, j, k = i[keep], j[keep], k[keep]
    raw = np.linalg.norm(Z[i] - Z[j], axis=1) < np.linalg.norm(Z[i] - Z[k], axis=1)
    proj = np.linalg.norm(P[i] - P[j], axis=1) < np.linalg.norm(P[i] - P[k], axis=1)
    assert (raw == proj).mean() > 0.6


def test_initial_subspace_and_split_cover_every_dim():
    rng = np.random.default_rng(4)
    ss = initial_subspace(128, 200, rng, d_init=16, n_total=N_PO)
    assert ss.target_dim == 16 and np.bincount(ss.bins).tolist() == [8] * 16
    assert ss.stage_budget == 200 // 4
    assert ss.tau_fail_stage == math.ceil(50 / 9)
    signs = ss.signs.copy()
    for want in (32, 64, 128):
        ss = split_bins(ss, rng, 2507, 8)
        assert ss.target_dim == want
        assert set(np.unique(ss.bins)) == set(range(want))
        np.testing.assert_array_equal(ss.signs, signs)
    assert ss.terminal
    with pytest.raises(HighDimError):
        split_bins(ss, rng, 2507, 8)
    with pytest.raises(HighDimError):
        SubspaceState(4, np.zeros(3, dtype=int), np.ones(3), 4, 10)


def _first_selector(E_obs, y_obs, E_reg, q, rng):
    return list(range(q))


def test_dturbo_step_region_and_forced_choice():
    E = np.arange(20, dtype=float)[:, None]
    s = tr_seed(initial_tr_state(20, k_init=8, k_min=2), [10], [1.0])
    ids, info = dturbo_step([10], [1.0], E, s, _first_selector, np.random.default_rng(0), q=3)
    assert 10 not in ids and all(abs(i - 10) <= 4 for i in ids) and not info.forced_expansion
    s1 = tr_seed(initial_tr_state(20, k_init=2, k_min=2), [0], [1.0])
    ids, info = dturbo_step([0], [1.0], E, s1, _first_selector, np.random.default_rng(0))
    assert ids == [1] and info.region_size == 1
    obs = list(range(0, 6))
    s2 = tr_seed(initial_tr_state(20, k_init=2, k_min=2), obs, [0, 0, 0, 5, 0, 0])
    ids, info = dturbo_step(obs, [0, 0, 0, 5, 0, 0], E, s2, _first_selector, np.random.default_rng(0))
    assert info.forced_expansion and ids[0] not in obs


def test_dbaxus_terminal_matches_dturbo():
    rng = np.random.default_rng(5)
    E = rng.standard_normal((100, 8))
    ts = tr_seed(initial_tr_state(100), [1, 2], [0.1, 0.4])
    ss = initial_subspace(8, 50, np.random.default_rng(0), d_init=8, n_total=100)
    assert ss.terminal
    sel = lambda Eo, yo, Er, q, r: [int(np.argmin(((Er - Eo[np.argmax(yo)]) ** 2).sum(1)))]
    a, *_ = dbaxus_step([1, 2], [0.1, 0.4], E, ss, ts, sel, np.random.default_rng(1))
    b, _ = dturbo_step([1, 2], [0.1, 0.4], E, ts, sel, np.random.default_rng(1))
    assert a == b


def test_dbaxus_advances_stage_on_contraction():
    rng = np.random.default_rng(6)
    E = rng.standard_normal((100, 32))
    ss = initial_subspace(32, 60, rng, d_init=8, n_total=100)
    ts = tr_seed(initial_tr_state(100, k_init=16, k_min=8, tau_fail=1), [0], [1.0])
    ts = dturbo_update(ts, False)
    assert ts.contracted
    ids, ss2, ts2, info = dbaxus_step([0], [1.0], E, ss, ts, _first_selector, rng)
    assert info.stage_advanced and ss2.target_dim == 16 and ts2.k == 16
    assert ts2.tau_fail == ss2.tau_fail_stage


def _gp_selector(E_obs, y_obs, E_reg, q, rng):
    gp = fit_gp(E_obs, y_obs, KernelSpec.for_dim(E_obs.shape[1]), rng=rng, restarts=1, maxiter=50)
    return [pool_argmax(LogNEI(gp, 64, seed=int(rng.integers(2 ** 31))), E_reg)[0]]


@pytest.mark.slow
def test_dturbo_finds_optimum_of_distance_landscape():
    hits = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        E = rng.standard_normal((400, 6))
        zstar = E[rng.integers(400)]
        f = lambda i: -float(np.linalg.norm(E[i] - zstar))
        ids = list(rng.choice(400, 10, replace=False))
        vals = [f(i) for i in ids]
        s = tr_seed(initial_tr_state(400), ids, vals)
        for _ in range(200):
            if max(vals) == 0.0:
                break
            pick, _ = dturbo_step(ids, vals, E, s, _gp_selector, rng)
            v = [f(i) for i in pick]
            s = tr_observe(s, pick, v)
            ids += pick
            vals += v
        hits += max(vals) == 0.0
    assert hits >= 4
