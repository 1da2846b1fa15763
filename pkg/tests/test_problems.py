from __future__ import annotations

import warnings

import numpy as np
import pytest

from emubo.problems import (NAMES, PO_CANDIDATES, Problem, ProblemError, estimate_optimum,
                            evaluate, fidelity_cost, make_problem, reference_point, step_cost,
                            token_fidelity_raw)
from emubo.spaces import is_valid, uniform_sample, unit_box

EXPECTED_DIMS = {"HPO": 7, "HPO-MF-Cont": 8, "HPO-MF-Disc": 8, "DMO": 6, "DMO-MO": 6,
                 "DMO-Het": 6, "PO-128": 128, "PO-256": 256, "PO-512": 512, "PO-768": 768}


def syn(name: str, **kw) -> Problem:
    return make_problem(name + "-synthetic", **kw)


def random_points(p: Problem, n: int, rng: np.random.Generator) -> np.ndarray:
    if p.is_tabular:
        return p.table.embeddings[rng.integers(0, p.table.n, n)]
    return uniform_sample(p.space, n, rng)


@pytest.mark.parametrize("name", NAMES)
def test_dims_and_objective_count(name):
    p = syn(name)
    assert p.space.dim == EXPECTED_DIMS[name]
    assert p.objective_dim == (3 if name == "DMO-MO" else 1)
    assert p.is_multi_fidelity == name.startswith("HPO-MF")


def test_dmo_has_two_simplex_groups():
    assert syn("DMO").space.simplex_groups == ((0, 1, 2), (3, 4, 5))


def test_mf_cont_fidelity_normalization():
    p = syn("HPO-MF-Cont")
    q = p.space.params[p.space.fidelity_index]
    assert (q.lower, q.upper) == (0.0, 1.0)
    assert token_fidelity_raw(0.0) == 1e5 and token_fidelity_raw(1.0) == 9.1e6
    assert p.meta["fidelity_raw_range"] == [1e5, 9.1e6]


def test_po_table_shape():
    p = syn("PO-256")
    assert p.table.embeddings.shape == (PO_CANDIDATES, 256)
    np.testing.assert_array_equal(p.table.embeddings, syn("PO-768").table.embeddings[:, :256])


@pytest.mark.parametrize("name", NAMES)
def test_zero_noise_is_deterministic_backend(name):
    p = syn(name, noise_std=0.0)
    rng = np.random.default_rng(0)
    for x in random_points(p, 3, rng):
        obs = evaluate(p, x, rng)
        if p.heteroscedastic:
            continue
        np.testing.assert_array_equal(obs.values, p.noiseless(x[None])[0])
        assert obs.values.shape == (p.objective_dim,) and obs.cost > 0


def test_dmo_het_noise_matches_model():
    p = syn("DMO-Het")
    rng = np.random.default_rng(1)
    for x in uniform_sample(p.space, 3, rng):
        vals = np.array([evaluate(p, x, rng).values[0] for _ in range(10_000)])
        sig = p.noise_sigma_at(x[None])[0, 0]
        assert abs(vals.std(ddof=1) / sig - 1) < 0.05
        assert abs(vals.mean() - p.noiseless(x[None])[0, 0]) < 5 * sig / 100


def test_homoscedastic_noise_level():
    p = syn("DMO", noise_std=0.01)
    rng = np.random.default_rng(2)
    x = uniform_sample(p.space, 1, rng)[0]
    vals = np.array([evaluate(p, x, rng).values[0] for _ in range(10_000)])
    assert abs(vals.std(ddof=1) / 0.01 - 1) < 0.05


@pytest.mark.parametrize("fid,cost", [(0.0, 0.1), (0.5, 0.55), (1.0, 1.0)])
def test_fidelity_cost_examples(fid, cost):
    p = syn("HPO-MF-Cont")
    x = uniform_sample(p.space, 1, np.random.default_rng(0))[0]
    x[7] = fid
    assert fidelity_cost(p, x) == pytest.approx(cost, abs=1e-12)
    assert evaluate(p, x, np.random.default_rng(0)).cost == pytest.approx(cost, abs=1e-12)


def test_discrete_fidelity_costs_and_errors():
    p = syn("HPO-MF-Disc")
    x = uniform_sample(p.space, 1, np.random.default_rng(0))[0]
    for code, cost in ((0, 0.1), (1, 1.0)):
        x[7] = code
        assert fidelity_cost(p, x) == pytest.approx(cost)
    h = syn("HPO")
    with pytest.raises(ProblemError):
        fidelity_cost(h, np.zeros(7))
    assert step_cost(h, np.zeros(7)) == 1.0


def test_mf_disc_at_high_fidelity_equals_hpo():
    disc, hpo = syn("HPO-MF-Disc"), syn("HPO")
    X = uniform_sample(hpo.space, 50, np.random.default_rng(3))
    X8 = np.column_stack([X, np.ones(50)])
    np.testing.assert_array_equal(disc.noiseless(X8), hpo.noiseless(X))
    X8[:, 7] = 0
    assert not np.allclose(disc.noiseless(X8), hpo.noiseless(X))


def test_dmo_objective_is_mean_of_outputs():
    dmo, mo = syn("DMO"), syn("DMO-MO")
    X = uniform_sample(dmo.space, 20, np.random.default_rng(4))
    np.testing.assert_allclose(dmo.noiseless(X)[:, 0], mo.noiseless(X).mean(axis=1), atol=1e-12)


def test_evaluate_reproducible():
    for name in ("HPO", "DMO-Het", "PO-128"):
        p = syn(name)
        x = random_points(p, 1, np.random.default_rng(5))[0]
        a = evaluate(p, x, np.random.default_rng(9)).values
        b = evaluate(p, x, np.random.default_rng(9)).values
        np.testing.assert_array_equal(a, b)


def test_evaluate_rejects_bad_points():
    p = syn("DMO")
    with pytest.raises(ProblemError):
        evaluate(p, np.array([0.5, 0.5, 0.5, 1.0, 0.0, 0.0]), np.random.default_rng(0))
    po = syn("PO-128")
    x = po.table.embeddings[0] + 1e-3
    with pytest.raises(ProblemError):
        evaluate(po, x, np.random.default_rng(0))


def test_unknown_problem_and_missing_assets(tmp_path, monkeypatch):
    with pytest.raises(ProblemError):
        make_problem("XYZ")
    monkeypatch.delenv("BOLT_ASSETS", raising=False)
    with pytest.raises(ProblemError):
        make_problem("HPO")
    with pytest.raises(ProblemError):
        make_problem("HPO", assets=tmp_path)


def test_incompatible_emulator_asset(tmp_path):
    from importlib import resources
    src = resources.files("emubo") / "data" / "synthetic"
    (tmp_path / "hpo").mkdir()
    # the mixture emulator has 6 inputs, not the 7 tuning knobs
    (tmp_path / "hpo" / "hpo_8b.json").write_text((src / "dmo" / "dmo.json").read_text())
    with pytest.raises(ProblemError):
        make_problem("HPO", assets=tmp_path)


def test_tabular_optimum_is_exact_max():
    p = syn("PO-768")
    est = estimate_optimum(p)
    assert est.f_star == p.table.scores.max()
    assert "exhaustive" in est.method


def _quadratic(c: np.ndarray) -> Problem:
    return Problem("quad", unit_box(len(c)),
                   lambda X: -((np.atleast_2d(X) - c) ** 2).sum(axis=1, keepdims=True), noise_std=0.0)


def test_optimum_of_quadratic():
    c = np.array([0.3141, 0.7182, 0.5772])
    est = estimate_optimum(_quadratic(c), levels=5)
    assert abs(est.f_star) < 1e-6
    np.testing.assert_allclose(est.argmax, c, atol=1e-3)


def test_denser_grid_never_lowers_optimum():
    for name in ("DMO", "HPO-MF-Cont"):
        p = syn(name)
        a = estimate_optimum(p, levels=5, ascent_steps=0, top=1)
        b = estimate_optimum(p, levels=9, ascent_steps=0, top=1)
        assert b.f_star >= a.f_star


@pytest.mark.slow
@pytest.mark.parametrize("name", ["HPO", "HPO-MF-Cont", "HPO-MF-Disc", "DMO", "DMO-Het"])
def test_optimum_dominates_random_evaluations(name):
    p = syn(name)
    est = estimate_optimum(p)
    X = p.at_target_fidelity(uniform_sample(p.space, 10_000, np.random.default_rng(6)))
    assert est.f_star >= p.noiseless(X).max()
    assert is_valid(p.space, est.argmax)


def test_reference_point_formula():
    p = syn("DMO-MO")
    from emubo.problems import _search_grid
    Y = p.noiseless(_search_grid(p, 17, 1 / 8))
    ref = reference_point(p, simplex_step=1 / 8)
    np.testing.assert_allclose(ref, Y.min(0) - 0.1 * (Y.max(0) - Y.min(0)))
    toy = Problem("toy", unit_box(1), lambda X: np.column_stack([0.2 + 0.5 * X[:, 0], 1 - X[:, 0]]),
                  objective_dim=2)
    np.testing.assert_allclose(reference_point(toy, levels=17), [0.15, -0.1], atol=1e-12)


def test_reference_point_degenerate_flagged():
    flat = Problem("flat", unit_box(2), lambda X: np.full((len(X), 2), 0.5), objective_dim=2)
    with pytest.warns(UserWarning, match="degenerate"):
        ref = reference_point(flat, levels=5)
    np.testing.assert_array_equal(ref, [0.5, 0.5])
    assert "degenerate-range" in estimate_optimum(flat, levels=5).flags


def test_finer_grid_reference_nonincreasing():
    p = syn("DMO-MO")
    coarse = reference_point(p, simplex_step=1 / 4)
    fine = reference_point(p, simplex_step=1 / 8)
    assert np.all(fine <= coarse)
    with pytest.raises(ProblemError):
        reference_point(syn("DMO"))


def test_mo_optimum_has_hypervolume():
    est = estimate_optimum(syn("DMO-MO"), simplex_step=1 / 8)
    assert est.f_star is None and est.hv_star > 0 and est.ref.shape == (3,)


def test_optimum_estimate_cached_and_warning_free():
    p = syn("DMO")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = estimate_optimum(p, levels=5, ascent_steps=5, top=5)
    assert estimate_optimum(p, levels=5, ascent_steps=5, top=5) is a
