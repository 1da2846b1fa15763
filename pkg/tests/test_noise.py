from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emubo.noise import NoiseModel, fit_noise_model, noise_sigma


def test_single_point_returns_its_sigma():
    nm = NoiseModel(np.array([[0.2, 0.3]]), np.array([0.07]), 0.1)
    assert noise_sigma(nm, [0.2, 0.3]) == pytest.approx(0.07)


def test_equidistant_average():
    nm = NoiseModel(np.array([[0.0], [1.0]]), np.array([0.01, 0.03]), 0.1)
    assert noise_sigma(nm, [0.5]) == pytest.approx(0.02)


def test_large_gamma_nearest():
    P = np.array([[0.0, 0.0], [1.0, 1.0], [0.2, 0.9]])
    s = np.array([0.05, 0.01, 0.02])
    nm = NoiseModel(P, s, 100.0)
    q = np.array([0.1, 0.05])
    d = np.abs(P - q).sum(axis=1)
    w = np.exp(-100 * d)
    assert noise_sigma(nm, q) == pytest.approx(float(w @ s / w.sum()), rel=1e-12)
    assert noise_sigma(nm, q) == pytest.approx(0.05, abs=1e-6)


def test_cv_picks_smallest_gamma_on_ties():
    P = np.random.default_rng(0).uniform(size=(20, 2))
    nm, table = fit_noise_model(P, np.full(20, 0.03), (1.0, 0.1, 10.0), folds=5)
    assert nm.gamma == 0.1
    assert [r["gamma"] for r in table] == [0.1, 1.0, 10.0]


def test_cv_beats_worst_gamma():
    rng = np.random.default_rng(1)
    P = rng.uniform(size=(200, 2))
    s = 0.01 + 0.05 * P[:, 0]
    nm, table = fit_noise_model(P, s, (0.01, 0.1, 1.0, 10.0), folds=5)
    chosen = next(r for r in table if r["gamma"] == nm.gamma)
    assert chosen["mean_rmse"] < max(r["mean_rmse"] for r in table)


def test_fold_count_error():
    with pytest.raises(ValueError):
        fit_noise_model(np.zeros((3, 1)), [0.1, 0.1, 0.1], folds=5)


def test_json_roundtrip(tmp_path):
    nm = NoiseModel(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([0.1, 0.2]), 0.3)
    nm.save(tmp_path / "n.json")
    back = NoiseModel.load(tmp_path / "n.json")
    assert back.gamma == 0.3
    np.testing.assert_array_equal(back.sigmas, nm.sigmas)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.floats(0.01, 50), st.integers(0, 10_000))
def test_prediction_within_sigma_range(m, gamma, seed):
    rng = np.random.default_rng(seed)
    nm = NoiseModel(rng.uniform(size=(m, 3)), rng.uniform(0, 0.1, m), gamma)
    out = noise_sigma(nm, rng.uniform(-1, 2, size=(25, 3)))
    assert np.all(out >= nm.sigmas.min() - 1e-12) and np.all(out <= nm.sigmas.max() + 1e-12)
