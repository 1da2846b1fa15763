"""Offline stand-in landscapes and the emulators fitted to them.

Each landscape is a hand-written function on unit-normalized inputs. The
emulator that ships in its place is the standard two-hidden-layer MLP trained
on uniform samples of the landscape, so the optimized objective is always an
emulator, exactly as with released weights.
"""

from __future__ import annotations

import numpy as np

from .emulator import FitConfig, FitReport, MlpEmulator, TabularObjective, fit_emulator
from .noise import NoiseModel, fit_noise_model
from .spaces import SearchSpace, dirichlet_sample, to_unit, uniform_sample

HPO_CAT_EFFECT = np.array([0.0, 0.02, -0.015, 0.035])
DMO_OUTPUTS = ("ifeval", "math500", "mbpp")
_DMO_CENTERS = np.array([
    [0.60, 0.20, 0.20, 0.50, 0.30, 0.20],
    [0.15, 0.65, 0.20, 0.20, 0.55, 0.25],
    [0.20, 0.20, 0.60, 0.10, 0.30, 0.60],
])
_DMO_BUMPS = np.array([
    [0.10, 0.10, 0.80, 0.80, 0.10, 0.10],
    [0.40, 0.50, 0.10, 0.05, 0.85, 0.10],
    [0.45, 0.10, 0.45, 0.30, 0.10, 0.60],
])
PO_N = 5014
PO_DIM = 768


def hpo_landscape(U: np.ndarray) -> np.ndarray:
    """Fine-tuning accuracy over (lr, batch, rank, alpha, dropout, layers, modules).

    A main mode at learning rate ~0.68 favouring alpha above rank, a smaller
    second mode at low learning rate with high dropout, and mild effects of
    depth, batch size and target modules.
    """
    lr, bs, rank, alpha, drop, layers = (U[:, i] for i in range(6))
    cat = np.clip(np.rint(U[:, 6]), 0, 3).astype(int)
    main = 0.30 * np.exp(-((lr - 0.68) ** 2 / 0.05 + (alpha - rank - 0.2) ** 2 / 0.3))
    second = 0.07 * np.exp(-((lr - 0.25) ** 2 + (drop - 0.85) ** 2) / 0.02)
    return (0.22 + main + second + 0.06 * layers ** 0.7 + 0.03 * (1 - bs)
            - 0.04 * (drop - 0.3) ** 2 + HPO_CAT_EFFECT[cat])


def hpo_token_fidelity_landscape(U: np.ndarray) -> np.ndarray:
    """Accuracy after a fraction ``s`` of the token budget: damped and tilted at low ``s``."""
    s = U[:, 7]
    return hpo_landscape(U[:, :7]) * (0.55 + 0.45 * s ** 0.6) + 0.03 * (1 - s) * (U[:, 0] - 0.5)


def hpo_small_model_landscape(U: np.ndarray) -> np.ndarray:
    """The smaller model: lower scores with a shifted learning-rate preference."""
    V = U.copy()
    V[:, 0] = np.clip(U[:, 0] + 0.08, 0, 1)
    return 0.82 * hpo_landscape(V) + 0.02


def dmo_landscape(X: np.ndarray) -> np.ndarray:
    """Three benchmark scores over two-stage mixture proportions, shape ``(n, 3)``.

    Each score is a concave bowl around a stage-wise preferred mixture plus a
    narrow secondary bump.
    """
    out = np.empty((X.shape[0], 3))
    base = np.array([0.62, 0.45, 0.50])
    for k in range(3):
        d2 = ((X - _DMO_CENTERS[k]) ** 2).sum(axis=1)
        b2 = ((X - _DMO_BUMPS[k]) ** 2).sum(axis=1)
        out[:, k] = base[k] - 0.35 * d2 + 0.04 * np.exp(-b2 / 0.05)
    return out


def dmo_noise_sigma(X: np.ndarray) -> np.ndarray:
    """Math-score noise std: large at low stage-1 IF share and high stage-1 math share."""
    return 0.002 + 0.06 * (1 - X[:, 0]) ** 2 * X[:, 1]


def train_synthetic_emulator(space: SearchSpace, fn, output_names: tuple[str, ...], *,
                             n_train: int = 6000, seed: int = 0, width: int = 128,
                             epochs: int = 200) -> tuple[MlpEmulator, FitReport]:
    """Fit the standard emulator to ``fn`` sampled uniformly over ``space``.

    ``fn`` maps unit-normalized inputs (categorical codes unchanged) to
    ``(n,)`` or ``(n, k)`` targets.
    """
    X = uniform_sample(space, n_train, np.random.default_rng(seed))
    T = np.asarray(fn(to_unit(space, X)), dtype=float)
    cfg = FitConfig(hidden_width=width, dropout_rate=0.0, epochs=epochs, seed=seed)
    return fit_emulator(X, T, cfg, output_names=output_names)


def dmo_noise_model(seed: int = 11, n: int = 50) -> NoiseModel:
    """Noise model fitted on 50 Dirichlet mixtures with sample std from 5 repeats."""
    rng = np.random.default_rng(seed)
    P = np.hstack([dirichlet_sample(3, 1.0, n, rng), dirichlet_sample(3, 1.0, n, rng)])
    true = dmo_noise_sigma(P)
    reps = true[:, None] * rng.standard_normal((n, 5))
    est = reps.std(axis=1, ddof=1)
    model, _ = fit_noise_model(P, est, gamma_grid=(0.1, 1.0, 3.0, 10.0), folds=5, seed=seed)
    return model


def po_table(n: int = PO_N, d: int = PO_DIM, seed: int = 5) -> TabularObjective:
    """Synthetic prompt table: embeddings with decaying per-coordinate scale.

    Rows carry a log-normal norm factor, so a minority of embeddings are far
    from the bulk, as in real sentence-embedding tables. The score is a single
    smooth basin in the leading 32 coordinates, centered on a typical-norm row,
    plus mild random-Fourier ruggedness over the leading 128 coordinates.
    Far-out rows score low but carry high model uncertainty, which is what
    separates local k-NN search from a global acquisition sweep.
    """
    rng = np.random.default_rng(seed)
    sd = (1.0 + np.arange(d)) ** -0.5
    E = rng.standard_normal((n, d)) * sd
    r = np.exp(0.6 * rng.standard_normal(n))
    E = E * r[:, None]
    Z = E[:, :32]
    c = Z[rng.choice(np.flatnonzero(np.abs(np.log(r)) < 0.2))]
    s = 0.3 + 0.3 * np.exp(-((Z - c) ** 2).sum(axis=1) / (2 * 1.2 ** 2))
    W = rng.standard_normal((128, 256)) / 1.5
    b = rng.uniform(0, 2 * np.pi, 256)
    s += 0.04 * np.cos(E[:, :128] @ W + b).sum(axis=1) / np.sqrt(128)
    s = s + 0.002 * rng.standard_normal(n)
    ids = tuple(f"p{i:05d}" for i in range(n))
    return TabularObjective(ids, E, np.round(s, 6))
