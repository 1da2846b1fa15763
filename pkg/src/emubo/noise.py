"""Input-dependent observation noise via Laplacian-kernel regression."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class NoiseModel:
    """Nadaraya-Watson regression of measured noise std over inputs.

    ``sigma(x) = sum_i K(x, x_i) s_i / sum_i K(x, x_i)`` with
    ``K(x, x') = exp(-gamma * ||x - x'||_1)``.
    """

    points: np.ndarray
    sigmas: np.ndarray
    gamma: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, dtype=float)))
        object.__setattr__(self, "sigmas", np.asarray(self.sigmas, dtype=float).ravel())
        if self.points.shape[0] < 1 or self.points.shape[0] != self.sigmas.shape[0]:
            raise ValueError("noise model needs >= 1 point and one sigma per point")
        if np.any(self.sigmas < 0):
            raise ValueError("sigmas must be nonnegative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def __call__(self, X: np.ndarray) -> np.ndarray | float:
        return noise_sigma(self, X)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "points": self.points.tolist(), "sigmas": self.sigmas.tolist()}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, d: dict) -> NoiseModel:
        return cls(np.asarray(d["points"], dtype=float), np.asarray(d["sigmas"], dtype=float),
                   float(d["gamma"]))

    @classmethod
    def load(cls, path: str | Path) -> NoiseModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _nw(points: np.ndarray, sigmas: np.ndarray, gamma: float, X: np.ndarray) -> np.ndarray:
    D = np.abs(X[:, None, :] - points[None, :, :]).sum(axis=2)
    # Shift by the row minimum so large gamma cannot underflow every weight.
    W = np.exp(-gamma * (D - D.min(axis=1, keepdims=True)))
    return np.maximum(W @ sigmas / W.sum(axis=1), 0.0)


def noise_sigma(nm: NoiseModel, X: np.ndarray) -> np.ndarray | float:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != nm.points.shape[1]:
        raise ValueError(f"expected dim {nm.points.shape[1]}, got {X.shape[1]}")
    out = _nw(nm.points, nm.sigmas, nm.gamma, X)
    return float(out[0]) if single else out


def fit_noise_model(points: np.ndarray, sigmas: Sequence[float],
                    gamma_grid: Sequence[float] = (0.01, 0.1, 1.0), folds: int = 5,
                    seed: int = 0) -> tuple[NoiseModel, list[dict]]:
    """Pick ``gamma`` by k-fold CV RMSE, then refit on all the data.

    Ties (equal mean RMSE) resolve to the smallest gamma.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    s = np.asarray(sigmas, dtype=float).ravel()
    n = P.shape[0]
    if folds < 2 or folds > n:
        raise ValueError(f"fold count {folds} invalid for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    chunks = np.array_split(perm, folds)
    table = []
    for g in sorted(gamma_grid):
        errs = []
        for te in chunks:
            tr = np.setdiff1d(perm, te)
            pred = _nw(P[tr], s[tr], g, P[te])
            errs.append(float(np.sqrt(np.mean((pred - s[te]) ** 2))))
        table.append({"gamma": float(g), "fold_rmse": errs, "mean_rmse": float(np.mean(errs))})
    best = min(r["mean_rmse"] for r in table)
    chosen = next(r["gamma"] for r in table if np.isclose(r["mean_rmse"], best, rtol=1e-9, atol=1e-15))
    return NoiseModel(P, s, chosen), table
