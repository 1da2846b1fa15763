"""Glue between search spaces and GP surrogates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gp import GpModel, Hyper, KernelSpec, NoiseSpec, fit_gp, mlhgp_fit
from .spaces import SearchSpace, to_unit


def kernel_spec_for(space: SearchSpace) -> KernelSpec:
    """RBF over continuous and integer coordinates, Hamming over categorical ones."""
    cat = tuple(space.categorical_inds)
    cont = tuple(i for i in range(space.dim) if i not in set(cat))
    return KernelSpec(cont, cat)


def space_encoder(space: SearchSpace) -> Callable[[np.ndarray], np.ndarray]:
    """Raw points -> GP inputs: ordinal coordinates scaled to [0, 1], codes unchanged."""
    return lambda X: to_unit(space, X)


@dataclass(frozen=True)
class SurrogateConfig:
    noise: NoiseSpec = NoiseSpec("inferred")
    restarts: int = 2
    maxiter: int = 200
    warm_start: bool = True


def fit_surrogate(space: SearchSpace | None, X: np.ndarray, y: np.ndarray,
                  cfg: SurrogateConfig = SurrogateConfig(), rng: np.random.Generator | int | None = None,
                  init: Hyper | None = None, kspec: KernelSpec | None = None,
                  transform: Callable | None = None) -> GpModel:
    """Fit a GP to raw observations; ``space`` supplies the kernel and encoding.

    Tabular problems pass ``space=None`` with an explicit ``kspec`` and feed
    embeddings as ``X``.
    """
    if space is not None:
        kspec = kspec or kernel_spec_for(space)
        transform = transform or space_encoder(space)
    elif kspec is None:
        kspec = KernelSpec.for_dim(np.atleast_2d(X).shape[1])
    if cfg.noise.mode == "mlhgp":
        return mlhgp_fit(X, y, cfg.noise.em_iterations, rng, kspec=kspec, transform=transform,
                         restarts=cfg.restarts)[0]
    return fit_gp(X, y, kspec, cfg.noise, cfg.restarts, rng, transform=transform,
                  init=init if cfg.warm_start else None, maxiter=cfg.maxiter)
