"""Regenerate the bundled stand-in emulators and noise model."""

from __future__ import annotations

from pathlib import Path

from .problems import dmo_space, hpo_space
from .synthetic import (DMO_OUTPUTS, dmo_landscape, dmo_noise_model, hpo_landscape,
                        hpo_small_model_landscape, hpo_token_fidelity_landscape,
                        train_synthetic_emulator)


def build_synthetic_assets(out_dir: str | Path) -> dict[str, float]:
    """Train every stand-in emulator and write the asset tree; returns test Spearman per file."""
    out = Path(out_dir)
    (out / "hpo").mkdir(parents=True, exist_ok=True)
    (out / "dmo").mkdir(parents=True, exist_ok=True)
    jobs = [
        ("hpo/hpo_8b.json", hpo_space(), hpo_landscape, ("math500_acc",), 1),
        ("hpo/hpo_4b.json", hpo_space(), hpo_small_model_landscape, ("math500_acc",), 2),
        ("hpo/hpo_mf_cont.json", hpo_space("continuous"), hpo_token_fidelity_landscape,
         ("math500_acc",), 3),
        ("dmo/dmo.json", dmo_space(), dmo_landscape, DMO_OUTPUTS, 4),
    ]
    report = {}
    for rel, space, fn, names, seed in jobs:
        em, rep = train_synthetic_emulator(space, fn, names, seed=seed)
        em.save(out / rel)
        report[rel] = min(rep.rho_test)
    dmo_noise_model().save(out / "dmo" / "dmo_noise.json")
    return report
