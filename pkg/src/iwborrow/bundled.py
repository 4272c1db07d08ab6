"""Bundled synthetic data modeled on a gastric-cancer trial and two external sources.

The package ships three CSV files generated by :func:`generate_gastric`:

``trial``
    A 110-patient randomized trial, 25 with recurrent disease.
``xparts1``
    A control-arm phase II study, recurrent patients only.
``retro``
    A retrospective treatment-arm cohort, recurrent patients only.

The values are synthetic.  Only the structure (sizes, covariates, which
parameters each source informs) mirrors the real studies.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import rng as rngmod
from .dataset import CovariateSpec, Formula, TrialDataset, load_dataset, write_dataset

__all__ = ["GASTRIC_SCHEMA", "GASTRIC_FORMULA", "GASTRIC_TRUTH", "generate_gastric",
           "load_bundled", "bundled_path", "BUNDLED"]

GASTRIC_SCHEMA = (
    CovariateSpec("sex", "binary"),
    CovariateSpec("age", "continuous"),
    CovariateSpec("lymph", "binary"),
    CovariateSpec("peritoneum", "binary"),
    CovariateSpec("liver", "binary"),
    CovariateSpec("performance_status", "categorical", ("0", "1", "2")),
    CovariateSpec("recurrent", "binary", role="both"),
)

GASTRIC_FORMULA = Formula(("recurrent",), ("recurrent",))

#: Generating coefficients: intercept, recurrent, arm, arm x recurrent,
#: then the nuisance effects of performance status 1 and 2 and age per decade.
GASTRIC_TRUTH = {"beta0": -0.2, "beta1": -0.4, "psi0": 0.3, "psi1": 0.5,
                 "ps1": -0.4, "ps2": -0.8, "age_decade": -0.1}

BUNDLED = ("trial", "xparts1", "retro")

# per-source covariate laws: P(male), age mean/sd, P(lymph), P(peritoneum),
# P(liver), P(PS = 0, 1, 2)
_LAWS = {
    "trial": (0.70, 64.0, 9.0, 0.55, 0.35, 0.25, (0.60, 0.37, 0.03)),
    "xparts1": (0.75, 66.0, 9.0, 0.50, 0.40, 0.20, (0.50, 0.45, 0.05)),
    "retro": (0.65, 68.0, 10.0, 0.60, 0.30, 0.25, (0.45, 0.45, 0.10)),
}


def _source(name: str, n: int, recurrent: np.ndarray, arm: np.ndarray,
            rng: np.random.Generator) -> TrialDataset:
    male, age_mu, age_sd, p_lymph, p_perit, p_liver, p_ps = _LAWS[name]
    age = np.clip(np.round(rng.normal(age_mu, age_sd, n)), 30, 85)
    ps = rng.choice(3, size=n, p=p_ps)
    cov = {
        "sex": (rng.random(n) < male).astype(float),
        "age": age,
        "lymph": (rng.random(n) < p_lymph).astype(float),
        "peritoneum": (rng.random(n) < p_perit).astype(float),
        "liver": (rng.random(n) < p_liver).astype(float),
        "performance_status": np.array([str(v) for v in ps], dtype=object),
        "recurrent": recurrent.astype(float),
    }
    t = GASTRIC_TRUTH
    lp = (t["beta0"] + t["beta1"] * recurrent + (t["psi0"] + t["psi1"] * recurrent) * arm
          + t["ps1"] * (ps == 1) + t["ps2"] * (ps == 2) + t["age_decade"] * (age - 65) / 10)
    y = (rng.random(n) < expit(lp)).astype(np.int8)
    return TrialDataset(name, GASTRIC_SCHEMA, y, arm.astype(np.int8), cov)


def generate_gastric(seed: int = 20240611, n_trial: int = 110, n_recurrent: int = 25,
                     n_xparts1: int = 45, n_retro: int = 60) -> dict[str, TrialDataset]:
    """Regenerate the bundled data sets from ``seed``."""
    rng = rngmod.stream(seed, "bundled-gastric")
    rec = np.zeros(n_trial)
    rec[rng.choice(n_trial, n_recurrent, replace=False)] = 1
    arm = rng.permutation(np.arange(n_trial) % 2)
    return {
        "trial": _source("trial", n_trial, rec, arm, rng),
        "xparts1": _source("xparts1", n_xparts1, np.ones(n_xparts1), np.zeros(n_xparts1), rng),
        "retro": _source("retro", n_retro, np.ones(n_retro), np.ones(n_retro), rng),
    }


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled data set {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("iwborrow") / "data" / f"{name}.csv"))


def load_bundled(name: str) -> TrialDataset:
    return load_dataset(bundled_path(name), GASTRIC_SCHEMA, source_id=name)


def write_bundled(directory: str | Path, seed: int = 20240611) -> None:
    for name, ds in generate_gastric(seed).items():
        write_dataset(ds, Path(directory) / f"{name}.csv")
