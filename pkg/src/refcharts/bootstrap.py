"""Stratified bootstrap confidence bands for centile curves.

Replicates resample records within (study, sex) strata, preserving every
stratum's size exactly, then refit the chart warm-started from the full
fit with the study-intercept variance frozen. Band edges are the 2.5th,
50th, and 97.5th percentiles of the replicate centile curves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .centiles import quantile_curve
from .errors import ContractError, NumericalError
from .gamlss import ChartModel, FitProblem, _fit_problem, build_problem, fit

BAND_PERCENTILES = (2.5, 50.0, 97.5)


@dataclass
class CentileBands:
    ages: np.ndarray
    sex: str
    levels: tuple
    lower: dict      # level -> array over ages (2.5th percentile)
    center: dict     # level -> array (50th)
    upper: dict      # level -> array (97.5th)
    n_replicates: int
    n_failed: int
    curves: np.ndarray | None = None  # (n_ok, n_levels, n_ages) when kept

    def to_obj(self) -> dict:
        return {
            "ages": [float(a) for a in self.ages],
            "sex": self.sex,
            "levels": [float(lv) for lv in self.levels],
            "percentiles": list(BAND_PERCENTILES),
            "lower": {f"p{100 * lv:g}": [float(v) for v in self.lower[lv]]
                      for lv in self.levels},
            "center": {f"p{100 * lv:g}": [float(v) for v in self.center[lv]]
                       for lv in self.levels},
            "upper": {f"p{100 * lv:g}": [float(v) for v in self.upper[lv]]
                      for lv in self.levels},
            "n_replicates": self.n_replicates,
            "n_failed": self.n_failed,
        }


def _strata(rows):
    """Index groups by (study, sex), ordered deterministically."""
    key = rows.study_idx * 2 + rows.sex_m.astype(int)
    groups = []
    for k in np.unique(key):
        groups.append(np.flatnonzero(key == k))
    return groups


def bootstrap_bands(data, spec, powers_mu, powers_sigma, *, n_replicates=200,
                    seed=0, ages=None, levels=(0.05, 0.5, 0.95), sex="F",
                    manufacturer=None, kvp=None, contrast=None, study=None,
                    base_model: ChartModel | None = None,
                    max_failure_fraction=0.10, keep_curves=False,
                    max_iter=500) -> CentileBands:
    """Bootstrap confidence bands for the centile curves of one chart.

    Each replicate reuses the full fit's study-intercept variance and
    starts from the full fit's coefficients. Replicates that fail to
    converge are dropped; more than max_failure_fraction of them failing
    raises NumericalError.
    """
    if n_replicates < 2:
        raise ContractError("need at least 2 replicates")
    base_problem = build_problem(data, spec, powers_mu, powers_sigma)
    if base_model is None:
        base_model = _fit_problem(base_problem, compute_se=False,
                                  max_iter=max_iter)
    enc = base_model.encoding
    if ages is None:
        ages = np.linspace(enc.age_min, enc.age_max, 41)
    ages = np.asarray(ages, dtype=float)
    levels = tuple(float(lv) for lv in levels)

    theta0 = base_model.theta_vector()
    frozen = dict(base_model.delta2)
    groups = _strata(base_problem.rows)

    kept = []
    n_failed = 0
    for rep in range(n_replicates):
        rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
        idx = np.concatenate([
            g[rng.integers(0, g.size, size=g.size)] for g in groups])
        rows_b = base_problem.rows.take(idx)
        try:
            problem = FitProblem(spec, enc, powers_mu, powers_sigma, rows_b,
                                 delta2=frozen)
            model_b = _fit_problem(problem, start=theta0, compute_se=False,
                                   fixed_delta2=frozen, max_iter=max_iter)
            params, _ = model_b.params_at(ages, sex, manufacturer=manufacturer,
                                          kvp=kvp, contrast=contrast, study=study)
            kept.append(np.vstack([
                np.asarray(quantile_curve(params, spec.family, lv))
                for lv in levels]))
        except (NumericalError, ContractError):
            n_failed += 1

    if n_failed > max_failure_fraction * n_replicates:
        raise NumericalError(
            f"{n_failed} of {n_replicates} bootstrap replicates failed "
            f"(limit {max_failure_fraction:.0%})")
    stack = np.stack(kept)  # (n_ok, n_levels, n_ages)
    lo, mid, hi = np.percentile(stack, BAND_PERCENTILES, axis=0)
    return CentileBands(
        ages=ages, sex=str(sex), levels=levels,
        lower={lv: lo[j] for j, lv in enumerate(levels)},
        center={lv: mid[j] for j, lv in enumerate(levels)},
        upper={lv: hi[j] for j, lv in enumerate(levels)},
        n_replicates=n_replicates, n_failed=n_failed,
        curves=stack if keep_curves else None)
