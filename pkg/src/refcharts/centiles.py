"""Scoring against fitted charts: centiles, z-scores, centile tables,
median rates of change, and rank-based group separation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import families
from .errors import ContractError, DomainError, NumericalError
from .fp import fp_derivative
from .gamlss import ChartModel

_CLAMP = 1e-12
DEFAULT_CENTILES = (0.03, 0.10, 0.25, 0.50, 0.75, 0.90, 0.97)


# ---------------------------------------------------------------------------
# scoring

@dataclass(frozen=True)
class ScoreResult:
    structure_id: str | None
    value: float
    age: float
    sex: str
    centile: float          # 0..100
    z_score: float
    params: families.FamilyParams
    flags: tuple


def score(model: ChartModel, *, value, age, sex, manufacturer=None, kvp=None,
          contrast=None, study=None) -> ScoreResult:
    """Centile and z-score of one measurement against a fitted chart.

    Unknown manufacturers fall back to the reference level, unknown studies
    to the population curve; both are flagged rather than rejected. Values
    outside the family support raise DomainError.
    """
    params, flags = model.family_params_at(
        age, sex, manufacturer=manufacturer, kvp=kvp, contrast=contrast,
        study=study)
    if study is not None and study not in model.encoding.study_levels:
        flags = set(flags) | {"unknown_study"}
    u = float(families.cdf(params, float(value)))
    clamped = min(max(u, _CLAMP), 1.0 - _CLAMP)
    if clamped != u:
        flags = set(flags) | {"clamped_tail"}
    return ScoreResult(
        structure_id=model.structure_id, value=float(value), age=float(age),
        sex=str(sex), centile=100.0 * u, z_score=float(special.ndtri(clamped)),
        params=params, flags=tuple(sorted(flags)))


def score_dataset(model: ChartModel, data) -> list:
    """Score every record of a dataset against one chart."""
    out = []
    for r in data:
        value = r.volume_ml if model.spec.response == "volume_ml" else r.mean_hu
        out.append(score(model, value=value, age=r.age, sex=r.sex,
                         manufacturer=r.manufacturer, kvp=r.kvp,
                         contrast=r.contrast, study=r.study))
    return out


def choose_chart(charts: dict, structure_id: str, response: str,
                 contrast: bool | None = None):
    """Contrast-aware chart lookup.

    Volume charts are keyed (structure, "volume_ml", None); attenuation
    charts are keyed per contrast state.
    """
    state = None if response == "volume_ml" else bool(contrast)
    key = (structure_id, response, state)
    if key not in charts:
        raise ContractError(f"no chart for {key}")
    return charts[key]


# ---------------------------------------------------------------------------
# centile tables

def quantile_curve(params: dict, family: str, p: float) -> np.ndarray:
    """Quantile curve from parameter arrays sharing one shape."""
    if family == "GG":
        return families.gg_ppf(p, params["mu"], params["sigma"], params["nu"])
    z = families.st1_ppf_scalar(p, params["nu"], params["tau"])
    return params["mu"] + params["sigma"] * z


@dataclass
class CentileTable:
    structure_id: str | None
    family: str
    sex: str
    ages: np.ndarray
    levels: tuple
    curves: dict            # level -> array over ages
    flags: tuple

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["age"] + [f"p{100 * lv:g}" for lv in self.levels])
            for i, a in enumerate(self.ages):
                writer.writerow([repr(float(a))] +
                                [repr(float(self.curves[lv][i])) for lv in self.levels])

    def to_obj(self) -> dict:
        return {
            "structure_id": self.structure_id,
            "family": self.family,
            "sex": self.sex,
            "ages": [float(a) for a in self.ages],
            "levels": [float(lv) for lv in self.levels],
            "curves": {f"p{100 * lv:g}": [float(v) for v in self.curves[lv]]
                       for lv in self.levels},
            "flags": list(self.flags),
        }


def chart_grid(model: ChartModel, *, sex, ages=None, levels=DEFAULT_CENTILES,
               manufacturer=None, kvp=None, contrast=None,
               study=None) -> CentileTable:
    """Reference centile curves over an age grid for one covariate profile.

    Curves must be strictly increasing across levels at every age; a
    violation marks a numerically unusable chart and raises.
    """
    levels = tuple(float(lv) for lv in levels)
    if any(not 0.0 < lv < 1.0 for lv in levels):
        raise ContractError("centile levels must lie in (0, 1)")
    if list(levels) != sorted(set(levels)):
        raise ContractError("centile levels must be strictly increasing")
    enc = model.encoding
    if ages is None:
        ages = np.linspace(enc.age_min, enc.age_max, 41)
    ages = np.asarray(ages, dtype=float)
    params, flags = model.params_at(ages, sex, manufacturer=manufacturer,
                                    kvp=kvp, contrast=contrast, study=study)
    curves = {lv: np.asarray(quantile_curve(params, model.spec.family, lv))
              for lv in levels}
    stack = np.vstack([curves[lv] for lv in levels])
    if not np.all(np.diff(stack, axis=0) > 0):
        bad = int(np.argmax(~np.all(np.diff(stack, axis=0) > 0, axis=0)))
        raise NumericalError(
            f"centile curves cross at age {ages[bad]:.2f}", index=bad)
    return CentileTable(model.structure_id, model.spec.family, str(sex), ages,
                        levels, curves, tuple(sorted(flags)))


# ---------------------------------------------------------------------------
# median rate of change

def _eta_age_derivative(model: ChartModel, param: str, age: float) -> float:
    coeffs = []
    powers = model.powers_mu if param == "mu" else model.powers_sigma
    labels = model.labels[param]
    table = dict(zip(labels, model.coef[param]))
    for lab in powers.labels():
        coeffs.append(float(table[f"age:{lab}"]))
    if not coeffs:
        return 0.0
    return fp_derivative(powers, coeffs, age, divisor=model.encoding.age_divisor)


def median_rate(model: ChartModel, *, age, sex, manufacturer=None, kvp=None,
                contrast=None, study=None) -> float:
    """Instantaneous change of the median curve, in response units per year.

    The chain runs through both the location and the scale predictor: for
    the GG family the median is mu (q(theta)/theta)^(1/nu) with q the
    median of the Gamma(theta) kernel, so an age-varying scale moves the
    median through theta as well.
    """
    age = float(age)
    params, _ = model.params_at(age, sex, manufacturer=manufacturer, kvp=kvp,
                                contrast=contrast, study=study)
    mu = float(params["mu"][0])
    sigma = float(params["sigma"][0])
    nu = params["nu"]
    links = model.spec.link_set
    deta_mu = _eta_age_derivative(model, "mu", age)
    deta_sigma = _eta_age_derivative(model, "sigma", age)
    # d mu / d age and d sigma / d age through the links
    if links.mu == "log":
        dmu = mu * deta_mu
    else:
        dmu = deta_mu
    if links.sigma == "log":
        dsigma = sigma * deta_sigma
    else:
        dsigma = deta_sigma

    if model.spec.family == "ST1":
        z50 = families.st1_ppf_scalar(0.5, nu, params["tau"])
        return dmu + dsigma * z50

    theta = 1.0 / (sigma * sigma * nu * nu)
    q = float(special.gammaincinv(theta, 0.5))
    h = 1e-6 * (1.0 + theta)
    qp = float(special.gammaincinv(theta + h, 0.5))
    qm = float(special.gammaincinv(theta - h, 0.5))
    dq_dtheta = (qp - qm) / (2.0 * h)
    dtheta = -2.0 * theta * dsigma / sigma
    median = mu * (q / theta) ** (1.0 / nu)
    dlog_median = (dmu / mu) + (1.0 / nu) * (dq_dtheta / q - 1.0 / theta) * dtheta
    return median * dlog_median


# ---------------------------------------------------------------------------
# rank-based separation

@dataclass(frozen=True)
class AUCResult:
    auc: float
    u_stat: float
    p_value: float
    n_x: int
    n_y: int


def rank_auc(x, y) -> AUCResult:
    """Probability that a draw from x exceeds a draw from y (ties count half),
    with a tie-corrected normal approximation for the two-sided p-value."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0 or y.size == 0:
        raise ContractError("both groups need at least one value")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ContractError("groups must be finite")
    nx, ny = x.size, y.size
    combined = np.concatenate([x, y])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size, dtype=float)
    ranks[order] = np.arange(1, combined.size + 1, dtype=float)
    # average ranks within tie groups
    sorted_vals = combined[order]
    i = 0
    n = combined.size
    tie_sizes = []
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            avg = 0.5 * (i + 1 + j + 1)
            ranks[order[i:j + 1]] = avg
            tie_sizes.append(j - i + 1)
        i = j + 1
    r_x = float(ranks[:nx].sum())
    u = r_x - nx * (nx + 1) / 2.0
    auc = u / (nx * ny)
    mean_u = nx * ny / 2.0
    tie_term = sum(t ** 3 - t for t in tie_sizes)
    var_u = nx * ny / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var_u <= 0:
        return AUCResult(0.5, u, 1.0, nx, ny)
    z = (u - mean_u) / math.sqrt(var_u)
    p = 2.0 * special.ndtr(-abs(z))
    return AUCResult(float(auc), float(u), float(min(p, 1.0)), nx, ny)
