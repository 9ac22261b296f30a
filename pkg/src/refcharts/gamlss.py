"""Distributional regression engine for reference-chart fitting.

A model couples one response family (GG for volumes, ST1 for attenuation)
with per-parameter linear predictors on the link scale:

    link_mu(mu)       = fixed covariate terms + FP(age) + study intercept
    link_sigma(sigma) = intercept + sex + FP(age) + study intercept
    link_nu(nu)       = intercept
    link_tau(tau)     = intercept            (ST1 only)

Study intercepts are either penalized coefficients with a Gaussian penalty
(variance estimated by an outer alternating update), plain fixed effects
with a dropped reference level, or absent. Estimation maximizes the
penalized likelihood jointly with a dense quasi-Newton iteration and an
Armijo backtracking line search; every accepted step decreases the
objective, and non-finite likelihood values trigger step halving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg as sla
from scipy import special

from . import families
from .data import Dataset
from .errors import ContractError, DomainError, NumericalError
from .fp import PowerSet, candidate_power_sets, fp_design

STUDY_MODES = ("penalized_random", "fixed", "none")

_DELTA2_INIT = 0.01
_DELTA2_FLOOR = 1e-8
_DELTA2_CAP = 25.0
_OUTER_TOL = 1e-4
_OUTER_MAX = 50


# ---------------------------------------------------------------------------
# model specification

@dataclass(frozen=True)
class ModelSpec:
    """Structure of one chart model, minus the FP powers.

    Defaults describe the full chart configuration (sex, manufacturer,
    centered kvp, and for volume models the contrast flag in the location
    predictor; sex in the scale predictor). Individual covariates can be
    switched off for reduced cohorts where a column would be constant.
    """

    family: str
    response: str
    mu_sex: bool = True
    mu_manufacturer: bool = True
    mu_kvp: bool = True
    mu_contrast: bool | None = None  # None: family default (GG yes, ST1 no)
    sigma_sex: bool = True
    study_effect_mode: str = "penalized_random"
    links: families.LinkSet | None = None
    kvp_center: float = 120.0
    age_divisor: float = 10.0
    contrast_state: bool | None = None  # ST1 fits are per contrast state

    def __post_init__(self):
        if self.family not in families.FAMILIES:
            raise ContractError(f"unknown family {self.family!r}")
        if self.response not in ("volume_ml", "mean_hu"):
            raise ContractError(f"unknown response {self.response!r}")
        if self.family == "GG" and self.response != "volume_ml":
            raise ContractError("GG charts model volume_ml")
        if self.family == "ST1" and self.response != "mean_hu":
            raise ContractError("ST1 charts model mean_hu")
        if self.study_effect_mode not in STUDY_MODES:
            raise ContractError(f"study_effect_mode must be one of {STUDY_MODES}")
        if self.family == "ST1" and self.mu_contrast:
            raise ContractError(
                "attenuation models are fit per contrast state, not with a "
                "contrast covariate")
        if self.family == "GG" and self.contrast_state is not None:
            raise ContractError("contrast_state only applies to attenuation models")
        if self.age_divisor <= 0:
            raise ContractError("age_divisor must be positive")

    @property
    def use_contrast(self) -> bool:
        if self.mu_contrast is None:
            return self.family == "GG"
        return self.mu_contrast

    @property
    def link_set(self) -> families.LinkSet:
        return self.links or families.LinkSet.defaults(self.family)

    @property
    def param_names(self) -> tuple[str, ...]:
        return ("mu", "sigma", "nu", "tau") if self.family == "ST1" else ("mu", "sigma", "nu")


@dataclass(frozen=True)
class CovariateEncoding:
    """Factor levels and centering constants frozen at fit time."""

    sex_levels: tuple[str, str]
    manufacturer_levels: tuple[str, ...]  # reference (most frequent) first
    study_levels: tuple[str, ...]         # sorted
    study_reference: str | None
    kvp_center: float
    age_divisor: float
    age_min: float
    age_max: float

    @classmethod
    def from_data(cls, data: Dataset, spec: ModelSpec) -> "CovariateEncoding":
        manus = [r.manufacturer for r in data]
        counts = {}
        for m in manus:
            counts[m] = counts.get(m, 0) + 1
        # most frequent first, ties resolved lexicographically
        ordered = sorted(counts, key=lambda m: (-counts[m], m))
        studies = sorted({r.study for r in data})
        s_counts = {}
        for r in data:
            s_counts[r.study] = s_counts.get(r.study, 0) + 1
        study_ref = sorted(s_counts, key=lambda s: (-s_counts[s], s))[0] if studies else None
        ages = data.column("age")
        return cls(
            sex_levels=("F", "M"),
            manufacturer_levels=tuple(ordered),
            study_levels=tuple(studies),
            study_reference=study_ref,
            kvp_center=spec.kvp_center,
            age_divisor=spec.age_divisor,
            age_min=float(ages.min()),
            age_max=float(ages.max()),
        )


@dataclass
class _Rows:
    """Numeric covariate columns in encoding order."""

    y: np.ndarray
    age: np.ndarray
    sex_m: np.ndarray
    manu_idx: np.ndarray
    kvp: np.ndarray
    contrast: np.ndarray
    study_idx: np.ndarray  # -1 marks a study outside the encoding

    @property
    def n(self) -> int:
        return self.y.size

    def take(self, idx) -> "_Rows":
        return _Rows(self.y[idx], self.age[idx], self.sex_m[idx],
                     self.manu_idx[idx], self.kvp[idx], self.contrast[idx],
                     self.study_idx[idx])


def _extract_rows(data: Dataset, spec: ModelSpec, enc: CovariateEncoding) -> _Rows:
    y = data.response(spec.response)
    if not np.all(np.isfinite(y)):
        raise ContractError(f"non-finite {spec.response} values in data")
    manu_pos = {m: i for i, m in enumerate(enc.manufacturer_levels)}
    study_pos = {s: i for i, s in enumerate(enc.study_levels)}
    return _Rows(
        y=y,
        age=data.column("age"),
        sex_m=(data.column("sex") == "M").astype(float),
        manu_idx=np.asarray([manu_pos[r.manufacturer] for r in data], dtype=int),
        kvp=data.column("kvp"),
        contrast=data.column("contrast").astype(float),
        study_idx=np.asarray([study_pos[r.study] for r in data], dtype=int),
    )


# ---------------------------------------------------------------------------
# design assembly

@dataclass(frozen=True)
class _Layout:
    mu: slice
    sigma: slice
    nu: slice
    tau: slice | None
    gamma_mu: slice | None
    gamma_sigma: slice | None
    n_unpenalized: int
    n_total: int


def _build_design(spec: ModelSpec, enc: CovariateEncoding, powers_mu: PowerSet,
                  powers_sigma: PowerSet, rows: _Rows):
    n = rows.n
    ones = np.ones(n)
    x_scaled = rows.age / enc.age_divisor

    cols_mu = [ones]
    labels_mu = ["intercept"]
    if spec.mu_sex:
        cols_mu.append(rows.sex_m)
        labels_mu.append("sex:M")
    if spec.mu_manufacturer:
        for i, lvl in enumerate(enc.manufacturer_levels[1:], start=1):
            cols_mu.append((rows.manu_idx == i).astype(float))
            labels_mu.append(f"manufacturer:{lvl}")
    if spec.mu_kvp:
        cols_mu.append(rows.kvp - enc.kvp_center)
        labels_mu.append("kvp")
    if spec.use_contrast:
        cols_mu.append(rows.contrast)
        labels_mu.append("contrast")
    fp_mu = fp_design(x_scaled, powers_mu)
    for j, lab in enumerate(powers_mu.labels()):
        cols_mu.append(fp_mu[:, j])
        labels_mu.append(f"age:{lab}")

    cols_sigma = [ones]
    labels_sigma = ["intercept"]
    if spec.sigma_sex:
        cols_sigma.append(rows.sex_m)
        labels_sigma.append("sex:M")
    fp_sigma = fp_design(x_scaled, powers_sigma)
    for j, lab in enumerate(powers_sigma.labels()):
        cols_sigma.append(fp_sigma[:, j])
        labels_sigma.append(f"age:{lab}")

    if spec.study_effect_mode == "fixed" and len(enc.study_levels) > 1:
        ref = enc.study_reference
        for lvl in enc.study_levels:
            if lvl == ref:
                continue
            pos = enc.study_levels.index(lvl)
            dummy = (rows.study_idx == pos).astype(float)
            cols_mu.append(dummy)
            labels_mu.append(f"study:{lvl}")
            cols_sigma.append(dummy)
            labels_sigma.append(f"study:{lvl}")

    X = {"mu": np.column_stack(cols_mu), "sigma": np.column_stack(cols_sigma)}
    labels = {"mu": tuple(labels_mu), "sigma": tuple(labels_sigma),
              "nu": ("intercept",),
              "tau": ("intercept",) if spec.family == "ST1" else ()}

    k_mu, k_sigma = X["mu"].shape[1], X["sigma"].shape[1]
    has_tau = spec.family == "ST1"
    pos = 0
    sl_mu = slice(pos, pos + k_mu); pos += k_mu
    sl_sigma = slice(pos, pos + k_sigma); pos += k_sigma
    sl_nu = slice(pos, pos + 1); pos += 1
    sl_tau = None
    if has_tau:
        sl_tau = slice(pos, pos + 1); pos += 1
    n_unpen = pos
    sl_gmu = sl_gsigma = None
    n_study = len(enc.study_levels)
    if spec.study_effect_mode == "penalized_random" and n_study > 0:
        sl_gmu = slice(pos, pos + n_study); pos += n_study
        sl_gsigma = slice(pos, pos + n_study); pos += n_study
    layout = _Layout(sl_mu, sl_sigma, sl_nu, sl_tau, sl_gmu, sl_gsigma, n_unpen, pos)
    return X, labels, layout


def _check_full_rank(X: np.ndarray, labels, what: str):
    if X.shape[1] == 0:
        return
    _, r, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(X.shape) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        bad = sorted(labels[j] for j in piv[rank:])
        raise ContractError(
            f"rank-deficient {what} design; collinear columns: {', '.join(bad)}")


# ---------------------------------------------------------------------------
# penalized objective

class FitProblem:
    """Assembled data, design, and penalty for one model fit."""

    def __init__(self, spec, enc, powers_mu, powers_sigma, rows, delta2=None):
        self.spec = spec
        self.enc = enc
        self.powers_mu = powers_mu
        self.powers_sigma = powers_sigma
        self.rows = rows
        self.X, self.labels, self.layout = _build_design(
            spec, enc, powers_mu, powers_sigma, rows)
        self.n_study = len(enc.study_levels)
        self.delta2 = dict(delta2 or {"mu": _DELTA2_INIT, "sigma": _DELTA2_INIT})

    # -- parameter plumbing -------------------------------------------------
    def split(self, theta):
        lay = self.layout
        parts = {"mu": theta[lay.mu], "sigma": theta[lay.sigma], "nu": theta[lay.nu]}
        if lay.tau is not None:
            parts["tau"] = theta[lay.tau]
        if lay.gamma_mu is not None:
            parts["gamma_mu"] = theta[lay.gamma_mu]
            parts["gamma_sigma"] = theta[lay.gamma_sigma]
        return parts

    def etas(self, theta):
        p = self.split(theta)
        eta_mu = self.X["mu"] @ p["mu"]
        eta_sigma = self.X["sigma"] @ p["sigma"]
        if "gamma_mu" in p:
            eta_mu = eta_mu + p["gamma_mu"][self.rows.study_idx]
            eta_sigma = eta_sigma + p["gamma_sigma"][self.rows.study_idx]
        out = {"mu": eta_mu, "sigma": eta_sigma, "nu": float(p["nu"][0])}
        if "tau" in p:
            out["tau"] = float(p["tau"][0])
        return out

    def params(self, theta):
        links = self.spec.link_set
        etas = self.etas(theta)
        out = {"mu": links.link("mu").invert(etas["mu"]),
               "sigma": links.link("sigma").invert(etas["sigma"]),
               "nu": float(links.link("nu").invert(etas["nu"]))}
        if "tau" in etas:
            out["tau"] = float(links.link("tau").invert(etas["tau"]))
        return out, etas

    def _family_logf_scores(self, params, want_scores=True):
        y = self.rows.y
        if self.spec.family == "GG":
            logf = families.gg_logpdf(y, params["mu"], params["sigma"], params["nu"])
            scores = None
            if want_scores:
                scores = dict(zip(("mu", "sigma", "nu"),
                                  families.gg_score(y, params["mu"], params["sigma"],
                                                    params["nu"])))
        else:
            logf = families.st1_logpdf(y, params["mu"], params["sigma"],
                                       params["nu"], params["tau"])
            scores = None
            if want_scores:
                scores = dict(zip(("mu", "sigma", "nu", "tau"),
                                  families.st1_score(y, params["mu"], params["sigma"],
                                                     params["nu"], params["tau"])))
        return logf, scores

    def objective(self, theta, want_grad=True, raise_nonfinite=False):
        """Penalized negative log-likelihood and its gradient.

        Returns (inf, None) on a non-finite likelihood unless
        raise_nonfinite is set, in which case the first offending record
        index is reported.
        """
        links = self.spec.link_set
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                params, etas = self.params(theta)
            except FloatingPointError:  # pragma: no cover
                return np.inf, None
            if self.spec.family == "GG" and (
                    np.any(~np.isfinite(params["mu"])) or np.any(params["mu"] <= 0)
                    or np.any(~np.isfinite(params["sigma"])) or np.any(params["sigma"] <= 0)
                    or params["nu"] == 0):
                if raise_nonfinite:
                    raise NumericalError("parameters left the family domain",
                                         index=int(np.argmax(~(params["mu"] > 0))))
                return np.inf, None
            if self.spec.family == "ST1" and (
                    np.any(~np.isfinite(params["sigma"])) or np.any(params["sigma"] <= 0)
                    or not params["tau"] > 0):
                if raise_nonfinite:
                    raise NumericalError("parameters left the family domain")
                return np.inf, None
            logf, scores = self._family_logf_scores(params, want_scores=want_grad)
            if not np.all(np.isfinite(logf)):
                if raise_nonfinite:
                    idx = int(np.argmax(~np.isfinite(logf)))
                    raise NumericalError(
                        f"non-finite log-likelihood at record {idx}", index=idx)
                return np.inf, None
            nll = -float(logf.sum())
            parts = self.split(theta)
            if "gamma_mu" in parts:
                nll += 0.5 * float(parts["gamma_mu"] @ parts["gamma_mu"]) / self.delta2["mu"]
                nll += 0.5 * float(parts["gamma_sigma"] @ parts["gamma_sigma"]) / self.delta2["sigma"]
            if not want_grad:
                return nll, None

            grad = np.zeros(self.layout.n_total)
            dmu = links.link("mu").dinvert(etas["mu"])
            dsigma = links.link("sigma").dinvert(etas["sigma"])
            s_mu = scores["mu"] * dmu
            s_sigma = scores["sigma"] * dsigma
            grad[self.layout.mu] = -(self.X["mu"].T @ s_mu)
            grad[self.layout.sigma] = -(self.X["sigma"].T @ s_sigma)
            dnu = float(links.link("nu").dinvert(np.asarray(etas["nu"])))
            grad[self.layout.nu] = -float(scores["nu"].sum()) * dnu
            if self.layout.tau is not None:
                dtau = float(links.link("tau").dinvert(np.asarray(etas["tau"])))
                grad[self.layout.tau] = -float(scores["tau"].sum()) * dtau
            if "gamma_mu" in parts:
                gm = -np.bincount(self.rows.study_idx, weights=s_mu,
                                  minlength=self.n_study)
                gs = -np.bincount(self.rows.study_idx, weights=s_sigma,
                                  minlength=self.n_study)
                grad[self.layout.gamma_mu] = gm + parts["gamma_mu"] / self.delta2["mu"]
                grad[self.layout.gamma_sigma] = gs + parts["gamma_sigma"] / self.delta2["sigma"]
            if not np.all(np.isfinite(grad)):
                if raise_nonfinite:
                    raise NumericalError("non-finite gradient")
                return np.inf, None
            return nll, grad

    def loglik(self, theta) -> float:
        """Unpenalized log-likelihood at theta."""
        params, _ = self.params(theta)
        logf, _ = self._family_logf_scores(params, want_scores=False)
        return float(logf.sum())

    def eta_param_score(self, theta, param, shift=0.0):
        """Per-record d log f / d eta_param, optionally at a shifted eta."""
        links = self.spec.link_set
        _, etas = self.params(theta)
        etas = dict(etas)
        etas[param] = etas[param] + shift
        params = {"mu": links.link("mu").invert(np.asarray(etas["mu"])),
                  "sigma": links.link("sigma").invert(np.asarray(etas["sigma"])),
                  "nu": float(links.link("nu").invert(np.asarray(etas["nu"])))}
        if "tau" in etas:
            params["tau"] = float(links.link("tau").invert(np.asarray(etas["tau"])))
        _, scores = self._family_logf_scores(params)
        dd = links.link(param).dinvert(np.asarray(etas[param]))
        return scores[param] * dd


def build_problem(data: Dataset, spec: ModelSpec, powers_mu: PowerSet,
                  powers_sigma: PowerSet, *, encoding=None, delta2=None) -> FitProblem:
    """Assemble the design and penalty for a fit; shared with every test of
    the objective-gradient contract."""
    enc = encoding or CovariateEncoding.from_data(data, spec)
    rows = _extract_rows(data, spec, enc)
    return FitProblem(spec, enc, powers_mu, powers_sigma, rows, delta2=delta2)


def negloglik_grad(problem: FitProblem, theta) -> tuple[float, np.ndarray]:
    """Penalized negative log-likelihood with analytic gradient.

    Raises NumericalError carrying the offending record index when the
    likelihood is not finite at theta.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.size != problem.layout.n_total:
        raise ContractError(
            f"theta has {theta.size} entries, design needs {problem.layout.n_total}")
    return problem.objective(theta, want_grad=True, raise_nonfinite=True)


# ---------------------------------------------------------------------------
# quasi-Newton minimizer

@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    grad_norm: float
    rel_change: float
    message: str
    trace: list


def minimize_bfgs(fun_grad, x0, *, gtol=1e-5, ftol=1e-8, max_iter=500,
                  max_halvings=30) -> OptimResult:
    """Dense BFGS with Armijo backtracking.

    Accepted steps never increase the objective; non-finite trial values
    simply halve the step (up to max_halvings times).
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    if not np.isfinite(f) or g is None:
        raise NumericalError("objective not finite at the starting point")
    n = x.size
    H = np.eye(n)
    trace = [f]
    rel_change = math.inf
    scaled = False
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm < gtol:
            return OptimResult(x, f, g, it - 1, True, gnorm, rel_change,
                               "gradient below tolerance", trace)
        d = -(H @ g)
        slope = float(d @ g)
        if not np.isfinite(slope) or slope >= 0.0:
            H = np.eye(n)
            d = -g
            slope = float(d @ g)
        t = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            xn = x + t * d
            fn, gn = fun_grad(xn)
            if np.isfinite(fn) and gn is not None and fn <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return OptimResult(x, f, g, it, gnorm < 1e-3 * (1.0 + abs(f)), gnorm,
                               rel_change, "line search failed", trace)
        s = xn - x
        yv = gn - g
        rel_change = abs(f - fn) / max(1.0, abs(f))
        x, f, g = xn, fn, gn
        trace.append(f)
        ys = float(yv @ s)
        if ys > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(yv)):
            if not scaled:
                H *= ys / float(yv @ yv)
                scaled = True
            rho = 1.0 / ys
            Hy = H @ yv
            H = (H - rho * (np.outer(Hy, s) + np.outer(s, Hy))
                 + (rho * rho * float(yv @ Hy) + rho) * np.outer(s, s))
        if rel_change < ftol:
            gnorm = float(np.max(np.abs(g)))
            return OptimResult(x, f, g, it, True, gnorm, rel_change,
                               "objective change below tolerance", trace)
    gnorm = float(np.max(np.abs(g)))
    return OptimResult(x, f, g, max_iter, False, gnorm, rel_change,
                       "iteration limit reached", trace)


def _numeric_hessian(grad_fn, x, rel_step=1e-5):
    n = x.size
    H = np.empty((n, n))
    for j in range(n):
        h = rel_step * (1.0 + abs(float(x[j])))
        xp = x.copy(); xp[j] += h
        xm = x.copy(); xm[j] -= h
        gp = grad_fn(xp)
        gm = grad_fn(xm)
        H[:, j] = (gp - gm) / (2.0 * h)
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# fitting

@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    n_iter: int
    grad_norm: float
    rel_change: float
    objective: float
    message: str
    n_outer: int = 1


@dataclass
class ChartModel:
    """A fitted chart: coefficients, encoding, and fit diagnostics."""

    spec: ModelSpec
    structure_id: str | None
    powers_mu: PowerSet
    powers_sigma: PowerSet
    encoding: CovariateEncoding
    coef: dict
    labels: dict
    se: dict | None
    study_coef: dict
    delta2: dict
    loglik: float
    bic: float
    n_obs: int
    k_params: int
    convergence: ConvergenceReport

    # -- prediction ---------------------------------------------------------
    def _predict_rows(self, age, sex, manufacturer, kvp, contrast, study):
        age = np.atleast_1d(np.asarray(age, dtype=float))
        n = age.size
        flags = set()

        def broadcast(v, fill):
            if v is None:
                return np.full(n, fill)
            arr = np.atleast_1d(np.asarray(v))
            if arr.size == 1 and n > 1:
                return np.full(n, arr[0])
            if arr.size != n:
                raise ContractError(
                    f"covariate length {arr.size} does not match {n} ages")
            return arr

        sex = broadcast(np.asarray(sex, dtype=object), "F")
        sex_m = (sex == "M").astype(float)
        enc = self.encoding
        manu = broadcast(np.asarray(manufacturer, dtype=object) if manufacturer is not None else None,
                         enc.manufacturer_levels[0])
        manu_idx = np.zeros(n, dtype=int)
        for i, m in enumerate(manu):
            if m in enc.manufacturer_levels:
                manu_idx[i] = enc.manufacturer_levels.index(m)
            else:
                manu_idx[i] = 0
                flags.add("unknown_manufacturer")
        kvp_arr = broadcast(np.asarray(kvp, dtype=float) if kvp is not None else None,
                            enc.kvp_center).astype(float)
        con = broadcast(np.asarray(contrast, dtype=float) if contrast is not None else None,
                        0.0).astype(float)
        study_idx = np.full(n, -1, dtype=int)
        if study is not None:
            st_arr = broadcast(np.asarray(study, dtype=object), "")
            for i, s in enumerate(st_arr):
                if s in enc.study_levels:
                    study_idx[i] = enc.study_levels.index(s)
        if np.any(age < enc.age_min) or np.any(age > enc.age_max):
            flags.add("age_extrapolation")
        rows = _Rows(y=np.zeros(n), age=age, sex_m=sex_m, manu_idx=manu_idx,
                     kvp=kvp_arr, contrast=con, study_idx=study_idx)
        return rows, flags

    def params_at(self, age, sex, manufacturer=None, kvp=None, contrast=None,
                  study=None):
        """Distribution parameters for covariate profiles.

        Unknown manufacturers map to the reference level with a flag;
        unknown or absent studies contribute no study effect. Returns
        (params dict of arrays, flags set).
        """
        rows, flags = self._predict_rows(age, sex, manufacturer, kvp, contrast, study)
        X, _, _ = _build_design(self.spec, self.encoding, self.powers_mu,
                                self.powers_sigma, rows)
        links = self.spec.link_set
        eta_mu = X["mu"] @ self.coef["mu"]
        eta_sigma = X["sigma"] @ self.coef["sigma"]
        if self.spec.study_effect_mode == "penalized_random" and self.study_coef:
            seen = rows.study_idx >= 0
            if np.any(seen):
                eta_mu = eta_mu + np.where(seen, self.study_coef["mu"][np.clip(rows.study_idx, 0, None)], 0.0)
                eta_sigma = eta_sigma + np.where(seen, self.study_coef["sigma"][np.clip(rows.study_idx, 0, None)], 0.0)
        out = {
            "mu": links.link("mu").invert(eta_mu),
            "sigma": links.link("sigma").invert(eta_sigma),
            "nu": float(links.link("nu").invert(np.asarray(self.coef["nu"][0]))),
        }
        if self.spec.family == "ST1":
            out["tau"] = float(links.link("tau").invert(np.asarray(self.coef["tau"][0])))
        return out, flags

    def family_params_at(self, age, sex, **kw) -> tuple[families.FamilyParams, set]:
        """Single-profile convenience wrapper around params_at."""
        params, flags = self.params_at(age, sex, **kw)
        tau = params.get("tau")
        return families.FamilyParams(
            self.spec.family, mu=float(params["mu"][0]),
            sigma=float(params["sigma"][0]), nu=params["nu"],
            tau=tau), flags

    def theta_vector(self) -> np.ndarray:
        parts = [self.coef["mu"], self.coef["sigma"], self.coef["nu"]]
        if self.spec.family == "ST1":
            parts.append(self.coef["tau"])
        if self.spec.study_effect_mode == "penalized_random" and self.study_coef:
            parts.extend([self.study_coef["mu"], self.study_coef["sigma"]])
        return np.concatenate(parts)


def _starting_theta(problem: FitProblem) -> np.ndarray:
    rows = problem.rows
    lay = problem.layout
    theta = np.zeros(lay.n_total)
    Xmu = problem.X["mu"]
    if problem.spec.family == "GG":
        target = np.log(rows.y)
    else:
        target = rows.y
    beta, *_ = np.linalg.lstsq(Xmu, target, rcond=None)
    theta[lay.mu] = beta
    resid = target - Xmu @ beta
    if problem.spec.family == "GG":
        s0 = float(np.std(resid))
        theta[lay.sigma.start] = math.log(min(max(s0, 1e-3), 10.0))
        theta[lay.nu.start] = 1.0
    else:
        mad = float(np.median(np.abs(resid - np.median(resid))))
        s0 = 1.4826 * mad if mad > 0 else float(np.std(resid))
        theta[lay.sigma.start] = math.log(min(max(s0, 1e-6), 1e6))
        theta[lay.nu.start] = 0.0
        theta[lay.tau.start] = math.log(10.0)
    return theta


def _study_posterior_vars(problem: FitProblem, theta) -> dict:
    """Approximate posterior variance of each study intercept.

    Uses the per-record curvature of the log-likelihood in the linear
    predictor (centered difference on eta) summed within study, plus the
    penalty curvature 1 / delta^2.
    """
    out = {}
    for param in ("mu", "sigma"):
        h = 1e-4
        up = problem.eta_param_score(theta, param, shift=h)
        dn = problem.eta_param_score(theta, param, shift=-h)
        w = -(up - dn) / (2.0 * h)
        w = np.clip(w, 1e-10, None)
        per_study = np.bincount(problem.rows.study_idx, weights=w,
                                minlength=problem.n_study)
        out[param] = 1.0 / (per_study + 1.0 / problem.delta2[param])
    return out


def _fit_problem(problem: FitProblem, *, start=None, compute_se=True,
                 fixed_delta2=None, max_iter=500, structure_id=None,
                 gtol=1e-5, ftol=1e-8) -> ChartModel:
    spec = problem.spec
    lay = problem.layout
    n = problem.rows.n
    if n < 10 * lay.n_unpenalized:
        raise ContractError(
            f"need at least {10 * lay.n_unpenalized} records for "
            f"{lay.n_unpenalized} coefficients, got {n}")
    _check_full_rank(problem.X["mu"], problem.labels["mu"], "location")
    _check_full_rank(problem.X["sigma"], problem.labels["sigma"], "scale")

    theta = np.asarray(start, dtype=float).copy() if start is not None \
        else _starting_theta(problem)
    if theta.size != lay.n_total:
        raise ContractError("starting vector does not match the design layout")

    fun = lambda x: problem.objective(x, want_grad=True)
    penalized = lay.gamma_mu is not None
    n_outer = 1
    if penalized and fixed_delta2 is not None:
        problem.delta2 = dict(fixed_delta2)
    res = minimize_bfgs(fun, theta, gtol=gtol, ftol=ftol, max_iter=max_iter)
    if penalized and fixed_delta2 is None:
        for outer in range(_OUTER_MAX):
            post = _study_posterior_vars(problem, res.x)
            parts = problem.split(res.x)
            new = {}
            for param, key in (("mu", "gamma_mu"), ("sigma", "gamma_sigma")):
                gam = parts[key]
                est = float(np.mean(gam * gam + post[param]))
                new[param] = min(max(est, _DELTA2_FLOOR), _DELTA2_CAP)
            rel = max(abs(new[p] - problem.delta2[p]) / max(problem.delta2[p], 1e-12)
                      for p in new)
            problem.delta2 = new
            res = minimize_bfgs(fun, res.x, gtol=gtol, ftol=ftol, max_iter=max_iter)
            n_outer += 1
            if rel < _OUTER_TOL:
                break

    report = ConvergenceReport(res.converged, res.n_iter, res.grad_norm,
                               res.rel_change, res.fun, res.message, n_outer)
    parts = problem.split(res.x)
    coef = {"mu": np.array(parts["mu"]), "sigma": np.array(parts["sigma"]),
            "nu": np.array(parts["nu"])}
    if spec.family == "ST1":
        coef["tau"] = np.array(parts["tau"])
    study_coef = {}
    if penalized:
        study_coef = {"mu": np.array(parts["gamma_mu"]),
                      "sigma": np.array(parts["gamma_sigma"])}

    loglik = problem.loglik(res.x)
    k = lay.n_unpenalized
    bic = k * math.log(n) - 2.0 * loglik

    se = None
    if compute_se:
        grad_only = lambda x: problem.objective(x, want_grad=True)[1]
        H = _numeric_hessian(grad_only, res.x)
        cov = np.linalg.pinv(H)
        sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        se = {"mu": sd[lay.mu], "sigma": sd[lay.sigma], "nu": sd[lay.nu]}
        if spec.family == "ST1":
            se["tau"] = sd[lay.tau]

    model = ChartModel(
        spec=spec, structure_id=structure_id, powers_mu=problem.powers_mu,
        powers_sigma=problem.powers_sigma, encoding=problem.enc, coef=coef,
        labels={k_: v for k_, v in problem.labels.items() if v},
        se=se, study_coef=study_coef, delta2=dict(problem.delta2),
        loglik=loglik, bic=bic, n_obs=n, k_params=k, convergence=report)
    if not res.converged:
        raise NumericalError(
            f"fit did not converge: {res.message} "
            f"(grad_norm={res.grad_norm:.3e}, rel_change={res.rel_change:.3e})",
            state=model)
    return model


def fit(data: Dataset, spec: ModelSpec, powers_mu: PowerSet,
        powers_sigma: PowerSet, *, compute_se=True, start=None,
        fixed_delta2=None, encoding=None, max_iter=500,
        structure_id=None) -> ChartModel:
    """Fit one chart model by penalized maximum likelihood.

    Preconditions: at least 10 records per unpenalized coefficient and a
    full-rank design. Raises ContractError on violated preconditions,
    NumericalError (carrying the best state seen) on non-convergence.
    """
    if spec.contrast_state is not None:
        states = {r.contrast for r in data}
        if states != {spec.contrast_state}:
            raise ContractError(
                f"model is tagged contrast_state={spec.contrast_state} but the "
                f"data contains contrast states {sorted(states)}")
    problem = build_problem(data, spec, powers_mu, powers_sigma, encoding=encoding)
    return _fit_problem(problem, start=start, compute_se=compute_se,
                        fixed_delta2=fixed_delta2, max_iter=max_iter,
                        structure_id=structure_id)


# ---------------------------------------------------------------------------
# FP selection by BIC

@dataclass(frozen=True)
class FPCandidate:
    stage: str
    powers_mu: PowerSet
    powers_sigma: PowerSet
    bic: float | None
    loglik: float | None
    converged: bool
    message: str


@dataclass
class FPSelection:
    powers_mu: PowerSet
    powers_sigma: PowerSet
    table: list


def select_fp(data: Dataset, spec: ModelSpec, *, max_degree=2,
              include_degree3_mu=False, max_iter=500) -> FPSelection:
    """Pick FP powers for the location and scale predictors by BIC.

    Stage A searches the location powers with a null scale basis, stage B
    searches the scale powers given the stage-A winner, and one refinement
    pass re-selects the location powers given the chosen scale basis. The
    null (no age term) basis is always a candidate in every stage.
    Candidates that fail to fit are recorded and skipped.
    """
    mu_cands = candidate_power_sets(3 if include_degree3_mu else max_degree)
    sigma_cands = candidate_power_sets(max_degree)
    cache = {}
    table = []

    def evaluate(stage, pm, ps):
        key = (pm.powers, ps.powers)
        if key in cache:
            bic, loglik, ok, msg = cache[key]
        else:
            try:
                model = fit(data, spec, pm, ps, compute_se=False, max_iter=max_iter)
                bic, loglik, ok, msg = model.bic, model.loglik, True, ""
            except NumericalError as exc:
                state = exc.state
                bic = loglik = None
                ok, msg = False, str(exc)
                if state is not None and state.convergence.grad_norm < 1e-2:
                    # near-converged fits still rank candidates usefully
                    bic, loglik = state.bic, state.loglik
            except ContractError as exc:
                bic = loglik = None
                ok, msg = False, str(exc)
            cache[key] = (bic, loglik, ok, msg)
        table.append(FPCandidate(stage, pm, ps, bic, loglik, ok, msg))
        return bic, ok

    def best(stage, pairs):
        winner, winner_bic = None, math.inf
        for pm, ps in pairs:
            bic, ok = evaluate(stage, pm, ps)
            if ok and bic is not None and bic < winner_bic:
                winner, winner_bic = (pm, ps), bic
        if winner is None:
            raise NumericalError(f"no FP candidate converged in stage {stage}")
        return winner

    null = PowerSet()
    (best_mu, _) = best("mu", [(pm, null) for pm in mu_cands])
    (_, best_sigma) = best("sigma", [(best_mu, ps) for ps in sigma_cands])
    (best_mu, _) = best("mu_refit", [(pm, best_sigma) for pm in mu_cands])
    return FPSelection(best_mu, best_sigma, table)


# ---------------------------------------------------------------------------
# diagnostics

def normal_plotting_positions(n: int) -> np.ndarray:
    i = np.arange(1, n + 1)
    return special.ndtri((i - 0.375) / (n + 0.25))


@dataclass
class QQSummary:
    ordered: np.ndarray
    theoretical: np.ndarray
    detrended: np.ndarray
    n: int
    clamped: int


def quantile_residuals(model: ChartModel, data: Dataset):
    """Normalized quantile residuals with a detrended QQ summary.

    The CDF is clamped to [1e-12, 1 - 1e-12] before the normal quantile
    transform; the clamp count is part of the summary.
    """
    rows_params, _ = model.params_at(
        age=data.column("age"), sex=data.column("sex"),
        manufacturer=data.column("manufacturer"), kvp=data.column("kvp"),
        contrast=data.column("contrast").astype(float),
        study=data.column("study"))
    y = data.response(model.spec.response)
    if model.spec.family == "GG":
        u = families.gg_cdf(y, rows_params["mu"], rows_params["sigma"],
                            rows_params["nu"])
    else:
        u = families.st1_cdf(y, rows_params["mu"], rows_params["sigma"],
                             rows_params["nu"], rows_params["tau"])
    lo, hi = 1e-12, 1.0 - 1e-12
    clamped = int(np.sum((u < lo) | (u > hi)))
    u = np.clip(u, lo, hi)
    r = special.ndtri(u)
    ordered = np.sort(r)
    theo = normal_plotting_positions(r.size)
    return r, QQSummary(ordered, theo, ordered - theo, r.size, clamped)


# ---------------------------------------------------------------------------
# study effects

@dataclass(frozen=True)
class StudyEffect:
    parameter: str
    study: str
    estimate: float       # link-scale intercept
    deviation: float      # percent for log links, native units otherwise
    units: str


def study_effects(model: ChartModel) -> tuple:
    """Per-study deviations from the population reference curve.

    Log-link parameters report 100 (exp(gamma) - 1) percent; identity-link
    parameters report the intercept in native response units.
    """
    if model.spec.study_effect_mode == "none":
        raise ContractError("model was fit without study effects")
    links = model.spec.link_set
    out = []
    native = "HU" if model.spec.response == "mean_hu" else "mL"
    for param in ("mu", "sigma"):
        link_name = getattr(links, param)
        if model.spec.study_effect_mode == "penalized_random":
            gammas = dict(zip(model.encoding.study_levels, model.study_coef[param]))
        else:
            labels = model.labels[param]
            coefs = model.coef[param]
            gammas = {lvl: 0.0 for lvl in model.encoding.study_levels}
            for lab, val in zip(labels, coefs):
                if lab.startswith("study:"):
                    gammas[lab.split(":", 1)[1]] = float(val)
        for study in model.encoding.study_levels:
            g = float(gammas[study])
            if link_name == "log":
                out.append(StudyEffect(param, study, g, 100.0 * math.expm1(g),
                                       "percent"))
            else:
                out.append(StudyEffect(param, study, g, g, native))
    return tuple(out)
