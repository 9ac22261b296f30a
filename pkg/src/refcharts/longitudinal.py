"""Longitudinal models for repeated scans of the same subject.

Cross-sectional charts treat every scan as independent; these models
split each subject's timeline into a baseline age and time since the
baseline scan, add within-subject change terms, and carry a penalized
per-subject intercept. Volumes keep their GG likelihood with the shape
frozen; attenuation uses a Gaussian identity model solved by absorbed
penalized least squares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import families
from .data import Dataset
from .errors import ContractError, NumericalError
from .fp import PowerSet, fp_design
from .gamlss import minimize_bfgs

_OMEGA2_FLOOR = 1e-10
_OMEGA2_INIT = 0.01


# ---------------------------------------------------------------------------
# baseline decomposition

@dataclass
class LongIndex:
    """Per-record baseline split, aligned with the dataset's record order."""

    subject_ids: np.ndarray
    age_baseline: np.ndarray
    time_since_baseline: np.ndarray
    baseline_scan: dict
    subjects: tuple

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)


def decompose_age(data: Dataset) -> LongIndex:
    """Split each record's age into baseline age plus elapsed time.

    The baseline scan is the subject's earliest by acquisition date when
    every scan of the subject carries one, otherwise the earliest by age;
    remaining ties break on scan_id. The identity age_baseline +
    time_since_baseline == age holds exactly in floating point: one round
    of compensated re-subtraction makes one of the two subtractions exact,
    at the cost of letting a record's stored baseline drift from the
    subject's by an ulp. A scan dated before the baseline but older in
    age (or vice versa) marks inconsistent input.
    """
    by_subject = {}
    for i, r in enumerate(data):
        by_subject.setdefault(r.subject_id, []).append((i, r))

    n = len(data)
    age_b = np.empty(n)
    time_b = np.empty(n)
    subject_ids = np.empty(n, dtype=object)
    baseline_scan = {}
    for subject, items in by_subject.items():
        scans = {}
        for i, r in items:
            scans.setdefault(r.scan_id, []).append((i, r))
        reps = {sid: recs[0][1] for sid, recs in scans.items()}
        dated = all(rep.acquired is not None for rep in reps.values())
        if dated:
            order = sorted(reps, key=lambda sid: (reps[sid].acquired, sid))
        else:
            order = sorted(reps, key=lambda sid: (reps[sid].age, sid))
        base_scan = order[0]
        base_age = reps[base_scan].age
        baseline_scan[subject] = base_scan
        for i, r in items:
            t = r.age - base_age
            if t < 0:
                raise ContractError(
                    f"subject {subject!r}: scan {r.scan_id!r} predates the "
                    f"baseline scan {base_scan!r} by age while following it "
                    f"in acquisition order")
            # Adjusting t alone cannot always reach the exact sum (the
            # rounded sums can straddle age), so re-derive the baseline
            # from t and t from that baseline: whichever of the pair lands
            # in [age/2, age] subtracts exactly by Sterbenz, and the two
            # then sum to age without rounding.
            base_i = r.age - t
            t = r.age - base_i
            if base_i + t != r.age:  # pragma: no cover
                raise NumericalError(
                    "failed to decompose age %r into baseline plus "
                    "elapsed time" % r.age)
            age_b[i] = base_i
            time_b[i] = t
            subject_ids[i] = subject

    return LongIndex(subject_ids, age_b, time_b, baseline_scan,
                     tuple(sorted(by_subject)))


# ---------------------------------------------------------------------------
# shared design

def _long_design(data, idx: LongIndex, powers: PowerSet, *, sex_term=True,
                 time_age=True, time_sex=True, divisor=10.0):
    n = len(data)
    sex_m = (data.column("sex") == "M").astype(float)
    cols = [np.ones(n)]
    labels = ["intercept"]
    if sex_term:
        cols.append(sex_m)
        labels.append("sex:M")
    if powers.degree > 0:
        F = fp_design(idx.age_baseline / divisor, powers)
        for j, lab in enumerate(powers.labels()):
            cols.append(F[:, j])
            labels.append(f"age_b:{lab}")
    t = idx.time_since_baseline
    cols.append(t)
    labels.append("time")
    if time_age:
        cols.append(t * idx.age_baseline / divisor)
        labels.append("time_x_ageb")
    if time_sex:
        cols.append(t * sex_m)
        labels.append("time_x_sexM")
    X = np.column_stack(cols)
    pos = {s: k for k, s in enumerate(idx.subjects)}
    subj = np.asarray([pos[s] for s in idx.subject_ids], dtype=int)
    return X, tuple(labels), subj


def _check_longitudinal(data, idx):
    if len(data.structures()) != 1:
        raise ContractError(
            f"longitudinal fits take one structure at a time, got "
            f"{data.structures()}")
    if float(np.max(idx.time_since_baseline)) <= 0.0:
        raise ContractError(
            "no repeated scans: every record is a baseline, so the change "
            "terms are unidentifiable")


# ---------------------------------------------------------------------------
# coefficient table

@dataclass(frozen=True)
class CoefficientRow:
    name: str
    estimate: float
    se: float
    z_value: float
    p_value: float
    transformed: float      # percent per unit for log links, estimate otherwise
    transformed_units: str
    significant_bonferroni: bool


def _coefficient_table(labels, est, se, *, log_link, native_units,
                       alpha=0.05) -> tuple:
    m = len(labels)
    rows = []
    for name, b, s in zip(labels, est, se):
        z = b / s if s > 0 else math.inf * np.sign(b) if b else 0.0
        p = 2.0 * float(special.ndtr(-abs(z))) if np.isfinite(z) else 0.0
        if log_link:
            rows.append(CoefficientRow(name, float(b), float(s), float(z), p,
                                       100.0 * math.expm1(b), "percent",
                                       p < alpha / m))
        else:
            rows.append(CoefficientRow(name, float(b), float(s), float(z), p,
                                       float(b), native_units, p < alpha / m))
    return tuple(rows)


# ---------------------------------------------------------------------------
# GG volume model with subject intercepts

@dataclass
class LongVolumeFit:
    labels: tuple
    coef: np.ndarray
    se: np.ndarray
    log_sigma: float
    nu: float
    omega2: float
    subjects: tuple
    subject_effects: np.ndarray
    loglik: float
    n_obs: int
    n_outer: int
    converged: bool

    @property
    def sigma(self) -> float:
        return math.exp(self.log_sigma)

    def coefficient_table(self) -> tuple:
        return _coefficient_table(self.labels, self.coef, self.se,
                                  log_link=True, native_units="mL")


def _gg_eta_scores(y, eta, log_sigma, nu):
    mu = np.exp(eta)
    sigma = math.exp(log_sigma)
    d_mu, d_sigma, _ = families.gg_score(y, mu, sigma, nu)
    return d_mu * mu, float(np.sum(d_sigma) * sigma)


def fit_long_volume(data: Dataset, *, nu, powers=PowerSet((1,)),
                    sex_term=True, time_age=True, time_sex=True,
                    divisor=10.0, max_outer=200, tol=1e-6) -> LongVolumeFit:
    """Fit log-volume change with penalized per-subject intercepts.

    The GG shape is frozen at the supplied nu (typically the value from
    the cross-sectional chart). Alternates a quasi-Newton update of the
    fixed effects and log-scale, a vectorized per-subject Newton update
    of the intercepts, and a moment update of the intercept variance.
    """
    if not np.isfinite(nu) or nu == 0:
        raise ContractError("nu must be finite and nonzero")
    idx = decompose_age(data)
    _check_longitudinal(data, idx)
    X, labels, subj = _long_design(data, idx, powers, sex_term=sex_term,
                                   time_age=time_age, time_sex=time_sex,
                                   divisor=divisor)
    y = data.response("volume_ml")
    n, k = X.shape
    n_subj = idx.n_subjects
    if n < 10 * k:
        raise ContractError(
            f"need at least {10 * k} records for {k} coefficients, got {n}")

    beta, *_ = np.linalg.lstsq(X, np.log(y), rcond=None)
    resid = np.log(y) - X @ beta
    log_sigma = math.log(min(max(float(np.std(resid)), 1e-3), 10.0))
    u = np.zeros(n_subj)
    omega2 = _OMEGA2_INIT

    def nll_grad(phi, u_fixed):
        b, ls = phi[:k], float(phi[k])
        if not np.all(np.isfinite(b)) or abs(ls) > 300.0:
            return np.inf, None
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            eta = X @ b + u_fixed[subj]
            mu = np.exp(eta)
            sigma = math.exp(ls)
            logf = families.gg_logpdf(y, mu, sigma, nu)
            if not np.all(np.isfinite(logf)):
                return np.inf, None
            s_eta, s_ls = _gg_eta_scores(y, eta, ls, nu)
            g = np.empty(k + 1)
            g[:k] = -(X.T @ s_eta)
            g[k] = -s_ls
            return -float(np.sum(logf)), g

    def eta_scores_at(b, ls, u_vec, shift=0.0):
        eta = X @ b + u_vec[subj] + shift
        s_eta, _ = _gg_eta_scores(y, eta, ls, nu)
        return s_eta

    phi = np.concatenate([beta, [log_sigma]])
    converged = False
    outer = 0
    for outer in range(1, max_outer + 1):
        prev_phi = phi.copy()
        prev_omega2 = omega2
        res = minimize_bfgs(lambda p: nll_grad(p, u), phi, gtol=1e-6,
                            max_iter=200)
        phi = res.x
        b, ls = phi[:k], float(phi[k])
        # subject intercepts: damped Newton, all subjects at once
        h = 1e-4
        for _ in range(8):
            s_eta = eta_scores_at(b, ls, u)
            w = -(eta_scores_at(b, ls, u, h) - eta_scores_at(b, ls, u, -h)) / (2 * h)
            w = np.clip(w, 1e-8, None)
            g_s = np.bincount(subj, weights=s_eta, minlength=n_subj) - u / omega2
            h_s = np.bincount(subj, weights=w, minlength=n_subj) + 1.0 / omega2
            step = np.clip(g_s / h_s, -1.0, 1.0)
            u = u + step
            if float(np.max(np.abs(step))) < 1e-10:
                break
        s_eta = eta_scores_at(b, ls, u)
        w = -(eta_scores_at(b, ls, u, h) - eta_scores_at(b, ls, u, -h)) / (2 * h)
        w = np.clip(w, 1e-8, None)
        h_s = np.bincount(subj, weights=w, minlength=n_subj) + 1.0 / omega2
        v = 1.0 / h_s
        omega2 = max(float(np.mean(u * u + v)), _OMEGA2_FLOOR)
        rel_phi = float(np.max(np.abs(phi - prev_phi)) /
                        (1.0 + np.max(np.abs(prev_phi))))
        rel_om = abs(omega2 - prev_omega2) / max(prev_omega2, 1e-12)
        if rel_phi < tol and rel_om < 100 * tol:
            converged = True
            break
    if not converged:
        raise NumericalError(
            f"longitudinal fit did not settle after {max_outer} rounds")

    b, ls = phi[:k], float(phi[k])
    eta = X @ b + u[subj]
    loglik = float(np.sum(families.gg_logpdf(y, np.exp(eta), math.exp(ls), nu)))

    # fixed-effect covariance: invert the (phi, u) Hessian of the penalized
    # objective blockwise; the u block is diagonal across subjects
    h = 1e-4
    s_up = eta_scores_at(b, ls, u, h)
    s_dn = eta_scores_at(b, ls, u, -h)
    w = np.clip(-(s_up - s_dn) / (2 * h), 1e-8, None)
    ls_up = eta_scores_at(b, ls + h, u)
    ls_dn = eta_scores_at(b, ls - h, u)
    c = -(ls_up - ls_dn) / (2 * h)  # mixed eta/log-sigma curvature per record

    H_bb = np.zeros((k + 1, k + 1))
    H_bb[:k, :k] = X.T @ (w[:, None] * X)
    H_bb[:k, k] = X.T @ c
    H_bb[k, :k] = H_bb[:k, k]

    def d_logsigma(ls_val):
        eta_ = X @ b + u[subj]
        _, s = _gg_eta_scores(y, eta_, ls_val, nu)
        return s

    H_bb[k, k] = -(d_logsigma(ls + h) - d_logsigma(ls - h)) / (2 * h)
    H_uu = np.bincount(subj, weights=w, minlength=n_subj) + 1.0 / omega2
    H_bu = np.zeros((k + 1, n_subj))
    for col in range(k):
        H_bu[col] = np.bincount(subj, weights=w * X[:, col], minlength=n_subj)
    H_bu[k] = np.bincount(subj, weights=c, minlength=n_subj)
    schur = H_bb - (H_bu / H_uu) @ H_bu.T
    cov = np.linalg.pinv(schur)
    se_all = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    return LongVolumeFit(labels=labels, coef=np.array(b), se=se_all[:k],
                         log_sigma=ls, nu=float(nu), omega2=omega2,
                         subjects=idx.subjects, subject_effects=np.array(u),
                         loglik=loglik, n_obs=n, n_outer=outer,
                         converged=converged)


# ---------------------------------------------------------------------------
# Gaussian attenuation model

@dataclass
class LongHUFit:
    labels: tuple
    coef: np.ndarray
    se: np.ndarray
    sigma_e2: float
    omega2: float
    subjects: tuple
    subject_effects: np.ndarray
    loglik: float
    n_obs: int
    n_outer: int
    converged: bool

    def coefficient_table(self) -> tuple:
        return _coefficient_table(self.labels, self.coef, self.se,
                                  log_link=False, native_units="HU")


def fit_long_hu(data: Dataset, *, powers=PowerSet((1,)), sex_term=True,
                time_age=True, time_sex=True, divisor=10.0, max_outer=500,
                tol=1e-8) -> LongHUFit:
    """Fit attenuation change as a Gaussian model with subject intercepts.

    Solves penalized least squares with the subject block absorbed in
    closed form, alternating with moment updates of the two variance
    components. The marginal likelihood has a closed form because the
    covariance is block diagonal by subject.
    """
    idx = decompose_age(data)
    _check_longitudinal(data, idx)
    X, labels, subj = _long_design(data, idx, powers, sex_term=sex_term,
                                   time_age=time_age, time_sex=time_sex,
                                   divisor=divisor)
    y = data.response("mean_hu")
    n, k = X.shape
    n_subj = idx.n_subjects
    if n < 10 * k:
        raise ContractError(
            f"need at least {10 * k} records for {k} coefficients, got {n}")
    counts = np.bincount(subj, minlength=n_subj).astype(float)

    def absorb(value, lam):
        """Apply I - Z diag(1/(n_s + lam)) Z' column-wise."""
        v = np.atleast_2d(value.T).T
        out = np.empty_like(v)
        for j in range(v.shape[1]):
            sums = np.bincount(subj, weights=v[:, j], minlength=n_subj)
            out[:, j] = v[:, j] - (sums / (counts + lam))[subj]
        return out if value.ndim > 1 else out[:, 0]

    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    sigma_e2 = max(float(np.var(resid)), 1e-8)
    omega2 = max(0.1 * sigma_e2, _OMEGA2_FLOOR)
    converged = False
    outer = 0
    for outer in range(1, max_outer + 1):
        lam = sigma_e2 / omega2
        MX = absorb(X, lam)
        My = absorb(y, lam)
        xtmx = X.T @ MX
        beta = np.linalg.solve(xtmx, X.T @ My)
        r = y - X @ beta
        sums = np.bincount(subj, weights=r, minlength=n_subj)
        u = sums / (counts + lam)
        v = sigma_e2 / (counts + lam)
        new_omega2 = max(float(np.mean(u * u + v)), _OMEGA2_FLOOR)
        eps = r - u[subj]
        new_sigma_e2 = float((np.sum(eps * eps) + np.sum(counts * v)) / n)
        rel = max(abs(new_omega2 - omega2) / max(omega2, 1e-12),
                  abs(new_sigma_e2 - sigma_e2) / max(sigma_e2, 1e-12))
        omega2, sigma_e2 = new_omega2, new_sigma_e2
        if rel < tol:
            converged = True
            break
    if not converged:
        raise NumericalError(
            f"variance components did not settle after {max_outer} rounds")

    lam = sigma_e2 / omega2
    MX = absorb(X, lam)
    cov = sigma_e2 * np.linalg.inv(X.T @ MX)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    r = y - X @ beta
    sums = np.bincount(subj, weights=r, minlength=n_subj)
    u = sums / (counts + lam)

    # marginal Gaussian log-likelihood, block diagonal by subject
    quad = float(np.sum(r * absorb(r, lam))) / sigma_e2
    logdet = float(np.sum((counts - 1) * math.log(sigma_e2)
                          + np.log(sigma_e2 + counts * omega2)))
    loglik = -0.5 * (n * math.log(2 * math.pi) + logdet + quad)

    return LongHUFit(labels=labels, coef=np.array(beta), se=se,
                     sigma_e2=sigma_e2, omega2=omega2, subjects=idx.subjects,
                     subject_effects=np.array(u), loglik=loglik, n_obs=n,
                     n_outer=outer, converged=converged)
