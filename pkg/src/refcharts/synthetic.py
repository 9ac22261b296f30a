"""Synthetic cohort generators with known ground truth.

Every generator returns (Dataset, truth) where truth holds the exact
link-scale coefficients keyed by the labels the fitting engine assigns,
so recovery tests can compare estimate tables directly. Study intercepts
are drawn once per study and centered, keeping the population intercept
identified at its nominal value.
"""

from __future__ import annotations

import numpy as np

from . import families
from .data import Dataset, MeasurementRecord
from .fp import PowerSet, fp_design

_DEF_MU_GG = {"intercept": np.log(150.0), "sex:M": 0.15,
              "manufacturer:B": -0.05, "kvp": 0.002, "contrast": 0.08}
_DEF_SIGMA_GG = {"intercept": np.log(0.18), "sex:M": 0.05}
_DEF_MU_ST1 = {"intercept": 55.0, "sex:M": 3.0, "manufacturer:B": -2.0,
               "kvp": -0.05}
_DEF_SIGMA_ST1 = {"intercept": np.log(8.0), "sex:M": 0.1}


def _balanced_labels(n, labels, weights, rng):
    counts = np.floor(np.asarray(weights, dtype=float) / np.sum(weights) * n).astype(int)
    while counts.sum() < n:
        counts[int(np.argmin(counts / np.asarray(weights, dtype=float)))] += 1
    out = np.repeat(np.asarray(labels, dtype=object), counts)
    rng.shuffle(out)
    return out


def draw_covariates(n, rng, *, n_studies=3, p_contrast=0.5, age_range=(20.0, 90.0)):
    """Covariate draws with deterministic factor-level frequencies."""
    age = rng.uniform(age_range[0], age_range[1], size=n)
    sex = np.where(rng.random(n) < 0.5, "M", "F").astype(object)
    manufacturer = _balanced_labels(n, ["A", "B"], [0.6, 0.4], rng)
    kvp = _balanced_labels(n, [100.0, 120.0, 140.0], [0.25, 0.5, 0.25], rng).astype(float)
    contrast = rng.random(n) < p_contrast
    studies = [f"study{k + 1}" for k in range(n_studies)]
    study = _balanced_labels(n, studies, np.ones(n_studies), rng)
    return {"age": age, "sex": sex, "manufacturer": manufacturer, "kvp": kvp,
            "contrast": contrast, "study": study, "study_levels": studies}


def _age_terms(age, powers: PowerSet, coef: dict, divisor=10.0):
    if powers.degree == 0:
        return np.zeros_like(age)
    X = fp_design(age / divisor, powers)
    out = np.zeros_like(age)
    for j, lab in enumerate(powers.labels()):
        out += coef[f"age:{lab}"] * X[:, j]
    return out


def _centered_gammas(rng, n_studies, sd):
    if n_studies < 2 or sd == 0:
        return np.zeros(n_studies)
    g = rng.normal(0.0, sd, size=n_studies)
    return g - g.mean()


def _records(cov, volume, hu, structure_id, prefix="s"):
    recs = []
    for i in range(volume.size):
        recs.append(MeasurementRecord(
            scan_id=f"{prefix}{i:06d}", subject_id=f"p{i:06d}",
            study=str(cov["study"][i]), age=float(cov["age"][i]),
            sex=str(cov["sex"][i]), manufacturer=str(cov["manufacturer"][i]),
            kvp=float(cov["kvp"][i]), contrast=bool(cov["contrast"][i]),
            structure_id=structure_id, volume_ml=float(volume[i]),
            mean_hu=float(hu[i])))
    return recs


def make_gg_cohort(n, seed, *, n_studies=3, study_sd=(0.05, 0.03),
                   powers_mu=(1,), powers_sigma=(), coef_mu=None,
                   coef_sigma=None, nu=1.5, age_mu_coef=-0.06,
                   age_sigma_coef=0.02, p_contrast=0.5,
                   structure_id="liver", age_range=(20.0, 90.0)):
    """Volume cohort from a GG truth with study-level intercept shifts."""
    rng = np.random.default_rng(seed)
    cov = draw_covariates(n, rng, n_studies=n_studies, p_contrast=p_contrast,
                          age_range=age_range)
    pm, ps = PowerSet(powers_mu), PowerSet(powers_sigma)
    cm = dict(_DEF_MU_GG)
    for j, lab in enumerate(pm.labels()):
        cm[f"age:{lab}"] = age_mu_coef if j == 0 else age_mu_coef / (j + 1)
    cm.update(coef_mu or {})
    cs = dict(_DEF_SIGMA_GG)
    for j, lab in enumerate(ps.labels()):
        cs[f"age:{lab}"] = age_sigma_coef if j == 0 else age_sigma_coef / (j + 1)
    cs.update(coef_sigma or {})

    gam_mu = _centered_gammas(rng, n_studies, study_sd[0])
    gam_sigma = _centered_gammas(rng, n_studies, study_sd[1])
    s_idx = np.asarray([cov["study_levels"].index(s) for s in cov["study"]])

    sex_m = (cov["sex"] == "M").astype(float)
    manu_b = (cov["manufacturer"] == "B").astype(float)
    eta_mu = (cm["intercept"] + cm["sex:M"] * sex_m + cm["manufacturer:B"] * manu_b
              + cm["kvp"] * (cov["kvp"] - 120.0) + cm["contrast"] * cov["contrast"]
              + _age_terms(cov["age"], pm, cm) + gam_mu[s_idx])
    eta_sigma = (cs["intercept"] + cs["sex:M"] * sex_m
                 + _age_terms(cov["age"], ps, cs) + gam_sigma[s_idx])
    mu = np.exp(eta_mu)
    sigma = np.exp(eta_sigma)
    volume = families.gg_sample(mu, sigma, nu, n, rng)
    hu = rng.normal(50.0, 10.0, size=n)

    data = Dataset(_records(cov, volume, hu, structure_id))
    truth = {"family": "GG", "coef_mu": cm, "coef_sigma": cs, "nu": float(nu),
             "powers_mu": pm, "powers_sigma": ps, "gamma_mu": gam_mu,
             "gamma_sigma": gam_sigma, "study_levels": cov["study_levels"],
             "study_sd": study_sd}
    return data, truth


def make_st1_cohort(n, seed, *, n_studies=3, study_sd=(1.5, 0.05),
                    powers_mu=(1,), powers_sigma=(), coef_mu=None,
                    coef_sigma=None, nu=0.4, tau=8.0, age_mu_coef=-1.5,
                    age_sigma_coef=0.03, structure_id="liver",
                    age_range=(20.0, 90.0), contrast_state=False):
    """Attenuation cohort from an ST1 truth, single contrast state."""
    rng = np.random.default_rng(seed)
    cov = draw_covariates(n, rng, n_studies=n_studies, p_contrast=0.0,
                          age_range=age_range)
    cov["contrast"] = np.full(n, bool(contrast_state))
    pm, ps = PowerSet(powers_mu), PowerSet(powers_sigma)
    cm = dict(_DEF_MU_ST1)
    for j, lab in enumerate(pm.labels()):
        cm[f"age:{lab}"] = age_mu_coef if j == 0 else age_mu_coef / (j + 1)
    cm.update(coef_mu or {})
    cs = dict(_DEF_SIGMA_ST1)
    for j, lab in enumerate(ps.labels()):
        cs[f"age:{lab}"] = age_sigma_coef if j == 0 else age_sigma_coef / (j + 1)
    cs.update(coef_sigma or {})

    gam_mu = _centered_gammas(rng, n_studies, study_sd[0])
    gam_sigma = _centered_gammas(rng, n_studies, study_sd[1])
    s_idx = np.asarray([cov["study_levels"].index(s) for s in cov["study"]])

    sex_m = (cov["sex"] == "M").astype(float)
    manu_b = (cov["manufacturer"] == "B").astype(float)
    mu = (cm["intercept"] + cm["sex:M"] * sex_m + cm["manufacturer:B"] * manu_b
          + cm["kvp"] * (cov["kvp"] - 120.0) + _age_terms(cov["age"], pm, cm)
          + gam_mu[s_idx])
    sigma = np.exp(cs["intercept"] + cs["sex:M"] * sex_m
                   + _age_terms(cov["age"], ps, cs) + gam_sigma[s_idx])
    hu = families.st1_sample(mu, sigma, nu, tau, n, rng)
    volume = np.exp(rng.normal(4.5, 0.3, size=n))

    data = Dataset(_records(cov, volume, hu, structure_id))
    truth = {"family": "ST1", "coef_mu": cm, "coef_sigma": cs, "nu": float(nu),
             "tau": float(tau), "powers_mu": pm, "powers_sigma": ps,
             "gamma_mu": gam_mu, "gamma_sigma": gam_sigma,
             "study_levels": cov["study_levels"], "study_sd": study_sd}
    return data, truth


def make_long_volume_cohort(n_subjects, seed, *, max_scans=4,
                            beta_time=-0.02, beta_time_age=-0.004,
                            beta_time_sex=0.005, subject_sd=0.08,
                            sigma=0.12, nu=1.8, age_coef=-0.05,
                            structure_id="liver", with_dates=True):
    """Repeated-scan volume cohort with per-subject intercepts.

    Truth model on log mu: intercept + sex + baseline-age trend +
    time terms (elapsed years, elapsed x baseline-age decade, elapsed x
    male) + subject intercept. Subjects with an even index carry acquired
    dates so both baseline-ordering paths get exercised.
    """
    rng = np.random.default_rng(seed)
    b0, bsex = np.log(150.0), 0.15
    recs = []
    u = rng.normal(0.0, subject_sd, size=n_subjects)
    u = u - u.mean()
    scan = 0
    for s in range(n_subjects):
        n_scans = int(rng.integers(1, max_scans + 1))
        age_b = float(rng.uniform(25.0, 80.0))
        sex = "M" if rng.random() < 0.5 else "F"
        sex_m = 1.0 if sex == "M" else 0.0
        gaps = rng.uniform(0.5, 3.0, size=n_scans - 1) if n_scans > 1 else np.zeros(0)
        times = np.concatenate([[0.0], np.cumsum(gaps)])
        for t in times:
            eta = (b0 + bsex * sex_m + age_coef * (age_b / 10.0)
                   + beta_time * t + beta_time_age * t * (age_b / 10.0)
                   + beta_time_sex * t * sex_m + u[s])
            vol = float(families.gg_sample(np.exp(eta), sigma, nu, 1, rng)[0])
            acquired = None
            if with_dates and s % 2 == 0:
                # fixed-width offset keeps lexicographic order = scan order
                acquired = f"2015-01-01+{t:09.4f}"
            recs.append(MeasurementRecord(
                scan_id=f"L{scan:06d}", subject_id=f"subj{s:05d}",
                study="long1", age=age_b + t, sex=sex, manufacturer="A",
                kvp=120.0, contrast=False, structure_id=structure_id,
                volume_ml=vol, mean_hu=float(rng.normal(50, 8)),
                acquired=acquired))
            scan += 1
    truth = {"beta_time": beta_time, "beta_time_age": beta_time_age,
             "beta_time_sex": beta_time_sex, "subject_sd": subject_sd,
             "sigma": sigma, "nu": nu, "age_coef": age_coef,
             "intercept": b0, "sex_coef": bsex, "subject_u": u}
    return Dataset(recs), truth


def make_long_hu_cohort(n_subjects, seed, *, max_scans=4, beta_time=-0.3,
                        subject_sd=3.0, noise_sd=5.0, age_coef=-1.0,
                        structure_id="liver"):
    """Repeated-scan attenuation cohort with Gaussian within-subject noise."""
    rng = np.random.default_rng(seed)
    b0, bsex = 55.0, 3.0
    u = rng.normal(0.0, subject_sd, size=n_subjects)
    u = u - u.mean()
    recs = []
    scan = 0
    for s in range(n_subjects):
        n_scans = int(rng.integers(1, max_scans + 1))
        age_b = float(rng.uniform(25.0, 80.0))
        sex = "M" if rng.random() < 0.5 else "F"
        sex_m = 1.0 if sex == "M" else 0.0
        gaps = rng.uniform(0.5, 3.0, size=n_scans - 1) if n_scans > 1 else np.zeros(0)
        times = np.concatenate([[0.0], np.cumsum(gaps)])
        for t in times:
            mean = (b0 + bsex * sex_m + age_coef * (age_b / 10.0)
                    + beta_time * t + u[s])
            hu = float(rng.normal(mean, noise_sd))
            recs.append(MeasurementRecord(
                scan_id=f"H{scan:06d}", subject_id=f"subj{s:05d}",
                study="long1", age=age_b + t, sex=sex, manufacturer="A",
                kvp=120.0, contrast=False, structure_id=structure_id,
                volume_ml=float(np.exp(rng.normal(4.5, 0.3))),
                mean_hu=hu))
            scan += 1
    truth = {"beta_time": beta_time, "subject_sd": subject_sd,
             "noise_sd": noise_sd, "age_coef": age_coef, "intercept": b0,
             "sex_coef": bsex, "subject_u": u}
    return Dataset(recs), truth


def make_lowrank_fixture(n_scans=200, n_structures=20, seed=7, *,
                         rank=5, missing=0.15, corrupt_scan=17,
                         corrupt_structure=7, shift=None, noise_sd=0.05):
    """Scan-by-structure log-volume matrix with one corrupted entry.

    The clean matrix is exactly rank ``rank`` with component energies far
    above the corruption energy, so a factorization of matching rank has
    no spare capacity to absorb the planted spike. Returns ``(matrix,
    mask, corrupt_scan)``; the corrupted entry is always observed.
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n_scans, rank))
    v = rng.normal(size=(n_structures, rank))
    matrix = u @ v.T + rng.normal(0.0, noise_sd, size=(n_scans, n_structures))
    mask = rng.random((n_scans, n_structures)) >= missing
    mask[corrupt_scan, corrupt_structure] = True
    # every scan keeps enough structures to stay eligible for flagging
    for i in range(n_scans):
        while mask[i].sum() < 8:
            mask[i, rng.integers(n_structures)] = True
    if shift is None:
        shift = np.log(10.0)
    matrix[corrupt_scan, corrupt_structure] += shift
    return matrix, mask, corrupt_scan


def make_curation_cohort(n_scans=60, n_structures=10, seed=5, *,
                         rank=5, noise_sd=0.02, mad_scan=3, mad_structure=2,
                         mad_shift=15.0, drift_scan=11, drift_shift=1.0):
    """Multi-structure volume dataset with both kinds of planted outlier.

    One (scan, structure) measurement is shifted far outside its
    structure's cross-scan spread; a second scan's every measurement
    drifts by an amount too small for the per-structure screen but far
    outside the factorization's noise floor. Returns ``(dataset,
    mad_scan_id, drift_scan_id)``.
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n_scans, rank))
    v = rng.normal(size=(n_structures, rank))
    logvol = u @ v.T + rng.normal(0.0, noise_sd, size=(n_scans, n_structures))
    logvol[mad_scan, mad_structure] += mad_shift
    logvol[drift_scan] += drift_shift
    recs = []
    for i in range(n_scans):
        for j in range(n_structures):
            recs.append(MeasurementRecord(
                scan_id=f"c{i:04d}", subject_id=f"p{i:04d}", study="study1",
                age=50.0, sex="F", manufacturer="A", kvp=120.0,
                contrast=False, structure_id=f"organ{j:02d}",
                volume_ml=float(np.exp(logvol[i, j])), mean_hu=40.0))
    return Dataset(recs), f"c{mad_scan:04d}", f"c{drift_scan:04d}"
