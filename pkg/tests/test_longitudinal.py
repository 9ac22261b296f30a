"""Baseline decomposition invariants and recovery of longitudinal change
coefficients on simulated repeated-scan cohorts."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refcharts import synthetic
from refcharts.data import Dataset, MeasurementRecord
from refcharts.errors import ContractError
from refcharts.fp import PowerSet
from refcharts.longitudinal import (
    decompose_age,
    fit_long_hu,
    fit_long_volume,
)


def rec(scan_id, subject_id, age, acquired=None, structure_id="liver", sex="F"):
    return MeasurementRecord(
        scan_id=scan_id, subject_id=subject_id, study="long1", age=age,
        sex=sex, manufacturer="A", kvp=120.0, contrast=False,
        structure_id=structure_id, volume_ml=1000.0, mean_hu=50.0,
        acquired=acquired)


class TestDecompose:
    def test_exact_identity_on_generated_cohort(self):
        data, _ = synthetic.make_long_volume_cohort(120, seed=401)
        idx = decompose_age(data)
        ages = data.column("age")
        assert np.all(idx.age_baseline + idx.time_since_baseline == ages)

    def test_baseline_constant_within_subject(self):
        # the stored baseline may drift an ulp per record to keep the
        # sum identity exact, never more
        data, _ = synthetic.make_long_volume_cohort(60, seed=402)
        idx = decompose_age(data)
        for subject in idx.subjects:
            mask = idx.subject_ids == subject
            base = idx.age_baseline[mask]
            assert np.ptp(base) <= 2 * np.spacing(base.max())

    def test_baseline_scan_has_zero_time(self):
        data, _ = synthetic.make_long_volume_cohort(60, seed=403)
        idx = decompose_age(data)
        scan_ids = data.column("scan_id")
        for subject, base_scan in idx.baseline_scan.items():
            mask = (idx.subject_ids == subject) & (scan_ids == base_scan)
            assert np.all(idx.time_since_baseline[mask] == 0.0)

    def test_undated_orders_by_age(self):
        data = Dataset([rec("s2", "p", 70.0), rec("s1", "p", 60.0)])
        idx = decompose_age(data)
        assert idx.baseline_scan["p"] == "s1"
        assert np.allclose(sorted(idx.time_since_baseline), [0.0, 10.0])

    def test_dated_orders_by_date(self):
        data = Dataset([
            rec("late", "p", 61.0, acquired="2021-05-01"),
            rec("base", "p", 60.0, acquired="2020-05-01"),
        ])
        idx = decompose_age(data)
        assert idx.baseline_scan["p"] == "base"

    def test_age_tie_breaks_on_scan_id(self):
        data = Dataset([rec("b", "p", 60.0), rec("a", "p", 60.0)])
        idx = decompose_age(data)
        assert idx.baseline_scan["p"] == "a"

    def test_mixed_dates_fall_back_to_age(self):
        # the dated scan would sort first by date, but one scan lacks a
        # date, so the subject orders by age instead
        data = Dataset([
            rec("s1", "p", 65.0, acquired="2019-01-01"),
            rec("s2", "p", 60.0),
        ])
        idx = decompose_age(data)
        assert idx.baseline_scan["p"] == "s2"

    def test_inconsistent_date_age_order_rejected(self):
        data = Dataset([
            rec("early", "p", 62.0, acquired="2020-01-01"),
            rec("late", "p", 60.0, acquired="2021-01-01"),
        ])
        with pytest.raises(ContractError, match="predates"):
            decompose_age(data)

    def test_multiple_structures_share_decomposition(self):
        data = Dataset([
            rec("s1", "p", 60.0), rec("s1", "p", 60.0, structure_id="spleen"),
            rec("s2", "p", 63.0), rec("s2", "p", 63.0, structure_id="spleen"),
        ])
        idx = decompose_age(data)
        ages = data.column("age")
        assert np.all(idx.age_baseline + idx.time_since_baseline == ages)
        assert np.all(idx.age_baseline == 60.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(min_value=18.0, max_value=119.0,
                              allow_nan=False), min_size=1, max_size=6))
    def test_identity_exact_for_arbitrary_ages(self, ages):
        records = [rec(f"s{i}", "p", a) for i, a in enumerate(ages)]
        idx = decompose_age(Dataset(records))
        col = np.asarray(ages, dtype=float)
        assert np.all(idx.age_baseline + idx.time_since_baseline == col)
        assert np.all(idx.time_since_baseline >= 0.0)


@pytest.fixture(scope="module")
def volume_fit():
    data, truth = synthetic.make_long_volume_cohort(
        350, seed=411, beta_time=-0.05, beta_time_age=-0.01,
        beta_time_sex=0.02, subject_sd=0.1, sigma=0.1)
    model = fit_long_volume(data, nu=truth["nu"])
    return model, truth


class TestLongVolume:
    def test_change_coefficients_recovered(self, volume_fit):
        model, truth = volume_fit
        est = dict(zip(model.labels, model.coef))
        se = dict(zip(model.labels, model.se))
        for lab, key in (("time", "beta_time"), ("time_x_ageb", "beta_time_age"),
                         ("time_x_sexM", "beta_time_sex")):
            assert abs(est[lab] - truth[key]) < 4 * se[lab], lab
        assert abs(est["time"] - truth["beta_time"]) < 0.02
        assert abs(est["intercept"] - truth["intercept"]) < 0.1
        assert abs(est["sex:M"] - truth["sex_coef"]) < 0.1

    def test_subject_variance_recovered(self, volume_fit):
        model, truth = volume_fit
        assert 0.4 * truth["subject_sd"] ** 2 < model.omega2 \
            < 2.5 * truth["subject_sd"] ** 2

    def test_subject_effects_track_truth(self, volume_fit):
        model, truth = volume_fit
        assert np.corrcoef(model.subject_effects, truth["subject_u"])[0, 1] > 0.7

    def test_scale_recovered(self, volume_fit):
        model, truth = volume_fit
        assert abs(model.sigma - truth["sigma"]) < 0.03

    def test_coefficient_table_percent_transform(self, volume_fit):
        model, _ = volume_fit
        rows = model.coefficient_table()
        assert len(rows) == len(model.labels)
        by_name = {r.name: r for r in rows}
        t = by_name["time"]
        assert t.transformed == pytest.approx(100.0 * math.expm1(t.estimate))
        assert t.transformed_units == "percent"
        assert by_name["intercept"].significant_bonferroni

    def test_deterministic(self, volume_fit):
        model, truth = volume_fit
        data, _ = synthetic.make_long_volume_cohort(
            350, seed=411, beta_time=-0.05, beta_time_age=-0.01,
            beta_time_sex=0.02, subject_sd=0.1, sigma=0.1)
        again = fit_long_volume(data, nu=truth["nu"])
        assert np.array_equal(model.coef, again.coef)


@pytest.fixture(scope="module")
def hu_fit():
    data, truth = synthetic.make_long_hu_cohort(
        350, seed=421, beta_time=-0.6, subject_sd=3.0, noise_sd=5.0)
    model = fit_long_hu(data)
    return model, truth


class TestLongHU:
    def test_time_slope_recovered(self, hu_fit):
        model, truth = hu_fit
        est = dict(zip(model.labels, model.coef))
        se = dict(zip(model.labels, model.se))
        assert abs(est["time"] - truth["beta_time"]) < 4 * se["time"]
        assert abs(est["time"] - truth["beta_time"]) < 0.4
        assert abs(est["intercept"] - truth["intercept"]) < 1.5
        assert abs(est["sex:M"] - truth["sex_coef"]) < 1.5

    def test_variance_components(self, hu_fit):
        model, truth = hu_fit
        assert 0.5 * truth["subject_sd"] ** 2 < model.omega2 \
            < 2.0 * truth["subject_sd"] ** 2
        assert 0.7 * truth["noise_sd"] ** 2 < model.sigma_e2 \
            < 1.4 * truth["noise_sd"] ** 2

    def test_subject_effects_shrunk_toward_zero(self, hu_fit):
        model, truth = hu_fit
        # shrinkage keeps the fitted effects smaller than raw means
        assert np.std(model.subject_effects) < 1.2 * truth["subject_sd"]
        assert np.corrcoef(model.subject_effects, truth["subject_u"])[0, 1] > 0.6

    def test_table_in_native_units(self, hu_fit):
        model, _ = hu_fit
        rows = model.coefficient_table()
        for r in rows:
            assert r.transformed == r.estimate
            assert r.transformed_units == "HU"

    def test_loglik_is_finite_and_plausible(self, hu_fit):
        model, _ = hu_fit
        per_obs = model.loglik / model.n_obs
        assert -6.0 < per_obs < -2.0  # Gaussian with sd around 5


class TestLongPreconditions:
    def test_all_baselines_rejected(self):
        data, _ = synthetic.make_long_volume_cohort(80, seed=431, max_scans=1)
        with pytest.raises(ContractError, match="repeated"):
            fit_long_volume(data, nu=1.5)

    def test_multiple_structures_rejected(self):
        data = Dataset([
            rec("s1", "p1", 60.0), rec("s2", "p1", 63.0),
            rec("s3", "p2", 50.0, structure_id="spleen"),
        ])
        with pytest.raises(ContractError, match="one structure"):
            fit_long_volume(data, nu=1.5)

    def test_bad_nu_rejected(self):
        data, _ = synthetic.make_long_volume_cohort(80, seed=432)
        with pytest.raises(ContractError, match="nu"):
            fit_long_volume(data, nu=0.0)

    def test_too_small_cohort(self):
        data, _ = synthetic.make_long_volume_cohort(8, seed=433)
        with pytest.raises(ContractError, match="at least"):
            fit_long_volume(data, nu=1.5)
