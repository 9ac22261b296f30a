"""Engine tests: objective gradients against finite differences, parameter
recovery on synthetic cohorts, study-effect behavior, FP selection, and the
diagnostic surfaces."""

import math

import numpy as np
import pytest

from refcharts import gamlss, synthetic
from refcharts.errors import ContractError, NumericalError
from refcharts.fp import PowerSet
from refcharts.gamlss import (
    ChartModel,
    CovariateEncoding,
    ModelSpec,
    build_problem,
    fit,
    minimize_bfgs,
    negloglik_grad,
    normal_plotting_positions,
    quantile_residuals,
    select_fp,
    study_effects,
)

GG_SPEC = ModelSpec(family="GG", response="volume_ml")
ST1_SPEC = ModelSpec(family="ST1", response="mean_hu")


def _fd_gradient(problem, theta, h_scale=1e-6):
    g = np.empty_like(theta)
    for j in range(theta.size):
        h = h_scale * (1.0 + abs(theta[j]))
        tp = theta.copy(); tp[j] += h
        tm = theta.copy(); tm[j] -= h
        fp_, _ = problem.objective(tp, want_grad=False)
        fm_, _ = problem.objective(tm, want_grad=False)
        g[j] = (fp_ - fm_) / (2 * h)
    return g


class TestGradient:
    @pytest.mark.parametrize("family,mode", [
        ("GG", "penalized_random"), ("GG", "fixed"), ("GG", "none"),
        ("ST1", "penalized_random"), ("ST1", "none"),
    ])
    def test_matches_finite_differences(self, family, mode):
        if family == "GG":
            data, _ = synthetic.make_gg_cohort(400, seed=11)
            spec = ModelSpec(family="GG", response="volume_ml",
                             study_effect_mode=mode)
        else:
            data, _ = synthetic.make_st1_cohort(400, seed=12)
            spec = ModelSpec(family="ST1", response="mean_hu",
                             study_effect_mode=mode)
        problem = build_problem(data, spec, PowerSet((1,)), PowerSet(),
                                delta2={"mu": 0.05, "sigma": 0.05})
        rng = np.random.default_rng(99)
        base = gamlss._starting_theta(problem)
        for _ in range(3):
            theta = base + rng.normal(0.0, 0.05, size=base.size)
            f, g = negloglik_grad(problem, theta)
            assert np.isfinite(f)
            fd = _fd_gradient(problem, theta)
            scale = 1.0 + np.abs(fd)
            assert np.max(np.abs(g - fd) / scale) < 1e-5

    def test_nonfinite_point_reports_error(self):
        data, _ = synthetic.make_gg_cohort(200, seed=5)
        problem = build_problem(data, GG_SPEC, PowerSet((1,)), PowerSet())
        theta = gamlss._starting_theta(problem)
        theta[problem.layout.sigma.start] = -400.0  # scale collapses to ~0
        with pytest.raises(NumericalError):
            negloglik_grad(problem, theta)

    def test_theta_length_checked(self):
        data, _ = synthetic.make_gg_cohort(200, seed=5)
        problem = build_problem(data, GG_SPEC, PowerSet((1,)), PowerSet())
        with pytest.raises(ContractError, match="entries"):
            negloglik_grad(problem, np.zeros(3))


class TestMinimizer:
    def test_quadratic_exact(self):
        A = np.array([[3.0, 1.0], [1.0, 2.0]])
        b = np.array([1.0, -2.0])
        fun = lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b)
        res = minimize_bfgs(fun, np.zeros(2))
        assert res.converged
        assert np.allclose(res.x, np.linalg.solve(A, b), atol=1e-6)

    def test_rosenbrock(self):
        def fun(x):
            f = (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
            g = np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2),
                          200 * (x[1] - x[0] ** 2)])
            return f, g
        res = minimize_bfgs(fun, np.array([-1.2, 1.0]), max_iter=2000)
        assert res.converged
        assert np.allclose(res.x, [1.0, 1.0], atol=1e-4)

    def test_trace_never_increases(self):
        def fun(x):
            f = (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
            g = np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2),
                          200 * (x[1] - x[0] ** 2)])
            return f, g
        res = minimize_bfgs(fun, np.array([-1.2, 1.0]), max_iter=2000)
        trace = np.asarray(res.trace)
        assert np.all(np.diff(trace) <= 0)

    def test_deterministic(self):
        fun = lambda x: (float(np.sum((x - 3) ** 4)), 4 * (x - 3) ** 3)
        r1 = minimize_bfgs(fun, np.zeros(3))
        r2 = minimize_bfgs(fun, np.zeros(3))
        assert np.array_equal(r1.x, r2.x) and r1.n_iter == r2.n_iter

    def test_nonfinite_start_raises(self):
        fun = lambda x: (math.inf, None)
        with pytest.raises(NumericalError):
            minimize_bfgs(fun, np.zeros(2))


@pytest.fixture(scope="module")
def gg_fitted():
    data, truth = synthetic.make_gg_cohort(4000, seed=21, study_sd=(0.05, 0.03))
    model = fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"])
    return model, truth


@pytest.fixture(scope="module")
def st1_fitted():
    data, truth = synthetic.make_st1_cohort(4000, seed=31)
    model = fit(data, ST1_SPEC, truth["powers_mu"], truth["powers_sigma"],
                compute_se=False)
    return model, truth


class TestRecoveryGG:
    def test_mu_coefficients(self, gg_fitted):
        model, truth = gg_fitted
        est = dict(zip(model.labels["mu"], model.coef["mu"]))
        for lab, val in truth["coef_mu"].items():
            tol = 0.002 if lab == "kvp" else 0.05
            assert abs(est[lab] - val) < tol, lab

    def test_sigma_and_nu(self, gg_fitted):
        model, truth = gg_fitted
        est = dict(zip(model.labels["sigma"], model.coef["sigma"]))
        assert abs(est["intercept"] - truth["coef_sigma"]["intercept"]) < 0.08
        assert abs(est["sex:M"] - truth["coef_sigma"]["sex:M"]) < 0.08
        assert abs(float(model.coef["nu"][0]) - truth["nu"]) < 0.35

    def test_study_intercepts_track_truth(self, gg_fitted):
        model, truth = gg_fitted
        est = model.study_coef["mu"]
        # shrinkage keeps them within the truth's scale and ordering
        assert np.corrcoef(est, truth["gamma_mu"])[0, 1] > 0.5 or \
            np.max(np.abs(truth["gamma_mu"])) < 0.02

    def test_se_reported_positive(self, gg_fitted):
        model, _ = gg_fitted
        assert model.se is not None
        assert np.all(model.se["mu"] > 0)
        assert model.se["mu"].shape == model.coef["mu"].shape

    def test_bic_formula(self, gg_fitted):
        model, _ = gg_fitted
        expect = model.k_params * math.log(model.n_obs) - 2.0 * model.loglik
        assert model.bic == pytest.approx(expect, rel=1e-12)

    def test_deterministic_refit(self, gg_fitted):
        model, truth = gg_fitted
        data, _ = synthetic.make_gg_cohort(4000, seed=21, study_sd=(0.05, 0.03))
        again = fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"])
        assert np.array_equal(model.coef["mu"], again.coef["mu"])
        assert np.array_equal(model.coef["sigma"], again.coef["sigma"])


class TestRecoveryST1:
    def test_mu_coefficients(self, st1_fitted):
        model, truth = st1_fitted
        est = dict(zip(model.labels["mu"], model.coef["mu"]))
        for lab, val in truth["coef_mu"].items():
            # location and skewness trade off in finite samples, so the
            # intercept gets a wider band than the slope contrasts
            tol = {"kvp": 0.02, "intercept": 2.5}.get(lab, 1.0)
            assert abs(est[lab] - val) < tol, lab

    def test_shape_parameters(self, st1_fitted):
        model, truth = st1_fitted
        links = model.spec.link_set
        tau_hat = links.link("tau").invert(np.asarray(model.coef["tau"][0]))
        assert abs(float(model.coef["nu"][0]) - truth["nu"]) < 0.3
        assert 0.4 * truth["tau"] < float(tau_hat) < 3.0 * truth["tau"]


class TestStudyEffects:
    def test_penalized_percent_scale(self):
        data, truth = synthetic.make_gg_cohort(1500, seed=41, n_studies=4,
                                               study_sd=(0.3, 0.02))
        model = fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"],
                    compute_se=False)
        effects = {(e.parameter, e.study): e for e in study_effects(model)}
        for i, lvl in enumerate(model.encoding.study_levels):
            e = effects[("mu", lvl)]
            g = float(model.study_coef["mu"][i])
            assert e.estimate == pytest.approx(g)
            assert e.deviation == pytest.approx(100.0 * math.expm1(g))
            assert e.units == "percent"
        # large simulated shifts should be visible after shrinkage
        devs = [effects[("mu", lvl)].estimate for lvl in model.encoding.study_levels]
        assert np.corrcoef(devs, truth["gamma_mu"])[0, 1] > 0.9

    def test_fixed_mode_reference_zero(self):
        data, truth = synthetic.make_gg_cohort(1200, seed=42, n_studies=3)
        spec = ModelSpec(family="GG", response="volume_ml",
                         study_effect_mode="fixed")
        model = fit(data, spec, truth["powers_mu"], truth["powers_sigma"],
                    compute_se=False)
        effects = {(e.parameter, e.study): e for e in study_effects(model)}
        ref = model.encoding.study_reference
        assert effects[("mu", ref)].estimate == 0.0
        n_nonzero = sum(1 for e in effects.values()
                        if e.parameter == "mu" and e.estimate != 0.0)
        assert n_nonzero == len(model.encoding.study_levels) - 1

    def test_mode_none_raises(self):
        data, truth = synthetic.make_gg_cohort(800, seed=43, n_studies=1)
        spec = ModelSpec(family="GG", response="volume_ml",
                         study_effect_mode="none")
        model = fit(data, spec, truth["powers_mu"], truth["powers_sigma"],
                    compute_se=False)
        with pytest.raises(ContractError):
            study_effects(model)

    def test_identity_link_units_native(self):
        data, truth = synthetic.make_st1_cohort(1500, seed=44, n_studies=3,
                                                study_sd=(3.0, 0.02))
        model = fit(data, ST1_SPEC, truth["powers_mu"], truth["powers_sigma"],
                    compute_se=False)
        effects = [e for e in study_effects(model) if e.parameter == "mu"]
        assert all(e.units == "HU" for e in effects)
        assert all(e.deviation == e.estimate for e in effects)


class TestPenalizationLimit:
    def test_vanishing_penalty_matches_fixed_effects(self):
        data, truth = synthetic.make_gg_cohort(900, seed=51, n_studies=3,
                                               study_sd=(0.2, 0.05))
        fixed_spec = ModelSpec(family="GG", response="volume_ml",
                               study_effect_mode="fixed")
        fixed = fit(data, fixed_spec, truth["powers_mu"], truth["powers_sigma"],
                    compute_se=False)
        pen = fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"],
                  compute_se=False, fixed_delta2={"mu": 1e12, "sigma": 1e12})

        ages = np.linspace(25, 85, 13)
        for study in truth["study_levels"]:
            pf, _ = fixed.params_at(ages, "F", study=study)
            pp, _ = pen.params_at(ages, "F", study=study)
            assert np.allclose(pf["mu"], pp["mu"], rtol=2e-3)
            assert np.allclose(pf["sigma"], pp["sigma"], rtol=2e-2)
        # identified contrasts agree: study offsets relative to the reference
        ref = fixed.encoding.study_reference
        ref_idx = pen.encoding.study_levels.index(ref)
        fixed_by_study = {e.study: e.estimate for e in study_effects(fixed)
                          if e.parameter == "mu"}
        for i, lvl in enumerate(pen.encoding.study_levels):
            contrast = float(pen.study_coef["mu"][i] - pen.study_coef["mu"][ref_idx])
            assert contrast == pytest.approx(fixed_by_study[lvl], abs=5e-3)

    def test_heavy_penalty_shrinks_to_zero(self):
        data, truth = synthetic.make_gg_cohort(900, seed=52, n_studies=3,
                                               study_sd=(0.2, 0.05))
        pen = fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"],
                  compute_se=False, fixed_delta2={"mu": 1e-10, "sigma": 1e-10})
        assert np.max(np.abs(pen.study_coef["mu"])) < 1e-4
        assert np.max(np.abs(pen.study_coef["sigma"])) < 1e-4


class TestVarianceEstimation:
    def test_large_study_scatter_detected(self):
        data, truth = synthetic.make_gg_cohort(2400, seed=61, n_studies=8,
                                               study_sd=(0.3, 0.0))
        model = fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"],
                    compute_se=False)
        assert model.delta2["mu"] > 0.02
        assert np.corrcoef(model.study_coef["mu"], truth["gamma_mu"])[0, 1] > 0.95

    def test_no_study_scatter_shrinks(self):
        data, truth = synthetic.make_gg_cohort(2400, seed=62, n_studies=8,
                                               study_sd=(0.0, 0.0))
        model = fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"],
                    compute_se=False)
        assert model.delta2["mu"] < 0.01
        assert np.max(np.abs(model.study_coef["mu"])) < 0.05


class TestPreconditions:
    def test_too_few_records(self):
        data, truth = synthetic.make_gg_cohort(60, seed=71)
        with pytest.raises(ContractError, match="at least"):
            fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"])

    def test_collinear_design_names_column(self):
        data, truth = synthetic.make_gg_cohort(800, seed=72)
        single_sex = data.filter(lambda r: r.sex == "F")
        with pytest.raises(ContractError, match="sex:M"):
            fit(single_sex, GG_SPEC, truth["powers_mu"], truth["powers_sigma"])

    def test_nonconvergence_carries_state(self):
        data, truth = synthetic.make_gg_cohort(800, seed=73)
        with pytest.raises(NumericalError) as exc:
            fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"],
                compute_se=False, max_iter=1)
        assert isinstance(exc.value.state, ChartModel)

    def test_contrast_state_mismatch(self):
        data, truth = synthetic.make_st1_cohort(500, seed=74, contrast_state=False)
        spec = ModelSpec(family="ST1", response="mean_hu", contrast_state=True)
        with pytest.raises(ContractError, match="contrast"):
            fit(data, spec, truth["powers_mu"], truth["powers_sigma"])


class TestSpecValidation:
    def test_family_response_pairing(self):
        with pytest.raises(ContractError):
            ModelSpec(family="GG", response="mean_hu")
        with pytest.raises(ContractError):
            ModelSpec(family="ST1", response="volume_ml")

    def test_st1_rejects_contrast_covariate(self):
        with pytest.raises(ContractError):
            ModelSpec(family="ST1", response="mean_hu", mu_contrast=True)

    def test_contrast_defaults(self):
        assert GG_SPEC.use_contrast is True
        assert ST1_SPEC.use_contrast is False


class TestEncoding:
    def test_reference_levels(self):
        data, _ = synthetic.make_gg_cohort(500, seed=81)
        enc = CovariateEncoding.from_data(data, GG_SPEC)
        assert enc.manufacturer_levels[0] == "A"  # most frequent by design
        assert enc.study_levels == tuple(sorted(enc.study_levels))
        assert enc.age_min >= 18.0 and enc.age_max <= 120.0


@pytest.fixture(scope="module")
def model():
    data, truth = synthetic.make_gg_cohort(1500, seed=91)
    return fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"],
               compute_se=False)


class TestPrediction:

    def test_unknown_manufacturer_flagged_and_reference_valued(self, model):
        ref = model.encoding.manufacturer_levels[0]
        p_ref, f_ref = model.params_at(50.0, "F", manufacturer=ref)
        p_unk, f_unk = model.params_at(50.0, "F", manufacturer="NOVA")
        assert "unknown_manufacturer" in f_unk and not f_ref
        assert p_ref["mu"][0] == p_unk["mu"][0]

    def test_age_extrapolation_flag(self, model):
        _, flags = model.params_at(119.0, "F")
        assert "age_extrapolation" in flags
        _, flags = model.params_at(50.0, "F")
        assert "age_extrapolation" not in flags

    def test_unseen_study_acts_as_population(self, model):
        p_none, _ = model.params_at(50.0, "M")
        p_unseen, _ = model.params_at(50.0, "M", study="never-seen")
        assert p_none["mu"][0] == p_unseen["mu"][0]
        seen = model.encoding.study_levels[0]
        p_seen, _ = model.params_at(50.0, "M", study=seen)
        assert p_seen["mu"][0] != p_none["mu"][0] or \
            abs(model.study_coef["mu"][0]) < 1e-12


@pytest.fixture(scope="module")
def log_shape_selection():
    data, truth = synthetic.make_gg_cohort(
        2500, seed=101, powers_mu=(0,), powers_sigma=(),
        coef_mu={"age:log(x)": -0.35}, study_sd=(0.02, 0.01))
    return select_fp(data, GG_SPEC, max_degree=2)


class TestSelection:
    def test_recovers_log_shape(self, log_shape_selection):
        sel = log_shape_selection
        assert sel.powers_mu == PowerSet((0,))
        assert sel.powers_sigma == PowerSet(())
        stages = {row.stage for row in sel.table}
        assert stages == {"mu", "sigma", "mu_refit"}
        null_rows = [row for row in sel.table
                     if row.stage == "mu" and row.powers_mu == PowerSet(())]
        assert len(null_rows) == 1

    def test_refit_stage_reuses_cache(self, log_shape_selection):
        sel = log_shape_selection
        first = {}
        for row in sel.table:
            key = (row.powers_mu.powers, row.powers_sigma.powers)
            if key in first:
                assert row.bic == first[key]
            else:
                first[key] = row.bic


class TestResiduals:
    def test_quantile_residuals_near_standard_normal(self):
        data, truth = synthetic.make_gg_cohort(2000, seed=111)
        model = fit(data, GG_SPEC, truth["powers_mu"], truth["powers_sigma"],
                    compute_se=False)
        r, qq = quantile_residuals(model, data)
        assert abs(float(np.mean(r))) < 0.1
        assert abs(float(np.std(r)) - 1.0) < 0.1
        assert qq.clamped == 0
        assert float(np.max(np.abs(qq.detrended))) < 0.6
        assert qq.n == len(data)

    def test_plotting_positions_formula(self):
        from scipy.special import ndtri
        pos = normal_plotting_positions(5)
        i = np.arange(1, 6)
        assert np.allclose(pos, ndtri((i - 0.375) / 5.25))
        assert np.all(np.diff(pos) > 0)
