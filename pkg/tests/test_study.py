import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nslgcp.coxsim import LogLinearIntensity
from nslgcp.geometry import CovariateField, Grid, Window
from nslgcp.parallel import pmap
from nslgcp.pipeline import ModelSpec, fit_three_step
from nslgcp.randomfield import ConstantStd, ExponentialCorrelation, FieldModel, IdentityMap
from nslgcp.scenarios import (DISPERSAL_SERIES, FISH_SERIES, Scenario, dispersal_beta, dispersal_scenario,
                              dispersal_strength_range, fish_depth, fish_scenario, make_scenario)
from nslgcp.study import (StudyError, gamma1_test_study, parametric_bootstrap, rmsle, rmsle_ratio,
                          run_replicates, run_series, summarize, trimmed_mean)


@pytest.fixture(scope="module")
def small():
    w = Window.rectangle((0, 6), (0, 3))
    grid = Grid.for_window(w, cell=0.25)
    x = CovariateField.from_function(grid, lambda p: p[:, 0] / 6, "x")
    rho = LogLinearIntensity([3.0, -0.5], [x])
    fm = FieldModel(ConstantStd(0.8), IdentityMap(), ExponentialCorrelation(2.0))
    sc = Scenario("stationary", w, grid, {"x": x}, rho, fm, {"sigma": 0.8, "alpha": 2.0})
    return sc, ModelSpec(intensity_covariates=("x",), R_joint=1.0)


class TestMetrics:
    def test_rmsle_hand_value(self):
        assert rmsle([1.0, math.e, 1 / math.e], 1.0, trim=0.0) == pytest.approx(math.sqrt(2 / 3))

    @pytest.mark.parametrize("n,dropped", [(19, 0), (20, 1), (40, 2)])
    def test_trimming_floor(self, n, dropped):
        x = np.ones(n)
        x[0], x[-1] = 1e-9, 1e9  # outliers in both tails
        expected = 0.0 if dropped else math.sqrt(2 * math.log(1e9) ** 2 / n)
        assert rmsle(x, 1.0) == pytest.approx(expected, abs=1e-12)

    def test_rmsle_zero_at_truth(self):
        assert rmsle(np.full(30, 0.5), 0.5) == 0.0

    def test_rmsle_needs_positive_truth(self):
        with pytest.raises(ValueError):
            rmsle([1.0], 0.0)

    @given(st.floats(0.01, 10), st.floats(0.01, 10))
    def test_ratio(self, a, b):
        assert rmsle_ratio(a, b) == (pytest.approx(a / b), None)

    def test_ratio_flags(self):
        assert rmsle_ratio(1.0, 1.0) == (1.0, None)
        r, flag = rmsle_ratio(0.3, 0.0)
        assert math.isnan(r) and "zero" in flag
        assert rmsle_ratio(math.nan, 1.0)[1] == "undefined RMSLE"

    def test_trimmed_mean(self):
        x = np.arange(20.0)
        x[-1] = 1e6
        # floor(0.05 * 20) = 1 value removed from each tail
        assert trimmed_mean(x) == pytest.approx(np.mean(np.arange(1.0, 19.0)))


class TestReplicates:
    def test_worker_independent(self):
        def task(rng):
            return 0, {"z": rng.normal()}, {}
        a = run_replicates(task, 12, seed=4, workers=1)
        b = run_replicates(task, 12, seed=4, workers=3)
        assert [r.estimates for r in a] == [r.estimates for r in b]
        assert [r.index for r in a] == list(range(12))

    def test_failures_recorded(self):
        def task(rng):
            if rng.uniform() < 0.15:
                raise ValueError("boom")
            return 1, {"z": 1.0}, {}
        reps = run_replicates(task, 40, seed=1)
        bad = [r for r in reps if not r.ok]
        assert 0 < len(bad) <= 8 and "boom" in bad[0].error
        s = summarize(reps, ["z"])
        assert s["n_failed"] == len(bad) and s["parameters"]["z"]["median"] == 1.0

    def test_too_many_failures_abort(self):
        def task(rng):
            raise ValueError("always")
        with pytest.raises(StudyError, match="always"):
            run_replicates(task, 5, seed=0)

    def test_unexpected_errors_propagate(self):
        def task(rng):
            raise KeyError("bug")
        with pytest.raises(KeyError):
            run_replicates(task, 2, seed=0)


class TestParallel:
    def test_order_and_closure(self):
        k = 7
        assert pmap(lambda i: i * k, range(20), workers=3) == [i * 7 for i in range(20)]

    def test_invalid_workers(self):
        with pytest.raises(ValueError):
            pmap(abs, [1, 2], workers=0)


class TestStudies:
    def test_series(self, small):
        sc, spec = small
        res = run_series(sc, 3, seed=2, spec=spec)
        p = res.summary["parameters"]
        assert set(p) == {"sigma", "alpha"} and p["sigma"]["truth"] == 0.8
        rows = list(csv.DictReader(io.StringIO(res.table_csv())))
        assert len(rows) == 3 and rows[0]["status"] == "ok"
        again = run_series(sc, 3, seed=2, spec=spec)
        assert again.table_csv() == res.table_csv()

    def test_bootstrap(self, small):
        sc, spec = small
        fitted = fit_three_step(sc.simulate(np.random.default_rng(0)), sc.covariates, spec)
        res = parametric_bootstrap(fitted, sc.window, B=3, seed=1)
        p = res.summary["parameters"]
        assert set(p) == {"sigma", "alpha", "beta0", "beta1"}
        lo, hi = p["beta1"]["interval"]
        assert lo <= hi
        with pytest.raises(StudyError):
            parametric_bootstrap(fitted, sc.window, B=1, seed=1)

    def test_gamma1_study(self):
        res = gamma1_test_study(fish_scenario(1), 3, seed=0, levels=(0.05, 0.5))
        assert res["n_ok"] == 3 and set(res["rejections"]) == {"0.05", "0.5"}
        assert all(0 <= p <= 1 for p in res["p_values"])

    def test_gamma1_needs_linear_variance(self):
        with pytest.raises(StudyError):
            gamma1_test_study(fish_scenario(1), 1, 0, spec=ModelSpec())


class TestScenarios:
    @given(st.floats(10, 1e4), st.floats(0.05, 5))
    def test_strength_range_inverse(self, s, r):
        assert dispersal_strength_range(dispersal_beta(s, r)) == pytest.approx((s, r), rel=1e-12)

    def test_fish_depth_range(self):
        x = np.linspace(0, 916, 101)
        d = fish_depth(np.column_stack([x, np.zeros_like(x)]))
        assert d[0] == pytest.approx(5.0) and d[-1] == pytest.approx(29.0) and np.all(np.diff(d) > 0)

    def test_fish_expected_count(self):
        sc = fish_scenario(1)
        assert sc.grid.integrate(sc.intensity.on(sc.grid)) == pytest.approx(706.0, rel=1e-9)

    def test_series_tables(self):
        assert len(FISH_SERIES) == 8 and len(DISPERSAL_SERIES) == 8
        sc = dispersal_scenario(4)
        assert sc.truth["alpha"] == pytest.approx(5.0) and sc.count_range == (200, 1000)

    def test_explicit_truth(self):
        sc = make_scenario("fish", alpha=0.3, gamma0=1.0, gamma1=0.0)
        assert sc.truth == {"alpha": 0.3, "gamma0": 1.0, "gamma1": 0.0}

    def test_unknown_scenario(self):
        from nslgcp.randomfield import ModelError
        with pytest.raises(ModelError):
            make_scenario("wheat")
