import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nslgcp.coxsim import LogLinearIntensity, simulate_conditional_poisson
from nslgcp.geometry import CovariateField, Grid, PointPattern, Window
from nslgcp.intensity import EstimationError, fit_cl1, kernel_intensity, rectangle_edge_mass
from nslgcp.intensity import _edge_mass


@pytest.fixture(scope="module")
def unit():
    return Window.rectangle((0, 1), (0, 1))


@pytest.fixture(scope="module")
def xcov(unit):
    grid = Grid.for_window(unit, cells_across=100)
    return CovariateField.from_function(grid, lambda p: p[:, 0], "x")


class TestCL1:
    @given(st.integers(1, 500), st.floats(0.5, 50), st.floats(0.5, 50))
    @settings(max_examples=30, deadline=None)
    def test_constant_model_closed_form(self, n, w, h):
        win = Window.rectangle((0, w), (0, h))
        pts = np.random.default_rng(n).uniform([0, 0], [w, h], size=(n, 2))
        fit = fit_cl1(PointPattern(pts, win))
        assert abs(fit.beta[0] - math.log(n / (w * h))) < 1e-8

    def test_recovery_over_replicates(self, unit, xcov):
        truth = np.array([2.0, -1.0])
        rho = LogLinearIntensity(truth, [xcov])
        rng = np.random.default_rng(0)
        est = np.array([fit_cl1(simulate_conditional_poisson(rho, unit, rng), [xcov]).beta for _ in range(60)])
        se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
        assert np.all(np.abs(est.mean(axis=0) - truth) < 3 * se)

    def test_score_identity_at_estimate(self, unit, xcov):
        grid = xcov.grid
        ycov = CovariateField.from_function(grid, lambda p: np.sin(3 * p[:, 1]), "y")
        rho = LogLinearIntensity([4.0, 1.0, -0.5], [xcov, ycov])
        pat = simulate_conditional_poisson(rho, unit, 1)
        fit = fit_cl1(pat, [xcov, ycov])
        lam = fit.intensity([xcov, ycov]).on(grid)
        p = pat.points
        for data, z in ((pat.n, np.ones(grid.shape)), (p[:, 0].sum(), xcov.values),
                        (np.sin(3 * p[:, 1]).sum(), ycov.values)):
            model = grid.integrate(z * lam)
            assert data - model == pytest.approx(0.0, abs=1e-6 * max(1.0, abs(data)))

    def test_hessian_negative_definite(self, unit, xcov):
        pat = simulate_conditional_poisson(LogLinearIntensity([3.0, 1.0], [xcov]), unit, 2)
        fit = fit_cl1(pat, [xcov])
        assert np.linalg.eigvalsh(fit.hessian).max() < 0

    def test_rank_deficient_design(self, unit, xcov):
        const = CovariateField(xcov.grid, np.full(xcov.grid.shape, 3.0), "c")
        pat = simulate_conditional_poisson(LogLinearIntensity([3.0], []), unit, 0, grid=xcov.grid)
        with pytest.raises(EstimationError, match="rank deficient"):
            fit_cl1(pat, [const])

    def test_empty_pattern(self, unit, xcov):
        with pytest.raises(EstimationError):
            fit_cl1(PointPattern(np.empty((0, 2)), unit), [xcov])


class TestKernel:
    def test_single_point_huge_bandwidth(self, unit):
        grid = Grid.for_window(unit, cells_across=40)
        est = kernel_intensity(PointPattern([[0.5, 0.5]], unit), 100.0, grid)
        vals = est.on(grid)[grid.mask]
        assert vals.max() / vals.min() < 1.001
        assert grid.integrate(est.on(grid)) == pytest.approx(1.0, rel=1e-3)

    # cell-wise correction conserves mass only approximately; the error grows
    # with the bandwidth relative to the window
    @pytest.mark.parametrize("h", [0.03, 0.1])
    def test_mass_close_to_count(self, unit, h):
        grid = Grid.for_window(unit, cells_across=100)
        pat = PointPattern(np.random.default_rng(3).uniform(size=(150, 2)), unit)
        est = kernel_intensity(pat, h, grid)
        assert grid.integrate(est.on(grid)) == pytest.approx(150, rel=0.02)

    def test_mass_close_to_count_fish(self):
        from nslgcp.scenarios import fish_scenario
        sc = fish_scenario(1)
        grid = sc.covariates["depth"].grid
        for seed in range(3):
            pat = sc.simulate(np.random.default_rng(seed))
            assert grid.integrate(kernel_intensity(pat, 50.0, grid).on(grid)) == pytest.approx(pat.n, rel=0.02)

    def test_edge_mass_matches_closed_form(self):
        w = Window.rectangle((0, 916), (0, 10))
        grid = Grid.for_window(w, cell=(916 / 833, 10 / 9))
        np.testing.assert_allclose(_edge_mass(grid, 50.0), rectangle_edge_mass(grid, 50.0, w.bbox), rtol=2e-3)

    def test_translation_equivariance(self):
        big = Window.rectangle((-50, 50), (-50, 50))
        grid = Grid.for_window(big, cell=0.5)
        pts = np.random.default_rng(4).uniform(-5, 5, size=(30, 2))
        a = kernel_intensity(PointPattern(pts, big), 1.0, grid).on(grid)
        shifted = Window.rectangle((-47, 53), (-49, 51))
        grid2 = Grid.for_window(shifted, cell=0.5)
        b = kernel_intensity(PointPattern(pts + [3.0, 1.0], shifted), 1.0, grid2).on(grid2)
        # far from the border the edge correction is 1: estimates coincide
        inner = (slice(60, 140), slice(60, 140))
        np.testing.assert_allclose(a[inner], b[inner], rtol=1e-9, atol=1e-12)

    def test_empty_pattern_flagged(self, unit):
        est = kernel_intensity(PointPattern(np.empty((0, 2)), unit), 0.1)
        assert "empty" in est.flags

    def test_positive_floor(self, unit):
        grid = Grid.for_window(unit, cells_across=100)
        est = kernel_intensity(PointPattern([[0.01, 0.01]], unit), 0.005, grid)
        assert est.on(grid)[grid.mask].min() > 0

    def test_bandwidth_must_be_positive(self, unit):
        with pytest.raises(ValueError):
            kernel_intensity(PointPattern([[0.5, 0.5]], unit), 0.0)
