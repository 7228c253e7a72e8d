import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nslgcp.coxsim import GriddedIntensity, LogLinearIntensity, simulate_conditional_poisson
from nslgcp.geometry import CovariateField, Grid, PointPattern, Window
from nslgcp.randomfield import ConstantStd, ExponentialCorrelation, FieldModel, IdentityMap, RadialLogMap
from nslgcp.secondorder import (FullCL2, InsufficientPairsError, SubwindowCL2, build_stieltjes,
                                cell_distance_cdf, cl2_full, cl2_subwindow, g0_exponential,
                                maximize_cl2_subwindow, mean_cell_distance, offset_law, pair_cloud,
                                select_r_by_pair_fraction, stationary_field)

from oracles import brute_pairs, dense_cell_pair_integral, difference_midpoints


def smooth_rho(grid, seed):
    """A positive, smoothly varying random intensity surface on ``grid``."""
    rng = np.random.default_rng(seed)
    c = grid.centers()
    a, b, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 6)
    vals = np.exp(0.8 * np.sin(a * c[:, 0] + ph) * np.cos(b * c[:, 1]))
    return vals.reshape(grid.shape)


@pytest.fixture(scope="module")
def square():
    w = Window.rectangle((0, 8), (0, 8))
    return w, Grid.for_window(w, cells_across=8)


@pytest.fixture(scope="module")
def setup():
    w = Window.rectangle((0, 4), (0, 3))
    grid = Grid.for_window(w, cells_across=8)
    rho = GriddedIntensity.from_array(grid, smooth_rho(grid, 3))
    pts = np.random.default_rng(7).uniform([0, 0], [4, 3], size=(12, 2))
    return w, grid, rho, pts


@pytest.fixture(scope="module")
def poisson():
    w = Window.rectangle((0, 100), (0, 10))
    grid = Grid.for_window(w, cell=1.0)
    rho = LogLinearIntensity([math.log(1.0)], [])
    pat = simulate_conditional_poisson(rho, w, 3, grid=grid)
    return pat, rho, grid


@pytest.fixture(scope="module")
def data():
    w = Window.rectangle((0, 6), (0, 4))
    grid = Grid.for_window(w, cells_across=24)
    x = CovariateField.from_function(grid, lambda p: p[:, 0], "x")
    rho = LogLinearIntensity([2.0, -0.2], [x])
    pat = simulate_conditional_poisson(rho, w, 5, grid=grid)
    return pat, rho, grid


class TestPairs:
    @given(st.integers(0, 120), st.floats(0.01, 0.8), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force(self, n, R, seed):
        pts = np.random.default_rng(seed).uniform(size=(n, 2))
        pc = pair_cloud(pts, R)
        assert set(zip(pc.i.tolist(), pc.j.tolist())) == brute_pairs(pts, R)
        assert np.all(pc.d <= R)

    def test_brute_force_200_points(self):
        pts = np.random.default_rng(1).uniform(size=(200, 2))
        pc = pair_cloud(pts, 0.2)
        assert set(zip(pc.i.tolist(), pc.j.tolist())) == brute_pairs(pts, 0.2)

    def test_half_of_pairs_selected(self):
        pts = np.random.default_rng(2).uniform(size=(301, 2))
        R = select_r_by_pair_fraction(pts, 0.5)
        assert len(pair_cloud(pts, R)) / (301 * 300 / 2) == pytest.approx(0.5, abs=1e-4)

    def test_one_point_cannot_choose_r(self):
        with pytest.raises(InsufficientPairsError):
            select_r_by_pair_fraction(np.zeros((1, 2)))


class TestCellDistanceLaw:
    @pytest.mark.parametrize("a,b", [(1.0, 1.0), (1.1, 1.11), (3.0, 0.5)])
    def test_mean_distance_against_midpoint_rule(self, a, b):
        X, Y, W = difference_midpoints(a, b, 300)
        assert mean_cell_distance(a, b) == pytest.approx(np.sum(W * np.hypot(X, Y)), rel=1e-5)

    @pytest.mark.parametrize("a,b", [(1.0, 1.0), (2.0, 0.7)])
    def test_cdf_against_midpoint_rule(self, a, b):
        X, Y, W = difference_midpoints(a, b, 400)
        D = np.hypot(X, Y)
        t = np.array([0.1, 0.4, 0.8, 1.0, 1.5, 2.2])
        ref = np.array([W[D <= s].sum() for s in t])
        np.testing.assert_allclose(cell_distance_cdf(t, a, b), ref, atol=3e-3)
        assert cell_distance_cdf([math.hypot(a, b) * 1.01], a, b)[0] == pytest.approx(1.0)

    @pytest.mark.parametrize("R", [0.7, 2.5, 6.0])
    def test_offset_law_probabilities(self, R):
        # each offset's knots carry P(D <= R); summed over offsets with their
        # multiplicity this is the pair-distance cdf of the infinite lattice
        law = offset_law(1.0, 0.8, R)
        assert np.all(law.p > 0) and np.all(law.d <= R * (1 + 1e-9))
        assert np.bincount(law.off, weights=law.p).max() <= 1 + 1e-12


class TestStieltjes:
    def test_unit_intensity_full_reach(self, square):
        w, grid = square
        t = build_stieltjes(np.ones(grid.shape), grid, None, 12.0, 512)
        assert t.total == pytest.approx(w.area**2, rel=1e-12)
        ref = dense_cell_pair_integral(np.ones(grid.shape), grid, None, 12.0, lambda d: np.ones_like(d))
        assert t.total == pytest.approx(ref, rel=1e-9)

    def test_zero_reach_is_empty(self, square):
        _, grid = square
        t = build_stieltjes(np.ones(grid.shape), grid, None, 0.0, 64)
        assert t.total == 0.0

    def test_unit_g_integrates_to_total(self, square):
        _, grid = square
        t = build_stieltjes(smooth_rho(grid, 0), grid, None, 3.0, 128)
        assert t.integrate(lambda d: np.ones_like(d)) == pytest.approx(t.total, rel=1e-14)

    def test_monotone(self, square):
        _, grid = square
        t = build_stieltjes(smooth_rho(grid, 1), grid, None, 5.0, 256)
        assert np.all(t.increments >= 0)
        H = t.H(np.linspace(0, 5, 200))
        assert H[0] == 0.0 and np.all(np.diff(H) >= 0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_remark_identity_against_dense_quadrature(self, seed):
        rng = np.random.default_rng(100 + seed)
        w = Window.rectangle((0, rng.uniform(6, 12)), (0, rng.uniform(3, 6)))
        grid = Grid.for_window(w, cells_across=12)
        rho = smooth_rho(grid, seed)
        mask = grid.centers()[:, 0].reshape(grid.shape) < w.bbox[2] * rng.uniform(0.5, 0.9)
        R = rng.uniform(1.5, 4.0)
        sigma, alpha = rng.uniform(0.5, 2.0), rng.uniform(0.3, 3.0)
        g0 = g0_exponential(sigma, alpha)
        t = build_stieltjes(rho, grid, mask, R, 512)
        ref = dense_cell_pair_integral(rho, grid, mask, R, g0, n=120)
        assert abs(t.integrate(g0) / ref - 1) < 1e-3


class TestSubwindowCriterion:
    def test_interaction_free_limit(self, setup):
        _, grid, rho, pts = setup
        t = build_stieltjes(rho.on(grid), grid, None, 1.5, 512)
        pc = pair_cloud(pts, 1.5)
        lr = rho.log_at(pts)
        expected = (lr[pc.i] + lr[pc.j]).sum() - len(pc) * math.log(t.total)
        assert cl2_subwindow(pts, rho, t, (1e-8, 1.0)) == pytest.approx(expected, rel=1e-12)

    def test_brute_force_small_pattern(self, setup):
        _, grid, rho, pts = setup
        R, sigma, alpha = 1.5, 1.2, 0.8
        g0 = g0_exponential(sigma, alpha)
        t = build_stieltjes(rho.on(grid), grid, None, R, 512)
        val = cl2_subwindow(pts, rho, t, (sigma, alpha))
        lr, total, count = rho.log_at(pts), 0.0, 0
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                d = math.dist(pts[i], pts[j])
                if d <= R:
                    total += lr[i] + lr[j] + math.log(g0(d))
                    count += 1
        ref = total - count * math.log(dense_cell_pair_integral(rho.on(grid), grid, None, R, g0, n=120))
        assert abs(val / ref - 1) < 1e-3

    def test_no_pairs(self, setup):
        _, grid, rho, _ = setup
        t = build_stieltjes(rho.on(grid), grid, None, 0.01, 16)
        with pytest.raises(InsufficientPairsError, match="insufficient pairs"):
            cl2_subwindow(np.array([[0.5, 0.5], [3.5, 2.5]]), rho, t, (1.0, 1.0))

    def test_nonpositive_parameters(self, setup):
        _, grid, rho, pts = setup
        t = build_stieltjes(rho.on(grid), grid, None, 1.5, 16)
        with pytest.raises(ValueError):
            cl2_subwindow(pts, rho, t, (0.0, 1.0))


class TestMaximization:
    def test_dominates_starts(self, poisson):
        pat, rho, grid = poisson
        t = build_stieltjes(rho.on(grid), grid, None, 5.0, 512)
        fit = maximize_cl2_subwindow(pat.points, rho, t)
        assert all(fit.value >= v - 1e-9 for v in fit.start_values)

    def test_poisson_data_gives_flat_pair_correlation(self, poisson):
        # sigma alone is not identified when g0 is near 1 (a short range
        # absorbs it); the fitted pair correlation itself must be flat
        pat, rho, grid = poisson
        t = build_stieltjes(rho.on(grid), grid, None, 5.0, 512)
        fit = maximize_cl2_subwindow(pat.points, rho, t)
        g = g0_exponential(fit.sigma, fit.alpha)(np.array([0.25, 1.0, 2.5]))
        assert np.all(np.abs(g - 1) < 0.05)

    def test_range_floor_respected(self, poisson):
        pat, rho, grid = poisson
        t = build_stieltjes(rho.on(grid), grid, None, 5.0, 512)
        fit = maximize_cl2_subwindow(pat.points, rho, t, alpha_min=0.2)
        assert fit.alpha >= 0.2 * (1 - 1e-9)


class TestFullCriterion:
    @pytest.mark.parametrize("sigma,alpha", [(0.5, 0.5), (1.5, 2.0), (2.0, 0.2)])
    def test_stationary_agrees_with_stieltjes(self, data, sigma, alpha):
        pat, rho, grid = data
        R = 1.5
        full = FullCL2(pat.points, rho, R, grid)(stationary_field(sigma, alpha))
        t = build_stieltjes(rho.on(grid), grid, None, R, 512)
        sub = SubwindowCL2(pat.points, rho.log_at(pat.points), t)(sigma, alpha)
        assert abs(full / sub - 1) < 1e-3

    def test_interaction_free_limit(self, data):
        pat, rho, grid = data
        crit = FullCL2(pat.points, rho, 1.5, grid)
        expected = crit.log_rr - crit.n_pairs * math.log(crit.w.sum())
        assert crit(stationary_field(1e-9, 1.0)) == pytest.approx(expected, rel=1e-12)

    def test_functional_wrapper(self, data):
        pat, rho, grid = data
        f = stationary_field(1.0, 1.0)
        assert cl2_full(pat, rho, f, 1.5, grid) == FullCL2(pat.points, rho, 1.5, grid)(f)

    def test_deformed_criterion_finite_and_tends_to_stationary(self, data):
        pat, rho, grid = data
        crit = FullCL2(pat.points, rho, 1.5, grid)
        # a radial-log map with tiny delta is a uniform scaling by delta
        delta = 1e-6
        deformed = FieldModel(ConstantStd(1.0), RadialLogMap(delta), ExponentialCorrelation(0.7 / delta))
        assert crit(deformed) == pytest.approx(crit(stationary_field(1.0, 0.7)), rel=1e-4)

    def test_no_pairs(self, data):
        pat, rho, grid = data
        with pytest.raises(InsufficientPairsError):
            FullCL2(pat.points[:1], rho, 1.5, grid)
