"""Simulation of log-Gaussian Cox processes and inhomogeneous Poisson processes on a grid.

Given the driving intensity on the cell centres, each cell receives a
Poisson number of events with mean ``Lambda(centre) * cell_area``, placed
uniformly in the cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import CovariateField, Grid, PointPattern, Window
from .randomfield import FieldModel, GRFSampler, MAX_SITES, make_rng

#: default cap on the expected number of events in one realization
MAX_EXPECTED = 1e6


class SimulationError(RuntimeError):
    """Simulation aborted (runaway intensity, unmet count constraint)."""


@dataclass(frozen=True, eq=False)
class LogLinearIntensity:
    """``rho(u) = exp(beta_0 + sum_i beta_i z_i(u))``."""

    beta: np.ndarray
    covariates: Sequence[CovariateField] = ()

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if len(b) != len(self.covariates) + 1:
            raise ValueError(f"need {len(self.covariates) + 1} coefficients, got {len(b)}")
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "covariates", tuple(self.covariates))

    def log_at(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        out = np.full(len(p), self.beta[0])
        for b, z in zip(self.beta[1:], self.covariates):
            out = out + b * z.at(p)
        return out

    def at(self, points) -> np.ndarray:
        return np.exp(self.log_at(points))

    def log_on(self, grid: Grid) -> np.ndarray:
        out = np.full(grid.shape, self.beta[0])
        for b, z in zip(self.beta[1:], self.covariates):
            out = out + b * z.on(grid)
        return out

    def on(self, grid: Grid) -> np.ndarray:
        return np.exp(self.log_on(grid))

    @property
    def grid(self) -> Optional[Grid]:
        return self.covariates[0].grid if self.covariates else None


@dataclass(frozen=True, eq=False)
class GriddedIntensity:
    """Intensity given by its values on a grid (e.g. a kernel estimate)."""

    values: CovariateField
    flags: tuple = field(default=())

    def __post_init__(self):
        v = self.values.values[self.values.grid.mask]
        if not (np.all(v > 0) and np.all(np.isfinite(v))):
            raise ValueError("gridded intensity must be positive and finite inside the window")

    @classmethod
    def from_array(cls, grid: Grid, values: np.ndarray, flags=()) -> "GriddedIntensity":
        vals = np.where(grid.mask, values, np.nan)
        return cls(CovariateField(grid, vals, "rho"), tuple(flags))

    @property
    def grid(self) -> Grid:
        return self.values.grid

    def at(self, points) -> np.ndarray:
        return self.values.at(points)

    def log_at(self, points) -> np.ndarray:
        return np.log(self.at(points))

    def on(self, grid: Grid) -> np.ndarray:
        return self.values.on(grid)

    def log_on(self, grid: Grid) -> np.ndarray:
        return np.log(self.on(grid))


def default_simulation_grid(window: Window, intensity=None, field_: Optional[FieldModel] = None,
                            max_sites: int = MAX_SITES) -> Grid:
    """Finest covariate grid in use, else 256 cells across; coarsened to ``max_sites``."""
    grids = []
    if intensity is not None and intensity.grid is not None:
        grids.append(intensity.grid)
    if field_ is not None and hasattr(field_.std, "covariate"):
        grids.append(field_.std.covariate.grid)
    if grids:
        g = min(grids, key=lambda g: g.cell_area)
        if g.n_active <= max_sites:
            return g
        return Grid.for_window(window, cell=(g.dx, g.dy), max_cells=max_sites)
    return Grid.for_window(window, cells_across=256, max_cells=max_sites)


def _place(rng, grid: Grid, cells: np.ndarray, mean: np.ndarray, window: Window) -> np.ndarray:
    counts = rng.poisson(mean)
    idx = np.repeat(cells, counts)
    centers_x = grid.x0 + (idx % grid.nx + 0.5) * grid.dx
    centers_y = grid.y0 + (idx // grid.nx + 0.5) * grid.dy
    jitter = rng.random((len(idx), 2)) - 0.5
    pts = np.column_stack([centers_x + jitter[:, 0] * grid.dx, centers_y + jitter[:, 1] * grid.dy])
    if window.kind != "rectangle" and len(pts):
        pts = pts[window.contains(pts)]
    return pts


class LGCPSimulator:
    """Repeated simulation of one LGCP on one grid.

    The correlation factor and the log-intensity surface are computed once;
    :meth:`simulate` then costs one matrix-vector product per realization.
    """

    def __init__(self, intensity, field_: FieldModel, window: Window, grid: Optional[Grid] = None,
                 max_expected: float = MAX_EXPECTED, max_sites: int = MAX_SITES):
        self.window = window
        self.grid = grid or default_simulation_grid(window, intensity, field_, max_sites)
        self.cells = np.flatnonzero(self.grid.mask.ravel())
        centers = self.grid.centers()[self.cells]
        self.log_mean = intensity.log_on(self.grid).ravel()[self.cells] + np.log(self.grid.cell_area)
        self.sampler = GRFSampler(field_, centers, max_sites=max_sites)
        self.max_expected = max_expected

    def simulate(self, rng, y0: Optional[np.ndarray] = None) -> PointPattern:
        rng = make_rng(rng)
        if y0 is None:
            y0 = self.sampler.sample(rng)
        mean = np.exp(self.log_mean + y0)
        total = float(mean.sum())
        if not total <= self.max_expected:
            raise SimulationError(f"expected count {total:.3g} exceeds cap {self.max_expected:.3g}")
        return PointPattern(_place(rng, self.grid, self.cells, mean, self.window), self.window)

    def simulate_constrained(self, rng, count_range: tuple[int, int], max_tries: int = 1000) -> PointPattern:
        """Resample until the number of events lies in ``count_range`` (inclusive)."""
        rng = make_rng(rng)
        lo, hi = count_range
        for _ in range(max_tries):
            try:
                pat = self.simulate(rng)
            except SimulationError:
                continue
            if lo <= pat.n <= hi:
                return pat
        raise SimulationError(f"no realization with {lo}..{hi} events in {max_tries} tries")


def simulate_lgcp(intensity, field_: FieldModel, window: Window, seed, grid: Optional[Grid] = None,
                  max_expected: float = MAX_EXPECTED, count_range: Optional[tuple[int, int]] = None) -> PointPattern:
    """One LGCP realization; deterministic given ``seed``."""
    sim = LGCPSimulator(intensity, field_, window, grid, max_expected)
    if count_range is not None:
        return sim.simulate_constrained(seed, count_range)
    return sim.simulate(seed)


def simulate_conditional_poisson(intensity, window: Window, seed, grid: Optional[Grid] = None,
                                 max_expected: float = MAX_EXPECTED) -> PointPattern:
    """Inhomogeneous Poisson realization from per-cell counts.

    ``intensity`` is an intensity spec or an array of values on ``grid``.
    """
    rng = make_rng(seed)
    if isinstance(intensity, np.ndarray):
        if grid is None:
            raise ValueError("a raw intensity array needs its grid")
        values = intensity
    else:
        grid = grid or default_simulation_grid(window, intensity)
        values = intensity.on(grid)
    cells = np.flatnonzero(grid.mask.ravel())
    mean = np.asarray(values, dtype=float).ravel()[cells] * grid.cell_area
    if np.any(mean < 0) or not np.all(np.isfinite(mean)):
        raise SimulationError("intensity must be non-negative and finite")
    if mean.sum() > max_expected:
        raise SimulationError(f"expected count {mean.sum():.3g} exceeds cap {max_expected:.3g}")
    return PointPattern(_place(rng, grid, cells, mean, window), window)
