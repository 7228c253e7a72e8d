"""Synthetic stand-ins for the two case studies and their simulation series.

Fish: a 916 m x 10 m transect with a depth covariate between 5 and 29 m,
``sigma(u) = gamma0 + gamma1 depth(u)``, no deformation and about 706
expected fish.

Dispersal: a 2.4 x 0.8 rectangle around a point source at the origin,
``rho(u) = exp(beta0 + beta1 |u|)`` with infection strength
``2 pi e^beta0 / beta1^2 = 1500`` and range ``-1 / beta1 = 0.5``, constant
``sigma`` and the radial-log deformation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Optional

import numpy as np

from .coxsim import LGCPSimulator, LogLinearIntensity
from .geometry import CovariateField, Grid, Window, radial_distance
from .randomfield import (ConstantStd, ExponentialCorrelation, FieldModel, IdentityMap, LinearStd,
                          ModelError, RadialLogMap)

FISH_WINDOW = ((0.0, 916.0), (0.0, 10.0))
FISH_CELLS = (833, 9)
FISH_EXPECTED = 706.0
FISH_DEPTH_SLOPE = -0.02  # log-intensity per metre of depth

DISPERSAL_WINDOW = ((-1.2, 1.2), (-0.4, 0.4))
DISPERSAL_CELLS = (150, 50)
DISPERSAL_STRENGTH = 1500.0
DISPERSAL_RANGE = 0.5
DISPERSAL_COUNT_RANGE = (200, 1000)

FISH_SERIES = {
    1: {"alpha": 0.25, "gamma0": 1.25, "gamma1": 0.0},
    2: {"alpha": 0.25, "gamma0": 1.50, "gamma1": 0.0},
    3: {"alpha": 0.25, "gamma0": 1.25, "gamma1": -0.03},
    4: {"alpha": 0.25, "gamma0": 1.50, "gamma1": -0.03},
    5: {"alpha": 0.50, "gamma0": 1.25, "gamma1": 0.0},
    6: {"alpha": 0.50, "gamma0": 1.50, "gamma1": 0.0},
    7: {"alpha": 0.50, "gamma0": 1.25, "gamma1": -0.03},
    8: {"alpha": 0.50, "gamma0": 1.50, "gamma1": -0.03},
}

DISPERSAL_SERIES = {
    1: {"sigma": 0.5, "inv_alpha": 0.05, "delta": 1.0},
    2: {"sigma": 2.0, "inv_alpha": 0.05, "delta": 1.0},
    3: {"sigma": 0.5, "inv_alpha": 0.2, "delta": 1.0},
    4: {"sigma": 2.0, "inv_alpha": 0.2, "delta": 1.0},
    5: {"sigma": 0.5, "inv_alpha": 0.05, "delta": 10.0},
    6: {"sigma": 2.0, "inv_alpha": 0.05, "delta": 10.0},
    7: {"sigma": 0.5, "inv_alpha": 0.2, "delta": 10.0},
    8: {"sigma": 2.0, "inv_alpha": 0.2, "delta": 10.0},
}


def fish_depth(points: np.ndarray) -> np.ndarray:
    """Synthetic water depth along the transect: a smooth slope from 5 m (shallow end) to 29 m."""
    x = np.atleast_2d(points)[:, 0]
    return 5.0 + 12.0 * (1.0 - np.cos(np.pi * x / FISH_WINDOW[0][1]))


def dispersal_beta(strength: float = DISPERSAL_STRENGTH, range_: float = DISPERSAL_RANGE) -> np.ndarray:
    """``(beta0, beta1)`` from infection strength and dispersal range."""
    beta1 = -1.0 / range_
    return np.array([math.log(strength * beta1**2 / (2 * math.pi)), beta1])


def dispersal_strength_range(beta) -> tuple[float, float]:
    """Inverse of :func:`dispersal_beta`."""
    b0, b1 = float(beta[0]), float(beta[1])
    return 2 * math.pi * math.exp(b0) / b1**2, -1.0 / b1


@dataclass(frozen=True, eq=False)
class Scenario:
    """Everything needed to simulate one data-generating model."""

    name: str
    window: Window
    grid: Grid
    covariates: Mapping[str, CovariateField]
    intensity: LogLinearIntensity
    field: FieldModel
    truth: Mapping[str, float]
    count_range: Optional[tuple[int, int]] = None
    meta: Mapping = field(default_factory=dict)

    def simulator(self) -> LGCPSimulator:
        return LGCPSimulator(self.intensity, self.field, self.window, self.grid)

    def simulate(self, rng):
        sim = _cached_simulator(self)
        if self.count_range is not None:
            return sim.simulate_constrained(rng, self.count_range)
        return sim.simulate(rng)


_SIM_CACHE: dict = {}


def _cached_simulator(sc: Scenario) -> LGCPSimulator:
    key = id(sc)
    hit = _SIM_CACHE.get(key)
    if hit is None or hit[0] is not sc:
        _SIM_CACHE.clear()
        hit = (sc, sc.simulator())
        _SIM_CACHE[key] = hit
    return hit[1]


@lru_cache(maxsize=1)
def fish_geometry(cells: tuple[int, int] = FISH_CELLS):
    window = Window.rectangle(*FISH_WINDOW)
    (x0, x1), (y0, y1) = FISH_WINDOW
    grid = Grid._build(window, x0, y0, (x1 - x0) / cells[0], (y1 - y0) / cells[1], cells[0], cells[1])
    depth = CovariateField.from_function(grid, fish_depth, "depth")
    return window, grid, depth


def fish_intensity(depth: CovariateField, expected: float = FISH_EXPECTED,
                   slope: float = FISH_DEPTH_SLOPE) -> LogLinearIntensity:
    grid = depth.grid
    mass = grid.integrate(np.exp(slope * depth.values))
    return LogLinearIntensity(np.array([math.log(expected / mass), slope]), [depth])


def fish_scenario(series: Optional[int] = None, *, alpha: Optional[float] = None,
                  gamma0: Optional[float] = None, gamma1: Optional[float] = None,
                  depth: Optional[CovariateField] = None, intensity=None) -> Scenario:
    """Fish model from a series number or explicit ``(alpha, gamma0, gamma1)``."""
    truth = dict(FISH_SERIES[series]) if series is not None else {}
    for k, v in (("alpha", alpha), ("gamma0", gamma0), ("gamma1", gamma1)):
        if v is not None:
            truth[k] = float(v)
    missing = {"alpha", "gamma0", "gamma1"} - set(truth)
    if missing:
        raise ModelError(f"fish truth is missing {sorted(missing)}")
    if depth is None:
        window, grid, depth = fish_geometry()
    else:
        grid = depth.grid
        window = Window.rectangle(*FISH_WINDOW)
    intensity = intensity or fish_intensity(depth)
    std = LinearStd(truth["gamma0"], truth["gamma1"], depth)
    fm = FieldModel(std, IdentityMap(), ExponentialCorrelation(truth["alpha"]))
    return Scenario("fish", window, grid, {"depth": depth}, intensity, fm, truth,
                    meta={"series": series})


@lru_cache(maxsize=1)
def dispersal_geometry(cells: tuple[int, int] = DISPERSAL_CELLS):
    window = Window.rectangle(*DISPERSAL_WINDOW)
    (x0, x1), (y0, y1) = DISPERSAL_WINDOW
    grid = Grid._build(window, x0, y0, (x1 - x0) / cells[0], (y1 - y0) / cells[1], cells[0], cells[1])
    dist = CovariateField.from_function(grid, radial_distance, "distance")
    return window, grid, dist


def dispersal_scenario(series: Optional[int] = None, *, sigma: Optional[float] = None,
                       inv_alpha: Optional[float] = None, delta: Optional[float] = None,
                       strength: float = DISPERSAL_STRENGTH, range_: float = DISPERSAL_RANGE,
                       count_range: Optional[tuple[int, int]] = DISPERSAL_COUNT_RANGE) -> Scenario:
    """Dispersal model from a series number or explicit ``(sigma, 1/alpha, delta)``."""
    truth = dict(DISPERSAL_SERIES[series]) if series is not None else {}
    for k, v in (("sigma", sigma), ("inv_alpha", inv_alpha), ("delta", delta)):
        if v is not None:
            truth[k] = float(v)
    missing = {"sigma", "inv_alpha", "delta"} - set(truth)
    if missing:
        raise ModelError(f"dispersal truth is missing {sorted(missing)}")
    window, grid, dist = dispersal_geometry()
    beta = dispersal_beta(strength, range_)
    truth.update({"beta0": float(beta[0]), "beta1": float(beta[1]), "strength": strength, "range": range_,
                  "alpha": 1.0 / truth["inv_alpha"]})
    fm = FieldModel(ConstantStd(truth["sigma"]), RadialLogMap(truth["delta"]),
                    ExponentialCorrelation(truth["alpha"]))
    return Scenario("dispersal", window, grid, {"distance": dist}, LogLinearIntensity(beta, [dist]), fm, truth,
                    count_range=tuple(count_range) if count_range else None, meta={"series": series})


def make_scenario(name: str, series: Optional[int] = None, **truth) -> Scenario:
    if name == "fish":
        return fish_scenario(series, **truth)
    if name == "dispersal":
        return dispersal_scenario(series, **truth)
    raise ModelError(f"scenario: unknown scenario {name!r} (expected 'fish' or 'dispersal')")
