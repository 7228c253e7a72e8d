"""Non-stationary log-Gaussian Cox processes.

Simulation, three-step composite likelihood estimation with covariate
driven variance or a radial space deformation, and global rank envelope
goodness-of-fit tests.
"""

from .coxsim import LGCPSimulator, LogLinearIntensity, simulate_conditional_poisson, simulate_lgcp
from .geometry import CovariateField, Grid, PointPattern, Window, partition_by_covariate
from .gof import envelope_test, j_inhom, make_statistic
from .intensity import fit_cl1
from .pipeline import FitResult, ModelSpec, fit, fit_three_step, fit_two_step
from .randomfield import (ConstantStd, ExponentialCorrelation, FieldModel, IdentityMap, LinearStd, RadialLogMap,
                          replicate_rng)
from .scenarios import dispersal_scenario, fish_scenario, make_scenario

__version__ = "0.1.0"

__all__ = [
    "ConstantStd", "CovariateField", "ExponentialCorrelation", "FieldModel", "FitResult", "Grid", "IdentityMap",
    "LGCPSimulator", "LinearStd", "LogLinearIntensity", "ModelSpec", "PointPattern", "RadialLogMap", "Window",
    "dispersal_scenario", "envelope_test", "fish_scenario", "fit", "fit_cl1", "fit_three_step", "fit_two_step",
    "j_inhom", "make_scenario", "make_statistic", "partition_by_covariate", "replicate_rng",
    "simulate_conditional_poisson", "simulate_lgcp",
]
