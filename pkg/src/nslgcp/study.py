"""Simulation studies: parametric bootstrap, recovery series, the gamma1 = 0 test and RMSLE comparisons.

Every study is a loop over replicates.  Replicate ``i`` draws from the
generator ``replicate_rng(seed, i)``, so results do not depend on the
number of workers or on completion order.  A replicate whose fit fails is
recorded with its error and left out of summaries; more than 20% failures
abort the study.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .coxsim import LGCPSimulator, SimulationError
from .geometry import Window
from .intensity import EstimationError
from .parallel import pmap
from .pipeline import FitResult, ModelSpec, PipelineError, fit, fit_three_step
from .randomfield import ModelError, replicate_rng
from .scenarios import Scenario

logger = logging.getLogger(__name__)

#: share of replicates allowed to fail before a study aborts
MAX_FAILURE_RATE = 0.2
#: share removed from each tail before means and RMSLE
TRIM = 0.05
#: parameters summarized per model variant
PARAMETERS = {
    "fish": ("gamma0", "gamma1", "alpha"),
    "dispersal": ("strength", "range", "sigma", "inv_alpha", "delta"),
    "stationary": ("sigma", "alpha"),
    "poisson": (),
}
RMSLE_PARAMETERS = ("strength", "range", "sigma", "inv_alpha", "delta")

_FAILURES = (PipelineError, EstimationError, SimulationError, ModelError, FloatingPointError,
             np.linalg.LinAlgError, ValueError, RuntimeError)


class StudyError(RuntimeError):
    """A study could not be completed."""


# ---------------------------------------------------------------------------
# Replicate bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class Replicate:
    index: int
    seed: int
    n_points: int = 0
    estimates: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def run_replicates(task: Callable[[np.random.Generator], tuple], n: int, seed: int,
                   workers: Optional[int] = 1) -> list[Replicate]:
    """Run ``task(rng) -> (n_points, estimates, extra)`` for ``n`` replicates.

    Failures are caught per replicate; more than ``MAX_FAILURE_RATE``
    failures raise :class:`StudyError`.
    """
    if n < 1:
        raise StudyError("need at least one replicate")

    def one(i):
        try:
            n_pts, est, extra = task(replicate_rng(seed, i))
            return Replicate(i, seed, int(n_pts), dict(est), dict(extra))
        except _FAILURES as exc:
            return Replicate(i, seed, error=f"{type(exc).__name__}: {exc}")

    reps = sorted(pmap(one, range(n), workers), key=lambda r: r.index)
    failed = [r for r in reps if not r.ok]
    if len(failed) > MAX_FAILURE_RATE * n:
        raise StudyError(f"{len(failed)} of {n} replicates failed; first error: {failed[0].error}")
    for r in failed:
        logger.info("replicate %d failed: %s", r.index, r.error)
    return reps


def estimate_table(reps: Sequence[Replicate], names: Sequence[str]) -> np.ndarray:
    """``(n_ok, len(names))`` array of estimates from the successful replicates."""
    ok = [r for r in reps if r.ok]
    return np.array([[r.estimates.get(k, np.nan) for k in names] for r in ok], dtype=float).reshape(len(ok),
                                                                                                      len(names))


def table_csv(reps: Sequence[Replicate], names: Sequence[str], path=None) -> str:
    """One row per replicate: index, seed, status, point count and estimates."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replicate", "seed", "status", "n_points", *names])
    for r in reps:
        vals = ["" if not r.ok else repr(float(r.estimates.get(k, math.nan))) for k in names]
        w.writerow([r.index, r.seed, "ok" if r.ok else "failed", r.n_points, *vals])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def trimmed_mean(x, prop: float = TRIM) -> float:
    """Mean after removing ``floor(prop * n)`` values from each tail."""
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    return float(stats.trim_mean(x, prop)) if len(x) else math.nan


def percentile_interval(x, level: float = 0.90) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if not len(x):
        return (math.nan, math.nan)
    a = 100 * (1 - level) / 2
    lo, hi = np.percentile(x, [a, 100 - a])
    return (float(lo), float(hi))


def summarize(reps: Sequence[Replicate], names: Sequence[str], truth: Optional[Mapping] = None) -> dict:
    """Trimmed means, medians and central 90% intervals per parameter."""
    tab = estimate_table(reps, names)
    out = {}
    for j, k in enumerate(names):
        col = tab[:, j]
        row = {"trimmed_mean": trimmed_mean(col), "median": float(np.nanmedian(col)) if len(col) else math.nan,
               "interval90": list(percentile_interval(col))}
        if truth is not None and k in truth:
            row["truth"] = float(truth[k])
        out[k] = row
    return {"parameters": out, "n_replicates": len(reps), "n_failed": sum(not r.ok for r in reps),
            "failures": [{"replicate": r.index, "error": r.error} for r in reps if not r.ok]}


# ---------------------------------------------------------------------------
# Parametric bootstrap
# ---------------------------------------------------------------------------


@dataclass
class StudyResult:
    summary: dict
    replicates: list
    parameters: tuple

    def table_csv(self, path=None) -> str:
        return table_csv(self.replicates, self.parameters, path)


def fitted_simulator(result: FitResult, window: Window) -> LGCPSimulator:
    """Simulator of the LGCP with the fitted intensity and random field."""
    if result.intensity is None:
        raise StudyError("fit result carries no live intensity; refit in-process first")
    return LGCPSimulator(result.intensity, result.field_model(), window)


def parametric_bootstrap(result: FitResult, window: Window, B: int, seed: int, workers: Optional[int] = 1,
                         count_range: Optional[tuple[int, int]] = None, level: float = 0.90) -> StudyResult:
    """Simulate ``B`` patterns from the fitted model and refit each with the same procedure.

    Tuning that depends on the data (subwindow breakpoints, pair-fraction
    ranges) is recomputed for every replicate.  Reports central ``level``
    percentile intervals per parameter and the estimate table.
    """
    if B < 2:
        raise StudyError("bootstrap needs B >= 2")
    sim = fitted_simulator(result, window)
    spec, covs, method = result.spec, result.covariates, result.method
    names = PARAMETERS[spec.variant] + tuple(k for k in sorted(result.estimates) if k.startswith("beta"))

    def task(rng):
        pat = sim.simulate_constrained(rng, count_range) if count_range else sim.simulate(rng)
        r = fit(pat, covs, spec, method)
        return pat.n, r.estimates, {}

    reps = run_replicates(task, B, seed, workers)
    summ = summarize(reps, names, result.estimates)
    for k in names:
        summ["parameters"][k]["interval"] = list(percentile_interval(estimate_table(reps, [k])[:, 0], level))
    summ["level"] = level
    summ["B"] = B
    return StudyResult(summ, reps, names)


# ---------------------------------------------------------------------------
# Simulation series
# ---------------------------------------------------------------------------


def default_spec(scenario: Scenario) -> ModelSpec:
    return ModelSpec.fish() if scenario.name == "fish" else ModelSpec.dispersal()


def run_series(scenario: Scenario, n: int, seed: int, spec: Optional[ModelSpec] = None,
               method: str = "three-step", workers: Optional[int] = 1) -> StudyResult:
    """Simulate ``n`` patterns from ``scenario``, fit each and summarize with 5% trimming."""
    if n < 1:
        raise StudyError("replicate count must be positive")
    spec = spec or default_spec(scenario)
    names = PARAMETERS[spec.variant]

    def task(rng):
        pat = scenario.simulate(rng)
        r = fit(pat, scenario.covariates, spec, method)
        extra = {"p_value": r.regression.get("p_value")} if "p_value" in r.regression else {}
        return pat.n, r.estimates, extra

    reps = run_replicates(task, n, seed, workers)
    summ = summarize(reps, names, scenario.truth)
    summ.update(scenario=scenario.name, series=scenario.meta.get("series"), method=method, n=n, seed=seed)
    return StudyResult(summ, reps, names)


def gamma1_test_study(scenario: Scenario, n: int, seed: int, levels: Sequence[float] = (0.01, 0.05, 0.10),
                      spec: Optional[ModelSpec] = None, workers: Optional[int] = 1) -> dict:
    """Count rejections of ``gamma1 = 0`` by the step-2 regression t-test at each level."""
    spec = spec or ModelSpec.fish()
    if spec.variant != "fish":
        raise StudyError("the gamma1 test needs a linear-variance model")

    def task(rng):
        pat = scenario.simulate(rng)
        r = fit_three_step(pat, scenario.covariates, spec, through_step=2)
        return pat.n, r.estimates, {"p_value": r.regression["p_value"]}

    reps = run_replicates(task, n, seed, workers)
    p = np.array([r.extra["p_value"] for r in reps if r.ok], dtype=float)
    counts = {f"{lv:g}": int(np.sum(p < lv)) for lv in levels}
    return {"scenario": scenario.name, "series": scenario.meta.get("series"), "n": n, "n_ok": len(p),
            "seed": seed, "rejections": counts,
            "rates": {k: (v / len(p) if len(p) else math.nan) for k, v in counts.items()},
            "p_values": p.tolist(), "replicates": reps}


# ---------------------------------------------------------------------------
# RMSLE comparison
# ---------------------------------------------------------------------------


def rmsle(estimates, truth: float, trim: float = TRIM) -> float:
    """Root mean squared log error after dropping ``floor(trim * n)`` estimates from each tail."""
    x = np.sort(np.asarray(estimates, dtype=float))
    x = x[np.isfinite(x)]
    if not truth > 0:
        raise ValueError("RMSLE needs a positive true value")
    k = int(math.floor(trim * len(x)))
    x = x[k: len(x) - k]
    if not len(x) or np.any(x <= 0):
        return math.nan
    return float(np.sqrt(np.mean((np.log(x) - math.log(truth)) ** 2)))


def rmsle_ratio(three: float, two: float) -> tuple[float, Optional[str]]:
    """``three / two``; ``nan`` with a flag when the denominator vanishes."""
    if not (np.isfinite(three) and np.isfinite(two)):
        return math.nan, "undefined RMSLE"
    if two == 0:
        return math.nan, "zero RMSLE in the denominator"
    if three == two:
        return 1.0, None
    return three / two, None


def rmsle_compare(scenario: Scenario, n: int, seed: int, spec: Optional[ModelSpec] = None,
                  parameters: Sequence[str] = RMSLE_PARAMETERS, workers: Optional[int] = 1) -> dict:
    """Fit every simulated pattern with both procedures; RMSLE ratio (three-step / two-step) per parameter."""
    spec = spec or default_spec(scenario)

    def task(rng):
        pat = scenario.simulate(rng)
        a = fit(pat, scenario.covariates, spec, "three-step").estimates
        b = fit(pat, scenario.covariates, spec, "two-step").estimates
        est = {f"three:{k}": v for k, v in a.items()}
        est.update({f"two:{k}": v for k, v in b.items()})
        return pat.n, est, {}

    reps = run_replicates(task, n, seed, workers)
    rows = {}
    for k in parameters:
        t = scenario.truth.get(k)
        a = estimate_table(reps, [f"three:{k}"])[:, 0]
        b = estimate_table(reps, [f"two:{k}"])[:, 0]
        ra, rb = rmsle(a, t), rmsle(b, t)
        ratio, flag = rmsle_ratio(ra, rb)
        rows[k] = {"truth": t, "rmsle_three_step": ra, "rmsle_two_step": rb, "ratio": ratio, "flag": flag}
    return {"scenario": scenario.name, "series": scenario.meta.get("series"), "n": n, "seed": seed,
            "n_failed": sum(not r.ok for r in reps), "parameters": rows, "replicates": reps}
