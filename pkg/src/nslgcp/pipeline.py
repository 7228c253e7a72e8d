"""Three-step estimation of non-stationary LGCPs and the two-step baseline.

Step 1 fits the intensity.  Step 2 splits the window into covariate bands,
fits a stationary second-order model in each band and regresses the band
estimates on the band covariate level; this yields the split parameters.
Step 3 holds steps 1 and 2 fixed and maximizes a second-order criterion for
the remaining (joint) parameters.

Three model variants are supported:

``fish``        linear ``sigma(u)``, no deformation; split ``(gamma0, gamma1)``, joint ``alpha``
``dispersal``   constant ``sigma``, radial-log deformation; split ``delta``, joint ``(sigma, alpha)``
``stationary``  constant ``sigma``, no deformation; nothing split, joint ``(sigma, alpha)``
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Optional

import numpy as np
from scipy import stats
from scipy.optimize import minimize, minimize_scalar

from .coxsim import GriddedIntensity, LogLinearIntensity
from .geometry import (CovariateField, Grid, GeometryError, Partition, PointPattern, partition_by_covariate,
                       radial_distance, transform_pattern)
from .intensity import EstimationError, fit_cl1, kernel_intensity
from .randomfield import (ConstantStd, ExponentialCorrelation, FieldModel, IdentityMap, LinearStd, ModelError,
                          RadialLogMap)
from .secondorder import (LOG_BOUND, FullCL2, InsufficientPairsError, SubwindowCL2, build_stieltjes,
                          maximize_cl2_subwindow, maximize_log2, scaled_starts, select_r_by_pair_fraction)

logger = logging.getLogger(__name__)

# search half-width for log(delta) around 1/median distance to the source,
# shared by the deformation regression and the two-step profile
DELTA_LOG_BOUND = 7.0


class PipelineError(RuntimeError):
    """A pipeline step failed; ``step`` is 1, 2 or 3."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    """Model structure and tuning of the estimation procedure.

    ``R_split`` / ``R_joint`` fix the interaction range of the step-2 and
    step-3 criteria; when ``None`` the range is chosen so that
    ``R_*_fraction`` of the observed pairs qualify.  ``quad_cells`` sets the
    full-window quadrature resolution (cells across the longer side); when
    ``None`` the split covariate grid is used.  ``split_range_cap`` bounds
    the step-2 correlation range ``1 / alpha_0k`` by that multiple of
    ``R_k`` (``None``: only the generic log-space box); ``joint_range_cap``
    does the same for the stationary joint fits over the whole (possibly
    transformed) window, in both the three-step and the two-step procedure.
    """

    intensity: str = "loglinear"  # loglinear | kernel
    intensity_covariates: tuple = ()
    bandwidth: Optional[float] = None
    variance: str = "constant"  # none | constant | linear
    variance_covariate: Optional[str] = None
    deformation: str = "identity"  # identity | radial-log
    split_covariate: Optional[str] = None
    K: int = 5
    R_split: Optional[float] = None
    R_split_fraction: float = 0.5
    R_joint: Optional[float] = None
    R_joint_fraction: float = 0.5
    bins: int = 512
    quad_cells: Optional[int] = None
    transformed_cells: int = 128
    min_points_warning: int = 100
    split_range_cap: Optional[float] = None
    joint_range_cap: Optional[float] = None

    def __post_init__(self):
        self.intensity_covariates = tuple(self.intensity_covariates)
        self.validate()

    def validate(self) -> None:
        if self.intensity not in ("loglinear", "kernel"):
            raise ModelError(f"model.intensity: unknown kind {self.intensity!r}")
        if self.intensity == "kernel" and not (self.bandwidth and self.bandwidth > 0):
            raise ModelError("model.bandwidth: kernel intensity needs a positive bandwidth")
        if self.variance not in ("none", "constant", "linear"):
            raise ModelError(f"model.variance: unknown kind {self.variance!r}")
        if self.deformation not in ("identity", "radial-log"):
            raise ModelError(f"model.deformation: unknown kind {self.deformation!r}")
        if self.variance == "linear" and not self.variance_covariate:
            raise ModelError("model.variance_covariate: linear variance needs a covariate")
        if self.variance == "linear" and self.deformation != "identity":
            raise ModelError("model: linear variance with a deformation is not supported")
        if self.variance == "none" and self.deformation != "identity":
            raise ModelError("model: a deformation needs a random field (variance != 'none')")
        if self.variant in ("fish", "dispersal") and not self.split_covariate:
            raise ModelError("model.split_covariate: required for the split parameters")
        if self.K < 2:
            raise ModelError("model.K: need at least two subwindows")
        if self.bins < 1:
            raise ModelError("model.bins: must be positive")
        for name in ("R_split", "R_joint"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ModelError(f"model.{name}: must be positive")
        for name in ("split_range_cap", "joint_range_cap"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ModelError(f"model.{name}: must be positive")
        for name in ("R_split_fraction", "R_joint_fraction"):
            if not 0 < getattr(self, name) <= 1:
                raise ModelError(f"model.{name}: must lie in (0, 1]")

    @property
    def variant(self) -> str:
        if self.variance == "none":
            return "poisson"
        if self.variance == "linear":
            return "fish"
        return "dispersal" if self.deformation == "radial-log" else "stationary"

    @property
    def nu_split(self) -> tuple[str, ...]:
        return {"fish": ("gamma0", "gamma1"), "dispersal": ("delta",)}.get(self.variant, ())

    @property
    def nu_joint(self) -> tuple[str, ...]:
        return {"fish": ("alpha",), "dispersal": ("sigma", "alpha"), "stationary": ("sigma", "alpha")}.get(
            self.variant, ())

    @property
    def nu(self) -> tuple[str, ...]:
        return self.nu_split + self.nu_joint

    def required_covariates(self) -> set[str]:
        need = set(self.intensity_covariates)
        for name in (self.variance_covariate, self.split_covariate):
            if name:
                need.add(name)
        return need

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensity_covariates"] = list(self.intensity_covariates)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"model: unknown field(s) {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def fish(cls, **overrides) -> "ModelSpec":
        base = dict(intensity="kernel", bandwidth=50.0, variance="linear", variance_covariate="depth",
                    split_covariate="depth", K=5, R_split=11.0, R_joint=11.0, split_range_cap=1.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def dispersal(cls, **overrides) -> "ModelSpec":
        base = dict(intensity="loglinear", intensity_covariates=("distance",), variance="constant",
                    deformation="radial-log", split_covariate="distance", K=5, quad_cells=80,
                    split_range_cap=1.0, joint_range_cap=1.0)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


def _plain(x):
    """Recursively convert numpy scalars/arrays to JSON-ready Python objects."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class FitResult:
    """Estimates and every intermediate of one fit.

    ``estimates`` holds the final parameter values; ``step1``,
    ``subwindows``, ``regression`` and ``step3`` record how each was
    produced.  ``intensity``, ``partition`` and ``covariates`` are live
    objects for in-process reuse and are not serialized.
    """

    method: str
    spec: ModelSpec
    n_points: int
    estimates: dict
    step1: dict = field(default_factory=dict)
    subwindows: list = field(default_factory=list)
    regression: dict = field(default_factory=dict)
    step3: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    intensity: object = field(default=None, repr=False, compare=False)
    partition: Optional[Partition] = field(default=None, repr=False, compare=False)
    covariates: Mapping = field(default_factory=dict, repr=False, compare=False)

    def field_model(self) -> FieldModel:
        """The fitted residual-field model."""
        e = self.estimates
        v = self.spec.variant
        if v == "fish":
            std = LinearStd(e["gamma0"], e["gamma1"], self.covariates[self.spec.variance_covariate])
            return FieldModel(std, IdentityMap(), ExponentialCorrelation(e["alpha"]))
        if v == "dispersal":
            return FieldModel(ConstantStd(e["sigma"]), RadialLogMap(e["delta"]), ExponentialCorrelation(e["alpha"]))
        if v == "stationary":
            return FieldModel(ConstantStd(e["sigma"]), IdentityMap(), ExponentialCorrelation(e["alpha"]))
        raise ModelError("a Poisson model has no random field")

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {
            "method": self.method,
            "spec": self.spec.to_dict(),
            "n_points": self.n_points,
            "estimates": self.estimates,
            "step1": self.step1,
            "subwindows": self.subwindows,
            "regression": self.regression,
            "step3": self.step3,
            "flags": sorted(set(self.flags)),
            "seeds": self.seeds,
        }
        if include_timings:
            d["timings"] = self.timings
        return _plain(d)

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitResult":
        return cls(method=d["method"], spec=ModelSpec.from_dict(d["spec"]), n_points=int(d["n_points"]),
                   estimates=dict(d["estimates"]), step1=dict(d.get("step1", {})),
                   subwindows=list(d.get("subwindows", [])), regression=dict(d.get("regression", {})),
                   step3=dict(d.get("step3", {})), flags=list(d.get("flags", [])), seeds=dict(d.get("seeds", {})))


# ---------------------------------------------------------------------------
# Step 1
# ---------------------------------------------------------------------------


def _covariate(covariates: Mapping[str, CovariateField], name: str, step: int) -> CovariateField:
    try:
        return covariates[name]
    except KeyError:
        raise PipelineError(step, f"covariate {name!r} is not available") from None


def _base_grid(covariates: Mapping[str, CovariateField], spec: ModelSpec, pattern: PointPattern) -> Grid:
    for name in (spec.split_covariate, spec.variance_covariate, *spec.intensity_covariates):
        if name and name in covariates:
            return covariates[name].grid
    return Grid.for_window(pattern.window)


def fit_intensity(pattern: PointPattern, covariates: Mapping[str, CovariateField], spec: ModelSpec):
    """Step 1: ``(intensity, record)`` by first-order composite likelihood or kernel smoothing."""
    try:
        if spec.intensity == "kernel":
            grid = _base_grid(covariates, spec, pattern)
            rho = kernel_intensity(pattern, spec.bandwidth, grid)
            return rho, {"kind": "kernel", "bandwidth": spec.bandwidth, "flags": list(rho.flags)}
        covs = [_covariate(covariates, c, 1) for c in spec.intensity_covariates]
        grid = covs[0].grid if covs else None
        fit = fit_cl1(pattern, covs, grid)
        rec = {"kind": "loglinear", "covariates": list(spec.intensity_covariates), "beta": fit.beta,
               "objective": fit.objective, "iterations": fit.iterations}
        return fit.intensity(covs), rec
    except (EstimationError, ValueError) as exc:
        raise PipelineError(1, str(exc)) from exc


def intensity_estimates(record: Mapping) -> dict:
    if record.get("kind") != "loglinear":
        return {}
    return {f"beta{i}": float(b) for i, b in enumerate(record["beta"])}


# ---------------------------------------------------------------------------
# Step 2
# ---------------------------------------------------------------------------


def fit_subwindows(pattern: PointPattern, rho, f: CovariateField, spec: ModelSpec):
    """Per-subwindow stationary fits; returns ``(partition, records)``."""
    try:
        part = partition_by_covariate(pattern, f, spec.K)
    except GeometryError as exc:
        raise PipelineError(2, str(exc)) from exc
    grid = f.grid
    rho_vals = rho.on(grid)
    records = []
    for k in range(part.K):
        pts = part.points_in(pattern, k)
        if len(pts) < spec.min_points_warning:
            logger.debug("subwindow %d holds %d points (< %d)", k, len(pts), spec.min_points_warning)
        try:
            R = spec.R_split if spec.R_split is not None else select_r_by_pair_fraction(pts, spec.R_split_fraction)
            table = build_stieltjes(rho_vals, grid, part.masks[k], R, spec.bins)
            floor = _range_floor(spec.split_range_cap, R)
            fit = maximize_cl2_subwindow(pts, rho, table, alpha_min=floor)
        except (InsufficientPairsError, RuntimeError) as exc:
            raise PipelineError(2, f"subwindow {k + 1}: {exc}") from exc
        records.append({
            "k": k + 1, "sigma0": fit.sigma, "alpha0": fit.alpha, "Fbar": float(part.means[k]), "R": float(R),
            "n_points": int(len(pts)), "n_pairs": fit.n_pairs, "objective": fit.value, "flags": fit.flags,
            "start_objectives": fit.start_values,
        })
    return part, records


@dataclass(frozen=True)
class SigmaRegression:
    gamma0: float
    gamma1: float
    p_value: float
    residuals: np.ndarray
    stderr: float


def regress_sigma_linear(sigma0, Fbar) -> SigmaRegression:
    """OLS of ``sigma0_k`` on ``Fbar_k`` with the two-sided t-test of a zero slope."""
    y = np.asarray(sigma0, dtype=float)
    x = np.asarray(Fbar, dtype=float)
    if len(y) < 3:
        raise EstimationError(f"regression needs K >= 3 subwindows, got {len(y)}")
    if np.ptp(x) <= 1e-12 * max(1.0, np.abs(x).max()):
        raise EstimationError("singular design: all subwindow covariate means are equal")
    res = stats.linregress(x, y)
    resid = y - (res.intercept + res.slope * x)
    return SigmaRegression(float(res.intercept), float(res.slope), float(res.pvalue), resid, float(res.stderr))


@dataclass(frozen=True)
class DeformationRegression:
    alpha: float
    delta: float
    loss: float
    flags: tuple


def deformation_curve(F, alpha, delta):
    """``alpha log(1 + delta F) / F``."""
    F = np.asarray(F, dtype=float)
    return alpha * np.log1p(delta * F) / F


def regress_alpha_deformation(alpha0, Fbar) -> DeformationRegression:
    """Least-absolute-deviation fit of ``alpha0_k ~ alpha log(1 + delta F_k) / F_k``.

    Simplex search in ``(log alpha, log delta)`` from several starts.  The
    fit is flagged weakly identified when ``delta`` ends on its search bound
    or so small that the curve is flat over the observed ``F`` range.
    """
    a = np.asarray(alpha0, dtype=float)
    F = np.asarray(Fbar, dtype=float)
    if len(a) < 2:
        raise EstimationError("deformation regression needs K >= 2 subwindows")
    if np.any(F <= 0):
        raise EstimationError("deformation regression needs positive covariate means")

    def loss(x):
        return float(np.abs(a - deformation_curve(F, *np.exp(x))).sum())

    fscale = float(np.median(F))
    dlo, dhi = math.log(1.0 / fscale) - DELTA_LOG_BOUND, math.log(1.0 / fscale) + DELTA_LOG_BOUND
    best = None
    for dstart in (0.1, 1.0, 10.0, 100.0):
        d0 = dstart / fscale
        al0 = float(np.median(a * F / np.log1p(d0 * F)))
        x0 = np.log([al0, d0])
        bounds = [(x0[0] - LOG_BOUND, x0[0] + LOG_BOUND), (dlo, dhi)]
        res = minimize(loss, x0, method="Nelder-Mead", bounds=bounds,
                       options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000, "maxfev": 40000})
        # polish: a second simplex from the optimum escapes premature collapse
        res = minimize(loss, res.x, method="Nelder-Mead", bounds=bounds,
                       options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 20000, "maxfev": 40000})
        on_bound = bool(np.isclose(res.x[1], bounds[1][0]) or np.isclose(res.x[1], bounds[1][1]))
        if best is None or res.fun < best[1] - 1e-15:
            best = (res.x, float(res.fun), on_bound)
    if best is None or not np.all(np.isfinite(best[0])):
        raise EstimationError("deformation regression failed from all starts")
    alpha, delta = np.exp(best[0])
    flags = []
    if best[2] or delta * F.max() < 1e-3:
        flags.append("weakly-identified")
    return DeformationRegression(float(alpha), float(delta), best[1], tuple(flags))


# ---------------------------------------------------------------------------
# Step 3
# ---------------------------------------------------------------------------


def _quad_grid(pattern: PointPattern, covariates, spec: ModelSpec) -> Grid:
    if spec.quad_cells is None:
        return _base_grid(covariates, spec, pattern)
    return Grid.for_window(pattern.window, cells_across=spec.quad_cells)


def _joint_range(points: np.ndarray, fixed: Optional[float], fraction: float) -> float:
    return float(fixed) if fixed is not None else select_r_by_pair_fraction(points, fraction)


def maximize_log_scalar(fun, start: float = 1.0, bound: float = LOG_BOUND, coarse: int = 25):
    """Maximize ``fun(exp(x))`` over ``|x - log start| <= bound``.

    A coarse scan locates the best bracket, bounded Brent refines it.
    Returns ``(argmax, value, at_bound)``.
    """
    x0 = math.log(start)
    xs = np.linspace(x0 - bound, x0 + bound, coarse)
    vals = np.array([fun(math.exp(x)) for x in xs])
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    i = int(np.argmax(vals))
    lo, hi = xs[max(i - 1, 0)], xs[min(i + 1, coarse - 1)]
    res = minimize_scalar(lambda x: -fun(math.exp(x)), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-6})
    x, v = (res.x, -res.fun) if -res.fun >= vals[i] else (xs[i], vals[i])
    at_bound = bool(abs(x - xs[0]) < 1e-3 or abs(x - xs[-1]) < 1e-3)
    return math.exp(x), float(v), at_bound


def fit_step3_fish(pattern: PointPattern, rho, gamma: tuple[float, float], R: float,
                   covariate: CovariateField, grid: Optional[Grid] = None) -> dict:
    """Maximize the full-window criterion over ``alpha`` with ``sigma(u) = gamma0 + gamma1 z(u)`` fixed."""
    try:
        std = LinearStd(gamma[0], gamma[1], covariate)
    except ModelError as exc:
        raise PipelineError(3, f"invalid step-2 output: {exc}") from exc
    try:
        crit = FullCL2(pattern.points, rho, R, grid or covariate.grid)
    except InsufficientPairsError as exc:
        raise PipelineError(3, str(exc)) from exc

    def value(alpha):
        return crit(FieldModel(std, IdentityMap(), ExponentialCorrelation(alpha)))

    alpha, v, at_bound = maximize_log_scalar(value, start=1.0)
    return {"alpha": alpha, "objective": v, "R": float(R), "n_pairs": crit.n_pairs,
            "flags": ["weakly-identified"] if at_bound else []}


def _range_floor(cap: Optional[float], R: float) -> Optional[float]:
    return None if cap is None else 1.0 / (cap * R)


def fit_step3_stationary(pattern: PointPattern, rho, R: float, grid: Grid, bins: int = 512,
                         range_cap: Optional[float] = None) -> dict:
    """Stationary second-order fit over the whole window through a Stieltjes table."""
    table = build_stieltjes(rho.on(grid), grid, None, R, bins)
    try:
        fit = maximize_cl2_subwindow(pattern.points, rho, table, alpha_min=_range_floor(range_cap, R))
    except InsufficientPairsError as exc:
        raise PipelineError(3, str(exc)) from exc
    return {"sigma": fit.sigma, "alpha": fit.alpha, "objective": fit.value, "R": float(R),
            "n_pairs": fit.n_pairs, "flags": fit.flags}


def fit_step3_dispersal(pattern: PointPattern, delta: float, spec: ModelSpec) -> dict:
    """Stationary fit of ``(sigma, alpha)`` to the pattern mapped by the fitted deformation.

    The image intensity is refitted as log-linear in the distance to the
    origin on the transformed window.
    """
    if not delta > 0:
        raise PipelineError(3, f"deformation parameter must be positive, got {delta}")
    try:
        tp = transform_pattern(pattern, RadialLogMap(delta))
        tgrid = Grid.for_window(tp.window, cells_across=spec.transformed_cells)
    except GeometryError as exc:
        raise PipelineError(3, str(exc)) from exc
    dist = CovariateField.from_function(tgrid, radial_distance, "distance")
    try:
        cl1 = fit_cl1(tp, [dist], tgrid)
    except EstimationError as exc:
        raise PipelineError(3, f"transformed intensity: {exc}") from exc
    rho_t = cl1.intensity([dist])
    R = _joint_range(tp.points, spec.R_joint, spec.R_joint_fraction)
    out = fit_step3_stationary(tp, rho_t, R, tgrid, spec.bins, spec.joint_range_cap)
    out["beta_transformed"] = cl1.beta
    return out


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def _check_inputs(pattern: PointPattern, covariates: Mapping[str, CovariateField], spec: ModelSpec):
    missing = spec.required_covariates() - set(covariates)
    if missing:
        raise PipelineError(1, f"model needs covariate(s) {sorted(missing)} which were not supplied")


def _finish(result: FitResult) -> FitResult:
    bad = {k: v for k, v in result.estimates.items() if not np.isfinite(v)}
    if bad:
        raise PipelineError(3, f"non-finite estimates {bad}")
    if result.spec.variant == "dispersal" and "beta1" in result.estimates and result.estimates["beta1"] < 0:
        b0, b1 = result.estimates["beta0"], result.estimates["beta1"]
        result.estimates["strength"] = 2 * math.pi * math.exp(b0) / b1**2
        result.estimates["range"] = -1.0 / b1
    if "alpha" in result.estimates:
        result.estimates["inv_alpha"] = 1.0 / result.estimates["alpha"]
    return result


def fit_three_step(pattern: PointPattern, covariates: Mapping[str, CovariateField], spec: ModelSpec,
                   through_step: int = 3) -> FitResult:
    """Run the three-step procedure; ``through_step`` < 3 stops early."""
    _check_inputs(pattern, covariates, spec)
    t0 = time.perf_counter()
    rho, rec1 = fit_intensity(pattern, covariates, spec)
    est = intensity_estimates(rec1)
    result = FitResult("three-step", spec, pattern.n, est, step1=rec1, intensity=rho, covariates=covariates)
    result.timings["step1"] = time.perf_counter() - t0
    variant = spec.variant
    if variant in ("poisson",) or through_step < 2:
        return _finish(result)

    if variant in ("fish", "dispersal"):
        t1 = time.perf_counter()
        f = _covariate(covariates, spec.split_covariate, 2)
        part, subs = fit_subwindows(pattern, rho, f, spec)
        result.partition, result.subwindows = part, subs
        for s in subs:
            result.flags += [f"subwindow {s['k']}: {fl}" for fl in s["flags"]]
        Fbar = [s["Fbar"] for s in subs]
        try:
            if variant == "fish":
                reg = regress_sigma_linear([s["sigma0"] for s in subs], Fbar)
                result.regression = {"kind": "sigma-linear", "gamma0": reg.gamma0, "gamma1": reg.gamma1,
                                     "p_value": reg.p_value, "stderr": reg.stderr, "residuals": reg.residuals}
                est.update(gamma0=reg.gamma0, gamma1=reg.gamma1)
            else:
                reg = regress_alpha_deformation([s["alpha0"] for s in subs], Fbar)
                result.regression = {"kind": "alpha-deformation", "alpha": reg.alpha, "delta": reg.delta,
                                     "loss": reg.loss, "flags": list(reg.flags)}
                result.flags += [f"deformation: {fl}" for fl in reg.flags]
                est["delta"] = reg.delta
        except EstimationError as exc:
            raise PipelineError(2, str(exc)) from exc
        result.timings["step2"] = time.perf_counter() - t1
    if through_step < 3:
        return _finish(result)

    t2 = time.perf_counter()
    if variant == "fish":
        R = _joint_range(pattern.points, spec.R_joint, spec.R_joint_fraction)
        s3 = fit_step3_fish(pattern, rho, (est["gamma0"], est["gamma1"]), R,
                            _covariate(covariates, spec.variance_covariate, 3), _quad_grid(pattern, covariates, spec))
        est["alpha"] = s3["alpha"]
    elif variant == "dispersal":
        s3 = fit_step3_dispersal(pattern, est["delta"], spec)
        est.update(sigma=s3["sigma"], alpha=s3["alpha"])
    else:
        R = _joint_range(pattern.points, spec.R_joint, spec.R_joint_fraction)
        s3 = fit_step3_stationary(pattern, rho, R, _quad_grid(pattern, covariates, spec), spec.bins,
                                  spec.joint_range_cap)
        est.update(sigma=s3["sigma"], alpha=s3["alpha"])
    result.step3 = s3
    result.flags += [f"step 3: {fl}" for fl in s3["flags"]]
    result.timings["step3"] = time.perf_counter() - t2
    return _finish(result)


def _two_step_dispersal(crit: FullCL2, bins: int, R: float, scale: float, range_cap: Optional[float] = None):
    """Profile the joint criterion over ``delta``; inner simplex search over ``(sigma, alpha)``.

    ``scale`` is the median distance of the points to the origin; ``delta``
    is searched in the same range as in the deformation regression.
    """
    inner_cache: dict = {}

    def inner(delta):
        key = float(delta)
        if key not in inner_cache:
            d_data, table = crit.stieltjes(RadialLogMap(delta), bins)

            def value(sigma, alpha):
                s2 = sigma * sigma
                data = crit.log_rr + s2 * np.exp(-alpha * d_data).sum()
                integral = table.integrate(lambda t: np.exp(s2 * np.exp(-alpha * t)))
                return float(data - crit.n_pairs * np.log(integral))

            # alpha starts live in deformed distance: rescale by the deformed pair range
            reach = float(d_data.max())
            x, v, at_b, ok, _, _ = maximize_log2(value, scaled_starts(reach),
                                                 lower=(None, _range_floor(range_cap, reach)))
            inner_cache[key] = (np.exp(x), v, at_b)
        return inner_cache[key]

    delta, v, at_bound = maximize_log_scalar(lambda d: inner(d)[1], start=1.0 / scale,
                                             bound=DELTA_LOG_BOUND, coarse=15)
    (sigma, alpha), _, inner_bound = inner(delta)
    flags = (["weakly-identified"] if at_bound else []) + (["inner weakly-identified"] if inner_bound else [])
    return {"delta": delta, "sigma": float(sigma), "alpha": float(alpha), "objective": v, "R": float(R),
            "n_pairs": crit.n_pairs, "flags": flags}


def fit_two_step(pattern: PointPattern, covariates: Mapping[str, CovariateField], spec: ModelSpec) -> FitResult:
    """Baseline: step 1, then one joint maximization of the full-window criterion over all of ``nu``."""
    _check_inputs(pattern, covariates, spec)
    if not spec.nu:
        raise PipelineError(2, "empty second-order parameter vector: nothing to estimate")
    t0 = time.perf_counter()
    rho, rec1 = fit_intensity(pattern, covariates, spec)
    est = intensity_estimates(rec1)
    result = FitResult("two-step", spec, pattern.n, est, step1=rec1, intensity=rho, covariates=covariates)
    result.timings["step1"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    R = _joint_range(pattern.points, spec.R_joint, spec.R_joint_fraction)
    grid = _quad_grid(pattern, covariates, spec)
    try:
        crit = FullCL2(pattern.points, rho, R, grid)
    except InsufficientPairsError as exc:
        raise PipelineError(2, str(exc)) from exc
    variant = spec.variant
    if variant == "dispersal":
        scale = float(np.median(radial_distance(pattern.points)))
        s2 = _two_step_dispersal(crit, spec.bins, R, scale, spec.joint_range_cap)
        est.update(delta=s2["delta"], sigma=s2["sigma"], alpha=s2["alpha"])
    elif variant == "stationary":
        def value(sigma, alpha):
            return crit(FieldModel(ConstantStd(sigma), IdentityMap(), ExponentialCorrelation(alpha)))

        x, v, at_b, ok, _, _ = maximize_log2(value, scaled_starts(R), lower=(None, _range_floor(spec.joint_range_cap, R)))
        est.update(sigma=float(np.exp(x[0])), alpha=float(np.exp(x[1])))
        s2 = {"objective": v, "R": R, "n_pairs": crit.n_pairs, "flags": ["weakly-identified"] if at_b else []}
    else:
        z = _covariate(covariates, spec.variance_covariate, 2)

        def neg(x):
            g0, g1, la = x
            try:
                std = LinearStd(g0, g1, z)
            except ModelError:
                return np.inf
            with np.errstate(over="ignore", invalid="ignore"):
                v = crit(FieldModel(std, IdentityMap(), ExponentialCorrelation(math.exp(la))))
            return -v if np.isfinite(v) else np.inf

        best = None
        for s0, a0 in scaled_starts(R):
            res = minimize(neg, [s0, 0.0, math.log(a0)], method="Nelder-Mead",
                           options={"xatol": 1e-6, "fatol": 1e-10, "maxiter": 4000})
            if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
                best = res
        if best is None:
            raise PipelineError(2, "joint maximization failed from all starts")
        est.update(gamma0=float(best.x[0]), gamma1=float(best.x[1]), alpha=float(math.exp(best.x[2])))
        s2 = {"objective": float(-best.fun), "R": R, "n_pairs": crit.n_pairs, "flags": []}
    result.step3 = s2
    result.flags += [f"joint: {fl}" for fl in s2["flags"]]
    result.timings["joint"] = time.perf_counter() - t1
    return _finish(result)


def fit(pattern: PointPattern, covariates: Mapping[str, CovariateField], spec: ModelSpec,
        method: str = "three-step") -> FitResult:
    if method == "three-step":
        return fit_three_step(pattern, covariates, spec)
    if method == "two-step":
        return fit_two_step(pattern, covariates, spec)
    raise ValueError(f"unknown method {method!r} (expected 'three-step' or 'two-step')")
