"""First-order estimation: log-linear intensities by composite likelihood and kernel smoothing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .coxsim import GriddedIntensity, LogLinearIntensity
from .geometry import CovariateField, Grid, PointPattern

logger = logging.getLogger(__name__)


class EstimationError(RuntimeError):
    """An estimator failed (rank deficiency, non-convergence, too little data)."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class CL1Fit:
    beta: np.ndarray
    objective: float
    iterations: int
    gradient: np.ndarray
    hessian: np.ndarray
    trace: list = field(default_factory=list, repr=False)

    def intensity(self, covariates: Sequence[CovariateField]) -> LogLinearIntensity:
        return LogLinearIntensity(self.beta, covariates)


def _design(points: np.ndarray, covariates: Sequence[CovariateField]) -> np.ndarray:
    cols = [np.ones(len(points))] + [z.at(points) for z in covariates]
    return np.column_stack(cols)


def fit_cl1(
    pattern: PointPattern,
    covariates: Sequence[CovariateField] = (),
    grid: Optional[Grid] = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> CL1Fit:
    """Maximize ``sum log rho(x_i) - int_W rho`` for ``log rho = beta . (1, z_1, ...)``.

    The integral is a midpoint sum over the covariate grid (or ``grid``);
    without covariates it is ``|W| exp(beta_0)`` and the maximizer is closed
    form.  Damped Newton on the concave objective; converged when the score
    max-norm drops below ``tol`` times the scale of the data score.
    """
    covariates = list(covariates)
    n = pattern.n
    if n == 0:
        raise EstimationError("first-order fit needs at least one point")
    if not covariates:
        area = pattern.window.area
        b0 = np.log(n / area)
        obj = n * b0 - area * np.exp(b0)
        return CL1Fit(np.array([b0]), float(obj), 0, np.zeros(1), np.array([[-float(n)]]))

    grid = grid or covariates[0].grid
    cells = np.flatnonzero(grid.mask.ravel())
    Zq = np.column_stack([np.ones(len(cells))] + [z.on(grid).ravel()[cells] for z in covariates])
    a = grid.cell_area
    Zx = _design(pattern.points, covariates)
    if np.linalg.matrix_rank(Zq) < Zq.shape[1] or np.linalg.matrix_rank(Zx) < 1:
        raise EstimationError("covariate design matrix is rank deficient on the window")
    s_data = Zx.sum(axis=0)
    scale = 1.0 + np.abs(s_data).max()

    def evaluate(beta):
        eta = Zq @ beta
        w = np.exp(eta) * a
        obj = float(s_data @ beta - w.sum())
        grad = s_data - Zq.T @ w
        return obj, grad, w

    beta = np.zeros(Zq.shape[1])
    beta[0] = np.log(n / (len(cells) * a))
    obj, grad, w = evaluate(beta)
    trace = [(0, obj, float(np.abs(grad).max()))]
    for it in range(1, max_iter + 1):
        hess = -(Zq * w[:, None]).T @ Zq
        # concavity: the Hessian is negative semi-definite at every iterate
        assert np.linalg.eigvalsh(hess).max() <= 1e-9 * max(1.0, np.abs(hess).max())
        step = np.linalg.solve(hess, -grad)
        t = 1.0
        for _ in range(50):
            cand = beta + t * step
            c_obj, c_grad, c_w = evaluate(cand)
            if np.isfinite(c_obj) and c_obj >= obj:
                break
            t *= 0.5
        else:
            raise EstimationError("CL1 line search failed to increase the objective", trace)
        beta, obj, grad, w = cand, c_obj, c_grad, c_w
        trace.append((it, obj, float(np.abs(grad).max())))
        if np.abs(grad).max() < tol * scale:
            hess = -(Zq * w[:, None]).T @ Zq
            return CL1Fit(beta, obj, it, grad, hess, trace)
    raise EstimationError(f"CL1 Newton iterations did not converge in {max_iter} steps", trace)


def cl1_objective(pattern: PointPattern, intensity: LogLinearIntensity, grid: Grid) -> float:
    return float(intensity.log_at(pattern.points).sum() - grid.integrate(intensity.on(grid)))


def kernel_intensity(pattern: PointPattern, bandwidth: float, grid: Optional[Grid] = None,
                     floor: float = 1e-12) -> GriddedIntensity:
    """Gaussian kernel intensity estimate with uniform edge correction.

    ``rho(u) = sum_i k_h(u - x_i) / e_h(u)`` with ``e_h(u) = int_W k_h(u - v) dv``
    evaluated by grid quadrature.  Values below ``floor * max`` are raised
    to it.  An empty pattern gives a flat floor intensity flagged ``"empty"``.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    grid = grid or Grid.for_window(pattern.window)
    if pattern.n == 0:
        vals = np.full(grid.shape, floor)
        return GriddedIntensity.from_array(grid, vals, flags=("empty",))
    xs, ys = grid.xs, grid.ys
    h = float(bandwidth)
    # separable Gaussian: k_h(u - x) = phi_h(ux - x) phi_h(uy - y)
    kx = np.exp(-0.5 * ((xs[None, :] - pattern.points[:, 0:1]) / h) ** 2) / (np.sqrt(2 * np.pi) * h)
    ky = np.exp(-0.5 * ((ys[None, :] - pattern.points[:, 1:2]) / h) ** 2) / (np.sqrt(2 * np.pi) * h)
    num = ky.T @ kx  # (ny, nx)
    edge = _edge_mass(grid, h)
    vals = np.where(grid.mask, num / edge, np.nan)
    top = np.nanmax(vals)
    vals = np.where(grid.mask, np.maximum(vals, floor * top), np.nan)
    return GriddedIntensity.from_array(grid, vals)


def _edge_mass(grid: Grid, h: float) -> np.ndarray:
    """``int_W k_h(u - v) dv`` at every cell centre by midpoint quadrature."""
    xs, ys = grid.xs, grid.ys
    Kx = np.exp(-0.5 * ((xs[:, None] - xs[None, :]) / h) ** 2) / (np.sqrt(2 * np.pi) * h) * grid.dx
    Ky = np.exp(-0.5 * ((ys[:, None] - ys[None, :]) / h) ** 2) / (np.sqrt(2 * np.pi) * h) * grid.dy
    m = grid.mask.astype(float)
    return Ky @ m @ Kx.T


def rectangle_edge_mass(grid: Grid, h: float, bounds) -> np.ndarray:
    """Closed-form Gaussian mass of a rectangle around each cell centre (reference)."""
    x0, y0, x1, y1 = bounds
    X, Y = np.meshgrid(grid.xs, grid.ys)
    return (ndtr((x1 - X) / h) - ndtr((x0 - X) / h)) * (ndtr((y1 - Y) / h) - ndtr((y0 - Y) / h))
