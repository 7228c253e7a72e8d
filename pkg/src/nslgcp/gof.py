"""Goodness of fit: inhomogeneous J-functions on subwindows and the global rank envelope test.

The test statistic concatenates one inhomogeneous J-function per
subwindow, each computed from that subwindow's points only.  The observed
statistic is ranked among statistics of patterns simulated from the
fitted model by the extreme rank, which gives a p-interval and a global
envelope.

Estimator conventions (no edge correction):

``F(r) = 1 - mean_u prod_{x in X_k, |x - u| <= r} (1 - rho_min / rho(x))`` over cell centres ``u`` of ``W_k``,
``G(r) = 1 - mean_y prod_{x in X_k \\ y, |x - y| <= r} (1 - rho_min / rho(x))`` over points ``y`` of ``W_k``,
``J = (1 - G) / (1 - F)``, undefined where ``1 - F < 1e-6``.

``rho_min`` is the smallest intensity over the cells of ``W_k``; factors
are clipped at zero where a point's intensity falls below it.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CovariateField, Grid, Partition, PointPattern
from .parallel import pmap
from .randomfield import replicate_rng

logger = logging.getLogger(__name__)

#: 1 - F below this leaves J undefined
F_FLOOR = 1e-6
#: default number of r values per subwindow
R_POINTS = 64


class GofError(ValueError):
    """Invalid input to a goodness-of-fit computation."""


# ---------------------------------------------------------------------------
# Inhomogeneous J-function
# ---------------------------------------------------------------------------


def _log_survival(tree_pts: cKDTree, logf: np.ndarray, zero: np.ndarray, queries: np.ndarray,
                  r: np.ndarray, exclude_self: bool) -> np.ndarray:
    """``log prod_{x within r of q} f(x)`` for each query ``q`` and each ``r`` (``-inf`` for a zero factor)."""
    nq, m = len(queries), len(r)
    tq = cKDTree(queries)
    sp = tq.sparse_distance_matrix(tree_pts, float(r[-1]), output_type="ndarray")
    qi, xi, d = sp["i"], sp["j"], sp["v"]
    if exclude_self:
        keep = qi != xi
        qi, xi, d = qi[keep], xi[keep], d[keep]
    b = np.searchsorted(r, d, side="left")
    flat = qi * m + b
    logs = np.bincount(flat, weights=logf[xi], minlength=nq * m).reshape(nq, m)
    zeros = np.bincount(flat, weights=zero[xi].astype(float), minlength=nq * m).reshape(nq, m)
    # bincount of an empty selection is integer-typed
    out = np.cumsum(logs, axis=1, dtype=float)
    out[np.cumsum(zeros, axis=1) > 0] = -np.inf
    return out


def _factors(rho_x: np.ndarray, rho_min: float) -> tuple[np.ndarray, np.ndarray]:
    f = np.clip(1.0 - rho_min / rho_x, 0.0, 1.0)
    zero = f <= 0
    with np.errstate(divide="ignore"):
        logf = np.where(zero, 0.0, np.log(np.where(zero, 1.0, f)))
    return logf, zero


def j_inhom(points, rho, r, grid: Grid, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Inhomogeneous J-function of the points of one subwindow.

    Parameters
    ----------
    points : (n, 2) array
        Events lying in the subwindow.
    rho : intensity
        Anything with ``at(points)`` and ``on(grid)``.
    r : (m,) increasing array
        Argument grid, ``r[0] >= 0``.
    grid, mask
        Test locations are the centres of the active cells of ``grid`` in ``mask``.

    Returns
    -------
    (m,) array with ``nan`` where ``1 - F < 1e-6``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    r = np.asarray(r, dtype=float)
    if len(pts) < 2:
        raise GofError(f"J-function needs at least 2 points, got {len(pts)}")
    if r.ndim != 1 or len(r) < 1 or np.any(np.diff(r) <= 0) or r[0] < 0:
        raise GofError("r must be a non-empty increasing grid of non-negative values")
    m = grid.mask if mask is None else (np.asarray(mask, bool) & grid.mask)
    if not m.any():
        raise GofError("subwindow has no active cells")
    rho_grid = np.asarray(rho.on(grid))[m]
    rho_min = float(rho_grid.min())
    rho_x = np.asarray(rho.at(pts), dtype=float)
    if not (rho_min > 0 and np.all(rho_x > 0)):
        raise GofError("intensity must be positive on the subwindow")
    logf, zero = _factors(rho_x, rho_min)
    tree = cKDTree(pts)
    u = grid.centers()[m.ravel()]
    one_minus_F = np.exp(_log_survival(tree, logf, zero, u, r, False)).mean(axis=0)
    one_minus_G = np.exp(_log_survival(tree, logf, zero, pts, r, True)).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        J = one_minus_G / one_minus_F
    J[one_minus_F < F_FLOOR] = np.nan
    return J


def j_homogeneous(points, r, grid: Grid, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Classical ``(1 - G) / (1 - F)`` from nearest-neighbour and empty-space distances."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    m = grid.mask if mask is None else (np.asarray(mask, bool) & grid.mask)
    tree = cKDTree(pts)
    e, _ = tree.query(grid.centers()[m.ravel()], k=1)
    nn, _ = tree.query(pts, k=2)
    r = np.asarray(r, dtype=float)
    F = (e[:, None] <= r[None, :]).mean(axis=0)
    G = (nn[:, 1][:, None] <= r[None, :]).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        J = (1 - G) / (1 - F)
    J[1 - F < F_FLOOR] = np.nan
    return J


def default_r_grid(window, partition: Optional[Partition] = None, n: int = R_POINTS) -> np.ndarray:
    """``n`` values from 0 to a quarter of the smallest subwindow diameter.

    The upper end is also capped at half the shorter side of the window's
    bounding box, since a level-set band of a thin window can have a large
    diameter yet no interior at that scale.
    """
    x0, y0, x1, y1 = window.bbox
    top = 0.5 * min(x1 - x0, y1 - y0)
    if partition is not None:
        c = partition.grid.centers()
        for mk in partition.masks:
            pts = c[mk.ravel()]
            if len(pts):
                lo, hi = pts.min(axis=0), pts.max(axis=0)
                top = min(top, 0.25 * float(np.hypot(*(hi - lo + [partition.grid.dx, partition.grid.dy]))))
    else:
        top = min(top, 0.25 * window.diameter)
    return np.linspace(0.0, top, n)


# ---------------------------------------------------------------------------
# Concatenated statistic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Statistic:
    """How to turn a pattern into the concatenated test statistic."""

    rho: object
    grid: Grid
    r: np.ndarray
    masks: tuple  # one boolean cell mask per subwindow
    labeler: Optional[Callable[[np.ndarray], np.ndarray]] = None  # points -> subwindow labels

    @property
    def K(self) -> int:
        return len(self.masks)

    @property
    def segments(self) -> np.ndarray:
        return np.repeat(np.arange(self.K), len(self.r))

    @property
    def arguments(self) -> np.ndarray:
        return np.tile(self.r, self.K)

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        labels = np.zeros(len(pts), dtype=int) if self.labeler is None else self.labeler(pts)
        out = []
        for k, mk in enumerate(self.masks):
            try:
                out.append(j_inhom(pts[labels == k], self.rho, self.r, self.grid, mk))
            except GofError as exc:
                raise GofError(f"subwindow {k}: {exc}") from exc
        return np.concatenate(out)


def make_statistic(rho, grid: Grid, r: np.ndarray, partition: Optional[Partition] = None,
                   f: Optional[CovariateField] = None) -> Statistic:
    """Concatenated J statistic over the subwindows of ``partition`` (whole window when ``None``)."""
    if partition is None:
        return Statistic(rho, grid, np.asarray(r, float), (grid.mask,))
    if f is None:
        raise GofError("a partition needs its covariate to label new points")
    if not partition.grid.same_lattice(grid):
        raise GofError("partition and statistic grids differ")
    return Statistic(rho, grid, np.asarray(r, float), tuple(partition.masks),
                     lambda p: partition.label(p, f))


def concat_subwindow_stat(pattern: PointPattern, rho, partition: Partition, r, f: CovariateField) -> np.ndarray:
    """One J-function per subwindow from that subwindow's points, concatenated in label order."""
    stat = make_statistic(rho, partition.grid, r, partition, f)
    return stat(pattern.points)


# ---------------------------------------------------------------------------
# Curve sets and the rank envelope test
# ---------------------------------------------------------------------------


@dataclass
class CurveSet:
    """Observed curve and ``s`` simulated curves on a shared argument grid.

    ``r`` and ``segments`` have one entry per curve position; a segment is
    the subwindow the position belongs to.
    """

    r: np.ndarray
    observed: np.ndarray
    simulated: np.ndarray  # (s, m)
    segments: Optional[np.ndarray] = None

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.observed = np.asarray(self.observed, dtype=float)
        self.simulated = np.atleast_2d(np.asarray(self.simulated, dtype=float))
        m = len(self.r)
        if self.segments is None:
            self.segments = np.zeros(m, dtype=int)
        self.segments = np.asarray(self.segments, dtype=int)
        if self.observed.shape != (m,) or self.simulated.shape[1] != m or len(self.segments) != m:
            raise GofError("all curves must share the argument grid")
        if self.simulated.shape[0] < 1:
            raise GofError("need at least one simulated curve")

    @property
    def s(self) -> int:
        return self.simulated.shape[0]

    @property
    def all_curves(self) -> np.ndarray:
        return np.vstack([self.observed, self.simulated])

    @property
    def valid(self) -> np.ndarray:
        """Positions where every curve is finite."""
        return np.all(np.isfinite(self.all_curves), axis=0)

    def to_csv(self, path=None) -> str:
        """Long format: ``curve,segment,r,value``; curve 0 is the observed one."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["curve", "segment", "r", "value"])
        for c, row in enumerate(self.all_curves):
            for seg, r, v in zip(self.segments, self.r, row):
                w.writerow([c, int(seg), repr(float(r)), "nan" if not np.isfinite(v) else repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "CurveSet":
        data = np.genfromtxt(path, delimiter=",", names=True)
        curves = data["curve"].astype(int)
        n = curves.max() + 1
        m = len(data) // n
        vals = data["value"].reshape(n, m)
        return cls(data["r"][:m], vals[0], vals[1:], data["segment"][:m].astype(int))


@dataclass
class EnvelopeResult:
    p_low: float
    p_high: float
    level: float
    lower: np.ndarray
    upper: np.ndarray
    extreme_ranks: np.ndarray  # observed first
    k_cut: int
    rejected: bool
    warnings: list

    @property
    def p_interval(self) -> tuple[float, float]:
        return (self.p_low, self.p_high)

    def summary(self) -> dict:
        return {"p_interval": [self.p_low, self.p_high], "level": self.level, "rejected": self.rejected,
                "observed_rank": int(self.extreme_ranks[0]), "k_cut": self.k_cut, "nsim": len(self.extreme_ranks) - 1,
                "warnings": list(self.warnings)}


def pointwise_ranks(curves: np.ndarray) -> np.ndarray:
    """Two-sided pointwise ranks ``min(#{T_j <= T_i}, #{T_j >= T_i})`` per column; ties count in."""
    srt = np.sort(curves, axis=0)
    low = np.empty(curves.shape, dtype=int)
    high = np.empty(curves.shape, dtype=int)
    n = curves.shape[0]
    for c in range(curves.shape[1]):
        low[:, c] = np.searchsorted(srt[:, c], curves[:, c], side="right")
        high[:, c] = n - np.searchsorted(srt[:, c], curves[:, c], side="left")
    return np.minimum(low, high)


def rank_envelope(curves: CurveSet, level: float = 0.05) -> EnvelopeResult:
    """Global extreme-rank envelope test.

    Each of the ``s + 1`` curves gets the extreme rank ``R_i = min_r`` of
    its pointwise two-sided rank; small ranks are extreme.  The p-interval
    is ``(#{R_i < R_0}, #{R_i <= R_0}) / (s + 1)``.  The envelope uses the
    largest cutoff ``k`` with ``#{R_i < k} < level (s + 1)``: it spans the
    ``k``-th smallest to ``k``-th largest values at each ``r``, so the
    observed curve leaves it exactly when ``p+ < level``, the rejection
    rule.
    """
    if not 0 < level < 1:
        raise GofError("level must lie in (0, 1)")
    warns = []
    s = curves.s
    if s < 2 / level - 1:
        warns.append(f"only {s} simulations; at least {math.ceil(2 / level - 1)} recommended at level {level}")
        logger.warning(warns[-1])
    valid = curves.valid
    if not valid.any():
        raise GofError("no argument value where all curves are finite")
    T = curves.all_curves[:, valid]
    R = pointwise_ranks(T).min(axis=1)
    n = s + 1
    p_low = float(np.sum(R < R[0]) / n)
    p_high = float(np.sum(R <= R[0]) / n)
    counts = np.array([np.sum(R < k) for k in range(1, n + 2)])  # counts[k-1] = #{R < k}
    ok = np.flatnonzero(counts < level * n)
    k_cut = int(ok.max() + 1)
    srt = np.sort(curves.all_curves, axis=0)
    kk = min(k_cut, n)
    lower = srt[kk - 1].copy()
    upper = srt[n - kk].copy()
    lower[~valid] = np.nan
    upper[~valid] = np.nan
    return EnvelopeResult(p_low, p_high, level, lower, upper, R, k_cut, bool(p_high < level), warns)


def envelope_test(observed: PointPattern, statistic: Statistic, simulate: Callable, nsim: int, seed: int,
                  level: float = 0.05, workers: Optional[int] = 1) -> tuple[CurveSet, EnvelopeResult]:
    """Monte Carlo rank envelope test of ``observed`` against ``simulate(rng) -> PointPattern``.

    Simulation ``i`` uses the generator ``replicate_rng(seed, i)``, so the
    curves do not depend on ``workers``.  A simulation whose statistic
    cannot be computed (too few points in a subwindow) is redrawn from the
    same generator.
    """
    if nsim < 1:
        raise GofError("nsim must be positive")
    T0 = statistic(observed.points)

    def one(i):
        rng = replicate_rng(seed, i)
        for _ in range(100):
            try:
                return statistic(simulate(rng).points)
            except GofError:
                continue
        raise GofError(f"simulation {i}: no usable pattern in 100 draws")

    sims = np.array(pmap(one, range(nsim), workers))
    cs = CurveSet(statistic.arguments, T0, sims, statistic.segments)
    return cs, rank_envelope(cs, level)
