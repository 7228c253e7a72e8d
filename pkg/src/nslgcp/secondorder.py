"""Second-order composite likelihoods.

Two evaluators share one quadrature convention for the double integral over
``W x W`` restricted to ``|u - v| <= R``: the intensity is constant on grid
cells, and for every pair of cells the distance between a uniform point of
each follows a known law, represented by a few weighted distance knots
(:func:`offset_law`).  Resolving that law matters: ``g0`` is strongly convex
at short range and a centre-to-centre rule biases ``sigma`` upwards.

* :class:`StieltjesTable` bins that sum by distance once, so the
  stationary criterion only needs ``sum_b g0(t_b) dH_b`` per evaluation.
* :class:`FullCL2` keeps the explicit cell-pair list, needed when ``g``
  depends on location.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .geometry import Grid
from .randomfield import ExponentialCorrelation, FieldModel, IdentityMap

DEFAULT_BINS = 512

#: (sigma0, alpha0) starts used with R = 11; alpha is rescaled by 11 / R otherwise
STEP2_STARTS = ((0.5, 0.5), (1.0, 1.0), (2.0, 0.25), (0.5, 2.0))
STARTS_REFERENCE_R = 11.0
LOG_BOUND = 12.0
#: relative slack on cell-centre distances so lattice ties at exactly R count as inside
_TIE = 1e-9


class InsufficientPairsError(ValueError):
    pass


def mean_cell_distance(a: float, b: float) -> float:
    """Mean distance between two independent uniform points in an ``a x b`` rectangle."""
    d = math.hypot(a, b)
    return (
        a**3 / b**2
        + b**3 / a**2
        + d * (3 - a**2 / b**2 - b**2 / a**2)
        + 2.5 * (b**2 / a * math.log((a + d) / b) + a**2 / b * math.log((b + d) / a))
    ) / 15


# ---------------------------------------------------------------------------
# Point pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairCloud:
    """Unordered point pairs ``i < j`` at distance at most ``R``."""

    i: np.ndarray
    j: np.ndarray
    d: np.ndarray
    R: float

    def __len__(self) -> int:
        return len(self.d)


def pair_cloud(points: np.ndarray, R: float) -> PairCloud:
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) < 2 or R <= 0:
        e = np.zeros(0, dtype=np.intp)
        return PairCloud(e, e, np.zeros(0), float(R))
    ij = cKDTree(p).query_pairs(R, output_type="ndarray")
    ij = ij[np.lexsort((ij[:, 1], ij[:, 0]))]
    d = np.hypot(*(p[ij[:, 0]] - p[ij[:, 1]]).T)
    return PairCloud(ij[:, 0], ij[:, 1], d, float(R))


def select_r_by_pair_fraction(points: np.ndarray, fraction: float = 0.5) -> float:
    """Distance ``R`` such that ``fraction`` of all point pairs are ``R``-close."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) < 2:
        raise InsufficientPairsError("need at least two points to choose R")
    return float(np.quantile(pdist(p), fraction))


# ---------------------------------------------------------------------------
# Stieltjes tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StieltjesTable:
    """Binned ``H(t) = int int 1(|u - v| <= t) rho(u) rho(v) du dv`` on ``[0, R]``.

    ``increments[b]`` is the mass with distance in bin ``b`` and ``knots[b]``
    its weighted mean distance.
    """

    edges: np.ndarray
    increments: np.ndarray
    knots: np.ndarray
    R: float

    @property
    def total(self) -> float:
        return float(self.increments.sum())

    def H(self, t) -> np.ndarray:
        """``H`` at ``t``, counting whole bins whose mean distance is ``<= t``."""
        cum = np.concatenate([[0.0], np.cumsum(self.increments)])
        return cum[np.searchsorted(self.knots, np.asarray(t, dtype=float), side="right")]

    def integrate(self, g0) -> float:
        """``int_0^R g0(t) dH(t)``."""
        nz = self.increments > 0
        return float(np.dot(g0(self.knots[nz]), self.increments[nz]))


def bin_edges(R: float, bins: int) -> np.ndarray:
    """Quadratically spaced edges ``R (k / bins)^2``: fine where ``g0`` varies fastest."""
    return R * np.linspace(0.0, 1.0, bins + 1) ** 2


def _bin_index(d: np.ndarray, R: float, bins: int) -> np.ndarray:
    return np.minimum((np.sqrt(d / R) * bins).astype(int), bins - 1)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(48)


def cell_distance_cdf(t, a: float, b: float) -> np.ndarray:
    """``P(|U - V| <= t)`` for independent uniform points of an ``a x b`` rectangle."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros_like(t)
    pos = t > 0
    tt = t[pos]
    top = np.minimum(a, tt)
    # x in [0, x1]: the vertical extent is capped at b
    x1 = np.minimum(np.sqrt(np.maximum(tt * tt - b * b, 0.0)), top)
    capped = 0.5 * b * b * (a * x1 - 0.5 * x1 * x1)
    # x in [x1, top]: substitute x = t sin(th), vertical extent t cos(th)
    th1 = np.arcsin(np.clip(x1 / tt, 0, 1))
    th2 = np.arcsin(np.clip(top / tt, 0, 1))
    half = 0.5 * (th2 - th1)
    th = (th1 + th2)[:, None] * 0.5 + half[:, None] * _GL_X[None, :]
    c, sn = np.cos(th), np.sin(th)
    y = tt[:, None] * c
    h = (a - tt[:, None] * sn) * (b * y - 0.5 * y * y) * tt[:, None] * c
    arc = (h * _GL_W[None, :]).sum(axis=1) * half
    out[pos] = np.minimum(4.0 * (capped + arc) / (a * a * b * b), 1.0)
    return out


@lru_cache(maxsize=32)
def self_pair_distribution(a: float, b: float, R: float, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Mass fraction and mean distance per bin of the distance within one ``a x b`` cell."""
    edges = bin_edges(R, bins)
    frac = np.diff(cell_distance_cdf(edges, a, b))
    # int t dF over a bin = [t F] - int F dt
    lo, hi = edges[:-1], edges[1:]
    x8, w8 = np.polynomial.legendre.leggauss(8)
    nodes = 0.5 * (lo + hi)[:, None] + 0.5 * (hi - lo)[:, None] * x8[None, :]
    Fint = (cell_distance_cdf(nodes.ravel(), a, b).reshape(nodes.shape) * w8).sum(axis=1) * 0.5 * (hi - lo)
    Fe = cell_distance_cdf(edges, a, b)
    moment = hi * Fe[1:] - lo * Fe[:-1] - Fint
    mean = np.where(frac > 0, moment / np.where(frac > 0, frac, 1.0), 0.5 * (lo + hi))
    return frac, mean


def _triangle_rule(h: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss nodes/weights for the density ``(h - |x|) / h^2`` of a difference of two U(0, h)."""
    x, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * h * (x + 1)
    wt = 0.5 * h * w * (h - t) / (h * h)
    return np.concatenate([-t[::-1], t]), np.concatenate([wt[::-1], wt])


@dataclass(frozen=True)
class OffsetLaw:
    """Distance knots for the cell offsets of a lattice.

    Offset ``k`` is ``(ox[k], oy[k])`` cells; the knots with ``off == k``
    have distances ``d`` and probabilities ``p`` (summing to ``P(D <= R)``)
    for the distance between uniform points of two cells that far apart.
    Offsets cover one half-plane plus ``(0, 0)``.
    """

    ox: np.ndarray
    oy: np.ndarray
    off: np.ndarray
    d: np.ndarray
    p: np.ndarray
    R: float

    @property
    def centre_distance(self) -> np.ndarray:
        return np.hypot(self.ox * self.dx, self.oy * self.dy)


def _midpoint_rule(h: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint nodes/weights for the difference of two U(0, h) on ``2 n`` intervals."""
    t = (np.arange(2 * n) + 0.5) / n - 1.0
    return t * h, (1 - np.abs(t)) / n


def _compress(D: np.ndarray, W: np.ndarray, q: int):
    """Merge each row into ``q`` equal-mass groups, two knots per group matching mean and variance."""
    order = np.argsort(D, axis=1)
    Ds = np.take_along_axis(D, order, axis=1)
    Ws = np.take_along_axis(W, order, axis=1)
    grp = np.minimum(((np.cumsum(Ws, axis=1) - Ws) * q).astype(int), q - 1)
    flat = (np.arange(len(D))[:, None] * q + grp).ravel()
    Wv, Dv = Ws.ravel(), Ds.ravel()
    P = np.bincount(flat, weights=Wv, minlength=len(D) * q)
    M1 = np.bincount(flat, weights=Wv * Dv, minlength=len(D) * q)
    M2 = np.bincount(flat, weights=Wv * Dv * Dv, minlength=len(D) * q)
    ok = P > 0
    mu = M1[ok] / P[ok]
    sd = np.minimum(np.sqrt(np.maximum(M2[ok] / P[ok] - mu * mu, 0.0)), mu)
    row = np.repeat(np.arange(len(D)), q)[ok]
    return np.concatenate([row, row]), np.concatenate([mu - sd, mu + sd]), np.concatenate([0.5 * P[ok]] * 2)


@lru_cache(maxsize=16)
def offset_law(dx: float, dy: float, R: float, compress: bool = True, q_near: int = 6, q_far: int = 1,
               n_gl: int = 8, n_self: int = 64, n_fine: int = 32) -> OffsetLaw:
    """Knot representation of cell-pair distance laws for all offsets within reach of ``R``.

    A cell with itself uses the exact law on ``n_self`` quadratically spaced
    bins.  Distinct cells use a product Gauss rule on the triangular density
    of the coordinate differences (``(2 n_gl)^2`` points), or a
    ``(2 n_fine)^2`` midpoint rule when the circle of radius ``R`` cuts the
    offset, since the truncated law is not smooth there.  With ``compress``
    the points of each offset are merged into ``q`` groups of equal mass,
    each replaced by two knots matching the group mean and variance; ``q`` is
    ``q_near`` within three cell diagonals and ``q_far`` beyond.
    """
    cut = R * (1 + _TIE)
    diag = math.hypot(dx, dy)
    frac, mean = self_pair_distribution(dx, dy, min(float(R), diag), n_self)
    nz = frac > 0
    offs = [np.zeros(int(nz.sum()), dtype=np.int64)]
    ds, ps = [mean[nz]], [frac[nz]]
    ox_max, oy_max = int(math.ceil(R / dx)) + 1, int(math.ceil(R / dy)) + 1
    OY, OX = np.mgrid[0: oy_max + 1, -ox_max: ox_max + 1]
    OX, OY = OX.ravel(), OY.ravel()
    half = (OY > 0) | (OX > 0)
    gap = np.hypot(np.maximum(np.abs(OX) - 1, 0) * dx, np.maximum(OY - 1, 0) * dy)
    sel = half & (gap <= cut)
    OX, OY = OX[sel], OY[sel]
    straddle = np.hypot((np.abs(OX) + 1) * dx, (OY + 1) * dy) > cut
    near = np.hypot(OX * dx, OY * dy) < 3 * diag
    rules = {False: (_triangle_rule(dx, n_gl), _triangle_rule(dy, n_gl)),
             True: (_midpoint_rule(dx, n_fine), _midpoint_rule(dy, n_fine))}
    for fine in (False, True):
        (tx, wx), (ty, wy) = rules[fine]
        w2 = (wx[:, None] * wy[None, :]).ravel()
        rows_all = np.flatnonzero(straddle == fine)
        step = max(1, 2_000_000 // len(w2))
        for c in range(0, len(rows_all), step):
            rows = rows_all[c: c + step]
            D = np.hypot(OX[rows, None, None] * dx + tx[None, :, None],
                         OY[rows, None, None] * dy + ty[None, None, :]).reshape(len(rows), -1)
            W = np.where(D <= cut, w2[None, :], 0.0)
            if not compress:
                ok = (W > 0).ravel()
                offs.append(np.repeat(1 + rows, D.shape[1])[ok])
                ds.append(D.ravel()[ok])
                ps.append(W.ravel()[ok])
                continue
            for sub, q in ((near[rows], q_near), (~near[rows], q_far)):
                if sub.any():
                    r_i, d_k, p_k = _compress(D[sub], W[sub], q)
                    offs.append(1 + rows[sub][r_i])
                    ds.append(d_k)
                    ps.append(p_k)
    off = np.concatenate(offs)
    order = np.argsort(off, kind="stable")
    law = OffsetLaw(np.concatenate([[0], OX]), np.concatenate([[0], OY]), off[order],
                    np.concatenate(ds)[order], np.concatenate(ps)[order], float(R))
    object.__setattr__(law, "dx", dx)
    object.__setattr__(law, "dy", dy)
    return law


def _bin_table(d: np.ndarray, w: np.ndarray, R: float, bins: int) -> StieltjesTable:
    edges = bin_edges(R, bins)
    keep = (d <= R * (1 + _TIE)) & (w > 0)
    d, w = d[keep], w[keep]
    b = _bin_index(d, R, bins)
    inc = np.bincount(b, weights=w, minlength=bins)
    mom = np.bincount(b, weights=w * d, minlength=bins)
    mid = 0.5 * (edges[:-1] + edges[1:])
    knots = np.where(inc > 0, mom / np.where(inc > 0, inc, 1.0), mid)
    return StieltjesTable(edges, inc, knots, float(R))


def build_stieltjes(rho_values: np.ndarray, grid: Grid, mask: Optional[np.ndarray], R: float,
                    bins: int = DEFAULT_BINS) -> StieltjesTable:
    """Stieltjes table of ``h(u, v) = rho(u) rho(v)`` over one subwindow.

    ``rho_values`` lives on ``grid``; ``mask`` selects the subwindow (default:
    the whole window).  The mass of each lattice offset comes from the
    autocorrelation of the masked intensity surface and is spread over the
    distance knots of that offset.
    """
    m = grid.mask if mask is None else (np.asarray(mask, bool) & grid.mask)
    v = np.where(m, rho_values, 0.0)
    a = grid.cell_area
    if R <= 0:
        return StieltjesTable(np.zeros(bins + 1), np.zeros(bins), np.zeros(bins), 0.0)
    ys, xs = np.nonzero(m)
    sub = v[ys.min(): ys.max() + 1, xs.min(): xs.max() + 1]
    ac = fftconvolve(sub, sub[::-1, ::-1], mode="full")
    # fft round-off: zero masses come back as tiny signed values
    ac = np.where(ac > 1e-12 * ac.max(), ac, 0.0)
    cy, cx = sub.shape[0] - 1, sub.shape[1] - 1
    law = offset_law(grid.dx, grid.dy, float(R), compress=False)
    inside = (np.abs(law.ox) <= cx) & (law.oy <= cy)
    mass = np.zeros(len(law.ox))
    mass[inside] = ac[cy + law.oy[inside], cx + law.ox[inside]] * a * a
    # half-plane offsets stand for +o and -o
    mass[1:] *= 2.0
    return _bin_table(law.d, mass[law.off] * law.p, R, bins)


# ---------------------------------------------------------------------------
# Stationary criterion on one subwindow
# ---------------------------------------------------------------------------


def g0_exponential(sigma: float, alpha: float):
    """Stationary pair correlation ``g0(t) = exp(sigma^2 exp(-alpha t))``."""
    return lambda t: np.exp(sigma * sigma * np.exp(-alpha * np.asarray(t)))


class SubwindowCL2:
    """Stationary second-order criterion for the points of one subwindow."""

    def __init__(self, points: np.ndarray, log_rho: np.ndarray, table: StieltjesTable):
        self.table = table
        self.pairs = pair_cloud(points, table.R)
        if len(self.pairs) == 0:
            raise InsufficientPairsError("insufficient pairs in subwindow")
        self.n_pairs = len(self.pairs)
        self.log_rr = float((log_rho[self.pairs.i] + log_rho[self.pairs.j]).sum())
        self.d = self.pairs.d

    def __call__(self, sigma: float, alpha: float) -> float:
        s2 = sigma * sigma
        data = self.log_rr + s2 * np.exp(-alpha * self.d).sum()
        integral = self.table.integrate(g0_exponential(sigma, alpha))
        return float(data - self.n_pairs * np.log(integral))


def cl2_subwindow(points, rho, table: StieltjesTable, nu0: tuple[float, float]) -> float:
    """``CL2^k`` at ``nu0 = (sigma0, alpha0)``; ``rho`` is an intensity spec."""
    sigma, alpha = nu0
    if not (sigma > 0 and alpha > 0):
        raise ValueError("sigma0 and alpha0 must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return SubwindowCL2(pts, rho.log_at(pts) if len(pts) else np.zeros(0), table)(sigma, alpha)


@dataclass
class SubwindowFit:
    sigma: float
    alpha: float
    value: float
    n_pairs: int
    start: tuple
    at_bound: bool
    converged: bool
    start_values: list = field(default_factory=list)
    traces: list = field(default_factory=list, repr=False)

    @property
    def flags(self) -> list[str]:
        out = []
        if self.at_bound:
            out.append("weakly-identified")
        if not self.converged:
            out.append("not-converged")
        return out


def scaled_starts(R: float, starts=STEP2_STARTS) -> list[tuple[float, float]]:
    """Step-2 starting points with ``alpha`` rescaled to the distance unit of ``R``."""
    s = STARTS_REFERENCE_R / R
    return [(sg, al * s) for sg, al in starts]


def maximize_log2(fun, starts: Sequence[Sequence[float]], xatol: float = 1e-6, fatol: float = 1e-10,
                  max_iter: int = 4000, bound: float = LOG_BOUND, lower: Optional[Sequence] = None):
    """Nelder-Mead maximization of ``fun(*exp(x))`` from several starts in log space.

    Each start gets the box ``x0 +- bound``; ``lower`` optionally raises the
    lower limit of individual parameters (natural units, ``None`` to skip),
    in which case starts below it are moved onto it.

    Returns ``(best_x, best_value, hit_bound, converged, start_values, traces)``.
    """
    best = None
    start_values, traces = [], []
    floor = [-np.inf if v is None else math.log(v) for v in (lower or [None] * len(starts[0]))]
    for s in starts:
        x0 = np.maximum(np.log(np.asarray(s, dtype=float)), floor)
        bounds = [(max(v - bound, fl), v + bound) for v, fl in zip(x0, floor)]

        def neg(x):
            # far along the ridge exp(sigma^2) overflows; inf is rejected below
            with np.errstate(over="ignore", invalid="ignore"):
                val = fun(*np.exp(x))
            return -val if np.isfinite(val) else np.inf

        start_values.append(-neg(x0))
        res = minimize(neg, x0, method="Nelder-Mead", bounds=bounds,
                       options={"xatol": xatol, "fatol": fatol, "maxiter": max_iter, "maxfev": 2 * max_iter})
        at_bound = any(abs(xi - lo) < 1e-6 or abs(xi - hi) < 1e-6 for xi, (lo, hi) in zip(res.x, bounds))
        traces.append({"start": list(map(float, s)), "x": res.x.tolist(), "value": float(-res.fun),
                       "nfev": int(res.nfev), "success": bool(res.success), "message": str(res.message)})
        if np.isfinite(res.fun) and (best is None or -res.fun > best[1]):
            best = (res.x, float(-res.fun), at_bound, bool(res.success))
    if best is None:
        raise RuntimeError(f"all {len(starts)} Nelder-Mead starts failed: {traces}")
    return best[0], best[1], best[2], best[3], start_values, traces


def maximize_cl2_subwindow(points, rho, table: StieltjesTable, starts=None,
                           alpha_min: Optional[float] = None) -> SubwindowFit:
    """Maximize ``CL2^k`` over ``(sigma0, alpha0)`` by multi-start simplex search in log space.

    ``alpha_min`` optionally bounds the correlation rate from below; a fit
    on that bound is flagged like any other bound hit.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    crit = SubwindowCL2(pts, rho.log_at(pts), table)
    starts = list(starts) if starts is not None else scaled_starts(table.R)
    x, val, at_bound, ok, svals, traces = maximize_log2(crit, starts, lower=(None, alpha_min))
    sigma, alpha = np.exp(x)
    best_start = starts[int(np.argmax([t["value"] for t in traces]))]
    return SubwindowFit(float(sigma), float(alpha), val, crit.n_pairs, tuple(best_start), at_bound, ok,
                        svals, traces)


# ---------------------------------------------------------------------------
# Non-stationary criterion
# ---------------------------------------------------------------------------


class CellPairs:
    """Cell pairs within reach of ``R``, expanded over their distance knots.

    ``i``, ``j`` index the active cells (``grid.mask & mask`` in row-major
    order), ``d`` is a knot distance and ``mult`` its probability, doubled
    for distinct cells so that sums run over ordered pairs.  ``scale`` maps
    a deformed centre distance to the knot (``d / centre distance``).
    """

    def __init__(self, grid: Grid, R: float, mask: Optional[np.ndarray] = None):
        m = grid.mask if mask is None else (np.asarray(mask, bool) & grid.mask)
        self.grid = grid
        self.R = float(R)
        self.flat = np.flatnonzero(m.ravel())
        pos = np.full(grid.nx * grid.ny, -1, dtype=np.int64)
        pos[self.flat] = np.arange(len(self.flat))
        iy, ix = np.divmod(self.flat, grid.nx)
        law = offset_law(grid.dx, grid.dy, float(R))
        I, J, K = [], [], []
        for k, (ox, oy) in enumerate(zip(law.ox, law.oy)):
            ty, tx = iy + oy, ix + ox
            ok = (ty < grid.ny) & (tx >= 0) & (tx < grid.nx)
            tgt = pos[ty[ok] * grid.nx + tx[ok]]
            good = tgt >= 0
            I.append(np.flatnonzero(ok)[good])
            J.append(tgt[good])
            K.append(np.full(int(good.sum()), k))
        pi, pj, pk = np.concatenate(I), np.concatenate(J), np.concatenate(K)
        # expand each cell pair over the knots of its offset
        starts = np.searchsorted(law.off, np.arange(len(law.ox)))
        counts = np.bincount(law.off, minlength=len(law.ox))
        nk = counts[pk]
        rep = np.repeat(np.arange(len(pk)), nk)
        within = np.arange(len(rep)) - np.repeat(np.cumsum(nk) - nk, nk)
        knot = starts[pk[rep]] + within
        self.i = pi[rep].astype(np.int32)
        self.j = pj[rep].astype(np.int32)
        self.d = law.d[knot]
        self.is_self = law.off[knot] == 0
        self.mult = law.p[knot] * np.where(self.is_self, 1.0, 2.0)
        centre = law.centre_distance[law.off[knot]]
        self.scale = np.where(self.is_self, 0.0, self.d / np.where(self.is_self, 1.0, centre))
        self.centers = grid.centers()[self.flat]

    def __len__(self) -> int:
        return len(self.d)

    def transformed_distance(self, deformation) -> np.ndarray:
        """Knot distances after the deformation, linearized about each pair.

        Distinct cells: deformed centre distance times ``scale``.  A cell with
        itself: knot distance times the local areal stretch of the map.
        """
        if getattr(deformation, "is_identity", False):
            return self.d
        phi = deformation.forward(self.centers)
        dd = np.hypot(*(phi[self.i] - phi[self.j]).T) * self.scale
        stretch = 1.0 / np.sqrt(deformation.jacobian_inverse(phi))
        sp = self.is_self
        dd[sp] = self.d[sp] * stretch[self.i[sp]]
        return dd


class FullCL2:
    """Second-order criterion over the whole window for a location-dependent ``g``.

    ``rho`` is an intensity spec, ``grid`` the quadrature grid.  Each call
    recomputes the full cell-pair double integral.
    """

    def __init__(self, points: np.ndarray, rho, R: float, grid: Grid, mask: Optional[np.ndarray] = None):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        self.points = pts
        self.R = float(R)
        self.pairs = pair_cloud(pts, R)
        if len(self.pairs) == 0:
            raise InsufficientPairsError("insufficient pairs for the second-order criterion")
        self.n_pairs = len(self.pairs)
        lr = rho.log_at(pts)
        self.log_rr = float((lr[self.pairs.i] + lr[self.pairs.j]).sum())
        self.cells = CellPairs(grid, R, mask)
        rv = rho.on(grid).ravel()[self.cells.flat]
        self.w = self.cells.mult * rv[self.cells.i] * rv[self.cells.j] * grid.cell_area**2
        self._dcache: dict = {}

    def _distances(self, deformation):
        key = repr(deformation.to_dict())
        hit = self._dcache.get(key)
        if hit is None:
            if getattr(deformation, "is_identity", False):
                dx = self.pairs.d
            else:
                phi = deformation.forward(self.points)
                dx = np.hypot(*(phi[self.pairs.i] - phi[self.pairs.j]).T)
            hit = (dx, self.cells.transformed_distance(deformation))
            self._dcache = {key: hit}
        return hit

    def __call__(self, field_: FieldModel) -> float:
        d_data, d_cell = self._distances(field_.deformation)
        r = field_.correlation
        s_pts = field_.std.at(self.points)
        c_data = s_pts[self.pairs.i] * s_pts[self.pairs.j] * r(d_data)
        if field_.std.is_constant:
            s2 = field_.std.sigma**2
            c_cell = s2 * r(d_cell)
        else:
            s_cell = field_.std.on(self.cells.grid).ravel()[self.cells.flat]
            c_cell = s_cell[self.cells.i] * s_cell[self.cells.j] * r(d_cell)
        integral = float(np.dot(self.w, np.exp(c_cell)))
        return float(self.log_rr + c_data.sum() - self.n_pairs * np.log(integral))

    def stieltjes(self, deformation, bins: int = DEFAULT_BINS) -> tuple[np.ndarray, StieltjesTable]:
        """Data distances and a Stieltjes table in deformed distance (constant ``sigma`` only)."""
        d_data, d_cell = self._distances(deformation)
        top = max(float(d_cell.max()), float(d_data.max()) if len(d_data) else 0.0) * (1 + 1e-12)
        return d_data, _bin_table(d_cell, self.w, top, bins)


def cl2_full(pattern, rho, field_: FieldModel, R: float, grid: Optional[Grid] = None) -> float:
    """Non-stationary second-order log composite likelihood over the window."""
    grid = grid or Grid.for_window(pattern.window, cells_across=64)
    return FullCL2(pattern.points, rho, R, grid)(field_)


def stationary_field(sigma: float, alpha: float) -> FieldModel:
    from .randomfield import ConstantStd

    return FieldModel(ConstantStd(sigma), IdentityMap(), ExponentialCorrelation(alpha))
