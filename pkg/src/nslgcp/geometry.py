"""Windows, point patterns, gridded covariates and covariate partitions.

Everything spatial in the package lives on a regular lattice of cells
(:class:`Grid`).  A cell belongs to the window when its centre does, and all
integrals over the window are midpoint sums over those cells.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import shapely
from shapely.ops import nearest_points


class GeometryError(ValueError):
    """Invalid window, pattern, raster or partition."""


class DataFormatError(ValueError):
    """A data file could not be parsed."""


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Window:
    """Observation window: an axis-aligned rectangle or a simple polygon.

    Use :meth:`rectangle` or :meth:`polygon` rather than the constructor.
    """

    kind: str
    vertices: np.ndarray  # (m, 2), counter-clockwise, not closed

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise GeometryError("window needs at least three (x, y) vertices")
        if not np.all(np.isfinite(v)):
            raise GeometryError("window vertices must be finite")
        signed = _signed_area(v)
        if signed < 0:
            v = v[::-1].copy()
        object.__setattr__(self, "vertices", v)
        if not abs(signed) > 0:
            raise GeometryError("window has zero area")
        if self.kind == "polygon" and not shapely.Polygon(v).is_simple:
            raise GeometryError("polygon window is self-intersecting")

    @classmethod
    def rectangle(cls, xrange: Sequence[float], yrange: Sequence[float]) -> "Window":
        (x0, x1), (y0, y1) = map(float, xrange), map(float, yrange)
        if not (x1 > x0 and y1 > y0):
            raise GeometryError(f"degenerate rectangle {xrange} x {yrange}")
        v = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
        return cls("rectangle", v)

    @classmethod
    def polygon(cls, vertices) -> "Window":
        v = np.asarray(vertices, dtype=float)
        if len(v) > 3 and np.allclose(v[0], v[-1]):
            v = v[:-1]
        return cls("polygon", v)

    @property
    def area(self) -> float:
        return abs(_signed_area(self.vertices))

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    @property
    def diameter(self) -> float:
        v = self.vertices
        d = np.sqrt(((v[:, None, :] - v[None, :, :]) ** 2).sum(-1))
        return float(d.max())

    def contains(self, points) -> np.ndarray:
        """Boolean mask of points inside the closed window."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if len(p) == 0:
            return np.zeros(0, dtype=bool)
        if self.kind == "rectangle":
            x0, y0, x1, y1 = self.bbox
            return (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
        poly = shapely.Polygon(self.vertices)
        return shapely.intersects_xy(poly, p[:, 0], p[:, 1])

    def boundary_samples(self, per_edge: int = 64) -> np.ndarray:
        """Points along the boundary, ``per_edge`` per edge, counter-clockwise."""
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        t = np.arange(per_edge) / per_edge
        pts = v[:, None, :] + t[None, :, None] * (w - v)[:, None, :]
        return pts.reshape(-1, 2)

    def to_dict(self) -> dict:
        if self.kind == "rectangle":
            x0, y0, x1, y1 = self.bbox
            return {"rectangle": [[x0, x1], [y0, y1]]}
        return {"polygon": self.vertices.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Window":
        if "rectangle" in d:
            xr, yr = d["rectangle"]
            return cls.rectangle(xr, yr)
        if "polygon" in d:
            return cls.polygon(d["polygon"])
        raise GeometryError("window block needs a 'rectangle' or 'polygon' entry")

    def same_as(self, other: "Window", tol: float = 1e-9) -> bool:
        return (
            self.kind == other.kind
            and self.vertices.shape == other.vertices.shape
            and np.allclose(self.vertices, other.vertices, atol=tol, rtol=0)
        )


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Grid:
    """Regular lattice of ``ny`` rows by ``nx`` columns.

    ``(x0, y0)`` is the lower-left corner of cell ``(0, 0)``; arrays on the
    grid have shape ``(ny, nx)`` with row 0 at the bottom.  ``mask`` marks the
    cells whose centre lies in the window.
    """

    x0: float
    y0: float
    dx: float
    dy: float
    nx: int
    ny: int
    mask: np.ndarray

    @classmethod
    def for_window(
        cls,
        window: Window,
        cell: Optional[float | tuple[float, float]] = None,
        cells_across: int = 256,
        max_cells: Optional[int] = None,
    ) -> "Grid":
        """Lattice covering the bounding box of ``window``.

        By default the longer side of the bounding box is split into
        ``cells_across`` cells.  When ``max_cells`` is given the cells are
        enlarged until at most that many fall inside the window.
        """
        x0, y0, x1, y1 = window.bbox
        w, h = x1 - x0, y1 - y0
        if cell is None:
            size = max(w, h) / cells_across
            cx = cy = size
        elif np.ndim(cell) == 0:
            cx = cy = float(cell)
        else:
            cx, cy = map(float, cell)
        while True:
            nx, ny = max(1, math.ceil(w / cx - 1e-9)), max(1, math.ceil(h / cy - 1e-9))
            dx, dy = w / nx, h / ny
            grid = cls._build(window, x0, y0, dx, dy, nx, ny)
            if max_cells is None or grid.n_active <= max_cells:
                return grid
            scale = math.sqrt(grid.n_active / max_cells) * 1.001
            cx, cy = cx * scale, cy * scale

    @classmethod
    def _build(cls, window, x0, y0, dx, dy, nx, ny) -> "Grid":
        xs = x0 + (np.arange(nx) + 0.5) * dx
        ys = y0 + (np.arange(ny) + 0.5) * dy
        X, Y = np.meshgrid(xs, ys)
        mask = window.contains(np.column_stack([X.ravel(), Y.ravel()])).reshape(ny, nx)
        if not mask.any():
            raise GeometryError("no grid cell centre falls inside the window")
        return cls(float(x0), float(y0), float(dx), float(dy), int(nx), int(ny), mask)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    @property
    def xs(self) -> np.ndarray:
        return self.x0 + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def ys(self) -> np.ndarray:
        return self.y0 + (np.arange(self.ny) + 0.5) * self.dy

    def centers(self) -> np.ndarray:
        """All cell centres, shape ``(ny * nx, 2)`` in row-major order."""
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.column_stack([X.ravel(), Y.ravel()])

    def active_centers(self) -> np.ndarray:
        return self.centers()[self.mask.ravel()]

    def cell_index(self, points) -> np.ndarray:
        """Flat index of the cell nearest to each point (clipped to the grid)."""
        p = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)
        ix = np.clip(np.floor((p[:, 0] - self.x0) / self.dx).astype(int), 0, self.nx - 1)
        iy = np.clip(np.floor((p[:, 1] - self.y0) / self.dy).astype(int), 0, self.ny - 1)
        return iy * self.nx + ix

    def integrate(self, values: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
        """Midpoint-rule integral of gridded ``values`` over ``mask`` (default window)."""
        m = self.mask if mask is None else mask
        return float(np.asarray(values)[m].sum() * self.cell_area)

    def same_lattice(self, other: "Grid") -> bool:
        return (
            (self.nx, self.ny) == (other.nx, other.ny)
            and np.allclose([self.x0, self.y0, self.dx, self.dy], [other.x0, other.y0, other.dx, other.dy])
        )


# ---------------------------------------------------------------------------
# Point patterns and covariates
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PointPattern:
    """Finite simple point pattern observed in ``window``."""

    points: np.ndarray
    window: Window

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "points", p)
        if len(p):
            if not np.all(np.isfinite(p)):
                raise GeometryError("non-finite coordinates in point pattern")
            outside = ~self.window.contains(p)
            if outside.any():
                raise GeometryError(f"{int(outside.sum())} point(s) lie outside the window")
            if len(np.unique(p, axis=0)) != len(p):
                raise GeometryError("point pattern contains coincident points")

    @property
    def n(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, keep: np.ndarray) -> "PointPattern":
        return PointPattern(self.points[keep], self.window)


@dataclass(frozen=True, eq=False)
class CovariateField:
    """Real-valued covariate on a grid, looked up at the nearest cell.

    When ``func`` is given the covariate is an analytic function of location
    (e.g. distance to a source); grid values are its cell-centre values and
    point lookups evaluate ``func`` directly.
    """

    grid: Grid
    values: np.ndarray
    name: str = "z"
    func: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise GeometryError(f"covariate values have shape {v.shape}, grid is {self.grid.shape}")
        if not np.all(np.isfinite(v[self.grid.mask])):
            raise GeometryError(f"covariate {self.name!r} has missing values inside the window")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid, func, name: str = "z") -> "CovariateField":
        vals = np.asarray(func(grid.centers()), dtype=float).reshape(grid.shape)
        return cls(grid, vals, name, func)

    def at(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)
        if self.func is not None:
            return np.asarray(self.func(p), dtype=float)
        return self.values.ravel()[self.grid.cell_index(p)]

    def on(self, grid: Grid) -> np.ndarray:
        """Values at the cell centres of another grid, shape ``grid.shape``."""
        if grid is self.grid or grid.same_lattice(self.grid):
            return self.values
        return self.at(grid.centers()).reshape(grid.shape)


def radial_distance(points: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row; the distance-to-source covariate."""
    p = np.atleast_2d(points)
    return np.hypot(p[:, 0], p[:, 1])


def count_in(pattern: PointPattern, grid: Grid, region: np.ndarray) -> int:
    """Number of events whose nearest cell lies in the boolean ``region`` mask."""
    if pattern.n == 0:
        return 0
    idx = grid.cell_index(pattern.points)
    return int(np.asarray(region, dtype=bool).ravel()[idx].sum())


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Partition:
    """Covariate level-set partition of the window into ``K`` subwindows.

    Cell and point labels run from 0 to ``K - 1`` (``-1`` outside the window).
    A value ``f`` belongs to subwindow ``k`` when ``f_k < f <= f_{k+1}``, the
    first subwindow also taking everything at or below ``f_1``.
    """

    grid: Grid
    breakpoints: np.ndarray  # f_0 < ... < f_K
    cell_labels: np.ndarray  # (ny, nx)
    point_labels: np.ndarray  # (n,)
    means: np.ndarray  # area average of the covariate over each subwindow

    @property
    def K(self) -> int:
        return len(self.breakpoints) - 1

    @property
    def masks(self) -> list[np.ndarray]:
        return [self.cell_labels == k for k in range(self.K)]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.point_labels, minlength=self.K)

    def points_in(self, pattern: PointPattern, k: int) -> np.ndarray:
        return pattern.points[self.point_labels == k]

    def label(self, points, f: "CovariateField") -> np.ndarray:
        """Subwindow labels of arbitrary points by their covariate value ``f``."""
        return _assign(f.at(points), self.breakpoints[1:-1])


def _assign(values: np.ndarray, inner: np.ndarray) -> np.ndarray:
    # values equal to a breakpoint go to the lower subwindow
    return np.searchsorted(inner, values, side="left")


def partition_by_covariate(pattern: PointPattern, f: CovariateField, K: int) -> Partition:
    """Split the window into ``K`` covariate bands holding about ``n/K`` points each.

    Inner breakpoints are the empirical ``k/K`` quantiles (inverse-CDF
    definition) of the covariate at the data points.
    """
    if K < 2:
        raise GeometryError("partition needs K >= 2")
    fx = f.at(pattern.points)
    n = len(fx)
    if n < K:
        raise GeometryError(f"cannot split {n} points into {K} subwindows")
    s = np.sort(fx)
    inner = np.array([s[math.ceil(k * n / K) - 1] for k in range(1, K)])
    if np.any(np.diff(inner) <= 0):
        raise GeometryError("degenerate covariate: quantile breakpoints coincide, empty subwindow")
    point_labels = _assign(fx, inner)
    counts = np.bincount(point_labels, minlength=K)
    if np.any(counts == 0):
        raise GeometryError(f"degenerate covariate: subwindow point counts {counts.tolist()}")

    grid = f.grid
    cell_labels = np.full(grid.shape, -1, dtype=int)
    cell_labels[grid.mask] = _assign(f.values[grid.mask], inner)
    lo = min(float(f.values[grid.mask].min()), float(s[0]))
    hi = max(float(f.values[grid.mask].max()), float(s[-1]))
    breakpoints = np.concatenate([[lo], inner, [hi]])
    means = np.array([
        f.values[cell_labels == k].mean() if np.any(cell_labels == k) else fx[point_labels == k].mean()
        for k in range(K)
    ])
    return Partition(grid, breakpoints, cell_labels, point_labels, means)


def transform_pattern(pattern: PointPattern, mapping, per_edge: int = 64) -> PointPattern:
    """Image of a pattern and its window under a bijective plane map.

    The window boundary is sampled ``per_edge`` times per edge and the image
    window is the polygon through the mapped samples.
    """
    if getattr(mapping, "is_identity", False):
        return pattern
    boundary = mapping.forward(pattern.window.boundary_samples(per_edge))
    try:
        window = Window.polygon(boundary)
    except GeometryError as exc:
        raise GeometryError(f"transformed window is degenerate: {exc}") from exc
    pts = mapping.forward(pattern.points) if pattern.n else pattern.points
    # images of points on the original boundary can fall a hair outside the chordal polygon
    if pattern.n:
        inside = window.contains(pts)
        if not inside.all():
            pts = pts.copy()
            pts[~inside] = _pull_inside(window, pts[~inside])
    return PointPattern(pts, window)


def _pull_inside(window: Window, pts: np.ndarray) -> np.ndarray:
    poly = shapely.Polygon(window.vertices)
    centroid = np.asarray(poly.centroid.coords[0])
    out = np.empty_like(pts)
    for i, p in enumerate(pts):
        q = np.asarray(nearest_points(poly, shapely.Point(p))[0].coords[0])
        out[i] = q + 1e-9 * (centroid - q)
    return out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def read_points_csv(path, window: Window) -> PointPattern:
    """Read a pattern from CSV with header ``x,y``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"point file not found: {path}")
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y"]:
            raise DataFormatError(f"{path}:1: expected header 'x,y', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: cannot parse {row!r} as numbers") from None
    return PointPattern(np.array(rows, dtype=float).reshape(-1, 2), window)


def write_points_csv(path, pattern: PointPattern) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write("x,y\n")
        for x, y in pattern.points:
            fh.write(f"{float(x)!r},{float(y)!r}\n")


_ASC_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "dx", "dy", "nodata_value")


def read_ascii_grid(path, window: Window, name: Optional[str] = None) -> CovariateField:
    """Read an ESRI ASCII grid as a covariate on ``window``.

    Rows in the file run from north to south.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"covariate raster not found: {path}")
    lines = path.read_text().split("\n")
    header = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if parts and parts[0].lower() not in _ASC_KEYS + ("nodata",):
            break
        i += 1
        if not parts:
            continue
        key = parts[0].lower()
        if key == "nodata":
            key = "nodata_value"
        if len(parts) != 2:
            raise DataFormatError(f"{path}:{i}: malformed header line {lines[i - 1]!r}")
        header[key] = float(parts[1])
    if "cellsize" in header:
        header.setdefault("dx", header["cellsize"])
        header.setdefault("dy", header["cellsize"])
    missing = [k for k in ("ncols", "nrows", "xllcorner", "yllcorner", "dx", "dy") if k not in header]
    if missing:
        raise DataFormatError(f"{path}: missing header fields {missing}")
    nx, ny = int(header["ncols"]), int(header["nrows"])
    try:
        data = np.array(" ".join(lines[i:]).split(), dtype=float)
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric raster value ({exc})") from None
    if data.size != nx * ny:
        raise DataFormatError(f"{path}: expected {nx * ny} values, found {data.size}")
    vals = data.reshape(ny, nx)[::-1].copy()
    if "nodata_value" in header:
        vals[vals == header["nodata_value"]] = np.nan
    dx, dy = header["dx"], header["dy"]
    grid = Grid._build(window, header["xllcorner"], header["yllcorner"], dx, dy, nx, ny)
    x0, y0, x1, y1 = window.bbox
    tol = 1e-6 * max(dx, dy)
    if grid.x0 > x0 + tol or grid.y0 > y0 + tol or grid.x0 + nx * dx < x1 - tol or grid.y0 + ny * dy < y1 - tol:
        raise GeometryError(f"{path}: raster does not cover the window")
    return CovariateField(grid, vals, name or path.stem)


def write_ascii_grid(path, field_: CovariateField, nodata: float = -9999.0) -> None:
    g = field_.grid
    vals = np.where(g.mask, field_.values, nodata)[::-1]
    with Path(path).open("w") as fh:
        fh.write(f"ncols {g.nx}\nnrows {g.ny}\nxllcorner {g.x0!r}\nyllcorner {g.y0!r}\n")
        if math.isclose(g.dx, g.dy, rel_tol=1e-12):
            fh.write(f"cellsize {g.dx!r}\n")
        else:
            # GDAL-style extension for rectangular cells
            fh.write(f"dx {g.dx!r}\ndy {g.dy!r}\n")
        fh.write(f"NODATA_value {nodata!r}\n")
        for row in vals:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
