"""Non-stationary Gaussian random fields driving the Cox process.

The log residual field is ``Y0(u) = -sigma(u)^2 / 2 + sigma(u) Q(phi(u))``
where ``Q`` is a unit-variance isotropic field with correlation ``r`` and
``phi`` a bijective deformation of the plane, so that

    c(u, v) = sigma(u) r(|phi(u) - phi(v)|) sigma(v).
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import scipy.linalg
import scipy.linalg.blas
from scipy.spatial.distance import cdist

from .geometry import CovariateField

logger = logging.getLogger(__name__)

#: default cap on the number of sites in one dense factorization
MAX_SITES = 8000


class FactorizationError(np.linalg.LinAlgError):
    """Covariance matrix could not be factorized even with maximal jitter."""


class ModelError(ValueError):
    """Invalid field-model parameters."""


# ---------------------------------------------------------------------------
# Model components
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExponentialCorrelation:
    """``r(t) = exp(-rate * t)``."""

    rate: float

    def __post_init__(self):
        if not (self.rate > 0 and np.isfinite(self.rate)):
            raise ModelError(f"correlation rate must be positive, got {self.rate}")

    def __call__(self, t):
        return np.exp(-self.rate * np.asarray(t, dtype=float))

    def to_dict(self) -> dict:
        return {"family": "exponential", "rate": float(self.rate)}


@dataclass(frozen=True)
class ConstantStd:
    """Constant standard deviation ``sigma``."""

    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ModelError(f"sigma must be positive, got {self.sigma}")

    is_constant = True

    def at(self, points) -> np.ndarray:
        return np.full(len(np.atleast_2d(points)), float(self.sigma))

    def on(self, grid) -> np.ndarray:
        return np.full(grid.shape, float(self.sigma))

    def to_dict(self) -> dict:
        return {"kind": "constant", "sigma": float(self.sigma)}


@dataclass(frozen=True, eq=False)
class LinearStd:
    """``sigma(u) = gamma0 + gamma1 * z(u)``, required positive on the window."""

    gamma0: float
    gamma1: float
    covariate: CovariateField

    is_constant = False

    def __post_init__(self):
        vals = self.gamma0 + self.gamma1 * self.covariate.values[self.covariate.grid.mask]
        if not np.all(vals > 0):
            raise ModelError(
                f"sigma(u) = {self.gamma0:.4g} + {self.gamma1:.4g} z(u) is not positive on the "
                f"whole window (min {vals.min():.4g})"
            )

    def at(self, points) -> np.ndarray:
        return self.gamma0 + self.gamma1 * self.covariate.at(points)

    def on(self, grid) -> np.ndarray:
        return self.gamma0 + self.gamma1 * self.covariate.on(grid)

    def to_dict(self) -> dict:
        return {
            "kind": "linear",
            "gamma0": float(self.gamma0),
            "gamma1": float(self.gamma1),
            "covariate": self.covariate.name,
        }


@dataclass(frozen=True)
class IdentityMap:
    is_identity = True

    def forward(self, u):
        return np.asarray(u, dtype=float)

    def inverse(self, u):
        return np.asarray(u, dtype=float)

    def jacobian_inverse(self, u):
        return np.ones(len(np.atleast_2d(u)))

    def to_dict(self) -> dict:
        return {"kind": "identity"}


@dataclass(frozen=True)
class RadialLogMap:
    """``phi(u) = log(1 + delta |u|) u / |u|`` with ``phi(0) = 0``."""

    delta: float

    is_identity = False

    def __post_init__(self):
        if not (self.delta > 0 and np.isfinite(self.delta)):
            raise ModelError(f"deformation delta must be positive, got {self.delta}")

    def forward(self, u):
        u = np.asarray(u, dtype=float)
        s = np.hypot(u[..., 0], u[..., 1])
        small = s < 1e-12
        safe = np.where(small, 1.0, s)
        scale = np.where(small, self.delta, np.log1p(self.delta * safe) / safe)
        return u * scale[..., None]

    def inverse(self, u):
        u = np.asarray(u, dtype=float)
        s = np.hypot(u[..., 0], u[..., 1])
        small = s < 1e-12
        safe = np.where(small, 1.0, s)
        scale = np.where(small, 1.0 / self.delta, np.expm1(safe) / (self.delta * safe))
        return u * scale[..., None]

    def radius_inverse(self, s):
        """Original-space radius of a transformed-space radius ``s``."""
        return np.expm1(np.asarray(s, dtype=float)) / self.delta

    def jacobian_inverse(self, u):
        """``|det D phi^-1(u)| = e^s (e^s - 1) / (delta^2 s)`` at ``s = |u|``."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        s = np.hypot(u[:, 0], u[:, 1])
        small = s < 1e-8
        safe = np.where(small, 1.0, s)
        val = np.exp(safe) * np.expm1(safe) / (self.delta**2 * safe)
        return np.where(small, 1.0 / self.delta**2, val)

    def to_dict(self) -> dict:
        return {"kind": "radial-log", "delta": float(self.delta)}


@dataclass(frozen=True, eq=False)
class FieldModel:
    """Full covariance specification of the log residual field."""

    std: ConstantStd | LinearStd
    deformation: IdentityMap | RadialLogMap
    correlation: ExponentialCorrelation

    def covariance(self, u, v) -> np.ndarray:
        """``c(u, v)`` for matching rows of ``u`` and ``v`` (or two single points)."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        d = np.linalg.norm(self.deformation.forward(u) - self.deformation.forward(v), axis=-1)
        out = self.std.at(u) * self.correlation(d) * self.std.at(v)
        return out if out.size > 1 else float(out[0])

    def pair_correlation(self, u, v) -> np.ndarray:
        """``g(u, v) = exp(c(u, v))``."""
        return np.exp(self.covariance(u, v))

    def correlation_matrix(self, sites) -> np.ndarray:
        p = self.deformation.forward(np.atleast_2d(np.asarray(sites, dtype=float)))
        d = cdist(p, p)
        np.multiply(d, -self.correlation.rate, out=d)
        return np.exp(d, out=d)

    def covariance_matrix(self, sites) -> np.ndarray:
        s = self.std.at(sites)
        m = self.correlation_matrix(sites)
        m *= s[:, None]
        m *= s[None, :]
        return m

    def to_dict(self) -> dict:
        return {
            "std": self.std.to_dict(),
            "deformation": self.deformation.to_dict(),
            "correlation": self.correlation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping, covariates: Optional[Mapping[str, CovariateField]] = None) -> "FieldModel":
        covariates = covariates or {}
        sd = d["std"]
        if sd["kind"] == "constant":
            std = ConstantStd(float(sd["sigma"]))
        elif sd["kind"] == "linear":
            name = sd["covariate"]
            if name not in covariates:
                raise ModelError(f"std.covariate: unknown covariate {name!r}")
            std = LinearStd(float(sd["gamma0"]), float(sd["gamma1"]), covariates[name])
        else:
            raise ModelError(f"std.kind: unknown kind {sd['kind']!r}")
        dd = d.get("deformation", {"kind": "identity"})
        if dd["kind"] == "identity":
            deformation = IdentityMap()
        elif dd["kind"] == "radial-log":
            deformation = RadialLogMap(float(dd["delta"]))
        else:
            raise ModelError(f"deformation.kind: unknown kind {dd['kind']!r}")
        cd = d["correlation"]
        if cd.get("family", "exponential") != "exponential":
            raise ModelError(f"correlation.family: only 'exponential' is supported, got {cd['family']!r}")
        return cls(std, deformation, ExponentialCorrelation(float(cd["rate"])))


# ---------------------------------------------------------------------------
# Factorization and sampling
# ---------------------------------------------------------------------------


def covariance(model: FieldModel, u, v) -> float:
    return model.covariance(u, v)


def covariance_matrix(model: FieldModel, sites) -> np.ndarray:
    return model.covariance_matrix(sites)


def cholesky_jittered(m: np.ndarray, overwrite: bool = False) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``m + jitter * I``.

    Jitter starts at ``1e-10 * max(diag)`` and grows tenfold up to
    ``1e-6 * max(diag)``.  Returns the factor and the jitter used.
    """
    scale = float(np.max(np.diag(m)))
    if not scale > 0:
        raise FactorizationError("covariance matrix has no positive diagonal entry")
    rel = 1e-10
    while rel <= 1e-6 * (1 + 1e-9):
        a = m if overwrite and rel == 1e-10 else m.copy()
        a[np.diag_indices_from(a)] += rel * scale
        try:
            return scipy.linalg.cholesky(a, lower=True, overwrite_a=True, check_finite=False), rel * scale
        except np.linalg.LinAlgError:
            logger.debug("cholesky failed with relative jitter %g", rel)
            if overwrite and rel == 1e-10:
                raise FactorizationError("factorization failed and input was overwritten") from None
            rel *= 10
    raise FactorizationError(f"covariance matrix of size {len(m)} not factorizable with jitter up to 1e-6")


_FACTOR_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_FACTOR_CACHE_SIZE = 2


def _correlation_factor(model: FieldModel, sites: np.ndarray) -> np.ndarray:
    key = (
        repr(model.deformation.to_dict()),
        repr(model.correlation.to_dict()),
        sites.shape,
        hash(sites.tobytes()),
    )
    hit = _FACTOR_CACHE.get(key)
    if hit is not None:
        _FACTOR_CACHE.move_to_end(key)
        return hit
    r = model.correlation_matrix(sites)
    try:
        factor, _ = cholesky_jittered(r, overwrite=False)
    finally:
        del r
    _FACTOR_CACHE[key] = factor
    while len(_FACTOR_CACHE) > _FACTOR_CACHE_SIZE:
        _FACTOR_CACHE.popitem(last=False)
    return factor


def clear_factor_cache() -> None:
    _FACTOR_CACHE.clear()


class GRFSampler:
    """Draws realizations of ``Y0`` at a fixed set of sites.

    The covariance is ``diag(sigma) R diag(sigma)`` with ``R`` the deformed
    correlation matrix, so only ``R`` is factorized (and cached); its factor
    scaled by ``sigma`` is a factor of the covariance.
    """

    def __init__(self, model: FieldModel, sites, max_sites: int = MAX_SITES):
        sites = np.ascontiguousarray(np.atleast_2d(np.asarray(sites, dtype=float)))
        if len(sites) > max_sites:
            raise FactorizationError(
                f"{len(sites)} sites exceed the dense-factorization cap of {max_sites}; use a coarser grid"
            )
        self.model = model
        self.sites = sites
        self.sigma = model.std.at(sites)
        self.factor = _correlation_factor(model, sites)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        """One realization (shape ``(n,)``) or ``size`` of them (shape ``(size, n)``)."""
        k = 1 if size is None else int(size)
        z = rng.standard_normal((len(self.sites), k))
        # a triangular product reads half the factor; single draws are memory bound
        if k == 1 and self.factor.flags.f_contiguous:
            q = scipy.linalg.blas.dtrmv(self.factor, z[:, 0], lower=1)[:, None]
        elif k == 1 and self.factor.flags.c_contiguous:
            q = scipy.linalg.blas.dtrmv(self.factor.T, z[:, 0], lower=0, trans=1)[:, None]
        else:
            q = self.factor @ z
        y = (-0.5 * self.sigma**2)[:, None] + self.sigma[:, None] * q
        return y[:, 0] if size is None else y.T


def sample_grf(model: FieldModel, sites, seed, size: Optional[int] = None) -> np.ndarray:
    """Realization(s) of ``Y0`` at ``sites``; deterministic given ``seed``."""
    return GRFSampler(model, sites).sample(make_rng(seed), size)


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def replicate_seed(master: int, index: int) -> np.random.SeedSequence:
    """Seed for replicate ``index``: the pair ``(master, index)`` as entropy."""
    return np.random.SeedSequence([int(master), int(index)])


def replicate_rng(master: int, index: int) -> np.random.Generator:
    return np.random.default_rng(replicate_seed(master, index))
