"""Matern covariance functions on spatial locations.

Distances are Euclidean and the kernel is isotropic.  Only the three
half-integer smoothness values with closed forms (0.5, 1.5, 2.5) are
supported, which keeps evaluation and the analytic parameter gradients
Bessel-free.  The parameter vector is ``theta = (sigma2, rho)`` with
``sigma2`` the marginal variance and ``rho`` the range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError

_SUPPORTED_NU = (0.5, 1.5, 2.5)

#: index of the marginal-variance parameter in theta
K_SIGMA2 = 0
#: index of the range parameter in theta
K_RHO = 1

DUPLICATE_TOL = 1e-12


class Locations:
    """Validated set of n spatial locations in R^d.

    Raises
    ------
    DataError
        If coordinates are not finite, or two rows coincide within
        ``1e-12`` (duplicates make the covariance matrix singular; the
        model has no nugget to absorb them).
    """

    def __init__(self, coords):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        if coords.ndim != 2 or coords.shape[0] < 1 or coords.shape[1] < 1:
            raise DataError("locations must be a non-empty n x d matrix")
        if not np.all(np.isfinite(coords)):
            raise DataError("locations contain non-finite coordinates")
        self.coords = coords
        if coords.shape[0] > 1:
            dist, idx = cKDTree(coords).query(coords, k=2)
            nearest = dist[:, 1]
            if np.any(nearest <= DUPLICATE_TOL):
                bad = int(np.argmin(nearest))
                raise DataError(
                    f"duplicate locations: rows {bad} and {idx[bad, 1]} coincide "
                    f"within {DUPLICATE_TOL:g}"
                )

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def d(self):
        return self.coords.shape[1]


@dataclass(frozen=True)
class CovarianceSpec:
    """Matern covariance specification: family, smoothness and theta."""

    sigma2: float
    rho: float
    nu: float = 1.5

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ConfigError(f"sigma2 must be > 0, got {self.sigma2}")
        if self.rho <= 0:
            raise ConfigError(f"rho must be > 0, got {self.rho}")
        if self.nu not in _SUPPORTED_NU:
            raise ConfigError(
                f"smoothness nu must be one of {_SUPPORTED_NU}, got {self.nu}"
            )

    @property
    def theta(self):
        return np.array([self.sigma2, self.rho])

    def with_theta(self, theta):
        return CovarianceSpec(float(theta[0]), float(theta[1]), self.nu)


def matern_from_dist(spec, r):
    """Evaluate the Matern kernel at Euclidean distances ``r``."""
    r = np.asarray(r, dtype=float)
    if spec.nu == 0.5:
        return spec.sigma2 * np.exp(-r / spec.rho)
    if spec.nu == 1.5:
        u = (np.sqrt(3.0) / spec.rho) * r
        return spec.sigma2 * (1.0 + u) * np.exp(-u)
    u = (np.sqrt(5.0) / spec.rho) * r
    return spec.sigma2 * (1.0 + u + u * u / 3.0) * np.exp(-u)


def matern_grad_from_dist(spec, r, k):
    """Analytic d(kernel)/d(theta_k) at distances ``r``.

    The kernel is linear in sigma2, so k = 0 returns value / sigma2.  For
    the range parameter the derivative follows from d u / d rho = -u / rho
    with u the scaled distance.
    """
    r = np.asarray(r, dtype=float)
    if k == K_SIGMA2:
        return matern_from_dist(spec, r) / spec.sigma2
    if k != K_RHO:
        raise ConfigError(f"parameter index must be 0 (sigma2) or 1 (rho), got {k}")
    if spec.nu == 0.5:
        u = r / spec.rho
        return spec.sigma2 * np.exp(-u) * u / spec.rho
    if spec.nu == 1.5:
        u = (np.sqrt(3.0) / spec.rho) * r
        return spec.sigma2 * u * u * np.exp(-u) / spec.rho
    u = (np.sqrt(5.0) / spec.rho) * r
    return spec.sigma2 * u * u * (1.0 + u) * np.exp(-u) / (3.0 * spec.rho)


def cov_value(spec, s, s2):
    """Kernel value between two points; symmetric, equals sigma2 at r = 0."""
    r = float(np.linalg.norm(np.asarray(s, float) - np.asarray(s2, float)))
    return float(matern_from_dist(spec, r))


def cov_grad(spec, s, s2, k):
    """Partial derivative of :func:`cov_value` with respect to theta_k."""
    r = float(np.linalg.norm(np.asarray(s, float) - np.asarray(s2, float)))
    return float(matern_grad_from_dist(spec, r, k))


def cov_matrix(spec, coords_a, coords_b=None):
    """Dense kernel matrix between two coordinate sets (or one with itself)."""
    coords_a = np.atleast_2d(coords_a)
    if coords_b is None:
        r = cdist(coords_a, coords_a)
        return matern_from_dist(spec, r)
    return matern_from_dist(spec, cdist(coords_a, np.atleast_2d(coords_b)))


def cov_grad_matrix(spec, coords_a, coords_b=None, k=K_RHO):
    """Dense matrix of kernel parameter derivatives."""
    coords_a = np.atleast_2d(coords_a)
    coords_b = coords_a if coords_b is None else np.atleast_2d(coords_b)
    return matern_grad_from_dist(spec, cdist(coords_a, coords_b), k)


def cov_submatrix(spec, locs, rows, cols):
    """Submatrix of the full covariance: entry (a, b) pairs rows[a], cols[b]."""
    coords = locs.coords if isinstance(locs, Locations) else np.atleast_2d(locs)
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    n = coords.shape[0]
    for idx in (rows, cols):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ConfigError(f"index out of range [0, {n})")
    return cov_matrix(spec, coords[rows], coords[cols])
