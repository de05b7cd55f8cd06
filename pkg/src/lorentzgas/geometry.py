"""Shared geometric primitives for billiard flows in dimensions 2 and 3.

Vectors are plain 1-D numpy arrays and rotations are orthogonal matrices
acting on row vectors, so ``x @ R`` is "rotate x by R" throughout the
package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gamma

Vec = np.ndarray
Direction = np.ndarray
Rotation = np.ndarray

SUPPORTED_DIMENSIONS = (2, 3)

_UNIT_TOL = 1e-9
_POLE_TOL = 5e-9


def check_dimension(dim: int) -> int:
    if dim not in SUPPORTED_DIMENSIONS:
        raise ValueError(f"dimension must be one of {SUPPORTED_DIMENSIONS}, got {dim}")
    return int(dim)


def as_vector(x, dim: int | None = None) -> Vec:
    """Coerce x to a float vector, optionally checking its length."""
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"expected a vector of length {dim}, got {v.shape[0]}")
    return v


def unit_vector(x) -> Direction:
    """Normalize x to unit length."""
    v = as_vector(x)
    n = float(np.linalg.norm(v))
    if n < _UNIT_TOL:
        raise ValueError("cannot normalize a near-zero vector")
    return v / n


def require_unit(v, name: str = "direction") -> Direction:
    v = as_vector(v)
    if abs(float(np.linalg.norm(v)) - 1.0) > 1e-6:
        raise ValueError(f"{name} must be a unit vector")
    return v


def angle(u, v) -> float:
    """Angle between two unit vectors, clamped against roundoff."""
    c = float(np.clip(np.dot(u, v), -1.0, 1.0))
    return float(np.arccos(c))


def perp(x) -> np.ndarray:
    """Component list orthogonal to the first axis: drop coordinate 0."""
    return np.asarray(x, dtype=float)[..., 1:]


def embed_perp(w, first: float) -> Vec:
    """Inverse of perp: prepend the axis coordinate to a perpendicular part."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    return np.concatenate(([float(first)], w))


def _pole_matrix(d: int) -> Rotation:
    pole = np.eye(d)
    pole[0, 0] = -1.0
    pole[1, 1] = -1.0
    return pole


def rotation_to_e1(v: Direction) -> Rotation:
    """Rotation R with v @ R = e1.

    Built from the Householder reflection through the bisector of v and -e1
    followed by the fixed flip diag(-1, 1, ..., 1), which lands the result in
    SO(d). The construction is continuous everywhere except v = -e1, where a
    fixed matrix is returned. The reflector is normalized by the computed
    squared norm of v + e1, not the unit-vector shortcut 2 (1 + v[0]): near
    the pole the shortcut amplifies a one-ulp error in |v| by 1 / (1 + v[0])
    and breaks orthogonality at observable size.
    """
    v = np.asarray(v, dtype=float)
    d = v.shape[0]
    n1 = 1.0 + v[0]
    if n1 < _POLE_TOL:
        return _pole_matrix(d)
    n = v.copy()
    n[0] = n1
    h = np.eye(d) - np.outer(n, n) * (2.0 / float(n @ n))
    h[:, 0] = -h[:, 0]
    return h


def rotation_to_e1_batch(vs: np.ndarray) -> np.ndarray:
    """Vectorized rotation_to_e1: vs has shape (n, d), result (n, d, d)."""
    vs = np.asarray(vs, dtype=float)
    n_pts, d = vs.shape
    n = vs.copy()
    n1 = 1.0 + n[:, 0]
    n[:, 0] = n1
    safe = n1 > _POLE_TOL
    nsq = np.where(safe, (n * n).sum(axis=1), 1.0)
    out = np.broadcast_to(np.eye(d), (n_pts, d, d)).copy()
    out -= n[:, :, None] * n[:, None, :] * (2.0 / nsq)[:, None, None]
    out[:, :, 0] = -out[:, :, 0]
    if not np.all(safe):
        out[~safe] = _pole_matrix(d)
    return out


def unit_ball_volume(k: int) -> float:
    """Volume of the unit ball in R^k (k = 0 gives 1)."""
    if k < 0:
        raise ValueError("ball dimension must be nonnegative")
    return float(np.pi ** (k / 2.0) / gamma(k / 2.0 + 1.0))


def sphere_area(k: int) -> float:
    """Surface measure of the unit sphere S^k in R^{k+1}."""
    if k < 0:
        raise ValueError("sphere dimension must be nonnegative")
    return float(2.0 * np.pi ** ((k + 1) / 2.0) / gamma((k + 1) / 2.0))


@dataclass(frozen=True)
class ScaleParams:
    """Scatterer radius together with the low-density unit conversions.

    Path lengths tau in microscopic units correspond to rescaled lengths
    xi = rho^(dim-1) * tau, and macroscopic positions q correspond to
    microscopic ones rho^(1-dim) * q.
    """

    rho: float
    dim: int

    def __post_init__(self):
        check_dimension(self.dim)
        if not 0.0 < self.rho < 0.5:
            raise ValueError("scatterer radius must lie in (0, 0.5)")

    @property
    def xi_factor(self) -> float:
        return self.rho ** (self.dim - 1)

    @property
    def length_factor(self) -> float:
        return self.rho ** (1 - self.dim)

    def to_microscopic(self, q_macro) -> Vec:
        return as_vector(q_macro, self.dim) * self.length_factor

    def to_macroscopic(self, q_micro) -> Vec:
        return as_vector(q_micro, self.dim) * self.xi_factor

    def path_to_xi(self, tau: float) -> float:
        return float(tau) * self.xi_factor

    def xi_to_path(self, xi: float) -> float:
        return float(xi) * self.length_factor


def mean_free_path(density: float, dim: int) -> float:
    """Mean rescaled free path length 1 / (v_{d-1} * density)."""
    check_dimension(dim)
    if density <= 0.0:
        raise ValueError("density must be positive")
    return 1.0 / (unit_ball_volume(dim - 1) * density)
