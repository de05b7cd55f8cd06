"""Scatterer center configurations.

Four families share one interface: homogeneous Poisson clouds, lattices,
finite unions of shifted lattices, and cut-and-project (quasicrystal) sets.
Every family can enumerate its points in a ball, answer ray-tube queries
(which scatterers does a ray of sight radius rho meet, in entry order), and
report its point density and marks. Marks record which "kind" of point was
hit: nothing for Poisson and plain lattices, the component index for lattice
unions, the internal-space coordinates for cut-and-project sets.

Coordinates here are microscopic: scatterers are balls of radius rho around
the returned centers, and rho enters only through queries, never through the
configuration itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.spatial import ConvexHull, cKDTree

from .geometry import as_vector, check_dimension, unit_vector

MAX_QUERY_RADIUS = 1.0e4
_ORIGIN_TOL = 1e-9
_ENTRY_TOL = 1e-12

# ---------------------------------------------------------------------------
# marks


@dataclass(frozen=True)
class TrivialMark:
    pass


@dataclass(frozen=True)
class ComponentMark:
    index: int


@dataclass(frozen=True)
class InternalMark:
    coords: tuple


@dataclass(frozen=True)
class MarkedPoint:
    position: np.ndarray
    mark: TrivialMark | ComponentMark | InternalMark


@dataclass(frozen=True)
class RayHitCandidate:
    """A scatterer the ray tube meets: center, mark, and entry geometry."""

    position: np.ndarray
    mark: TrivialMark | ComponentMark | InternalMark
    entry_time: float
    impact_offset: np.ndarray


# ---------------------------------------------------------------------------
# hash-derived per-cell randomness (Poisson family)
#
# Each unit cell of Z^d owns a reproducible stream derived from (seed, cell)
# through a SplitMix64-style finalizer. The same integer arithmetic exists
# twice: vectorized on uint64 arrays for enumeration, and as scalar @njit
# helpers that the trajectory kernels call. A test pins the two routes equal.

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_COORD_SALT = (np.uint64(0x8B72E1D1759B85C5), np.uint64(0xC5B71B2F0F4A6E33),
               np.uint64(0xD6E8FEB86659FD93))


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


def cell_state_array(seed: int, cells: np.ndarray) -> np.ndarray:
    """Stream state for each integer cell, cells of shape (n, d)."""
    h = np.full(cells.shape[0], seed, dtype=np.uint64)
    h += _GOLDEN
    h = _mix64_array(h)
    for axis in range(cells.shape[1]):
        c = cells[:, axis].astype(np.int64).view(np.uint64)
        h = _mix64_array(h ^ (c * _COORD_SALT[axis] + _GOLDEN))
    return h


def cell_uniform_array(state: np.ndarray, index: np.ndarray) -> np.ndarray:
    """index-th uniform in [0,1) of each cell stream."""
    z = _mix64_array(state + (index.astype(np.uint64) + np.uint64(1)) * _GOLDEN)
    return (z >> np.uint64(11)) * 2.0 ** -53


@njit(cache=True, inline="always")
def _mix64(z):
    z = np.uint64(z)
    z ^= z >> np.uint64(30)
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z = z * np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


@njit(cache=True, inline="always")
def cell_state(seed, c0, c1, c2):
    h = _mix64(np.uint64(seed) + np.uint64(0x9E3779B97F4A7C15))
    h = _mix64(h ^ (np.uint64(c0) * np.uint64(0x8B72E1D1759B85C5)
                    + np.uint64(0x9E3779B97F4A7C15)))
    h = _mix64(h ^ (np.uint64(c1) * np.uint64(0xC5B71B2F0F4A6E33)
                    + np.uint64(0x9E3779B97F4A7C15)))
    if c2 != np.int64(-2 ** 62):
        h = _mix64(h ^ (np.uint64(c2) * np.uint64(0xD6E8FEB86659FD93)
                        + np.uint64(0x9E3779B97F4A7C15)))
    return h


@njit(cache=True, inline="always")
def cell_uniform(state, index):
    z = _mix64(np.uint64(state)
               + (np.uint64(index) + np.uint64(1)) * np.uint64(0x9E3779B97F4A7C15))
    return (z >> np.uint64(11)) * 2.0 ** -53


_NO_CELL = np.int64(-2 ** 62)


def poisson_count_table(intensity: float, tail: float = 1e-15) -> np.ndarray:
    """Cumulative probabilities P(N <= k) until the tail drops below `tail`."""
    probs = [np.exp(-intensity)]
    k = 0
    while 1.0 - sum(probs) > tail and k < 256:
        k += 1
        probs.append(probs[-1] * intensity / k)
    return np.cumsum(probs)


# ---------------------------------------------------------------------------
# configuration interface


def _order_hits(hits):
    """Sort by entry time, breaking near-ties (1e-12) by lexicographic center."""
    hits = sorted(hits, key=lambda h: h[0])
    i = 0
    while i < len(hits):
        j = i + 1
        while j < len(hits) and hits[j][0] - hits[i][0] <= 1e-12:
            j += 1
        if j - i > 1:
            hits[i:j] = sorted(hits[i:j], key=lambda h: tuple(h[1]))
        i = j
    return hits


class ScattererConfiguration:
    """Common interface of all families.

    Subclasses fill in dim, density, mark_kind ('trivial', 'component',
    'internal'), mark_dim, and the box enumeration primitive
    _points_in_box(lo, hi) returning (positions, marks) with the box
    half-open. Everything else is generic.
    """

    dim: int
    density: float
    mark_kind: str
    mark_dim: int

    # -- family primitive -------------------------------------------------

    def _points_in_box(self, lo: np.ndarray, hi: np.ndarray):
        raise NotImplementedError

    # -- mark helpers ------------------------------------------------------

    def wrap_mark(self, row: np.ndarray):
        if self.mark_kind == "trivial":
            return TrivialMark()
        if self.mark_kind == "component":
            return ComponentMark(int(row[0]))
        return InternalMark(tuple(float(x) for x in row))

    def mark_cell_count(self) -> int:
        if self.mark_kind == "trivial":
            return 1
        if self.mark_kind == "component":
            return self.component_count  # type: ignore[attr-defined]
        return 8

    def mark_cell_index(self, marks: np.ndarray) -> np.ndarray:
        if self.mark_kind == "trivial":
            return np.zeros(marks.shape[0], dtype=np.int64)
        if self.mark_kind == "component":
            return marks[:, 0].astype(np.int64)
        return self.window.cell_index(marks)  # type: ignore[attr-defined]

    def mark_cell_masses(self) -> np.ndarray:
        if self.mark_kind == "trivial":
            return np.array([1.0])
        if self.mark_kind == "component":
            m = self.component_count  # type: ignore[attr-defined]
            return np.full(m, 1.0 / m)
        return self.window.cell_masses()  # type: ignore[attr-defined]

    # -- generic queries ---------------------------------------------------

    def points_in_ball(self, center, radius: float):
        """All configuration points within the closed ball, with marks.

        Returns (positions, marks) arrays; marks has mark_dim columns.
        """
        center = as_vector(center, self.dim)
        if not 0.0 < radius <= MAX_QUERY_RADIUS:
            raise ValueError(f"radius must lie in (0, {MAX_QUERY_RADIUS:g}]")
        pad = 1e-9 + radius * 1e-12
        pos, marks = self._points_in_box(center - radius - pad,
                                         center + radius + pad)
        keep = np.einsum("ij,ij->i", pos - center, pos - center) <= radius ** 2
        return pos[keep], marks[keep]

    def marked_points_in_ball(self, center, radius: float):
        pos, marks = self.points_in_ball(center, radius)
        return [MarkedPoint(p, self.wrap_mark(m)) for p, m in zip(pos, marks)]

    def ray_tube_query(self, origin, direction, rho: float, horizon: float):
        """Scatterers of radius rho met by the forward ray, in entry order.

        Walks disjoint slabs along the dominant axis so each candidate is
        seen exactly once and tests the exact ray-sphere entry condition.
        The scatterer centered at the origin itself (if any) is excluded, as
        are tangencies behind the start. Callers chasing only the first
        collision should pass a modest horizon and grow it on a miss.
        """
        origin = as_vector(origin, self.dim)
        direction = unit_vector(as_vector(direction, self.dim))
        if rho <= 0.0 or horizon <= 0.0:
            raise ValueError("rho and horizon must be positive")
        axis = int(np.argmax(np.abs(direction)))
        v_ax = direction[axis]
        step = 4.0  # slab thickness along the dominant axis
        sgn = 1.0 if v_ax > 0 else -1.0

        hits: list[tuple] = []
        reach = rho / abs(v_ax)
        t = 0.0
        while t < horizon:
            t_next = min(t + step / abs(v_ax), horizon)
            # a center with axis coordinate inside this slab can project onto
            # the ray up to rho/|v_ax| beyond either face, so take the bounding
            # box of the slightly extended segment
            seg = np.stack([origin + (t - reach) * direction,
                            origin + (t_next + reach) * direction])
            lo = seg.min(axis=0) - rho - 1e-9
            hi = seg.max(axis=0) + rho + 1e-9
            # disjoint half-open slabs along the dominant axis; the first and
            # last slab keep the rho padding so tangent centers just behind
            # the start or beyond the end are still seen
            a0 = origin[axis] + t * v_ax
            a1 = origin[axis] + t_next * v_ax
            if sgn > 0:
                lo[axis] = a0 if t > 0.0 else lo[axis]
                hi[axis] = a1 if t_next < horizon else hi[axis]
            else:
                lo[axis] = a1 if t_next < horizon else lo[axis]
                hi[axis] = a0 if t > 0.0 else hi[axis]
            pos, marks = self._points_in_box(lo, hi)
            if pos.shape[0]:
                rel = pos - origin
                t_mid = rel @ direction
                miss_sq = np.einsum("ij,ij->i", rel, rel) - t_mid ** 2
                inside = (miss_sq < rho ** 2) & (t_mid > 0)
                not_origin = np.einsum("ij,ij->i", rel, rel) > _ORIGIN_TOL ** 2
                for i in np.flatnonzero(inside & not_origin):
                    entry = t_mid[i] - np.sqrt(rho ** 2 - miss_sq[i])
                    if _ENTRY_TOL < entry <= horizon:
                        offset = rel[i] - t_mid[i] * direction
                        hits.append((entry, pos[i], marks[i], offset))
            t = t_next

        ordered = _order_hits(hits)
        return [
            RayHitCandidate(p, self.wrap_mark(m), float(e), off)
            for e, p, m, off in ordered
        ]

    def covered(self, point, rho: float) -> bool:
        """Does a scatterer of radius rho contain the point?"""
        pos, _ = self.points_in_ball(point, max(rho, 1e-6))
        if not pos.shape[0]:
            return False
        d2 = np.einsum("ij,ij->i", pos - as_vector(point, self.dim),
                       pos - as_vector(point, self.dim))
        return bool(np.any(d2 < rho ** 2))

    def min_gap(self, region_radius: float) -> float:
        """Smallest pairwise distance among points within the given ball."""
        pos, _ = self.points_in_ball(np.zeros(self.dim), region_radius)
        if pos.shape[0] < 2:
            return np.inf
        tree = cKDTree(pos)
        dist, _ = tree.query(pos, k=2)
        return float(dist[:, 1].min())


# ---------------------------------------------------------------------------
# Poisson family


class PoissonConfiguration(ScattererConfiguration):
    """Homogeneous Poisson cloud of the given intensity.

    Points are materialized lazily per unit cell of Z^d from the cell's hash
    stream: one uniform decides the count through the inverse Poisson CDF,
    the following ones place the points. Any two queries therefore agree on
    the part of the cloud they both see, and the full configuration is a
    deterministic function of (intensity, seed).
    """

    mark_kind = "trivial"
    mark_dim = 0

    def __init__(self, intensity: float, seed: int, dim: int):
        self.dim = check_dimension(dim)
        if not 0.0 < intensity <= 100.0:
            raise ValueError("intensity must lie in (0, 100]")
        self.intensity = float(intensity)
        self.seed = int(seed) & (2 ** 64 - 1)
        self.density = self.intensity
        self.count_cdf = poisson_count_table(self.intensity)

    def _cells_in_box(self, lo, hi):
        lo_cell = np.floor(lo - 1e-12).astype(np.int64)
        hi_cell = np.floor(hi + 1e-12).astype(np.int64)
        ranges = [np.arange(a, b + 1) for a, b in zip(lo_cell, hi_cell)]
        grids = np.meshgrid(*ranges, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def _points_in_cells(self, cells: np.ndarray) -> np.ndarray:
        state = cell_state_array(self.seed, cells)
        counts = np.searchsorted(self.count_cdf,
                                 cell_uniform_array(state, np.zeros(len(cells))),
                                 side="right")
        total = int(counts.sum())
        if total == 0:
            return np.empty((0, self.dim))
        rows = np.repeat(np.arange(len(cells)), counts)
        within = np.arange(total) - np.repeat(
            np.concatenate(([0], np.cumsum(counts)[:-1])), counts)
        pts = np.empty((total, self.dim))
        for axis in range(self.dim):
            idx = within * self.dim + axis + 1
            pts[:, axis] = cells[rows, axis] + cell_uniform_array(state[rows], idx)
        return pts

    def _points_in_box(self, lo, hi):
        cells = self._cells_in_box(lo, hi)
        out = []
        for start in range(0, len(cells), 1 << 16):
            pts = self._points_in_cells(cells[start:start + (1 << 16)])
            keep = np.all((pts >= lo) & (pts < hi), axis=1)
            out.append(pts[keep])
        pos = np.concatenate(out) if out else np.empty((0, self.dim))
        return pos, np.empty((pos.shape[0], 0))


# ---------------------------------------------------------------------------
# periodic families (lattice and unions of shifted lattices)


class PeriodicConfiguration(ScattererConfiguration):
    """Union of m shifted copies of a lattice of covolume `covolume`.

    The supplied basis is rescaled to unit determinant, so the lattice is
    covolume^(1/d) Z^d g with det g = 1 and the density is exactly
    m / covolume. Offsets live in fractional coordinates; the first must be
    zero and no two may differ by an integer vector.
    """

    def __init__(self, basis, covolume: float, dim: int, offsets=None):
        self.dim = check_dimension(dim)
        basis = np.asarray(basis, dtype=float)
        if basis.shape != (dim, dim):
            raise ValueError(f"basis must be {dim}x{dim}")
        det = np.linalg.det(basis)
        if abs(det) < 1e-12:
            raise ValueError("basis is singular")
        if covolume <= 0.0:
            raise ValueError("covolume must be positive")
        self.covolume = float(covolume)
        self.basis = basis / abs(det) ** (1.0 / dim)
        if offsets is None:
            offsets = np.zeros((1, dim))
        offsets = np.atleast_2d(np.asarray(offsets, dtype=float))
        if offsets.shape[1] != dim:
            raise ValueError("offsets must have one fractional vector per row")
        if np.linalg.norm(offsets[0]) > 1e-12:
            raise ValueError("the first offset must be zero")
        frac = offsets - np.floor(offsets)
        for i in range(len(frac)):
            for j in range(i):
                diff = frac[i] - frac[j]
                if np.linalg.norm(diff - np.round(diff)) < 1e-9:
                    raise ValueError("offsets must be distinct modulo Z^d")
        self.offsets = frac
        self.component_count = len(frac)
        self.mark_kind = "trivial" if self.component_count == 1 else "component"
        self.mark_dim = 0 if self.component_count == 1 else 1
        self.density = self.component_count / self.covolume

        self.scale = self.covolume ** (1.0 / dim)
        self.cell_matrix = self.scale * self.basis
        self.cell_inverse = np.linalg.inv(self.cell_matrix)
        self.global_min_gap = self._shortest_distance()

    def _shortest_distance(self) -> float:
        rng = np.arange(-4, 5)
        grids = np.meshgrid(*([rng] * self.dim), indexing="ij")
        ns = np.stack([g.ravel() for g in grids], axis=1).astype(float)
        best = np.inf
        for i in range(self.component_count):
            for j in range(self.component_count):
                shift = self.offsets[i] - self.offsets[j]
                vecs = (ns + shift) @ self.cell_matrix
                norms = np.linalg.norm(vecs, axis=1)
                norms = norms[norms > 1e-12]
                if norms.size:
                    best = min(best, float(norms.min()))
        return best

    def _points_in_box(self, lo, hi):
        corners_frac = np.array(
            [c @ self.cell_inverse
             for c in _box_corners(lo, hi)])
        n_lo = np.floor(corners_frac.min(axis=0)).astype(np.int64) - 1
        n_hi = np.ceil(corners_frac.max(axis=0)).astype(np.int64) + 1
        ranges = [np.arange(a, b + 1) for a, b in zip(n_lo, n_hi)]
        grids = np.meshgrid(*ranges, indexing="ij")
        ns = np.stack([g.ravel() for g in grids], axis=1).astype(float)
        pos_list, mark_list = [], []
        for comp in range(self.component_count):
            pts = (ns + self.offsets[comp]) @ self.cell_matrix
            keep = np.all((pts >= lo) & (pts < hi), axis=1)
            pos_list.append(pts[keep])
            if self.mark_dim:
                mark_list.append(np.full((int(keep.sum()), 1), float(comp)))
        pos = np.concatenate(pos_list)
        marks = (np.concatenate(mark_list) if self.mark_dim
                 else np.empty((pos.shape[0], 0)))
        return pos, marks


def _box_corners(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = lo.shape[0]
    corners = np.empty((2 ** d, d))
    for k in range(2 ** d):
        for axis in range(d):
            corners[k, axis] = hi[axis] if (k >> axis) & 1 else lo[axis]
    return corners


# ---------------------------------------------------------------------------
# cut-and-project family


class Window:
    """Bounded region in internal space with boundary of measure zero."""

    codim: int
    measure: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounding_box(self):
        raise NotImplementedError

    # mark-cell partition used by kernel histograms: 8 congruent cells of the
    # bounding box (4x2 for planar windows), weighted by window mass.

    def _cell_grid(self):
        lo, hi = self.bounding_box()
        if self.codim == 1:
            return lo, hi, np.array([8]), None
        return lo, hi, np.array([4, 2]), None

    def cell_index(self, pts: np.ndarray) -> np.ndarray:
        lo, hi, shape, _ = self._cell_grid()
        pts = np.atleast_2d(pts)
        idx = np.zeros(pts.shape[0], dtype=np.int64)
        stride = 1
        for axis in range(self.codim - 1, -1, -1):
            frac = (pts[:, axis] - lo[axis]) / (hi[axis] - lo[axis])
            k = np.clip((frac * shape[axis]).astype(np.int64), 0, shape[axis] - 1)
            idx += stride * k
            stride *= shape[axis]
        return idx

    def cell_masses(self, samples_per_axis: int = 512) -> np.ndarray:
        lo, hi, shape, _ = self._cell_grid()
        axes = [np.linspace(lo[a] + 0.5 * (hi[a] - lo[a]) / samples_per_axis,
                            hi[a] - 0.5 * (hi[a] - lo[a]) / samples_per_axis,
                            samples_per_axis) for a in range(self.codim)]
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        inside = self.contains(pts)
        idx = self.cell_index(pts)
        masses = np.bincount(idx[inside], minlength=int(np.prod(shape)))
        return masses / masses.sum()


class BoxWindow(Window):
    def __init__(self, lo, hi):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if self.lo.shape != self.hi.shape or np.any(self.hi <= self.lo):
            raise ValueError("box window needs lo < hi componentwise")
        self.codim = self.lo.shape[0]
        self.measure = float(np.prod(self.hi - self.lo))

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lo) & (pts < self.hi), axis=1)

    def bounding_box(self):
        return self.lo.copy(), self.hi.copy()


class BallWindow(Window):
    def __init__(self, center, radius: float):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        if radius <= 0:
            raise ValueError("ball window radius must be positive")
        self.radius = float(radius)
        self.codim = self.center.shape[0]
        if self.codim == 1:
            self.measure = 2.0 * radius
        elif self.codim == 2:
            self.measure = float(np.pi * radius ** 2)
        else:
            raise ValueError("ball windows supported in internal dimension <= 2")

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        rel = pts - self.center
        return np.einsum("ij,ij->i", rel, rel) < self.radius ** 2

    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius


class ConvexPolygonWindow(Window):
    """Convex polygon in a 2-d internal space, vertices in hull order."""

    codim = 2

    def __init__(self, vertices):
        vertices = np.asarray(vertices, dtype=float)
        hull = ConvexHull(vertices)
        self.vertices = vertices[hull.vertices]
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        self.measure = float(abs(
            np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)) / 2.0)
        rolled = np.roll(self.vertices, -1, axis=0)
        edges = rolled - self.vertices
        # inward normals for a counterclockwise hull
        self.normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
        self.offsets_ = np.einsum("ij,ij->i", self.normals, self.vertices)

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        return np.all(pts @ self.normals.T >= self.offsets_ - 1e-12, axis=1)

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


class CutProjectConfiguration(ScattererConfiguration):
    """Cut-and-project set: project lattice points whose internal part
    falls in the window onto physical space.

    The ambient lattice is Z^n basis with n = dim + window.codim; the first
    dim columns of the basis are the physical embedding, the rest the
    internal one. Density is window measure over lattice covolume, which
    requires the internal projection to be equidistributed; the constructor
    runs an injectivity spot check and leaves equidistribution to the density
    tests.
    """

    mark_kind = "internal"

    def __init__(self, basis, window: Window, dim: int):
        self.dim = check_dimension(dim)
        self.window = window
        n = dim + window.codim
        basis = np.asarray(basis, dtype=float)
        if basis.shape != (n, n):
            raise ValueError(f"ambient basis must be {n}x{n}")
        det = abs(np.linalg.det(basis))
        if det < 1e-12:
            raise ValueError("ambient basis is singular")
        self.basis = basis
        self.basis_inverse = np.linalg.inv(basis)
        self.covolume = det
        self.codim = window.codim
        self.mark_dim = window.codim
        self.density = window.measure / det
        self._scan_cap = 200_000
        self._injectivity_check()

    def _injectivity_check(self, radius: float = 12.0):
        pos, _ = self.points_in_ball(np.zeros(self.dim), radius)
        if pos.shape[0] < 2:
            return
        tree = cKDTree(pos)
        dist, _ = tree.query(pos, k=2)
        if dist[:, 1].min() < 1e-8:
            raise ValueError("projection to physical space is not injective "
                             "(two selected lattice points coincide)")

    def _integer_candidates(self, lo, hi):
        """Integer rows n with n @ basis in box x window bounding box.

        The scan subdivides the physical box whenever the integer bounding
        box would be too large; at desk scale this only triggers for long
        boxes, where the rotation of the ambient basis would otherwise
        inflate a flat scan beyond reach.
        """
        wlo, whi = self.window.bounding_box()
        stack = [(np.asarray(lo, float), np.asarray(hi, float))]
        found = []
        while stack:
            blo, bhi = stack.pop()
            full_lo = np.concatenate([blo, wlo - 1e-9])
            full_hi = np.concatenate([bhi, whi + 1e-9])
            corners = _box_corners(full_lo, full_hi) @ self.basis_inverse
            n_lo = np.floor(corners.min(axis=0)).astype(np.int64)
            n_hi = np.ceil(corners.max(axis=0)).astype(np.int64)
            size = np.prod((n_hi - n_lo + 1).astype(float))
            if size > self._scan_cap and np.max(bhi - blo) > 1e-3:
                axis = int(np.argmax(bhi - blo))
                mid = 0.5 * (blo[axis] + bhi[axis])
                left_hi = bhi.copy()
                left_hi[axis] = mid
                right_lo = blo.copy()
                right_lo[axis] = mid
                stack.append((blo, left_hi))
                stack.append((right_lo, bhi))
                continue
            ranges = [np.arange(a, b + 1) for a, b in zip(n_lo, n_hi)]
            grids = np.meshgrid(*ranges, indexing="ij")
            ns = np.stack([g.ravel() for g in grids], axis=1).astype(float)
            pts = ns @ self.basis
            phys, internal = pts[:, :self.dim], pts[:, self.dim:]
            keep = (np.all((phys >= blo) & (phys < bhi), axis=1)
                    & self.window.contains(internal))
            if np.any(keep):
                found.append((phys[keep], internal[keep]))
        if not found:
            return (np.empty((0, self.dim)), np.empty((0, self.codim)))
        return (np.concatenate([f[0] for f in found]),
                np.concatenate([f[1] for f in found]))

    def _points_in_box(self, lo, hi):
        return self._integer_candidates(lo, hi)


# ---------------------------------------------------------------------------
# ready-made instances and the factory


def square_lattice(dim: int) -> PeriodicConfiguration:
    return PeriodicConfiguration(np.eye(dim), 1.0, dim)


def honeycomb() -> PeriodicConfiguration:
    basis = np.array([[1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]])
    return PeriodicConfiguration(basis, np.sqrt(3.0) / 2.0, 2,
                                 offsets=[[0.0, 0.0], [1.0 / 3.0, 1.0 / 3.0]])


def ammann_beenker() -> CutProjectConfiguration:
    """Eightfold quasicrystal vertices from the standard 4-d star map."""
    k = np.arange(4)
    basis = np.stack([np.cos(k * np.pi / 4), np.sin(k * np.pi / 4),
                      np.cos(3 * k * np.pi / 4), np.sin(3 * k * np.pi / 4)],
                     axis=1)
    internal = basis[:, 2:]
    corners = _box_corners(-0.5 * np.ones(4), 0.5 * np.ones(4)) @ internal
    window = ConvexPolygonWindow(corners)
    return CutProjectConfiguration(basis, window, 2)


def cut_project_toy(window_area: float = 0.3) -> CutProjectConfiguration:
    """Unimodular shear of Z^4 with dense internal image and a square window.

    The physical points form a density window_area subset of Z^2; the window
    must fit inside a unit box for the projection to stay injective.
    """
    if not 0.0 < window_area < 1.0:
        raise ValueError("toy window area must lie in (0, 1)")
    basis = np.array([
        [1.0, 0.0, np.sqrt(2.0), np.sqrt(5.0)],
        [0.0, 1.0, np.sqrt(3.0), np.sqrt(7.0)],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    side = np.sqrt(window_area)
    lo = np.array([0.11, 0.23])
    window = BoxWindow(lo, lo + side)
    return CutProjectConfiguration(basis, window, 2)


_PRESETS = {
    "square_lattice": lambda dim, params: square_lattice(dim),
    "honeycomb": lambda dim, params: honeycomb(),
    "ammann_beenker": lambda dim, params: ammann_beenker(),
    "cut_project_toy": lambda dim, params: cut_project_toy(
        float(params.pop("window_area", 0.3))),
}


def _build_window(spec: dict) -> Window:
    spec = dict(spec)
    shape = spec.pop("shape")
    if shape == "box":
        return BoxWindow(spec.pop("lo"), spec.pop("hi"))
    if shape == "ball":
        return BallWindow(spec.pop("center"), float(spec.pop("radius")))
    if shape == "polygon":
        return ConvexPolygonWindow(spec.pop("vertices"))
    raise ValueError(f"unknown window shape {shape!r}")


def build_configuration(family: str, dim: int, **params) -> ScattererConfiguration:
    """Construct a configuration from plain data (CLI and tests entry point)."""
    if family in _PRESETS:
        cfg = _PRESETS[family](dim, params)
        if params:
            raise ValueError(f"unused parameters for {family}: {sorted(params)}")
        if cfg.dim != dim:
            raise ValueError(f"{family} is only available in dimension {cfg.dim}")
        return cfg
    if family == "poisson":
        cfg = PoissonConfiguration(float(params.pop("intensity")),
                                   int(params.pop("seed")), dim)
    elif family == "lattice":
        cfg = PeriodicConfiguration(params.pop("basis"),
                                    float(params.pop("covolume")), dim)
    elif family == "periodic_union":
        cfg = PeriodicConfiguration(params.pop("basis"),
                                    float(params.pop("covolume")), dim,
                                    offsets=params.pop("offsets"))
    elif family == "cut_and_project":
        window = params.pop("window")
        if isinstance(window, dict):
            window = _build_window(window)
        cfg = CutProjectConfiguration(params.pop("basis"), window, dim)
    else:
        raise ValueError(f"unknown configuration family {family!r}")
    if params:
        raise ValueError(f"unused parameters for {family}: {sorted(params)}")
    return cfg
