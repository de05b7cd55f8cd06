"""Finite-radius trajectory generation.

A point particle moves at unit speed among balls of radius rho centered on
a scatterer configuration. Between collisions the motion is an exact
straight line; at a collision the scattering map supplies the outgoing
direction and exit offset, and soft scatterers contribute their interior
transit time rho * T(w) without the interior path ever being integrated.
Flight times tau are recorded in microscopic units together with their
rescaled values xi = rho^(d-1) * tau.

Two execution routes produce identical event streams: a generic one built
on ``ray_tube_query`` that works for every configuration and map, and
compiled steppers for the hard-sphere dynamics on Poisson and periodic
configurations, which the batch driver selects automatically.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import (
    ScaleParams,
    as_vector,
    embed_perp,
    mean_free_path,
    rotation_to_e1,
    rotation_to_e1_batch,
    unit_vector,
)
from .pointsets import (
    _NO_CELL,
    MarkedPoint,
    PeriodicConfiguration,
    PoissonConfiguration,
    cell_state,
    cell_uniform,
)
from .scattering import HardSphereMap

_GRAZE_TOL = 1e-9        # impact parameters above 1 - tol are passed through
_ENTRY_TOL = 1e-12
_TIE_TOL = 1e-12
_HORIZON_FACTOR = 50.0   # default per-leg horizon in units of the free path

_TERM_COMPLETED = 0
_TERM_NO_HIT = 1
_TERM_TRAPPED = 2
_TERM_NON_SEPARATED = 3


# ---------------------------------------------------------------------------
# event and outcome records


@dataclass(frozen=True)
class CollisionEvent:
    """One collision: flight data in, exit data out.

    ``flight_time`` is the microscopic time since the previous exit (or the
    start), including the interior transit for soft scatterers; ``xi`` is
    its rescaled value rho^(d-1) * flight_time. ``impact_param`` and
    ``exit_param`` are the perpendicular offsets in the frames of ``v_in``
    and ``v_out``, both of norm below one.
    """

    flight_time: float
    xi: float
    center: MarkedPoint
    impact_param: np.ndarray
    exit_param: np.ndarray
    v_in: np.ndarray
    v_out: np.ndarray


@dataclass(frozen=True)
class NoHit:
    """The ray met no scatterer within the search horizon."""


@dataclass(frozen=True)
class NoHitWithinHorizon:
    pass


@dataclass(frozen=True)
class Trapped:
    """The starting point lies inside a scatterer."""


@dataclass(frozen=True)
class NonSeparatedScatterer:
    """The hit scatterer overlaps a neighbor, so exit chaining is unsound."""

    center: MarkedPoint | None = None


@dataclass(frozen=True)
class Completed:
    count: int


Termination = Completed | NoHitWithinHorizon | Trapped | NonSeparatedScatterer


@dataclass(frozen=True)
class TrajectoryOutcome:
    events: tuple[CollisionEvent, ...]
    termination: Termination


# ---------------------------------------------------------------------------
# initial conditions


@dataclass(frozen=True)
class Macroscopic:
    """Start at macroscopic position q (microscopic rho^(1-d) q) moving in v."""

    q: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class FromScattererExit:
    """Start on the boundary of a scatterer in outgoing position.

    The start point is center + rho * b where b is the boundary point with
    exit offset ``w_prime`` relative to the outgoing direction ``v``.
    """

    center: MarkedPoint
    w_prime: np.ndarray
    v: np.ndarray


InitialCondition = Macroscopic | FromScattererExit


@dataclass(frozen=True)
class UniformCubeLaw:
    """Uniform position on [0, side]^dim, uniform direction."""

    side: float
    dim: int


@dataclass(frozen=True)
class PointMassLaw:
    """Fixed macroscopic position, uniform direction."""

    position: np.ndarray


def trajectory_stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for one trajectory, derived from (seed, index)."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((int(seed), int(index)))))


def sample_macroscopic_initial(rng, law) -> Macroscopic:
    """One independent draw from the given initial law.

    The position is drawn first, then the direction, so equal generator
    states give identical results.
    """
    if isinstance(law, UniformCubeLaw):
        if law.side <= 0.0:
            raise ValueError("cube side must be positive")
        q = rng.uniform(0.0, law.side, law.dim)
    elif isinstance(law, PointMassLaw):
        q = as_vector(law.position).copy()
    else:
        raise ValueError(f"unknown initial law: {law!r}")
    while True:
        v = rng.standard_normal(q.shape[0])
        n = float(np.linalg.norm(v))
        if n > 1e-9:
            return Macroscopic(q, v / n)


def initial_conditions(law, count: int, seed: int) -> list[Macroscopic]:
    """Draws for trajectories 0..count-1, one stream per index."""
    if count < 1:
        raise ValueError("count must be at least 1")
    return [sample_macroscopic_initial(trajectory_stream(seed, i), law)
            for i in range(count)]


def default_horizon(cfg, rho: float) -> float:
    """Microscopic per-leg search cutoff: 50 free paths."""
    return _HORIZON_FACTOR * mean_free_path(cfg.density, cfg.dim) \
        * rho ** (1 - cfg.dim)


# ---------------------------------------------------------------------------
# generic route


def _exit_point(w_prime, v_out) -> np.ndarray:
    """Boundary point (unit sphere) with exit offset w_prime around v_out."""
    w_prime = np.asarray(w_prime, dtype=float)
    cw = np.sqrt(max(1.0 - float(w_prime @ w_prime), 0.0))
    return embed_perp(w_prime, cw) @ rotation_to_e1(v_out).T


def _overlapping_neighbor(cfg, center, rho: float) -> bool:
    pos, _ = cfg.points_in_ball(center, 2.0 * rho)
    d_sq = np.einsum("ij,ij->i", pos - center, pos - center)
    return bool(np.any((d_sq > 1e-24) & (d_sq < 4.0 * rho * rho)))


def first_collision(cfg, smap, rho, q, v, horizon=None):
    """Earliest scatterer entry along q + t v.

    Returns a CollisionEvent, NoHit if the horizon is exhausted, or
    NonSeparatedScatterer if the hit ball overlaps a neighbor. Near-tangent
    candidates (impact parameter within 1e-9 of one) are passed through.
    The search widens geometrically so short flights never pay for the full
    horizon.
    """
    scale = ScaleParams(rho, cfg.dim)
    if smap.dim != cfg.dim:
        raise ValueError("scattering map dimension does not match configuration")
    q = as_vector(q, cfg.dim)
    v = unit_vector(as_vector(v, cfg.dim))
    if horizon is None:
        horizon = default_horizon(cfg, rho)
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    window = min(horizon, 4.0 * mean_free_path(cfg.density, cfg.dim)
                 * scale.length_factor)
    while True:
        for cand in cfg.ray_tube_query(q, v, rho, window):
            w_norm = float(np.linalg.norm(cand.impact_offset)) / rho
            if w_norm > 1.0 - _GRAZE_TOL:
                continue
            return _build_event(cfg, smap, scale, q, v, cand)
        if window >= horizon:
            return NoHit()
        window = min(4.0 * window, horizon)


def _build_event(cfg, smap, scale, q, v, cand):
    rho = scale.rho
    center = cand.position
    if _overlapping_neighbor(cfg, center, rho):
        return NonSeparatedScatterer(MarkedPoint(center, cand.mark))
    u1 = (q + cand.entry_time * v - center) / rho
    u1 = u1 / np.linalg.norm(u1)
    w_vec = (u1 @ rotation_to_e1(v))[1:]
    v_out, w_exit = smap.exit_data(v, w_vec)
    if isinstance(smap, HardSphereMap):
        # angle of incidence equals angle of reflection; the tolerance
        # opens up with the conditioning of the normal computation (the
        # numerator of u1 rounds at eps times the coordinate magnitude,
        # then gets divided by rho), of the entry-time cancellation on
        # long flights, and of the grazing geometry (small cw), which is
        # what limits how well two independent computations of the normal
        # and of the rotated velocity can agree
        w_norm_sq = float(w_vec @ w_vec)
        cw = np.sqrt(max(1.0 - w_norm_sq, 0.0))
        pos_scale = 1.0 + float(np.max(np.abs(q))) + cand.entry_time
        cond = 2.3e-16 * (pos_scale / rho
                          + (cand.entry_time / rho) ** 2 / max(cw, 1e-9))
        if abs(float(v @ u1) + float(v_out @ u1)) > 1e-12 + 100.0 * cond:
            raise RuntimeError("specular reflection defect at a collision")
    tau = cand.entry_time + rho * float(
        smap.interior_time(float(np.linalg.norm(w_vec))))
    return CollisionEvent(
        flight_time=tau,
        xi=scale.path_to_xi(tau),
        center=MarkedPoint(center, cand.mark),
        impact_param=w_vec,
        exit_param=w_exit,
        v_in=v,
        v_out=v_out,
    )


def run_trajectory(cfg, smap, rho, init, n_collisions, horizon_per_leg=None):
    """Chain collisions from an initial condition.

    Macroscopic starts are converted to microscopic coordinates first and
    checked for being buried inside a scatterer. Early terminations keep
    the events found so far.
    """
    scale = ScaleParams(rho, cfg.dim)
    if n_collisions < 1:
        raise ValueError("n_collisions must be at least 1")
    if isinstance(init, Macroscopic):
        q = scale.to_microscopic(init.q)
        v = unit_vector(as_vector(init.v, cfg.dim))
        if cfg.covered(q, rho):
            return TrajectoryOutcome((), Trapped())
    elif isinstance(init, FromScattererExit):
        w_prime = as_vector(init.w_prime, cfg.dim - 1)
        if float(np.linalg.norm(w_prime)) >= 1.0:
            raise ValueError("exit offset must lie in the open unit ball")
        v = unit_vector(as_vector(init.v, cfg.dim))
        q = as_vector(init.center.position, cfg.dim) \
            + rho * _exit_point(w_prime, v)
    else:
        raise ValueError(f"unknown initial condition: {init!r}")

    events: list[CollisionEvent] = []
    for _ in range(n_collisions):
        res = first_collision(cfg, smap, rho, q, v, horizon_per_leg)
        if isinstance(res, NoHit):
            return TrajectoryOutcome(tuple(events), NoHitWithinHorizon())
        if isinstance(res, NonSeparatedScatterer):
            return TrajectoryOutcome(tuple(events), res)
        events.append(res)
        q = res.center.position + rho * _exit_point(res.exit_param, res.v_out)
        v = res.v_out
    return TrajectoryOutcome(tuple(events), Completed(len(events)))


# ---------------------------------------------------------------------------
# compiled steppers (hard spheres on Poisson / periodic configurations)
#
# All vectors are padded to three components with zero third coordinate in
# dimension two, so a single compiled signature serves both dimensions.
#
# The cell walk visits exactly the grid cells the ray pierces, in order.
# A candidate center lies within rho of the ray, so its perpendicular foot
# sits in some pierced cell and each of its coordinates is within rho of
# the foot's. Scanning, for every pierced cell, the neighbors on any side
# where the ray's fractional coordinate comes within `band` of the cell
# boundary during the cell's parameter span (including the diagonal
# combinations of such sides) therefore covers every candidate, while for
# small rho almost all steps scan a single new cell. The two cells the
# walk itself enters next and came from are excluded from the side scans.


@njit(cache=True, nogil=True, inline="always")
def _count_from_cdf(state, cdf):
    u = cell_uniform(state, np.uint64(0))
    n = 0
    while n < cdf.shape[0] and u >= cdf[n]:
        n += 1
    return n


@njit(cache=True, nogil=True, inline="always")
def _lex_less(ax, ay, az, bx, by, bz):
    if ax != bx:
        return ax < bx
    if ay != by:
        return ay < by
    return az < bz


@njit(cache=True, nogil=True, inline="always")
def _scan_cell_poisson(seed, cdf, dim, cx, cy, cz, qx, qy, qz, vx, vy, vz,
                       rho_sq, graze_sq, horizon, best, bx, by, bz):
    c2 = cz if dim == 3 else _NO_CELL
    state = cell_state(seed, cx, cy, c2)
    n = _count_from_cdf(state, cdf)
    for i in range(n):
        px = cx + cell_uniform(state, np.uint64(i * dim + 1))
        py = cy + cell_uniform(state, np.uint64(i * dim + 2))
        pz = cz + cell_uniform(state, np.uint64(i * dim + 3)) \
            if dim == 3 else 0.0
        rx = px - qx
        ry = py - qy
        rz = pz - qz
        tm = rx * vx + ry * vy + rz * vz
        if tm <= 0.0:
            continue
        miss_sq = rx * rx + ry * ry + rz * rz - tm * tm
        if miss_sq >= graze_sq:
            continue
        entry = tm - np.sqrt(rho_sq - miss_sq)
        if entry <= _ENTRY_TOL or entry > horizon:
            continue
        if entry < best - _TIE_TOL:
            best = entry
            bx, by, bz = px, py, pz
        elif entry <= best + _TIE_TOL:
            if _lex_less(px, py, pz, bx, by, bz):
                bx, by, bz = px, py, pz
            if entry < best:
                best = entry
    return best, bx, by, bz


@njit(cache=True, nogil=True)
def _poisson_run(seed, cdf, dim, rho, horizon, n_legs, check_covered,
                 q0, v0, tau_out, center_out, u1_out, vin_out, vout_out):
    q = q0.copy()
    v = v0.copy()
    rho_sq = rho * rho
    graze_sq = rho_sq * (1.0 - _GRAZE_TOL) ** 2
    sep_sq = 4.0 * rho_sq
    band = rho + 1e-9
    zlo = -1 if dim == 3 else 0
    zhi = 1 if dim == 3 else 0

    if check_covered:
        bx0 = np.int64(np.floor(q[0]))
        by0 = np.int64(np.floor(q[1]))
        bz0 = np.int64(np.floor(q[2]))
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(zlo, zhi + 1):
                    cx = bx0 + dx
                    cy = by0 + dy
                    cz = bz0 + dz
                    c2 = cz if dim == 3 else _NO_CELL
                    state = cell_state(seed, cx, cy, c2)
                    n = _count_from_cdf(state, cdf)
                    for i in range(n):
                        px = cx + cell_uniform(state, np.uint64(i * dim + 1))
                        py = cy + cell_uniform(state, np.uint64(i * dim + 2))
                        pz = cz + cell_uniform(state,
                                               np.uint64(i * dim + 3)) \
                            if dim == 3 else 0.0
                        rx = px - q[0]
                        ry = py - q[1]
                        rz = pz - q[2]
                        if rx * rx + ry * ry + rz * rz < rho_sq:
                            return 0, _TERM_TRAPPED

    for leg in range(n_legs):
        best = np.inf
        bx = by = bz = 0.0
        cellx = np.int64(np.floor(q[0]))
        celly = np.int64(np.floor(q[1]))
        cellz = np.int64(np.floor(q[2]))
        stepx = np.int64(1) if v[0] > 0.0 else np.int64(-1)
        stepy = np.int64(1) if v[1] > 0.0 else np.int64(-1)
        stepz = np.int64(1) if v[2] > 0.0 else np.int64(-1)
        tmaxx = ((cellx + (1 if v[0] > 0.0 else 0)) - q[0]) / v[0] \
            if v[0] != 0.0 else np.inf
        tmaxy = ((celly + (1 if v[1] > 0.0 else 0)) - q[1]) / v[1] \
            if v[1] != 0.0 else np.inf
        tmaxz = ((cellz + (1 if v[2] > 0.0 else 0)) - q[2]) / v[2] \
            if v[2] != 0.0 else np.inf
        tdx = abs(1.0 / v[0]) if v[0] != 0.0 else np.inf
        tdy = abs(1.0 / v[1]) if v[1] != 0.0 else np.inf
        tdz = abs(1.0 / v[2]) if v[2] != 0.0 else np.inf
        cap = horizon + 2.0 * rho + 1e-9
        t_in = 0.0
        prev_axis = -1
        prev_sign = np.int64(0)

        best, bx, by, bz = _scan_cell_poisson(
            seed, cdf, dim, cellx, celly, cellz,
            q[0], q[1], q[2], v[0], v[1], v[2],
            rho_sq, graze_sq, horizon, best, bx, by, bz)
        while True:
            if tmaxx <= tmaxy and tmaxx <= tmaxz:
                axis = 0
                t_out = tmaxx
            elif tmaxy <= tmaxz:
                axis = 1
                t_out = tmaxy
            else:
                axis = 2
                t_out = tmaxz
            stop = cap if best == np.inf \
                else min(cap, best + 2.0 * rho + 1e-9)
            advance = t_out <= stop

            f0 = q[0] + t_in * v[0] - cellx
            f1 = q[0] + t_out * v[0] - cellx
            mx = min(f0, f1) < band
            px = max(f0, f1) > 1.0 - band
            f0 = q[1] + t_in * v[1] - celly
            f1 = q[1] + t_out * v[1] - celly
            my = min(f0, f1) < band
            py = max(f0, f1) > 1.0 - band
            if dim == 3:
                f0 = q[2] + t_in * v[2] - cellz
                f1 = q[2] + t_out * v[2] - cellz
                mz = min(f0, f1) < band
                pz = max(f0, f1) > 1.0 - band
            else:
                mz = False
                pz = False

            for sx in range(-1, 2):
                if (sx < 0 and not mx) or (sx > 0 and not px):
                    continue
                for sy in range(-1, 2):
                    if (sy < 0 and not my) or (sy > 0 and not py):
                        continue
                    for sz in range(zlo, zhi + 1):
                        if (sz < 0 and not mz) or (sz > 0 and not pz):
                            continue
                        if sx == 0 and sy == 0 and sz == 0:
                            continue
                        if sy == 0 and sz == 0:
                            if prev_axis == 0 and sx == -prev_sign:
                                continue
                            if advance and axis == 0 and sx == stepx:
                                continue
                        if sx == 0 and sz == 0:
                            if prev_axis == 1 and sy == -prev_sign:
                                continue
                            if advance and axis == 1 and sy == stepy:
                                continue
                        if sx == 0 and sy == 0:
                            if prev_axis == 2 and sz == -prev_sign:
                                continue
                            if advance and axis == 2 and sz == stepz:
                                continue
                        best, bx, by, bz = _scan_cell_poisson(
                            seed, cdf, dim,
                            cellx + sx, celly + sy, cellz + sz,
                            q[0], q[1], q[2], v[0], v[1], v[2],
                            rho_sq, graze_sq, horizon, best, bx, by, bz)
            if not advance:
                break
            t_in = t_out
            prev_axis = axis
            if axis == 0:
                cellx += stepx
                tmaxx += tdx
                prev_sign = stepx
            elif axis == 1:
                celly += stepy
                tmaxy += tdy
                prev_sign = stepy
            else:
                cellz += stepz
                tmaxz += tdz
                prev_sign = stepz
            best, bx, by, bz = _scan_cell_poisson(
                seed, cdf, dim, cellx, celly, cellz,
                q[0], q[1], q[2], v[0], v[1], v[2],
                rho_sq, graze_sq, horizon, best, bx, by, bz)
        if best == np.inf:
            return leg, _TERM_NO_HIT

        hx = np.int64(np.floor(bx))
        hy = np.int64(np.floor(by))
        hz = np.int64(np.floor(bz))
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(zlo, zhi + 1):
                    cx = hx + dx
                    cy = hy + dy
                    cz = hz + dz
                    c2 = cz if dim == 3 else _NO_CELL
                    state = cell_state(seed, cx, cy, c2)
                    n = _count_from_cdf(state, cdf)
                    for i in range(n):
                        px = cx + cell_uniform(state, np.uint64(i * dim + 1))
                        py = cy + cell_uniform(state, np.uint64(i * dim + 2))
                        pz = cz + cell_uniform(state,
                                               np.uint64(i * dim + 3)) \
                            if dim == 3 else 0.0
                        rx = px - bx
                        ry = py - by
                        rz = pz - bz
                        d_sq = rx * rx + ry * ry + rz * rz
                        if 1e-24 < d_sq < sep_sq:
                            return leg, _TERM_NON_SEPARATED

        u1x = (q[0] + best * v[0] - bx) / rho
        u1y = (q[1] + best * v[1] - by) / rho
        u1z = (q[2] + best * v[2] - bz) / rho
        norm = np.sqrt(u1x * u1x + u1y * u1y + u1z * u1z)
        u1x /= norm
        u1y /= norm
        u1z /= norm
        dot = v[0] * u1x + v[1] * u1y + v[2] * u1z
        wx = v[0] - 2.0 * dot * u1x
        wy = v[1] - 2.0 * dot * u1y
        wz = v[2] - 2.0 * dot * u1z
        wn = np.sqrt(wx * wx + wy * wy + wz * wz)
        tau_out[leg] = best
        center_out[leg, 0] = bx
        center_out[leg, 1] = by
        center_out[leg, 2] = bz
        u1_out[leg, 0] = u1x
        u1_out[leg, 1] = u1y
        u1_out[leg, 2] = u1z
        vin_out[leg, 0] = v[0]
        vin_out[leg, 1] = v[1]
        vin_out[leg, 2] = v[2]
        vout_out[leg, 0] = wx / wn
        vout_out[leg, 1] = wy / wn
        vout_out[leg, 2] = wz / wn
        q[0] = bx + rho * u1x
        q[1] = by + rho * u1y
        q[2] = bz + rho * u1z
        v[0] = vout_out[leg, 0]
        v[1] = vout_out[leg, 1]
        v[2] = vout_out[leg, 2]
    return n_legs, _TERM_COMPLETED


@njit(cache=True, nogil=True)
def _poisson_batch(seed, cdf, dim, rho, horizon, n_legs, i0, i1,
                   q0, v0, flags, tau_out, center_out, u1_out,
                   vin_out, vout_out, n_ev, term):
    for i in range(i0, i1):
        n, t = _poisson_run(seed, cdf, dim, rho, horizon, n_legs, flags[i],
                            q0[i], v0[i], tau_out[i], center_out[i],
                            u1_out[i], vin_out[i], vout_out[i])
        n_ev[i] = n
        term[i] = t


@njit(cache=True, nogil=True, inline="always")
def _scan_cell_lattice(mat, offs, dim, cx, cy, cz, qx, qy, qz, vx, vy, vz,
                       rho_sq, graze_sq, horizon, best, bx, by, bz, bcomp):
    for k in range(offs.shape[0]):
        px = cx * mat[0, 0] + cy * mat[1, 0] + cz * mat[2, 0] + offs[k, 0]
        py = cx * mat[0, 1] + cy * mat[1, 1] + cz * mat[2, 1] + offs[k, 1]
        pz = cx * mat[0, 2] + cy * mat[1, 2] + cz * mat[2, 2] + offs[k, 2]
        rx = px - qx
        ry = py - qy
        rz = pz - qz
        tm = rx * vx + ry * vy + rz * vz
        if tm <= 0.0:
            continue
        miss_sq = rx * rx + ry * ry + rz * rz - tm * tm
        if miss_sq >= graze_sq:
            continue
        entry = tm - np.sqrt(rho_sq - miss_sq)
        if entry <= _ENTRY_TOL or entry > horizon:
            continue
        if entry < best - _TIE_TOL:
            best = entry
            bx, by, bz = px, py, pz
            bcomp = k
        elif entry <= best + _TIE_TOL:
            if _lex_less(px, py, pz, bx, by, bz):
                bx, by, bz = px, py, pz
                bcomp = k
            if entry < best:
                best = entry
    return best, bx, by, bz, bcomp


@njit(cache=True, nogil=True)
def _lattice_run(mat, inv, offs, band, dim, rho, horizon, n_legs,
                 check_covered, non_separated, q0, v0, tau_out, center_out,
                 u1_out, vin_out, vout_out, comp_out):
    q = q0.copy()
    v = v0.copy()
    rho_sq = rho * rho
    graze_sq = rho_sq * (1.0 - _GRAZE_TOL) ** 2
    zlo = -1 if dim == 3 else 0
    zhi = 1 if dim == 3 else 0

    if check_covered:
        fx = q[0] * inv[0, 0] + q[1] * inv[1, 0] + q[2] * inv[2, 0]
        fy = q[0] * inv[0, 1] + q[1] * inv[1, 1] + q[2] * inv[2, 1]
        fz = q[0] * inv[0, 2] + q[1] * inv[1, 2] + q[2] * inv[2, 2]
        bx0 = np.int64(np.floor(fx))
        by0 = np.int64(np.floor(fy))
        bz0 = np.int64(np.floor(fz))
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(zlo, zhi + 1):
                    cx = bx0 + dx
                    cy = by0 + dy
                    cz = bz0 + dz
                    for k in range(offs.shape[0]):
                        px = cx * mat[0, 0] + cy * mat[1, 0] \
                            + cz * mat[2, 0] + offs[k, 0]
                        py = cx * mat[0, 1] + cy * mat[1, 1] \
                            + cz * mat[2, 1] + offs[k, 1]
                        pz = cx * mat[0, 2] + cy * mat[1, 2] \
                            + cz * mat[2, 2] + offs[k, 2]
                        rx = px - q[0]
                        ry = py - q[1]
                        rz = pz - q[2]
                        if rx * rx + ry * ry + rz * rz < rho_sq:
                            return 0, _TERM_TRAPPED

    for leg in range(n_legs):
        best = np.inf
        bx = by = bz = 0.0
        bcomp = 0
        fx = q[0] * inv[0, 0] + q[1] * inv[1, 0] + q[2] * inv[2, 0]
        fy = q[0] * inv[0, 1] + q[1] * inv[1, 1] + q[2] * inv[2, 1]
        fz = q[0] * inv[0, 2] + q[1] * inv[1, 2] + q[2] * inv[2, 2]
        gx = v[0] * inv[0, 0] + v[1] * inv[1, 0] + v[2] * inv[2, 0]
        gy = v[0] * inv[0, 1] + v[1] * inv[1, 1] + v[2] * inv[2, 1]
        gz = v[0] * inv[0, 2] + v[1] * inv[1, 2] + v[2] * inv[2, 2]
        cellx = np.int64(np.floor(fx))
        celly = np.int64(np.floor(fy))
        cellz = np.int64(np.floor(fz))
        stepx = np.int64(1) if gx > 0.0 else np.int64(-1)
        stepy = np.int64(1) if gy > 0.0 else np.int64(-1)
        stepz = np.int64(1) if gz > 0.0 else np.int64(-1)
        tmaxx = ((cellx + (1 if gx > 0.0 else 0)) - fx) / gx \
            if gx != 0.0 else np.inf
        tmaxy = ((celly + (1 if gy > 0.0 else 0)) - fy) / gy \
            if gy != 0.0 else np.inf
        tmaxz = ((cellz + (1 if gz > 0.0 else 0)) - fz) / gz \
            if gz != 0.0 else np.inf
        tdx = abs(1.0 / gx) if gx != 0.0 else np.inf
        tdy = abs(1.0 / gy) if gy != 0.0 else np.inf
        tdz = abs(1.0 / gz) if gz != 0.0 else np.inf
        cap = horizon + 2.0 * rho + 1e-9
        t_in = 0.0
        prev_axis = -1
        prev_sign = np.int64(0)

        best, bx, by, bz, bcomp = _scan_cell_lattice(
            mat, offs, dim, cellx, celly, cellz,
            q[0], q[1], q[2], v[0], v[1], v[2],
            rho_sq, graze_sq, horizon, best, bx, by, bz, bcomp)
        while True:
            if tmaxx <= tmaxy and tmaxx <= tmaxz:
                axis = 0
                t_out = tmaxx
            elif tmaxy <= tmaxz:
                axis = 1
                t_out = tmaxy
            else:
                axis = 2
                t_out = tmaxz
            stop = cap if best == np.inf \
                else min(cap, best + 2.0 * rho + 1e-9)
            advance = t_out <= stop

            f0 = fx + t_in * gx - cellx
            f1 = fx + t_out * gx - cellx
            mx = min(f0, f1) < band[0]
            px = max(f0, f1) > 1.0 - band[0]
            f0 = fy + t_in * gy - celly
            f1 = fy + t_out * gy - celly
            my = min(f0, f1) < band[1]
            py = max(f0, f1) > 1.0 - band[1]
            if dim == 3:
                f0 = fz + t_in * gz - cellz
                f1 = fz + t_out * gz - cellz
                mz = min(f0, f1) < band[2]
                pz = max(f0, f1) > 1.0 - band[2]
            else:
                mz = False
                pz = False

            for sx in range(-1, 2):
                if (sx < 0 and not mx) or (sx > 0 and not px):
                    continue
                for sy in range(-1, 2):
                    if (sy < 0 and not my) or (sy > 0 and not py):
                        continue
                    for sz in range(zlo, zhi + 1):
                        if (sz < 0 and not mz) or (sz > 0 and not pz):
                            continue
                        if sx == 0 and sy == 0 and sz == 0:
                            continue
                        if sy == 0 and sz == 0:
                            if prev_axis == 0 and sx == -prev_sign:
                                continue
                            if advance and axis == 0 and sx == stepx:
                                continue
                        if sx == 0 and sz == 0:
                            if prev_axis == 1 and sy == -prev_sign:
                                continue
                            if advance and axis == 1 and sy == stepy:
                                continue
                        if sx == 0 and sy == 0:
                            if prev_axis == 2 and sz == -prev_sign:
                                continue
                            if advance and axis == 2 and sz == stepz:
                                continue
                        best, bx, by, bz, bcomp = _scan_cell_lattice(
                            mat, offs, dim,
                            cellx + sx, celly + sy, cellz + sz,
                            q[0], q[1], q[2], v[0], v[1], v[2],
                            rho_sq, graze_sq, horizon, best, bx, by, bz,
                            bcomp)
            if not advance:
                break
            t_in = t_out
            prev_axis = axis
            if axis == 0:
                cellx += stepx
                tmaxx += tdx
                prev_sign = stepx
            elif axis == 1:
                celly += stepy
                tmaxy += tdy
                prev_sign = stepy
            else:
                cellz += stepz
                tmaxz += tdz
                prev_sign = stepz
            best, bx, by, bz, bcomp = _scan_cell_lattice(
                mat, offs, dim, cellx, celly, cellz,
                q[0], q[1], q[2], v[0], v[1], v[2],
                rho_sq, graze_sq, horizon, best, bx, by, bz, bcomp)
        if best == np.inf:
            return leg, _TERM_NO_HIT
        if non_separated:
            return leg, _TERM_NON_SEPARATED

        u1x = (q[0] + best * v[0] - bx) / rho
        u1y = (q[1] + best * v[1] - by) / rho
        u1z = (q[2] + best * v[2] - bz) / rho
        norm = np.sqrt(u1x * u1x + u1y * u1y + u1z * u1z)
        u1x /= norm
        u1y /= norm
        u1z /= norm
        dot = v[0] * u1x + v[1] * u1y + v[2] * u1z
        wx = v[0] - 2.0 * dot * u1x
        wy = v[1] - 2.0 * dot * u1y
        wz = v[2] - 2.0 * dot * u1z
        wn = np.sqrt(wx * wx + wy * wy + wz * wz)
        tau_out[leg] = best
        center_out[leg, 0] = bx
        center_out[leg, 1] = by
        center_out[leg, 2] = bz
        u1_out[leg, 0] = u1x
        u1_out[leg, 1] = u1y
        u1_out[leg, 2] = u1z
        vin_out[leg, 0] = v[0]
        vin_out[leg, 1] = v[1]
        vin_out[leg, 2] = v[2]
        vout_out[leg, 0] = wx / wn
        vout_out[leg, 1] = wy / wn
        vout_out[leg, 2] = wz / wn
        comp_out[leg] = bcomp
        q[0] = bx + rho * u1x
        q[1] = by + rho * u1y
        q[2] = bz + rho * u1z
        v[0] = vout_out[leg, 0]
        v[1] = vout_out[leg, 1]
        v[2] = vout_out[leg, 2]
    return n_legs, _TERM_COMPLETED


@njit(cache=True, nogil=True)
def _lattice_batch(mat, inv, offs, band, dim, rho, horizon, n_legs,
                   non_separated, i0, i1, q0, v0, flags, tau_out, center_out,
                   u1_out, vin_out, vout_out, comp_out, n_ev, term):
    for i in range(i0, i1):
        n, t = _lattice_run(mat, inv, offs, band, dim, rho, horizon, n_legs,
                            flags[i], non_separated, q0[i], v0[i],
                            tau_out[i], center_out[i], u1_out[i],
                            vin_out[i], vout_out[i], comp_out[i])
        n_ev[i] = n
        term[i] = t


# ---------------------------------------------------------------------------
# batch driver


@dataclass(frozen=True)
class TrajectoryBatch:
    """Struct-of-arrays record of many trajectories.

    Unused legs are NaN (float arrays) or -1 (termination is a code from
    the _TERM_* family, one per trajectory). Impact and exit offsets are in
    the frames of v_in and v_out, matching CollisionEvent.
    """

    dim: int
    rho: float
    n_legs: int
    n_events: np.ndarray
    termination: np.ndarray
    flight_time: np.ndarray
    xi: np.ndarray
    impact_param: np.ndarray
    exit_param: np.ndarray
    v_in: np.ndarray
    v_out: np.ndarray
    center: np.ndarray
    mark: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        """Boolean (n, n_legs) mask of recorded events."""
        return np.arange(self.n_legs)[None, :] < self.n_events[:, None]

    def termination_of(self, i: int) -> Termination:
        code = int(self.termination[i])
        if code == _TERM_COMPLETED:
            return Completed(int(self.n_events[i]))
        if code == _TERM_NO_HIT:
            return NoHitWithinHorizon()
        if code == _TERM_TRAPPED:
            return Trapped()
        return NonSeparatedScatterer()


def _mark_row(mark) -> tuple:
    if hasattr(mark, "coords"):
        return tuple(mark.coords)
    if hasattr(mark, "index"):
        return (float(mark.index),)
    return ()


def _starts_from_inits(cfg, scale, inits):
    n = len(inits)
    d = cfg.dim
    q0 = np.zeros((n, d))
    v0 = np.zeros((n, d))
    flags = np.zeros(n, dtype=np.bool_)
    for i, init in enumerate(inits):
        if isinstance(init, Macroscopic):
            q0[i] = scale.to_microscopic(init.q)
            v0[i] = unit_vector(as_vector(init.v, d))
            flags[i] = True
        elif isinstance(init, FromScattererExit):
            w_prime = as_vector(init.w_prime, d - 1)
            if float(np.linalg.norm(w_prime)) >= 1.0:
                raise ValueError("exit offset must lie in the open unit ball")
            v0[i] = unit_vector(as_vector(init.v, d))
            q0[i] = as_vector(init.center.position, d) \
                + scale.rho * _exit_point(w_prime, v0[i])
        else:
            raise ValueError(f"unknown initial condition: {init!r}")
    return q0, v0, flags


def _chunk_ranges(n, workers):
    pieces = max(1, min(n, workers * 4))
    edges = np.linspace(0, n, pieces + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _fast_supported(cfg, smap, rho):
    if not isinstance(smap, HardSphereMap):
        return False
    if isinstance(cfg, PoissonConfiguration):
        return True
    if isinstance(cfg, PeriodicConfiguration):
        # the cell walk scans one ring of neighbors, which only covers the
        # tube if a ball of radius rho stays within one fractional cell
        return rho * float(np.linalg.norm(cfg.cell_inverse, 2)) < 0.9
    return False


def _pad3(arr):
    out = np.zeros((arr.shape[0], 3))
    out[:, :arr.shape[1]] = arr
    return out


def _pad3_matrix(m):
    d = m.shape[0]
    out = np.eye(3)
    out[:d, :d] = m
    return out


def run_batch(cfg, smap, rho, inits, n_collisions, horizon_per_leg=None,
              workers=1):
    """Run many independent trajectories and collect arrays.

    Results are a pure function of (cfg, smap, rho, inits, n_collisions,
    horizon) and do not depend on the worker count; workers only split the
    index range. Hard-sphere dynamics on Poisson and periodic
    configurations run in compiled code, everything else falls back to
    the per-trajectory route.
    """
    scale = ScaleParams(rho, cfg.dim)
    if smap.dim != cfg.dim:
        raise ValueError("scattering map dimension does not match configuration")
    if n_collisions < 1:
        raise ValueError("n_collisions must be at least 1")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    if horizon_per_leg is None:
        horizon_per_leg = default_horizon(cfg, rho)
    if horizon_per_leg <= 0.0:
        raise ValueError("horizon must be positive")

    n = len(inits)
    d = cfg.dim
    mark_dim = cfg.mark_dim
    q0, v0, flags = _starts_from_inits(cfg, scale, inits)

    if _fast_supported(cfg, smap, rho):
        return _run_batch_fast(cfg, scale, q0, v0, flags, n_collisions,
                               horizon_per_leg, workers)

    shape = (n, n_collisions)
    out = {
        "flight_time": np.full(shape, np.nan),
        "impact_param": np.full(shape + (d - 1,), np.nan),
        "exit_param": np.full(shape + (d - 1,), np.nan),
        "v_in": np.full(shape + (d,), np.nan),
        "v_out": np.full(shape + (d,), np.nan),
        "center": np.full(shape + (d,), np.nan),
        "mark": np.full(shape + (mark_dim,), np.nan),
    }
    n_events = np.zeros(n, dtype=np.int64)
    term = np.zeros(n, dtype=np.int64)

    def run_range(lo, hi):
        for i in range(lo, hi):
            outcome = run_trajectory(cfg, smap, rho, inits[i], n_collisions,
                                     horizon_per_leg)
            n_events[i] = len(outcome.events)
            term[i] = _termination_code(outcome.termination)
            for j, ev in enumerate(outcome.events):
                out["flight_time"][i, j] = ev.flight_time
                out["impact_param"][i, j] = ev.impact_param
                out["exit_param"][i, j] = ev.exit_param
                out["v_in"][i, j] = ev.v_in
                out["v_out"][i, j] = ev.v_out
                out["center"][i, j] = ev.center.position
                out["mark"][i, j] = _mark_row(ev.center.mark)

    ranges = _chunk_ranges(n, workers)
    if workers == 1 or len(ranges) == 1:
        for lo, hi in ranges:
            run_range(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda r: run_range(*r), ranges))

    return TrajectoryBatch(
        dim=d, rho=rho, n_legs=n_collisions, n_events=n_events,
        termination=term, xi=out["flight_time"] * scale.xi_factor, **out)


def _termination_code(termination) -> int:
    if isinstance(termination, Completed):
        return _TERM_COMPLETED
    if isinstance(termination, NoHitWithinHorizon):
        return _TERM_NO_HIT
    if isinstance(termination, Trapped):
        return _TERM_TRAPPED
    return _TERM_NON_SEPARATED


def _run_batch_fast(cfg, scale, q0, v0, flags, n_legs, horizon, workers):
    n = q0.shape[0]
    d = cfg.dim
    rho = scale.rho
    q0p = _pad3(q0)
    v0p = _pad3(v0)
    taus = np.full((n, n_legs), np.nan)
    centers = np.full((n, n_legs, 3), np.nan)
    u1s = np.full((n, n_legs, 3), np.nan)
    vins = np.full((n, n_legs, 3), np.nan)
    vouts = np.full((n, n_legs, 3), np.nan)
    comps = np.full((n, n_legs), -1, dtype=np.int64)
    n_events = np.zeros(n, dtype=np.int64)
    term = np.zeros(n, dtype=np.int64)

    if isinstance(cfg, PoissonConfiguration):
        seed = np.uint64(cfg.seed)
        cdf = cfg.count_cdf

        def run_range(lo, hi):
            _poisson_batch(seed, cdf, d, rho, horizon, n_legs, lo, hi,
                           q0p, v0p, flags, taus, centers, u1s, vins, vouts,
                           n_events, term)
    else:
        mat = _pad3_matrix(cfg.cell_matrix)
        inv = _pad3_matrix(cfg.cell_inverse)
        offs = _pad3(cfg.offsets @ cfg.cell_matrix)
        # a physical rho-ball maps to per-axis fractional widths given by
        # the column norms of the inverse cell matrix
        band = rho * np.sqrt((inv * inv).sum(axis=0)) + 1e-9
        non_separated = bool(cfg.global_min_gap < 2.0 * rho)

        def run_range(lo, hi):
            _lattice_batch(mat, inv, offs, band, d, rho, horizon, n_legs,
                           non_separated, lo, hi, q0p, v0p, flags, taus,
                           centers, u1s, vins, vouts, comps, n_events, term)

    ranges = _chunk_ranges(n, workers)
    if workers == 1 or len(ranges) == 1:
        for lo, hi in ranges:
            run_range(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda r: run_range(*r), ranges))

    mask = np.arange(n_legs)[None, :] < n_events[:, None]
    w = np.full((n, n_legs, d - 1), np.nan)
    w_prime = np.full((n, n_legs, d - 1), np.nan)
    if mask.any():
        u1m = u1s[mask][:, :d]
        vin_m = vins[mask][:, :d]
        vout_m = vouts[mask][:, :d]
        din = np.einsum("ni,ni->n", vin_m, u1m)
        dout = np.einsum("ni,ni->n", vout_m, u1m)
        if float(np.max(np.abs(din + dout))) > 1e-12:
            raise RuntimeError("specular reflection defect at a collision")
        w[mask] = np.einsum(
            "ni,nij->nj", u1m, rotation_to_e1_batch(vin_m))[:, 1:]
        w_prime[mask] = np.einsum(
            "ni,nij->nj", u1m, rotation_to_e1_batch(vout_m))[:, 1:]

    mark_dim = cfg.mark_dim
    mark = np.full((n, n_legs, mark_dim), np.nan)
    if mark_dim:
        mark[mask, 0] = comps[mask].astype(float)

    return TrajectoryBatch(
        dim=d, rho=rho, n_legs=n_legs, n_events=n_events, termination=term,
        flight_time=taus, xi=taus * scale.xi_factor, impact_param=w,
        exit_param=w_prime, v_in=vins[:, :, :d], v_out=vouts[:, :, :d],
        center=centers[:, :, :d], mark=mark)
