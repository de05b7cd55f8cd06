"""Transition kernels of the collision chain, estimated and analytic.

Between collisions the state of the chain lives on the chart
(xi, w, mark): the normalized free path length, the incoming impact
parameter in the open unit (d-1)-ball, and the mark of the scatterer
that was hit.  The reference measure on the (w, mark) part is

    mu = (volume / v_{d-1}) x (mark weights),

a probability measure; densities are always taken with respect to
d(xi) d(mu).  Two estimators are provided: `estimate_kg` bins the first
collision from macroscopic starts (the generic-start kernel), while
`estimate_k` bins consecutive collision pairs along long trajectories
(the scatterer-to-scatterer kernel, conditioned on the exit chart of
the previous collision).  For Poisson configurations both kernels are
exponential in xi and uniform in (w, mark); `analytic_poisson_k` exposes
the closed forms.

The remaining operations verify structural identities: time reversal
symmetry of the pair kernel, reconstruction of the generic kernel from
tail masses of the pair kernel, and the composition of either kernel
with the differential cross section into the collision kernels p / p0
on velocity space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    _TERM_NO_HIT,
    _TERM_NON_SEPARATED,
    _TERM_TRAPPED,
    UniformCubeLaw,
    run_batch,
    sample_macroscopic_initial,
    trajectory_stream,
)
from .geometry import mean_free_path, rotation_to_e1, unit_ball_volume

__all__ = [
    "ImpactBins",
    "MarkBins",
    "KernelGrid",
    "KernelHistogram",
    "ConditioningCell",
    "ConditionalKernelEstimate",
    "estimate_kg",
    "estimate_k",
    "PoissonKernel",
    "analytic_poisson_k",
    "analytic_pair_reference",
    "TimeReversalReport",
    "check_time_reversal",
    "FlightSpreadReport",
    "conditional_flight_spread",
    "KgReconstruction",
    "kg_from_k",
    "CollisionKernels",
    "build_collision_kernels",
]


# ---------------------------------------------------------------------------
# binning of the impact parameter and the marks


class ImpactBins:
    """Partition of the open unit ball of impact parameters.

    In dimension 2 the parameter is a signed scalar and the bins are
    uniform intervals on (-1, 1).  In dimension 3 the parameter lives in
    the unit disc, binned into uniform radial shells crossed with uniform
    angular sectors; the flat bin index is radial-major.  `measures`
    holds the probability mass of each bin under volume / v_{d-1}, and
    `flip()` gives the index permutation induced by w -> -w (dimension 2)
    or by reflecting the second coordinate (dimension 3).
    """

    def __init__(self, dim, n_signed=None, n_radial=None, n_angular=None):
        self.dim = int(dim)
        if self.dim == 2:
            if n_signed is None or n_signed < 2:
                raise ValueError("need at least two signed bins")
            self.n_signed = int(n_signed)
            self.n_bins = self.n_signed
            self.edges = np.linspace(-1.0, 1.0, self.n_signed + 1)
            self.measures = np.full(self.n_bins, 1.0 / self.n_bins)
        elif self.dim == 3:
            if not n_radial or not n_angular:
                raise ValueError("need radial and angular bin counts")
            self.n_radial = int(n_radial)
            self.n_angular = int(n_angular)
            self.n_bins = self.n_radial * self.n_angular
            self.radial_edges = np.linspace(0.0, 1.0, self.n_radial + 1)
            self.angular_edges = np.linspace(
                -np.pi, np.pi, self.n_angular + 1)
            shell = np.diff(self.radial_edges ** 2) / 2.0
            sector = np.full(self.n_angular, 2.0 * np.pi / self.n_angular)
            self.measures = np.outer(shell, sector).ravel() / np.pi
        else:
            raise ValueError("impact bins exist for dimensions 2 and 3")

    @staticmethod
    def default(dim):
        if dim == 2:
            return ImpactBins(2, n_signed=40)
        return ImpactBins(3, n_radial=10, n_angular=8)

    def index(self, w_rows):
        """Flat bin index for each row of impact parameters."""
        w_rows = np.atleast_2d(np.asarray(w_rows, dtype=float))
        if self.dim == 2:
            step = 2.0 / self.n_signed
            idx = np.floor((w_rows[:, 0] + 1.0) / step).astype(np.int64)
            return np.clip(idx, 0, self.n_bins - 1)
        r = np.hypot(w_rows[:, 0], w_rows[:, 1])
        phi = np.arctan2(w_rows[:, 1], w_rows[:, 0])
        ir = np.clip(np.floor(r * self.n_radial).astype(np.int64),
                     0, self.n_radial - 1)
        step = 2.0 * np.pi / self.n_angular
        ia = np.clip(np.floor((phi + np.pi) / step).astype(np.int64),
                     0, self.n_angular - 1)
        return ir * self.n_angular + ia

    def flip(self):
        if self.dim == 2:
            return np.arange(self.n_bins - 1, -1, -1)
        ir = np.arange(self.n_bins) // self.n_angular
        ia = np.arange(self.n_bins) % self.n_angular
        return ir * self.n_angular + (self.n_angular - 1 - ia)

    def coarsen(self, factor):
        """Merge adjacent signed (d=2) or angular (d=3) bins."""
        factor = int(factor)
        if factor == 1:
            return self, np.arange(self.n_bins)
        if self.dim == 2:
            if self.n_signed % factor:
                raise ValueError("factor must divide the bin count")
            coarse = ImpactBins(2, n_signed=self.n_signed // factor)
            group = np.arange(self.n_bins) // factor
        else:
            if self.n_angular % factor:
                raise ValueError("factor must divide the angular bin count")
            coarse = ImpactBins(3, n_radial=self.n_radial,
                                n_angular=self.n_angular // factor)
            ir = np.arange(self.n_bins) // self.n_angular
            ia = np.arange(self.n_bins) % self.n_angular
            group = ir * coarse.n_angular + ia // factor
        return coarse, group

    def to_dict(self):
        if self.dim == 2:
            return {"dim": 2, "signed": self.n_signed}
        return {"dim": 3, "radial": self.n_radial, "angular": self.n_angular}

    @staticmethod
    def from_dict(data):
        if data["dim"] == 2:
            return ImpactBins(2, n_signed=data["signed"])
        return ImpactBins(3, n_radial=data["radial"],
                          n_angular=data["angular"])


class MarkBins:
    """Discretization of the mark component of the chart.

    Trivial marks occupy a single bin of weight one.  Component marks
    get one bin per lattice component, weighted uniformly (the point
    density splits evenly between components of a common lattice).
    Internal marks of cut-and-project sets are binned on a grid over the
    bounding box of the acceptance window; the weight of a cell is the
    fraction of the window it covers, computed once by a midpoint rule.
    """

    def __init__(self, kind, n_bins, weights, lo=None, hi=None, cells=None):
        self.kind = kind
        self.n_bins = int(n_bins)
        self.weights = np.asarray(weights, dtype=float)
        self.lo = None if lo is None else np.asarray(lo, dtype=float)
        self.hi = None if hi is None else np.asarray(hi, dtype=float)
        self.cells = None if cells is None else tuple(int(c) for c in cells)
        if self.weights.shape != (self.n_bins,):
            raise ValueError("one weight per mark bin")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("mark weights must sum to one")

    @staticmethod
    def trivial():
        return MarkBins("trivial", 1, np.ones(1))

    @staticmethod
    def component(count):
        count = int(count)
        return MarkBins("component", count, np.full(count, 1.0 / count))

    @staticmethod
    def internal(window, cells, subgrid=128):
        """Grid cells over the window bounding box, weighted by coverage."""
        lo, hi = window.bounding_box()
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        cells = tuple(int(c) for c in cells)
        if len(cells) != lo.shape[0]:
            raise ValueError("one cell count per internal coordinate")
        axes = []
        for a, (c, x0, x1) in enumerate(zip(cells, lo, hi)):
            pts = x0 + (np.arange(c * subgrid) + 0.5) * (x1 - x0) / (c * subgrid)
            axes.append(pts)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        inside = window.contains(pts).reshape(mesh[0].shape)
        # collapse each block of subgrid^k midpoints into its cell count
        for a in range(len(cells)):
            shape = list(inside.shape)
            shape[a] = cells[a]
            shape.insert(a + 1, subgrid)
            inside = inside.astype(np.int64).reshape(shape).sum(axis=a + 1)
        weights = inside.ravel().astype(float)
        total = weights.sum()
        if total <= 0.0:
            raise ValueError("window misses every midpoint of its own box")
        return MarkBins("internal", int(np.prod(cells)), weights / total,
                        lo=lo, hi=hi, cells=cells)

    @staticmethod
    def for_configuration(cfg, internal_cells=None):
        if cfg.mark_kind == "trivial":
            return MarkBins.trivial()
        if cfg.mark_kind == "component":
            return MarkBins.component(cfg.component_count)
        if internal_cells is None:
            internal_cells = (8,) if cfg.window.codim == 1 else (4, 2)
        return MarkBins.internal(cfg.window, internal_cells)

    def index(self, mark_rows):
        mark_rows = np.asarray(mark_rows, dtype=float)
        if mark_rows.ndim == 1:
            mark_rows = mark_rows[:, None] if self.kind != "trivial" \
                else mark_rows.reshape(-1, 0)
        n = mark_rows.shape[0]
        if self.kind == "trivial":
            return np.zeros(n, dtype=np.int64)
        if self.kind == "component":
            idx = np.rint(mark_rows[:, 0]).astype(np.int64)
            return np.clip(idx, 0, self.n_bins - 1)
        idx = np.zeros(n, dtype=np.int64)
        for a, c in enumerate(self.cells):
            width = (self.hi[a] - self.lo[a]) / c
            ia = np.floor((mark_rows[:, a] - self.lo[a]) / width)
            ia = np.clip(ia.astype(np.int64), 0, c - 1)
            idx = idx * c + ia
        return idx

    def to_dict(self):
        data = {"kind": self.kind, "bins": self.n_bins,
                "weights": [float(w) for w in self.weights]}
        if self.kind == "internal":
            data["lo"] = [float(x) for x in self.lo]
            data["hi"] = [float(x) for x in self.hi]
            data["cells"] = list(self.cells)
        return data

    @staticmethod
    def from_dict(data):
        return MarkBins(data["kind"], data["bins"], np.asarray(data["weights"]),
                        lo=data.get("lo"), hi=data.get("hi"),
                        cells=data.get("cells"))


class KernelGrid:
    """Bins over the full chart: uniform xi bins plus impact and mark bins.

    Flights with xi at or beyond `xi_max` land in a separate overflow
    slot, so the xi axis covers [0, xi_max) exactly.
    """

    def __init__(self, dim, xi_max, n_xi, impact=None, marks=None):
        self.dim = int(dim)
        if xi_max <= 0.0 or n_xi < 1:
            raise ValueError("need a positive xi range with at least one bin")
        self.xi_max = float(xi_max)
        self.n_xi = int(n_xi)
        self.xi_edges = np.linspace(0.0, self.xi_max, self.n_xi + 1)
        self.impact = impact if impact is not None else ImpactBins.default(dim)
        if self.impact.dim != self.dim:
            raise ValueError("impact bins built for a different dimension")
        self.marks = marks if marks is not None else MarkBins.trivial()

    @property
    def xi_width(self):
        return self.xi_max / self.n_xi

    @staticmethod
    def for_configuration(cfg, n_xi=250, xi_max=None, impact=None,
                          marks=None, internal_cells=None):
        """Default grid: xi up to ten mean free paths of the configuration."""
        if xi_max is None:
            xi_max = 10.0 * mean_free_path(cfg.density, cfg.dim)
        if marks is None:
            marks = MarkBins.for_configuration(cfg, internal_cells)
        return KernelGrid(cfg.dim, xi_max, n_xi, impact=impact, marks=marks)

    def xi_index(self, xi):
        """Bin index per flight; overflow marked separately.

        Returns (index, overflow_mask); indices of overflowing entries
        are clipped and must not be used.
        """
        xi = np.asarray(xi, dtype=float)
        idx = np.floor(xi / self.xi_width).astype(np.int64)
        over = idx >= self.n_xi
        return np.clip(idx, 0, self.n_xi - 1), over

    def bin_measures(self):
        """Mass of each (w, mark) bin under the chart measure mu."""
        return np.outer(self.impact.measures, self.marks.weights)

    def to_dict(self):
        return {"dim": self.dim, "xi_max": self.xi_max, "n_xi": self.n_xi,
                "impact": self.impact.to_dict(),
                "marks": self.marks.to_dict()}

    @staticmethod
    def from_dict(data):
        return KernelGrid(data["dim"], data["xi_max"], data["n_xi"],
                          impact=ImpactBins.from_dict(data["impact"]),
                          marks=MarkBins.from_dict(data["marks"]))

    def matches(self, other):
        return self.to_dict() == other.to_dict()


# ---------------------------------------------------------------------------
# histogram containers


def _canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def _as_count(x):
    """Keep integer-valued totals as ints; analytic references use floats."""
    xf = float(x)
    xi = int(round(xf))
    return xi if xf == xi else xf


@dataclass(frozen=True, eq=False)
class KernelHistogram:
    """Counts over (xi, w, mark) with explicit missing-mass bookkeeping.

    `counts[i, b, m]` is the number of samples in xi bin i, impact bin b
    and mark bin m.  Flights longer than the grid go to `overflow[b, m]`
    when their landing chart is known; `no_hit` counts flights that
    exceeded the search horizon (no landing chart), `trapped` counts
    starts inside a scatterer, and `non_separated` counts flights whose
    target scatterer had a neighbor closer than 2 rho, where the
    dynamics refuses to build the collision chart.  Everything sums to
    `total_samples`, so the density integrates to one minus the
    recorded deficit.
    """

    grid: KernelGrid
    counts: np.ndarray
    overflow: np.ndarray
    no_hit: int
    trapped: int
    total_samples: int
    non_separated: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expect = (self.grid.n_xi, self.grid.impact.n_bins,
                  self.grid.marks.n_bins)
        if self.counts.shape != expect:
            raise ValueError(f"counts must have shape {expect}")
        if self.overflow.shape != expect[1:]:
            raise ValueError(f"overflow must have shape {expect[1:]}")
        got = float(self.counts.sum() + self.overflow.sum()) \
            + self.no_hit + self.trapped + self.non_separated
        if abs(got - float(self.total_samples)) > 1e-6:
            raise ValueError("sample bookkeeping does not add up")

    def density(self):
        """Estimated density with respect to d(xi) d(mu), per bin."""
        if self.total_samples <= 0:
            return np.zeros_like(self.counts, dtype=float)
        mu = self.grid.bin_measures()[None, :, :]
        return self.counts / (self.total_samples * self.grid.xi_width * mu)

    def mass(self) -> float:
        if self.total_samples <= 0:
            return 0.0
        return float(self.counts.sum()) / self.total_samples

    def deficit(self) -> float:
        """Probability mass outside the grid: overflow, no hit, trapped."""
        if self.total_samples <= 0:
            return 0.0
        lost = float(self.overflow.sum()) + self.no_hit + self.trapped \
            + self.non_separated
        return lost / self.total_samples

    def xi_counts(self):
        return self.counts.sum(axis=(1, 2))

    def xi_density(self):
        """Marginal density of xi alone."""
        if self.total_samples <= 0:
            return np.zeros(self.grid.n_xi)
        return self.xi_counts() / (self.total_samples * self.grid.xi_width)

    def xi_cdf_at_edges(self):
        """Empirical distribution function evaluated at the xi bin edges."""
        if self.total_samples <= 0:
            return np.zeros(self.grid.n_xi + 1)
        cum = np.concatenate([[0.0], np.cumsum(self.xi_counts())])
        return cum / self.total_samples

    def impact_counts(self):
        return self.counts.sum(axis=(0, 2))

    def merged(self, other: "KernelHistogram") -> "KernelHistogram":
        if not self.grid.matches(other.grid):
            raise ValueError("cannot merge histograms on different grids")
        return replace(
            self,
            counts=self.counts + other.counts,
            overflow=self.overflow + other.overflow,
            no_hit=self.no_hit + other.no_hit,
            trapped=self.trapped + other.trapped,
            non_separated=self.non_separated + other.non_separated,
            total_samples=self.total_samples + other.total_samples)

    def coarsened(self, impact_factor=1, xi_factor=1) -> "KernelHistogram":
        """Same data on merged bins; counts fold exactly.

        Useful before comparisons whose per-bin noise at full resolution
        would swamp the effect under test.
        """
        if impact_factor == 1 and xi_factor == 1:
            return self
        grid, group, xi_group = _coarse_grid(self.grid, impact_factor,
                                             xi_factor)
        counts = _fold_axis(self.counts, 0, xi_group, grid.n_xi)
        counts = _fold_axis(counts, 1, group, grid.impact.n_bins)
        overflow = _fold_axis(self.overflow, 0, group, grid.impact.n_bins)
        return replace(self, grid=grid, counts=counts, overflow=overflow)

    def to_json(self) -> str:
        payload = {
            "format": "lorentzgas.kernel_histogram.v1",
            "grid": self.grid.to_dict(),
            "counts": self.counts.tolist(),
            "overflow": self.overflow.tolist(),
            "no_hit": _as_count(self.no_hit),
            "trapped": _as_count(self.trapped),
            "non_separated": _as_count(self.non_separated),
            "total_samples": _as_count(self.total_samples),
            "normalization": _normalization_block(self.grid),
            "meta": self.meta,
        }
        return _canonical_json(payload)

    @staticmethod
    def from_json(text: str) -> "KernelHistogram":
        data = json.loads(text)
        if data.get("format") != "lorentzgas.kernel_histogram.v1":
            raise ValueError("not a kernel histogram document")
        return KernelHistogram(
            grid=KernelGrid.from_dict(data["grid"]),
            counts=np.asarray(data["counts"]),
            overflow=np.asarray(data["overflow"]),
            no_hit=data["no_hit"], trapped=data["trapped"],
            non_separated=data["non_separated"],
            total_samples=data["total_samples"], meta=data["meta"])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load(path):
        with open(path) as fh:
            return KernelHistogram.from_json(fh.read())


def _normalization_block(grid: KernelGrid) -> dict:
    return {
        "xi_bin_width": grid.xi_width,
        "impact_measures": [float(x) for x in grid.impact.measures],
        "mark_weights": [float(x) for x in grid.marks.weights],
    }


def _fold_axis(arr, axis, group, n_coarse):
    """Sum array entries into groups along one axis."""
    shape = list(arr.shape)
    shape[axis] = n_coarse
    out = np.zeros(shape, dtype=arr.dtype)
    np.add.at(np.moveaxis(out, axis, 0), group, np.moveaxis(arr, axis, 0))
    return out


def _coarse_grid(grid: KernelGrid, impact_factor: int, xi_factor: int):
    if grid.n_xi % xi_factor:
        raise ValueError("xi_factor must divide the xi bin count")
    coarse_impact, group = grid.impact.coarsen(impact_factor)
    xi_group = np.arange(grid.n_xi) // xi_factor
    coarse = KernelGrid(grid.dim, grid.xi_max, grid.n_xi // xi_factor,
                        impact=coarse_impact, marks=grid.marks)
    return coarse, group, xi_group


@dataclass(frozen=True)
class ConditioningCell:
    """Cell of the conditioning chart: exit impact bin and exit mark bin."""

    w_bin: int
    mark_bin: int


@dataclass(frozen=True, eq=False)
class ConditionalKernelEstimate:
    """Pair counts indexed by conditioning cell and landing chart.

    `counts[a, s, i, b, m]` counts pairs whose exiting collision fell in
    impact cell a with mark cell s and whose next collision landed in
    (xi bin i, impact bin b, mark bin m).  `pair_counts[a, s]` is the
    number of attempts from that conditioning cell, including the ones
    that overflowed the grid, exceeded the horizon, or ran into a
    non-separated scatterer.
    """

    grid: KernelGrid
    counts: np.ndarray
    overflow: np.ndarray
    no_hit: np.ndarray
    non_separated: np.ndarray
    pair_counts: np.ndarray
    total_pairs: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        nw = self.grid.impact.n_bins
        nm = self.grid.marks.n_bins
        expect = (nw, nm, self.grid.n_xi, nw, nm)
        if self.counts.shape != expect:
            raise ValueError(f"counts must have shape {expect}")
        if self.overflow.shape != (nw, nm, nw, nm):
            raise ValueError("overflow shaped (a, s, b, m)")
        for name in ("no_hit", "non_separated", "pair_counts"):
            if getattr(self, name).shape != (nw, nm):
                raise ValueError("per-cell totals shaped (a, s)")
        per_cell = self.counts.sum(axis=(2, 3, 4)) \
            + self.overflow.sum(axis=(2, 3)) + self.no_hit \
            + self.non_separated
        if not np.allclose(per_cell, self.pair_counts):
            raise ValueError("per-cell bookkeeping does not add up")
        if abs(float(self.pair_counts.sum()) - float(self.total_pairs)) > 1e-6:
            raise ValueError("total pair count does not add up")

    def cell(self, cell: ConditioningCell) -> KernelHistogram:
        """Histogram of landings conditioned on one exit cell."""
        a, s = cell.w_bin, cell.mark_bin
        if not (0 <= a < self.grid.impact.n_bins
                and 0 <= s < self.grid.marks.n_bins):
            raise ValueError("conditioning cell out of range")
        meta = dict(self.meta)
        meta["conditioning_cell"] = [int(a), int(s)]
        return KernelHistogram(
            grid=self.grid, counts=self.counts[a, s].copy(),
            overflow=self.overflow[a, s].copy(),
            no_hit=_as_count(self.no_hit[a, s]), trapped=0,
            non_separated=_as_count(self.non_separated[a, s]),
            total_samples=_as_count(self.pair_counts[a, s]), meta=meta)

    def cells(self):
        """Conditioning cells that received at least one pair."""
        nz = np.argwhere(self.pair_counts > 0)
        return [ConditioningCell(int(a), int(s)) for a, s in nz]

    def conditional_density(self, cell: ConditioningCell):
        return self.cell(cell).density()

    def marginal(self) -> KernelHistogram:
        """Landing histogram summed over conditioning cells.

        Along a trajectory in a stationary regime the exit chart is
        distributed like mu itself, so this marginal estimates the
        mu-average of the pair kernel; `kg_from_k` integrates its tails.
        """
        meta = dict(self.meta)
        meta["conditioning"] = "marginal"
        return KernelHistogram(
            grid=self.grid, counts=self.counts.sum(axis=(0, 1)),
            overflow=self.overflow.sum(axis=(0, 1)),
            no_hit=_as_count(self.no_hit.sum()), trapped=0,
            non_separated=_as_count(self.non_separated.sum()),
            total_samples=_as_count(self.total_pairs), meta=meta)

    def merged(self, other: "ConditionalKernelEstimate") \
            -> "ConditionalKernelEstimate":
        if not self.grid.matches(other.grid):
            raise ValueError("cannot merge estimates on different grids")
        return replace(
            self,
            counts=self.counts + other.counts,
            overflow=self.overflow + other.overflow,
            no_hit=self.no_hit + other.no_hit,
            non_separated=self.non_separated + other.non_separated,
            pair_counts=self.pair_counts + other.pair_counts,
            total_pairs=self.total_pairs + other.total_pairs)

    def coarsened(self, impact_factor=1, xi_factor=1) \
            -> "ConditionalKernelEstimate":
        """Fold both impact axes and the xi axis into merged bins."""
        if impact_factor == 1 and xi_factor == 1:
            return self
        grid, group, xi_group = _coarse_grid(self.grid, impact_factor,
                                             xi_factor)
        nb = grid.impact.n_bins
        counts = _fold_axis(self.counts, 0, group, nb)
        counts = _fold_axis(counts, 2, xi_group, grid.n_xi)
        counts = _fold_axis(counts, 3, group, nb)
        overflow = _fold_axis(self.overflow, 0, group, nb)
        overflow = _fold_axis(overflow, 2, group, nb)
        return replace(
            self, grid=grid, counts=counts, overflow=overflow,
            no_hit=_fold_axis(self.no_hit, 0, group, nb),
            non_separated=_fold_axis(self.non_separated, 0, group, nb),
            pair_counts=_fold_axis(self.pair_counts, 0, group, nb))

    def to_json(self) -> str:
        payload = {
            "format": "lorentzgas.conditional_kernel.v1",
            "grid": self.grid.to_dict(),
            "counts": self.counts.tolist(),
            "overflow": self.overflow.tolist(),
            "no_hit": self.no_hit.tolist(),
            "non_separated": self.non_separated.tolist(),
            "pair_counts": self.pair_counts.tolist(),
            "total_pairs": _as_count(self.total_pairs),
            "normalization": _normalization_block(self.grid),
            "meta": self.meta,
        }
        return _canonical_json(payload)

    @staticmethod
    def from_json(text: str) -> "ConditionalKernelEstimate":
        data = json.loads(text)
        if data.get("format") != "lorentzgas.conditional_kernel.v1":
            raise ValueError("not a conditional kernel document")
        return ConditionalKernelEstimate(
            grid=KernelGrid.from_dict(data["grid"]),
            counts=np.asarray(data["counts"]),
            overflow=np.asarray(data["overflow"]),
            no_hit=np.asarray(data["no_hit"]),
            non_separated=np.asarray(data["non_separated"]),
            pair_counts=np.asarray(data["pair_counts"]),
            total_pairs=data["total_pairs"], meta=data["meta"])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load(path):
        with open(path) as fh:
            return ConditionalKernelEstimate.from_json(fh.read())


# ---------------------------------------------------------------------------
# estimators


def _configuration_metadata(cfg) -> dict:
    info = {"kind": type(cfg).__name__, "dim": int(cfg.dim),
            "density": float(cfg.density)}
    for name in ("intensity", "seed", "covolume", "component_count"):
        if hasattr(cfg, name):
            value = getattr(cfg, name)
            info[name] = int(value) if isinstance(value, int) \
                else float(value)
    return info


def _run_metadata(cfg, smap, rho, seed) -> dict:
    return {"configuration": _configuration_metadata(cfg),
            "map": smap.describe(), "rho": float(rho), "seed": int(seed)}


def _chunk_inits(law, seed, lo, hi):
    return [sample_macroscopic_initial(trajectory_stream(seed, i), law)
            for i in range(lo, hi)]


def _require_separated(cfg, rho):
    """Reject radii at which a periodic configuration overlaps globally.

    Random and aperiodic configurations can still contain isolated close
    pairs; collisions on those are refused by the dynamics and end up in
    the `non_separated` deficit instead.
    """
    gap = getattr(cfg, "global_min_gap", None)
    if gap is not None and gap < 2.0 * rho:
        raise ValueError(
            "configuration has minimal gap {:g} < 2*rho = {:g}; choose a "
            "smaller rho".format(gap, 2.0 * rho))


def estimate_kg(cfg, smap, rho, n_samples, bins=None, *, seed=0, law=None,
                workers=1, horizon_per_leg=None, chunk_size=250_000):
    """Histogram of the first collision from macroscopic starts.

    Draws `n_samples` initial conditions (uniform position in a unit
    macroscopic cube crossed with a uniform direction unless `law` says
    otherwise), runs each to its first collision, and bins (xi, w, mark).
    The result estimates the generic-start kernel as a density with
    respect to d(xi) d(mu); starts whose flight exceeds the horizon or
    that begin inside a scatterer are counted in the deficit, not the
    histogram.  The output is a pure function of the arguments without
    the worker count.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    grid = bins if bins is not None else KernelGrid.for_configuration(cfg)
    if grid.dim != cfg.dim:
        raise ValueError("grid dimension does not match the configuration")
    if law is None:
        law = UniformCubeLaw(1.0, cfg.dim)

    _require_separated(cfg, rho)
    n_w, n_m = grid.impact.n_bins, grid.marks.n_bins
    counts = np.zeros((grid.n_xi, n_w, n_m), dtype=np.int64)
    overflow = np.zeros((n_w, n_m), dtype=np.int64)
    no_hit = 0
    trapped = 0
    non_sep = 0

    for lo in range(0, int(n_samples), int(chunk_size)):
        hi = min(lo + int(chunk_size), int(n_samples))
        inits = _chunk_inits(law, seed, lo, hi)
        batch = run_batch(cfg, smap, rho, inits, 1, workers=workers,
                          horizon_per_leg=horizon_per_leg)
        got = batch.n_events >= 1
        no_hit += int(np.count_nonzero(batch.termination == _TERM_NO_HIT))
        trapped += int(np.count_nonzero(batch.termination == _TERM_TRAPPED))
        non_sep += int(np.count_nonzero(
            batch.termination == _TERM_NON_SEPARATED))

        xi = batch.xi[got, 0]
        w_idx = grid.impact.index(batch.impact_param[got, 0, :])
        m_idx = grid.marks.index(batch.mark[got, 0, :])
        xi_idx, over = grid.xi_index(xi)

        keep = ~over
        flat = (xi_idx[keep] * n_w + w_idx[keep]) * n_m + m_idx[keep]
        counts += np.bincount(flat, minlength=counts.size) \
            .reshape(counts.shape)
        flat_over = w_idx[over] * n_m + m_idx[over]
        overflow += np.bincount(flat_over, minlength=overflow.size) \
            .reshape(overflow.shape)

    return KernelHistogram(grid=grid, counts=counts, overflow=overflow,
                           no_hit=no_hit, trapped=trapped,
                           non_separated=non_sep,
                           total_samples=int(n_samples),
                           meta=_run_metadata(cfg, smap, rho, seed))


def estimate_k(cfg, smap, rho, n_pairs, bins=None, *, seed=0, law=None,
               legs_per_trajectory=16, workers=1, horizon_per_leg=None,
               chunk_size=250_000):
    """Pair histogram of consecutive collisions along long trajectories.

    Runs enough trajectories of `legs_per_trajectory` collisions from
    macroscopic starts to produce at least `n_pairs` consecutive pairs,
    and for each pair records the exit chart (w', mark) of the earlier
    collision against the landing chart (xi, w, mark) of the later one.
    A final flight that exceeds the horizon counts as a no-hit attempt
    from its conditioning cell; trajectories that never hit anything
    contribute no pairs.  Trajectory indices, and therefore the result,
    do not depend on the worker count or the chunk layout.
    """
    if n_pairs < 1:
        raise ValueError("need at least one pair")
    legs = int(legs_per_trajectory)
    if legs < 2:
        raise ValueError("pairs need at least two collisions per trajectory")
    grid = bins if bins is not None else KernelGrid.for_configuration(cfg)
    if grid.dim != cfg.dim:
        raise ValueError("grid dimension does not match the configuration")
    if law is None:
        law = UniformCubeLaw(1.0, cfg.dim)

    _require_separated(cfg, rho)
    n_w, n_m = grid.impact.n_bins, grid.marks.n_bins
    counts = np.zeros((n_w, n_m, grid.n_xi, n_w, n_m), dtype=np.int64)
    overflow = np.zeros((n_w, n_m, n_w, n_m), dtype=np.int64)
    no_hit = np.zeros((n_w, n_m), dtype=np.int64)
    non_sep = np.zeros((n_w, n_m), dtype=np.int64)

    n_traj = -(-int(n_pairs) // (legs - 1))
    traj_chunk = max(1, int(chunk_size) // legs)

    for lo in range(0, n_traj, traj_chunk):
        hi = min(lo + traj_chunk, n_traj)
        inits = _chunk_inits(law, seed, lo, hi)
        batch = run_batch(cfg, smap, rho, inits, legs, workers=workers,
                          horizon_per_leg=horizon_per_leg)

        ne = batch.n_events
        pair_ok = np.arange(legs - 1)[None, :] < (ne - 1)[:, None]
        a_idx = grid.impact.index(
            batch.exit_param[:, :-1, :][pair_ok])
        s_idx = grid.marks.index(batch.mark[:, :-1, :][pair_ok])
        xi_idx, over = grid.xi_index(batch.xi[:, 1:][pair_ok])
        b_idx = grid.impact.index(
            batch.impact_param[:, 1:, :][pair_ok])
        m_idx = grid.marks.index(batch.mark[:, 1:, :][pair_ok])

        keep = ~over
        flat = (((a_idx[keep] * n_m + s_idx[keep]) * grid.n_xi
                 + xi_idx[keep]) * n_w + b_idx[keep]) * n_m + m_idx[keep]
        counts += np.bincount(flat, minlength=counts.size) \
            .reshape(counts.shape)
        flat_over = ((a_idx[over] * n_m + s_idx[over]) * n_w
                     + b_idx[over]) * n_m + m_idx[over]
        overflow += np.bincount(flat_over, minlength=overflow.size) \
            .reshape(overflow.shape)

        # a censored final flight is still an attempt from its exit cell
        for code, sink in ((_TERM_NO_HIT, no_hit),
                           (_TERM_NON_SEPARATED, non_sep)):
            cens = (batch.termination == code) & (ne >= 1)
            if np.any(cens):
                last = ne[cens] - 1
                rows = np.nonzero(cens)[0]
                a_c = grid.impact.index(batch.exit_param[rows, last, :])
                s_c = grid.marks.index(batch.mark[rows, last, :])
                sink += np.bincount(a_c * n_m + s_c, minlength=sink.size) \
                    .reshape(sink.shape)

    pair_counts = counts.sum(axis=(2, 3, 4)) + overflow.sum(axis=(2, 3)) \
        + no_hit + non_sep
    return ConditionalKernelEstimate(
        grid=grid, counts=counts, overflow=overflow, no_hit=no_hit,
        non_separated=non_sep, pair_counts=pair_counts,
        total_pairs=int(pair_counts.sum()),
        meta=_run_metadata(cfg, smap, rho, seed))


# ---------------------------------------------------------------------------
# the Poisson case in closed form


@dataclass(frozen=True)
class PoissonKernel:
    """Exponential flight law of the Poisson scatterer process.

    Both kernels coincide and factorize: exponential with mean equal to
    the mean free path in xi, uniform (that is, equal to mu) over the
    impact parameter and the mark.  The collision kernels on velocity
    space follow by weighting with the differential cross section.
    """

    density: float
    dim: int
    xi_bar: float

    def k(self, w_prime, xi, w):
        return self.kg(xi, w)

    def kg(self, xi, w=None):
        xi = np.asarray(xi, dtype=float)
        return np.exp(-xi / self.xi_bar) / self.xi_bar

    def survival(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.exp(-xi / self.xi_bar)

    def p(self, smap, v, xi, v_plus):
        sigma = smap.cross_section(v, v_plus)
        xi = np.asarray(xi, dtype=float)
        return self.density * sigma * np.exp(-xi / self.xi_bar)

    def p0(self, smap, v_prev, v, xi, v_plus):
        return self.p(smap, v, xi, v_plus)


def analytic_poisson_k(c, d) -> PoissonKernel:
    if c <= 0.0:
        raise ValueError("intensity must be positive")
    if d not in (2, 3):
        raise ValueError("kernels are implemented for dimensions 2 and 3")
    return PoissonKernel(density=float(c), dim=int(d),
                         xi_bar=mean_free_path(c, d))


def analytic_pair_reference(kernel: PoissonKernel, grid: KernelGrid) \
        -> ConditionalKernelEstimate:
    """Exact expected pair masses of the Poisson kernel on a grid.

    Returns a conditional estimate whose "counts" are the exact bin
    probabilities (total mass one), the product of the chart measure of
    the conditioning cell, the exponential xi mass of the bin and the
    chart measure of the landing cell.  Feeding it to the identity
    checks must reproduce the closed forms up to roundoff.
    """
    if kernel.dim != grid.dim:
        raise ValueError("kernel and grid dimensions differ")
    mu = grid.bin_measures()
    surv = kernel.survival(grid.xi_edges)
    xi_mass = surv[:-1] - surv[1:]
    counts = np.einsum("as,i,bm->asibm", mu, xi_mass, mu)
    overflow = float(surv[-1]) * np.einsum("as,bm->asbm", mu, mu)
    no_hit = np.zeros_like(mu)
    pair_counts = counts.sum(axis=(2, 3, 4)) + overflow.sum(axis=(2, 3))
    return ConditionalKernelEstimate(
        grid=grid, counts=counts, overflow=overflow, no_hit=no_hit,
        non_separated=np.zeros_like(mu), pair_counts=pair_counts,
        total_pairs=1,
        meta={"configuration": {"kind": "PoissonAnalytic",
                                "dim": kernel.dim,
                                "density": kernel.density},
              "map": "analytic", "rho": 0.0, "seed": 0})


# ---------------------------------------------------------------------------
# time reversal symmetry


@dataclass(frozen=True, eq=False)
class TimeReversalReport:
    """Outcome of the reversal comparison on coarsened pair counts.

    `z` holds the standardized discrepancy per coarse cell, NaN where the
    combined count fell below the threshold; cells that are their own
    mirror compare trivially and are not counted in `n_compared`.
    """

    max_discrepancy: float
    worst_cell: tuple
    n_compared: int
    n_excluded: int
    n_self_mirrored: int
    xi_factor: int
    impact_factor: int
    min_count: int
    z: np.ndarray


def check_time_reversal(estimate: ConditionalKernelEstimate, *,
                        xi_factor=None, impact_factor=None,
                        min_count=50) -> TimeReversalReport:
    """Compare pair counts against their time-reversed mirror.

    Reversing a trajectory swaps the roles of the exit and entry charts
    and negates both impact parameters, so the count in cell
    (a, s, xi, b, m) should match the count in (-b, m, xi, -a, s) up to
    sampling noise.  Counts are coarsened by the given factors (chosen
    automatically to land near 8 impact bins and 10 xi bins), cells with
    fewer than `min_count` combined entries are excluded, and the
    largest |observed difference| / sqrt(combined count) is reported.
    """
    grid = estimate.grid
    if impact_factor is None:
        base = grid.impact.n_signed if grid.dim == 2 else grid.impact.n_angular
        impact_factor = base // 8 if base % 8 == 0 and base > 8 else 1
    if xi_factor is None:
        xi_factor = grid.n_xi // 10 if grid.n_xi % 10 == 0 \
            and grid.n_xi > 10 else 1
    if grid.n_xi % xi_factor:
        raise ValueError("xi_factor must divide the xi bin count")

    coarse = estimate.coarsened(impact_factor=impact_factor,
                                xi_factor=xi_factor)
    nc = coarse.grid.impact.n_bins
    n_m = coarse.grid.marks.n_bins
    c = coarse.counts.astype(float)
    perm = coarse.grid.impact.flip()
    mirror = np.transpose(c, (3, 4, 2, 0, 1))[perm][:, :, :, perm, :]

    tot = c + mirror
    with np.errstate(invalid="ignore", divide="ignore"):
        z = (c - mirror) / np.sqrt(np.maximum(tot, 1.0))
    z[tot < min_count] = np.nan

    self_mask = np.zeros_like(z, dtype=bool)
    for a in range(nc):
        for s in range(n_m):
            self_mask[a, s, :, perm[a], s] = True
    usable = ~np.isnan(z) & ~self_mask

    n_compared = int(np.count_nonzero(usable)) // 2
    n_excluded = int(np.count_nonzero(np.isnan(z) & ~self_mask)) // 2
    n_self = int(np.count_nonzero(self_mask & ~np.isnan(z)))

    if np.any(usable):
        flat = np.where(usable, np.abs(z), -1.0)
        worst = np.unravel_index(int(np.argmax(flat)), z.shape)
        max_disc = float(np.abs(z[worst]))
    else:
        worst = ()
        max_disc = 0.0
    return TimeReversalReport(
        max_discrepancy=max_disc, worst_cell=tuple(int(i) for i in worst),
        n_compared=n_compared, n_excluded=n_excluded, n_self_mirrored=n_self,
        xi_factor=int(xi_factor), impact_factor=int(impact_factor),
        min_count=int(min_count), z=z)


@dataclass(frozen=True, eq=False)
class FlightSpreadReport:
    """How much the flight-length law varies with the exit chart.

    For a memoryless medium every conditional flight distribution
    collapses onto the pooled one, so both sup distances should sit at
    the sampling-noise level; structured media show a genuine spread.
    CDFs are normalized by attempts per cell, which books censored
    flights (no hit within the horizon, non-separated landings) as tail
    mass rather than discarding them.
    """

    max_vs_pooled: float
    worst_cell: ConditioningCell
    max_pairwise: float
    worst_pair: tuple
    n_cells: int
    n_skipped: int
    min_pairs: int
    by_cell: dict


def conditional_flight_spread(estimate: ConditionalKernelEstimate, *,
                              min_pairs=500) -> FlightSpreadReport:
    """Sup-distance between conditional and pooled flight-length CDFs.

    Evaluates each conditioning cell's xi CDF at the bin edges, skips
    cells with fewer than `min_pairs` attempts, and reports the largest
    distance to the pooled CDF together with the largest distance
    between any two kept cells.  Coarsen the estimate first when the
    per-cell counts are thin.
    """
    xi_counts = estimate.counts.sum(axis=(3, 4)).astype(float)
    attempts = estimate.pair_counts.astype(float)
    total = attempts.sum()
    if total <= 0:
        raise ValueError("estimate holds no pairs")
    pooled_cdf = np.concatenate(
        [[0.0], np.cumsum(xi_counts.sum(axis=(0, 1)))]) / total

    keep = attempts >= min_pairs
    if not keep.any():
        raise ValueError(
            f"no conditioning cell reaches {min_pairs} pairs; coarsen the "
            "estimate or lower min_pairs")
    cells = [ConditioningCell(a, s)
             for a in range(keep.shape[0]) for s in range(keep.shape[1])
             if keep[a, s]]
    cdfs = np.stack([
        np.concatenate([[0.0], np.cumsum(xi_counts[c.w_bin, c.mark_bin])])
        / attempts[c.w_bin, c.mark_bin] for c in cells])

    vs_pooled = np.max(np.abs(cdfs - pooled_cdf), axis=1)
    i_worst = int(np.argmax(vs_pooled))

    if len(cells) > 1:
        gaps = np.max(np.abs(cdfs[:, None, :] - cdfs[None, :, :]), axis=2)
        i, j = np.unravel_index(int(np.argmax(gaps)), gaps.shape)
        max_pairwise = float(gaps[i, j])
        worst_pair = (cells[i], cells[j])
    else:
        max_pairwise = 0.0
        worst_pair = ()

    return FlightSpreadReport(
        max_vs_pooled=float(vs_pooled[i_worst]), worst_cell=cells[i_worst],
        max_pairwise=max_pairwise, worst_pair=worst_pair,
        n_cells=len(cells), n_skipped=int(keep.size - keep.sum()),
        min_pairs=int(min_pairs),
        by_cell={c: float(v) for c, v in zip(cells, vs_pooled)})


# ---------------------------------------------------------------------------
# reconstruction of the generic kernel from pair tails


@dataclass(frozen=True, eq=False)
class KgReconstruction:
    """Generic-start kernel rebuilt from the tails of a pair estimate.

    `kg_at_edges[i, b, m]` evaluates the reconstruction exactly at the
    xi bin edges (it is a pure tail sum); `density[i, b, m]` is the bin
    average under the within-bin-uniform reading of the pair masses and
    is directly comparable with `KernelHistogram.density()`.  Flights
    beyond the horizon carry no landing chart and are left out, which
    depresses the reconstruction by at most the no-hit fraction.
    """

    grid: KernelGrid
    kg_at_edges: np.ndarray
    density: np.ndarray
    prefactor: float
    no_hit_fraction: float

    def xi_density(self):
        mu = self.grid.bin_measures()
        return np.einsum("ibm,bm->i", self.density, mu)

    def mean_xi(self) -> float:
        """Mean flight length of the reconstructed law, truncated at the grid."""
        mid = 0.5 * (self.grid.xi_edges[:-1] + self.grid.xi_edges[1:])
        return float(np.sum(mid * self.xi_density()) * self.grid.xi_width)

    def l1_distance(self, hist: KernelHistogram) -> float:
        """Integrated absolute difference against a direct estimate."""
        if not self.grid.matches(hist.grid):
            raise ValueError("histogram lives on a different grid")
        mu = self.grid.bin_measures()[None, :, :]
        diff = np.abs(self.density - hist.density())
        return float(np.sum(diff * mu) * self.grid.xi_width)


def kg_from_k(estimate: ConditionalKernelEstimate, c, dim=None) \
        -> KgReconstruction:
    """Integrate the pair kernel identity to recover the generic kernel.

    The generic-start kernel at flight length xi equals v_{d-1} c times
    the mass of all pairs whose flight exceeds xi, as a density in its
    landing chart.  Summing histogram bins from the far end gives the
    reconstruction exactly at bin edges; bin averages follow by adding
    half of the bin's own mass.  Along a stationary trajectory the exit
    charts are distributed like mu, so the sum over conditioning cells
    with empirical weights is the mu-integral of the identity.
    """
    grid = estimate.grid
    if dim is not None and dim != grid.dim:
        raise ValueError("stated dimension does not match the grid")
    if c <= 0.0:
        raise ValueError("point density must be positive")
    marg = estimate.marginal()
    n = marg.total_samples
    if n <= 0:
        raise ValueError("empty estimate")
    mu = grid.bin_measures()
    pref = unit_ball_volume(grid.dim - 1) * float(c)

    bin_mass = marg.counts / (n * mu[None, :, :])
    over_mass = marg.overflow / (n * mu)

    tail = np.empty((grid.n_xi + 1,) + mu.shape)
    tail[-1] = over_mass
    tail[:-1] = over_mass[None, :, :] \
        + np.cumsum(bin_mass[::-1], axis=0)[::-1]
    density = pref * (tail[1:] + 0.5 * bin_mass)
    return KgReconstruction(
        grid=grid, kg_at_edges=pref * tail, density=density,
        prefactor=pref, no_hit_fraction=float(marg.no_hit) / n)


# ---------------------------------------------------------------------------
# collision kernels on velocity space


class CollisionKernels:
    """Flight-and-collision kernels p and p0 on velocity space.

    Composes a kernel in chart form with the differential cross section
    of the scatterer: the probability density of flying xi and then
    leaving in direction v_plus is the cross section times the chart
    kernel evaluated at the impact parameter that maps the current
    direction to v_plus.  Unreachable outgoing directions get density
    zero, and chart densities are clipped at v_{d-1} times the point
    density, which keeps p below its structural bound everywhere.
    """

    def __init__(self, smap, point_density, *, analytic=None, kg_hist=None,
                 conditional=None):
        self.smap = smap
        self.dim = smap.dim
        self.point_density = float(point_density)
        self.v_ball = unit_ball_volume(self.dim - 1)
        self.bound = self.v_ball * self.point_density
        self.analytic = analytic
        self.kg_hist = kg_hist
        self.conditional = conditional
        self._kg_table = None
        self._k_table = None
        if kg_hist is not None:
            self._kg_table = np.minimum(kg_hist.density(), self.bound)
        if conditional is not None:
            if kg_hist is None:
                rec = kg_from_k(conditional, self.point_density)
                self._kg_table = np.minimum(rec.density, self.bound)
                self.kg_grid = conditional.grid
            dens = np.stack([
                np.stack([
                    np.minimum(self.conditional.cell(
                        ConditioningCell(a, s)).density(), self.bound)
                    for s in range(conditional.grid.marks.n_bins)])
                for a in range(conditional.grid.impact.n_bins)])
            self._k_table = dens
        if kg_hist is not None:
            self.kg_grid = kg_hist.grid
        if analytic is not None:
            self.kg_grid = None

    def _impact_of(self, v, v_plus):
        v = np.asarray(v, dtype=float)
        v_plus = np.asarray(v_plus, dtype=float)
        return self.smap.incoming_impact(v_plus @ rotation_to_e1(v))

    def _kg_lookup(self, xi, w_vec, mark_bin):
        grid = self.kg_grid
        xi_idx, over = grid.xi_index(xi)
        b = grid.impact.index(w_vec[None, :])[0]
        vals = self._kg_table[xi_idx, b, mark_bin]
        return np.where(over, 0.0, vals)

    def p(self, v, xi, v_plus, mark_bin=0):
        """Density of (flight length, outgoing direction, mark) given v."""
        sigma = self.smap.cross_section(v, v_plus)
        if sigma == 0.0:
            return np.zeros_like(np.asarray(xi, dtype=float))
        xi = np.asarray(xi, dtype=float)
        if self.analytic is not None:
            return self.point_density * sigma * self.analytic.survival(xi)
        w_vec = self._impact_of(v, v_plus)
        return (sigma / self.v_ball) * self._kg_lookup(xi, w_vec, mark_bin)

    def p0(self, v_prev, v, xi, v_plus, mark_bin=0, prev_mark_bin=0):
        """Like p, but conditioned on the previous collision's exit chart."""
        if self.analytic is not None:
            return self.p(v, xi, v_plus, mark_bin)
        if self._k_table is None:
            raise ValueError("p0 needs a conditional kernel estimate")
        sigma = self.smap.cross_section(v, v_plus)
        if sigma == 0.0:
            return np.zeros_like(np.asarray(xi, dtype=float))
        grid = self.conditional.grid
        w_prev = self.smap.exit_impact_between(v_prev, v)
        a = grid.impact.index(w_prev[None, :])[0]
        w_vec = self._impact_of(v, v_plus)
        xi = np.asarray(xi, dtype=float)
        xi_idx, over = grid.xi_index(xi)
        b = grid.impact.index(w_vec[None, :])[0]
        vals = self._k_table[a, prev_mark_bin, xi_idx, b, mark_bin]
        return (sigma / self.v_ball) * np.where(over, 0.0, vals)

    def total_mass(self, v, n_dirs=2001):
        """Quadrature of p over flight length, direction and mark.

        Dimension 2 integrates the outgoing angle with the trapezoid
        rule; dimension 3 uses a product Gauss-Legendre x uniform rule
        on the sphere.  The flight-length integral is exact per bin for
        tabulated kernels.  The result should be one up to the deficit
        of the underlying estimate and quadrature error.
        """
        v = np.asarray(v, dtype=float)
        if self.analytic is not None:
            xi_mass = None
            marks = [1.0]
        else:
            grid = self.kg_grid
            xi_mass = self.grid_xi_masses()
            marks = grid.marks.weights
        if self.dim == 2:
            theta = np.linspace(-np.pi, np.pi, int(n_dirs))
            dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
            weights = np.full(len(theta), theta[1] - theta[0])
            weights[0] *= 0.5
            weights[-1] *= 0.5
        else:
            n_polar = max(16, int(round(math.sqrt(n_dirs / 2))))
            nodes, gl_w = np.polynomial.legendre.leggauss(n_polar)
            phi = (np.arange(2 * n_polar) + 0.5) * np.pi / n_polar
            ct, pp = np.meshgrid(nodes, phi, indexing="ij")
            st = np.sqrt(1.0 - ct ** 2)
            dirs = np.stack([ct.ravel(), (st * np.cos(pp)).ravel(),
                             (st * np.sin(pp)).ravel()], axis=1)
            weights = np.repeat(gl_w, 2 * n_polar) * (np.pi / n_polar)
        total = 0.0
        for v_plus, wq in zip(dirs, weights):
            sigma = self.smap.cross_section(v, v_plus)
            if sigma == 0.0:
                continue
            if self.analytic is not None:
                total += wq * self.point_density * sigma * self.analytic.xi_bar
                continue
            w_vec = self._impact_of(v, v_plus)
            b = self.kg_grid.impact.index(w_vec[None, :])[0]
            for m, mw in enumerate(marks):
                total += wq * mw * (sigma / self.v_ball) \
                    * float(xi_mass[:, b, m].sum())
        return float(total)

    def grid_xi_masses(self):
        """Per-bin xi integral of the tabulated chart kernel."""
        if self._kg_table is None:
            raise ValueError("no tabulated kernel")
        return self._kg_table * self.kg_grid.xi_width


def build_collision_kernels(source, smap, point_density=None) \
        -> CollisionKernels:
    """Collision kernels from an analytic kernel or a histogram estimate.

    `source` may be a PoissonKernel (closed-form p = p0), a
    KernelHistogram from `estimate_kg` (gives p), or a
    ConditionalKernelEstimate from `estimate_k` (gives p0, and p through
    the tail reconstruction).  The point density defaults to the one
    recorded in the estimate's metadata.
    """
    if isinstance(source, PoissonKernel):
        if smap.dim != source.dim:
            raise ValueError("map dimension does not match the kernel")
        return CollisionKernels(smap, source.density, analytic=source)
    if point_density is None:
        cfg_meta = source.meta.get("configuration", {})
        point_density = cfg_meta.get("density")
        if point_density is None:
            raise ValueError("point density neither given nor in metadata")
    if smap.dim != source.grid.dim:
        raise ValueError("map dimension does not match the estimate")
    if isinstance(source, KernelHistogram):
        return CollisionKernels(smap, point_density, kg_hist=source)
    if isinstance(source, ConditionalKernelEstimate):
        return CollisionKernels(smap, point_density, conditional=source)
    raise TypeError("source must be a kernel object or a histogram estimate")
