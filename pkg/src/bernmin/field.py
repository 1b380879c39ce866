"""Cartesian grids, masked regions, cell-centered fields, and integral primitives.

Conventions used throughout the package:

* all fields are cell-centered; cell (i_0, ..., i_{d-1}) has center
  lo_a + (i_a + 1/2) h_a along each axis,
* every set measure is counted by cell centers times the cell volume,
* ball / annulus masks use the center-in-shape predicate with no
  partial-cell weighting,
* "elements" are the dual boxes spanned by 2^d adjacent cell centers; an
  element is *conforming* for a region when all of its corner cells are
  masked.  Gradient-based quantities integrate over conforming elements.

All reductions here are pure functions of immutable inputs and can be
evaluated concurrently on shared (read-only) fields.
"""

from __future__ import annotations

import csv
import itertools
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

CELL_BUDGET = 1 << 24  # default cap on total cells per grid
MAX_DIM = 4


def vol_ball(d: int) -> float:
    """Volume of the unit ball in R^d."""
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def area_sphere(d: int) -> float:
    """Surface measure of the unit sphere S^{d-1} in R^d."""
    return d * vol_ball(d)


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid over a box, cell-centered collocation."""

    extents: tuple[tuple[float, float], ...]
    resolution: tuple[int, ...]
    cell_budget: int = CELL_BUDGET

    def __post_init__(self):
        extents = tuple((float(a), float(b)) for a, b in self.extents)
        resolution = tuple(int(n) for n in self.resolution)
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "resolution", resolution)
        if not 1 <= self.dim <= MAX_DIM:
            raise FieldError(f"grid dimension must be in 1..{MAX_DIM}, got {self.dim}")
        if len(resolution) != self.dim:
            raise FieldError("extents and resolution length mismatch")
        if any(n < 2 for n in resolution):
            raise FieldError("every axis needs at least 2 cells")
        if any(b <= a for a, b in extents):
            raise FieldError("extents must have positive length")
        total = int(np.prod(resolution))
        if total > self.cell_budget:
            raise FieldError(f"grid has {total} cells, budget is {self.cell_budget}")

    @property
    def dim(self) -> int:
        return len(self.extents)

    @cached_property
    def spacing(self) -> tuple[float, ...]:
        return tuple((b - a) / n for (a, b), n in zip(self.extents, self.resolution))

    @cached_property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.resolution

    @property
    def total_cells(self) -> int:
        return int(np.prod(self.resolution))

    @cached_property
    def axis_centers(self) -> tuple[np.ndarray, ...]:
        out = []
        for (a, _), n, h in zip(self.extents, self.resolution, self.spacing):
            out.append(a + (np.arange(n) + 0.5) * h)
        return tuple(out)

    def center_mesh(self) -> tuple[np.ndarray, ...]:
        """Per-axis center coordinates broadcast to the full grid shape."""
        return tuple(np.meshgrid(*self.axis_centers, indexing="ij"))

    def centers(self) -> np.ndarray:
        """All cell centers as an (ncells, dim) array in row-major cell order."""
        mesh = self.center_mesh()
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def index_of(self, point) -> tuple[int, ...]:
        """Index of the cell containing a point (clipped to the grid)."""
        idx = []
        for x, (a, _), n, h in zip(point, self.extents, self.resolution, self.spacing):
            idx.append(int(np.clip(math.floor((x - a) / h), 0, n - 1)))
        return tuple(idx)


def _radius_sq_mesh(grid: Grid, center) -> np.ndarray:
    mesh = grid.center_mesh()
    r2 = np.zeros(grid.shape)
    for m, c in zip(mesh, center):
        r2 += (m - c) ** 2
    return r2


def _face_neighbor_or(mask: np.ndarray, value: np.ndarray) -> np.ndarray:
    """OR of ``value`` over the face neighbors of each cell (edges see ``False``)."""
    out = np.zeros_like(mask, dtype=bool)
    for axis in range(mask.ndim):
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        out[tuple(lo)] |= value[tuple(hi)]
        out[tuple(hi)] |= value[tuple(lo)]
    return out


@dataclass(eq=False)
class Region:
    """A grid plus a boolean cell mask (inside / outside)."""

    grid: Grid
    mask: np.ndarray
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.grid.shape:
            raise FieldError("mask shape does not match grid")
        if not self.mask.any():
            raise FieldError("degenerate region: empty mask")

    @property
    def cell_count(self) -> int:
        return int(self.mask.sum())

    @property
    def measure(self) -> float:
        return self.cell_count * self.grid.cell_volume

    @cached_property
    def boundary_layer(self) -> np.ndarray:
        """Mask cells with an unmasked face neighbor (or on the grid edge)."""
        inner = _face_neighbor_or(self.mask, ~self.mask)
        # cells on the grid edge have a missing neighbor and count as layer
        edge = np.ones(self.grid.shape, dtype=bool)
        core = tuple(slice(1, -1) for _ in range(self.grid.dim))
        edge[core] = False
        return self.mask & (inner | edge)

    @cached_property
    def conforming_elements(self) -> np.ndarray:
        """Boolean array over elements: all 2^d corner cells are masked."""
        d = self.grid.dim
        out = None
        for offsets in itertools.product((0, 1), repeat=d):
            sl = tuple(
                slice(o, n - 1 + o) for o, n in zip(offsets, self.grid.resolution)
            )
            piece = self.mask[sl]
            out = piece.copy() if out is None else (out & piece)
        return out

    @cached_property
    def interior_cells(self) -> np.ndarray:
        """Mask cells all of whose incident elements are conforming.

        Hat test functions centered at these cells are supported inside the
        region, so PDE residuals are meaningful there.
        """
        d = self.grid.dim
        # pad the element array with False so cell i sees elements i-1+o
        padded = np.zeros(tuple(n + 1 for n in self.grid.resolution), dtype=bool)
        padded[tuple(slice(1, n) for n in self.grid.resolution)] = self.conforming_elements
        out = np.ones(self.grid.shape, dtype=bool)
        for offsets in itertools.product((0, 1), repeat=d):
            sl = tuple(slice(o, n + o) for o, n in zip(offsets, self.grid.resolution))
            out &= padded[sl]
        return out & self.mask

    def contains(self, other: "Region") -> bool:
        return bool((~self.mask & other.mask).sum() == 0)


def make_region(grid: Grid, kind: str, **params) -> Region:
    """Build a region by the center-in-shape predicate.

    Kinds: ``box`` (whole grid), ``ball`` (center, radius),
    ``annulus`` (center, r_inner, r_outer), ``custom`` (mask=...).
    """
    d = grid.dim
    if kind == "box":
        mask = np.ones(grid.shape, dtype=bool)
    elif kind == "ball":
        center = params.get("center", (0.0,) * d)
        radius = float(params["radius"])
        half_min_extent = min((b - a) / 2 for a, b in grid.extents)
        if radius > half_min_extent + 1e-12:
            raise FieldError("ball radius exceeds half the smallest extent")
        mask = _radius_sq_mesh(grid, center) < radius**2
    elif kind == "annulus":
        center = params.get("center", (0.0,) * d)
        r_in = float(params["r_inner"])
        r_out = float(params["r_outer"])
        if not 0.0 <= r_in < r_out:
            raise FieldError("annulus needs 0 <= r_inner < r_outer")
        r2 = _radius_sq_mesh(grid, center)
        mask = (r2 >= r_in**2) & (r2 <= r_out**2)
    elif kind == "custom":
        mask = np.asarray(params["mask"], dtype=bool)
    else:
        raise FieldError(f"unknown region kind {kind!r}")
    if not mask.any():
        raise FieldError("degenerate region: empty mask")
    return Region(grid=grid, mask=mask, kind=kind, params=dict(params))


@dataclass(eq=False)
class ScalarField:
    """Cell values on a region; entries outside the mask are ignored."""

    region: Region
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.region.grid.shape:
            raise FieldError("value shape does not match grid")

    @classmethod
    def constant(cls, region: Region, value: float) -> "ScalarField":
        return cls(region, np.full(region.grid.shape, float(value)))

    @classmethod
    def from_function(cls, region: Region, fn) -> "ScalarField":
        pts = region.grid.centers().reshape(region.grid.shape + (region.grid.dim,))
        return cls(region, np.asarray(fn(pts), dtype=float))

    @property
    def grid(self) -> Grid:
        return self.region.grid

    def masked(self) -> np.ndarray:
        return self.values[self.region.mask]

    def validate(self):
        if not np.isfinite(self.masked()).all():
            raise FieldError("field has non-finite values on its mask")

    def value_at(self, point) -> float:
        return float(self.values[self.region.grid.index_of(point)])


@dataclass(eq=False)
class CoefficientField:
    """Per-cell symmetric d x d matrices with certified eigenvalue bounds."""

    region: Region
    matrices: np.ndarray
    lam: float
    Lam: float

    SYMMETRY_TOL = 1e-12
    EIG_SLACK = 1e-9

    def __post_init__(self):
        d = self.region.grid.dim
        self.matrices = np.asarray(self.matrices, dtype=float)
        if self.matrices.shape != self.region.grid.shape + (d, d):
            raise FieldError("coefficient shape does not match grid")
        if not 0.0 < self.lam <= self.Lam:
            raise FieldError("need 0 < lambda <= Lambda")
        mats = self.matrices[self.region.mask]
        if np.abs(mats - np.swapaxes(mats, -1, -2)).max() > self.SYMMETRY_TOL:
            raise FieldError("coefficient matrices are not symmetric")
        eig = np.linalg.eigvalsh(mats)
        if eig.min() < self.lam - self.EIG_SLACK or eig.max() > self.Lam + self.EIG_SLACK:
            raise FieldError(
                "coefficient eigenvalues escape the certified bounds "
                f"[{self.lam}, {self.Lam}]: got [{eig.min()}, {eig.max()}]"
            )

    @classmethod
    def identity(cls, region: Region) -> "CoefficientField":
        d = region.grid.dim
        mats = np.broadcast_to(np.eye(d), region.grid.shape + (d, d)).copy()
        return cls(region, mats, 1.0, 1.0)

    @classmethod
    def diagonal(cls, region: Region, entries) -> "CoefficientField":
        d = region.grid.dim
        entries = np.asarray(entries, dtype=float)
        if entries.shape == (d,):
            entries = np.broadcast_to(entries, region.grid.shape + (d,))
        mats = np.zeros(region.grid.shape + (d, d))
        for a in range(d):
            mats[..., a, a] = entries[..., a]
        return cls(region, mats, float(entries.min()), float(entries.max()))

    @classmethod
    def scalar(cls, region: Region, value_array) -> "CoefficientField":
        d = region.grid.dim
        vals = np.asarray(value_array, dtype=float)
        mats = np.zeros(region.grid.shape + (d, d))
        for a in range(d):
            mats[..., a, a] = vals
        msk = vals[region.mask] if vals.shape == region.grid.shape else vals
        return cls(region, mats, float(np.min(msk)), float(np.max(msk)))

    @classmethod
    def random_symmetric(cls, region: Region, lam: float, Lam: float, seed: int) -> "CoefficientField":
        """A(x) = Q diag(e) Q^T per cell with eigenvalues uniform in [lam, Lam]."""
        d = region.grid.dim
        rng = np.random.default_rng(seed)
        n = region.grid.total_cells
        eigs = rng.uniform(lam, Lam, size=(n, d))
        q, _ = np.linalg.qr(rng.normal(size=(n, d, d)))
        mats = np.einsum("nij,nj,nkj->nik", q, eigs, q)
        mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
        return cls(region, mats.reshape(region.grid.shape + (d, d)), lam, Lam)


# ---------------------------------------------------------------------------
# reductions


def _check_subregion(f: ScalarField, region: Region | None) -> Region:
    if region is None:
        return f.region
    if region.grid is not f.region.grid and region.grid != f.region.grid:
        raise FieldError("region lives on a different grid")
    if not f.region.contains(region):
        raise FieldError("region mask is not contained in the field's mask")
    return region


def l2_norm(f: ScalarField, region: Region | None = None) -> float:
    """sqrt( sum f^2 * cell volume ) over the masked cells."""
    r = _check_subregion(f, region)
    vals = f.values[r.mask]
    return float(np.sqrt(np.sum(vals * vals) * f.grid.cell_volume))


def weak_lq_norm(f: ScalarField, q: float, region: Region | None = None) -> float:
    """Discrete Marcinkiewicz norm sup_t t |{|f| > t}|^{1/q}.

    On cell-counted data the supremum is attained in the closure of a level
    jump, so it equals max over distinct values v of v * |{|f| >= v}|^{1/q}.
    Non-finite entries are ignored (they represent a zero-measure singular
    set sampled exactly at a cell center).
    """
    if q <= 0:
        raise FieldError("weak norm needs q > 0")
    r = _check_subregion(f, region)
    vals = np.abs(f.values[r.mask])
    vals = vals[np.isfinite(vals)]
    vals = vals[vals > 0]
    if vals.size == 0:
        return 0.0
    vals = np.sort(vals)
    distinct, first_idx = np.unique(vals, return_index=True)
    count_ge = vals.size - first_idx
    measures = count_ge * f.grid.cell_volume
    return float(np.max(distinct * measures ** (1.0 / q)))


def ball_mean_oscillation(f: ScalarField, center, radius: float) -> float:
    """Mean of |f - mean(f)| over the cells whose centers lie in the ball."""
    r2 = _radius_sq_mesh(f.grid, center)
    ball = (r2 < radius**2) & f.region.mask
    if not ball.any():
        raise FieldError("ball contains no cells")
    vals = f.values[ball]
    return float(np.mean(np.abs(vals - vals.mean())))


# ---------------------------------------------------------------------------
# serialization: flat binary layout and CSV

_HEADER_INT = struct.Struct("<q")
_HEADER_FLOAT = struct.Struct("<d")


def write_field(f: ScalarField, path) -> None:
    """Flat binary layout: dim, extents, resolutions (64-bit LE), then values
    row-major.  Values outside the mask are stored as NaN so the mask
    round-trips through the format."""
    grid = f.grid
    vals = np.where(f.region.mask, f.values, np.nan).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_INT.pack(grid.dim))
        for a, b in grid.extents:
            fh.write(_HEADER_FLOAT.pack(a))
            fh.write(_HEADER_FLOAT.pack(b))
        for n in grid.resolution:
            fh.write(_HEADER_INT.pack(n))
        fh.write(vals.tobytes(order="C"))


def read_field(path) -> ScalarField:
    with open(path, "rb") as fh:
        (dim,) = _HEADER_INT.unpack(fh.read(8))
        extents = []
        for _ in range(dim):
            (a,) = _HEADER_FLOAT.unpack(fh.read(8))
            (b,) = _HEADER_FLOAT.unpack(fh.read(8))
            extents.append((a, b))
        resolution = []
        for _ in range(dim):
            (n,) = _HEADER_INT.unpack(fh.read(8))
            resolution.append(n)
        grid = Grid(tuple(extents), tuple(resolution))
        raw = np.frombuffer(fh.read(grid.total_cells * 8), dtype="<f8")
    values = raw.reshape(grid.shape).astype(float)
    mask = np.isfinite(values)
    region = Region(grid, mask, kind="custom")
    values = np.where(mask, values, 0.0)
    return ScalarField(region, values)


def write_field_csv(f: ScalarField, path) -> None:
    """One row per masked cell: index columns then the value, 17 significant
    digits, '.' decimal."""
    idx = np.argwhere(f.region.mask)
    vals = f.values[f.region.mask]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"i{a}" for a in range(f.grid.dim)] + ["value"])
        for row, v in zip(idx, vals):
            writer.writerow([*map(int, row), format(v, ".17g")])
