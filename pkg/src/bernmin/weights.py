"""Catalog of Bernoulli weights: analytic evaluation, cell averages, superlevels.

Weight kinds:

* ``constant``             phi = c
* ``point_singularity``    phi = c |x - xi|^(-e)
* ``manifold_distance``    phi = c dist(x, M)^(-e) for an axis-aligned affine
                           subspace M (singular on a line / plane / point)
* ``singular_shell``       three radial branches: plateau for |x| < r_in,
                           c (|x| - r_in)^(-1/q) for r_in <= |x| < r_out,
                           plateau again beyond r_out
* ``one_sided``            phi = base + c ((x - v) . n)^(-e) gated to the
                           half-space (x - v) . n > 0
* ``custom_table``         per-cell averages given directly
* ``sum``                  pointwise sum of component weights

Evaluation is exact and returns +inf exactly on singular sets.  Cell
averages are computed analytically or by singularity-aware quadrature
wherever a closed form or 1D reduction exists, and by stratified
Monte-Carlo (fixed per-cell seeds, >= 256 samples, relative standard
error <= 1%) otherwise.  An average is +inf exactly when the cell
integral diverges.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from bernmin.field import Grid, Region, ScalarField, weak_lq_norm

MC_MIN_SAMPLES = 256
MC_TARGET_RSE = 0.01
MC_MAX_ROUNDS = 6


class WeightError(ValueError):
    pass


@dataclass(frozen=True)
class Cone:
    """Cone {x : angle(x - vertex, axis) <= half_angle}; pi/2 is a half-space."""

    axis: tuple[float, ...]
    half_angle: float

    def contains(self, offsets: np.ndarray) -> np.ndarray:
        axis = np.asarray(self.axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        dots = offsets @ axis
        norms = np.linalg.norm(offsets, axis=-1)
        return dots >= norms * math.cos(self.half_angle) - 1e-15


@dataclass(eq=False)
class BernoulliWeight:
    kind: str
    params: dict = dc_field(default_factory=dict)
    components: tuple = ()

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return eval_weight(self, points)


def constant_weight(c: float) -> BernoulliWeight:
    if c < 0:
        raise WeightError("weights must be nonnegative")
    return BernoulliWeight("constant", {"c": float(c)})


def point_singularity_weight(center, exponent: float, amplitude: float = 1.0) -> BernoulliWeight:
    if amplitude < 0 or exponent <= 0:
        raise WeightError("need amplitude >= 0 and exponent > 0")
    return BernoulliWeight(
        "point_singularity",
        {"center": tuple(map(float, center)), "exponent": float(exponent), "amplitude": float(amplitude)},
    )


def manifold_distance_weight(point, free_axes, exponent: float, amplitude: float = 1.0) -> BernoulliWeight:
    """Inverse power of the distance to the axis-aligned affine subspace
    through ``point`` spanned by ``free_axes``."""
    return BernoulliWeight(
        "manifold_distance",
        {
            "point": tuple(map(float, point)),
            "free_axes": tuple(sorted(set(int(a) for a in free_axes))),
            "exponent": float(exponent),
            "amplitude": float(amplitude),
        },
    )


def singular_shell_weight(
    r_inner: float,
    r_outer: float,
    q: float,
    plateau: float,
    amplitude: float = 1.0,
    center=None,
) -> BernoulliWeight:
    if not 0.0 < r_inner < r_outer < 1.0 + 1e-12:
        raise WeightError("shell needs 0 < r_inner < r_outer <= 1")
    if q <= 1.0:
        raise WeightError("shell exponent parameter needs q > 1")
    if plateau < 0 or amplitude < 0:
        raise WeightError("weights must be nonnegative")
    return BernoulliWeight(
        "singular_shell",
        {
            "r_inner": float(r_inner),
            "r_outer": float(r_outer),
            "q": float(q),
            "plateau": float(plateau),
            "amplitude": float(amplitude),
            "center": None if center is None else tuple(map(float, center)),
        },
    )


def one_sided_weight(vertex, normal, exponent: float, amplitude: float = 1.0, base: float = 0.0) -> BernoulliWeight:
    if exponent <= 0 or amplitude < 0 or base < 0:
        raise WeightError("need exponent > 0 and nonnegative amplitude/base")
    normal = np.asarray(normal, dtype=float)
    return BernoulliWeight(
        "one_sided",
        {
            "vertex": tuple(map(float, vertex)),
            "normal": tuple((normal / np.linalg.norm(normal)).tolist()),
            "exponent": float(exponent),
            "amplitude": float(amplitude),
            "base": float(base),
        },
    )


def custom_table_weight(grid: Grid, averages: np.ndarray) -> BernoulliWeight:
    averages = np.asarray(averages, dtype=float)
    if averages.shape != grid.shape:
        raise WeightError("table shape does not match grid")
    if np.nanmin(averages) < 0:
        raise WeightError("weights must be nonnegative")
    return BernoulliWeight("custom_table", {"grid": grid, "averages": averages})


def sum_weight(*components: BernoulliWeight) -> BernoulliWeight:
    return BernoulliWeight("sum", {}, tuple(components))


# ---------------------------------------------------------------------------
# point evaluation


def eval_weight(w: BernoulliWeight, points) -> np.ndarray:
    """Exact analytic value at the given points, +inf on singular sets."""
    pts = np.asarray(points, dtype=float)
    scalar_input = pts.ndim == 1
    if scalar_input:
        pts = pts[None, :]
    out = _eval(w, pts)
    return out[0] if scalar_input else out


def _eval(w: BernoulliWeight, pts: np.ndarray) -> np.ndarray:
    p = w.params
    if w.kind == "constant":
        return np.full(pts.shape[:-1], p["c"])
    if w.kind == "point_singularity":
        dist = np.linalg.norm(pts - np.asarray(p["center"]), axis=-1)
        with np.errstate(divide="ignore"):
            return p["amplitude"] * dist ** (-p["exponent"])
    if w.kind == "manifold_distance":
        normal_axes = [a for a in range(pts.shape[-1]) if a not in p["free_axes"]]
        off = pts[..., normal_axes] - np.asarray(p["point"])[normal_axes]
        dist = np.linalg.norm(off, axis=-1)
        with np.errstate(divide="ignore"):
            return p["amplitude"] * dist ** (-p["exponent"])
    if w.kind == "singular_shell":
        center = p["center"]
        if center is None:
            center = (0.0,) * pts.shape[-1]
        rho = np.linalg.norm(pts - np.asarray(center), axis=-1)
        out = np.full(pts.shape[:-1], p["plateau"])
        mid = (rho >= p["r_inner"]) & (rho < p["r_outer"])
        with np.errstate(divide="ignore"):
            out[mid] = p["amplitude"] * (rho[mid] - p["r_inner"]) ** (-1.0 / p["q"])
        return out
    if w.kind == "one_sided":
        t = (pts - np.asarray(p["vertex"])) @ np.asarray(p["normal"])
        out = np.full(pts.shape[:-1], p["base"])
        pos = t > 0
        out[pos] += p["amplitude"] * t[pos] ** (-p["exponent"])
        # on the hyperplane itself the gated branch is approached from t>0
        out[t == 0] = np.inf if p["amplitude"] > 0 else p["base"]
        return out
    if w.kind == "custom_table":
        grid: Grid = p["grid"]
        flat = pts.reshape(-1, pts.shape[-1])
        idx = []
        for a in range(grid.dim):
            lo = grid.extents[a][0]
            ia = np.floor((flat[:, a] - lo) / grid.spacing[a]).astype(int)
            idx.append(np.clip(ia, 0, grid.resolution[a] - 1))
        return p["averages"][tuple(idx)].reshape(pts.shape[:-1])
    if w.kind == "sum":
        return sum(_eval(c, pts) for c in w.components)
    raise WeightError(f"unknown weight kind {w.kind!r}")


# ---------------------------------------------------------------------------
# cell averages

_gauss_nodes, _gauss_wts = np.polynomial.legendre.leggauss(4)
_gauss_nodes = 0.5 * (_gauss_nodes + 1.0)  # map to [0, 1]
_gauss_wts = 0.5 * _gauss_wts


def _power_box_integral(lo, hi, center, exponent, depth=36):
    """Integral of |x - center|^(-exponent) over the box [lo, hi] in R^k.

    Recursive dyadic subdivision toward the singular point; boxes well
    separated from it are integrated by a 4^k tensor Gauss rule.  Returns
    +inf exactly when the integral diverges (exponent >= k with the
    singular point in the closed box).
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    c = np.asarray(center, dtype=float)
    k = lo.size
    inside = bool(np.all(c >= lo - 1e-15) and np.all(c <= hi + 1e-15))
    if inside and exponent >= k:
        return math.inf

    def gauss(lo_, hi_):
        sides = hi_ - lo_
        axes = [lo_[a] + sides[a] * _gauss_nodes for a in range(k)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        wts = _gauss_wts
        for _ in range(k - 1):
            wts = np.multiply.outer(wts, _gauss_wts)
        r = np.linalg.norm(pts - c, axis=-1)
        return float(np.sum(wts.ravel() * r ** (-exponent)) * np.prod(sides))

    def recurse(lo_, hi_, level):
        diam = float(np.linalg.norm(hi_ - lo_))
        gap = float(np.linalg.norm(np.clip(c, lo_, hi_) - c))
        if gap >= diam or level == 0:
            return gauss(lo_, hi_)
        mid = 0.5 * (lo_ + hi_)
        total = 0.0
        for bits in itertools.product((0, 1), repeat=k):
            clo = np.where(bits, mid, lo_)
            chi = np.where(bits, hi_, mid)
            total += recurse(clo, chi, level - 1)
        return total

    return recurse(lo, hi, depth)


def _shell_branch_antiderivative(s, r_in, d, q):
    """Antiderivative of s^(-1/q) (s + r_in)^(d-1) with s = rho - r_in >= 0."""
    s = np.asarray(s, dtype=float)
    total = np.zeros_like(s)
    for k in range(d):
        coef = math.comb(d - 1, k) * r_in ** (d - 1 - k)
        power = k + 1.0 - 1.0 / q
        total += coef * s**power / power
    return total


def _poly_antiderivative(rho, d):
    """Antiderivative of rho^(d-1)."""
    return np.asarray(rho, dtype=float) ** d / d


def _shell_weighted_integral(p: dict, d: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Integral over [a, b] of phi_shell(rho) rho^(d-1) d rho, exact per branch."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r_in, r_out = p["r_inner"], p["r_outer"]
    plateau, amp, q = p["plateau"], p["amplitude"], p["q"]

    def plateau_part(x0, x1):
        return plateau * (_poly_antiderivative(x1, d) - _poly_antiderivative(x0, d))

    out = np.zeros(np.broadcast(a, b).shape)
    # inner plateau [0, r_in)
    x0 = np.clip(a, None, r_in)
    x1 = np.clip(b, None, r_in)
    out += plateau_part(x0, x1)
    # singular branch [r_in, r_out)
    x0 = np.clip(a, r_in, r_out) - r_in
    x1 = np.clip(b, r_in, r_out) - r_in
    out += amp * (
        _shell_branch_antiderivative(x1, r_in, d, q)
        - _shell_branch_antiderivative(x0, r_in, d, q)
    )
    # outer plateau [r_out, inf)
    x0 = np.clip(a, r_out, None)
    x1 = np.clip(b, r_out, None)
    out += plateau_part(x0, x1)
    return out


def _cell_bounds(grid: Grid):
    mesh = grid.center_mesh()
    h = grid.spacing
    lo = np.stack([m - 0.5 * hh for m, hh in zip(mesh, h)], axis=-1)
    hi = np.stack([m + 0.5 * hh for m, hh in zip(mesh, h)], axis=-1)
    return lo, hi


def _radial_range(lo, hi, center):
    """Exact min/max of |x - center| over each box [lo, hi]."""
    c = np.asarray(center, dtype=float)
    nearest = np.clip(c, lo, hi)
    d_min = np.linalg.norm(nearest - c, axis=-1)
    farthest = np.where(np.abs(lo - c) > np.abs(hi - c), lo, hi)
    d_max = np.linalg.norm(farthest - c, axis=-1)
    return d_min, d_max


def _mc_cell_average(w: BernoulliWeight, grid: Grid, flat_index: int, seed: int) -> float:
    """Stratified Monte-Carlo average over one cell, fixed per-cell seed."""
    idx = np.unravel_index(flat_index, grid.shape)
    lo = np.array([grid.extents[a][0] + idx[a] * grid.spacing[a] for a in range(grid.dim)])
    h = np.asarray(grid.spacing)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, flat_index)))
    strata = 2  # per axis
    n_strata = strata**grid.dim
    per = max(MC_MIN_SAMPLES // n_strata, 4)
    offsets = np.array(list(itertools.product(range(strata), repeat=grid.dim)))
    total = 0
    mean = 0.0
    var_acc = 0.0
    for _ in range(MC_MAX_ROUNDS):
        u = rng.random((n_strata, per, grid.dim))
        pts = lo + (offsets[:, None, :] + u) * (h / strata)
        vals = _eval(w, pts.reshape(-1, grid.dim))
        if np.isinf(vals).any():
            return math.inf
        total += vals.size
        mean = float(vals.mean()) if total == vals.size else (mean * (total - vals.size) + vals.sum()) / total
        var_acc = float(vals.var())
        se = math.sqrt(var_acc / total)
        if mean == 0.0 or se <= MC_TARGET_RSE * abs(mean):
            break
        per *= 2
    return mean


def cell_averages(w: BernoulliWeight, grid: Grid, seed: int = 0) -> np.ndarray:
    """Per-cell mean of the weight over every grid cell (+inf where the cell
    integral diverges)."""
    d = grid.dim
    vol = grid.cell_volume
    p = w.params
    if w.kind == "constant":
        return np.full(grid.shape, p["c"])
    if w.kind == "custom_table":
        if p["grid"].shape != grid.shape:
            raise WeightError("custom table was built for a different grid")
        return p["averages"].copy()
    if w.kind == "sum":
        return sum(cell_averages(c, grid, seed) for c in w.components)
    if w.kind == "point_singularity":
        return _point_singularity_averages(p, grid)
    if w.kind == "manifold_distance":
        return _manifold_averages(p, grid)
    if w.kind == "singular_shell":
        center = p["center"] or (0.0,) * d
        lo, hi = _cell_bounds(grid)
        r0, r1 = _radial_range(lo, hi, center)
        r1 = np.maximum(r1, r0 + 1e-300)
        num = _shell_weighted_integral(p, d, r0, r1)
        den = _poly_antiderivative(r1, d) - _poly_antiderivative(r0, d)
        den = np.maximum(den, 1e-300)
        return num / den
    if w.kind == "one_sided":
        return _one_sided_averages(w, p, grid, seed)
    raise WeightError(f"unknown weight kind {w.kind!r}")


def _point_singularity_averages(p: dict, grid: Grid) -> np.ndarray:
    d = grid.dim
    center = np.asarray(p["center"])
    e = p["exponent"]
    amp = p["amplitude"]
    lo, hi = _cell_bounds(grid)
    d_min, _ = _radial_range(lo, hi, center)
    diam = float(np.linalg.norm(grid.spacing))
    out = np.empty(grid.shape)
    far = d_min >= diam
    # far cells: tensor Gauss on the smooth integrand
    pts_w = _tensor_gauss_points(grid, far)
    r = np.linalg.norm(pts_w[0] - center, axis=-1)
    out[far] = amp * np.sum(pts_w[1] * r ** (-e), axis=-1)
    # near cells: recursive singular quadrature
    for idx in np.argwhere(~far):
        cl = lo[tuple(idx)]
        ch = hi[tuple(idx)]
        out[tuple(idx)] = amp * _power_box_integral(cl, ch, center, e) / grid.cell_volume
    return out


def _tensor_gauss_points(grid: Grid, cellmask: np.ndarray):
    """Gauss points/weights for the selected cells: (pts (n, 4^d, d), wts (4^d,))."""
    d = grid.dim
    h = np.asarray(grid.spacing)
    lo, _ = _cell_bounds(grid)
    los = lo[cellmask]
    axes = [(_gauss_nodes * h[a]) for a in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    offs = np.stack([m.ravel() for m in mesh], axis=-1)
    wts = _gauss_wts
    for _ in range(d - 1):
        wts = np.multiply.outer(wts, _gauss_wts)
    pts = los[:, None, :] + offs[None, :, :]
    return pts, wts.ravel()


def _manifold_averages(p: dict, grid: Grid) -> np.ndarray:
    d = grid.dim
    free = p["free_axes"]
    normal_axes = [a for a in range(d) if a not in free]
    k = len(normal_axes)
    if k == 0:
        raise WeightError("manifold must have positive codimension")
    e = p["exponent"]
    amp = p["amplitude"]
    point = np.asarray(p["point"])[normal_axes]
    # the weight is constant along free axes: average over the normal box
    lo, hi = _cell_bounds(grid)
    lo_n = lo[..., normal_axes]
    hi_n = hi[..., normal_axes]
    gap = np.linalg.norm(np.clip(point, lo_n, hi_n) - point, axis=-1)
    diam = math.sqrt(sum(grid.spacing[a] ** 2 for a in normal_axes))
    vol_n = math.prod(grid.spacing[a] for a in normal_axes)
    out = np.empty(grid.shape)
    far = gap >= diam
    # smooth cells: Gauss in the normal coordinates
    axes = [(_gauss_nodes * grid.spacing[a]) for a in normal_axes]
    mesh = np.meshgrid(*axes, indexing="ij")
    offs = np.stack([m.ravel() for m in mesh], axis=-1)
    wts = _gauss_wts
    for _ in range(k - 1):
        wts = np.multiply.outer(wts, _gauss_wts)
    pts = lo_n[far][:, None, :] + offs[None, :, :]
    r = np.linalg.norm(pts - point, axis=-1)
    out[far] = amp * np.sum(wts.ravel() * r ** (-e), axis=-1)
    for idx in np.argwhere(~far):
        cl = lo_n[tuple(idx)]
        ch = hi_n[tuple(idx)]
        out[tuple(idx)] = amp * _power_box_integral(cl, ch, point, e) / vol_n
    return out


def _one_sided_averages(w: BernoulliWeight, p: dict, grid: Grid, seed: int) -> np.ndarray:
    d = grid.dim
    normal = np.asarray(p["normal"])
    e = p["exponent"]
    amp, base = p["amplitude"], p["base"]
    axis_aligned = np.count_nonzero(np.abs(normal) > 1e-14) == 1
    if axis_aligned:
        axis = int(np.argmax(np.abs(normal)))
        sign = math.copysign(1.0, normal[axis])
        lo, hi = _cell_bounds(grid)
        # signed distance range of the cell along the normal
        a = sign * (lo[..., axis] if sign > 0 else hi[..., axis]) - sign * p["vertex"][axis]
        b = a + grid.spacing[axis]
        width = grid.spacing[axis]
        t0 = np.clip(a, 0.0, None)
        t1 = np.clip(b, 0.0, None)
        out = np.full(grid.shape, base)
        pos = t1 > t0
        if e >= 1.0:
            sing = pos & (t0 <= 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                piece = (t1 ** (1.0 - e) - t0 ** (1.0 - e)) / (1.0 - e) if e != 1.0 else np.log(t1 / np.maximum(t0, 1e-300))
            piece = np.where(pos, piece, 0.0)
            out = out + amp * piece / width
            out[sing] = math.inf
        else:
            piece = (t1 ** (1.0 - e) - t0 ** (1.0 - e)) / (1.0 - e)
            out = out + amp * np.where(pos, piece, 0.0) / width
        return out
    # general normal: stratified Monte-Carlo with fixed per-cell seeds
    out = np.empty(grid.shape)
    flat = out.reshape(-1)
    t_center = (grid.centers() - np.asarray(p["vertex"])) @ normal
    diam = float(np.linalg.norm(grid.spacing))
    smooth = np.abs(t_center) > diam
    pts_w = _tensor_gauss_points(grid, smooth.reshape(grid.shape))
    t = (pts_w[0] - np.asarray(p["vertex"])) @ normal
    vals = base + amp * np.where(t > 0, np.abs(t) ** (-e), 0.0)
    out[smooth.reshape(grid.shape)] = np.sum(pts_w[1] * vals, axis=-1)
    for flat_idx in np.flatnonzero(~smooth):
        flat[flat_idx] = _mc_cell_average(w, grid, int(flat_idx), seed)
    return out


def cell_average(w: BernoulliWeight, grid: Grid, index, seed: int = 0) -> float:
    """Mean of the weight over a single cell (+inf iff the integral diverges)."""
    # computed through the vectorized path to keep one set of conventions
    sub = cell_averages(w, grid, seed)
    return float(sub[tuple(index)])


# ---------------------------------------------------------------------------
# superlevel machinery


def superlevel_measure(w: BernoulliWeight, region: Region, t: float, x0, r: float, cone: Cone | None = None) -> float:
    """Cell-counted measure of {phi > t} within B_r(x0) (and the cone)."""
    if t <= 0 or r <= 0:
        raise WeightError("need t > 0 and r > 0")
    grid = region.grid
    pts = grid.centers()
    offs = pts - np.asarray(x0, dtype=float)
    inside = (np.linalg.norm(offs, axis=-1) < r) & region.mask.ravel()
    if cone is not None:
        inside &= cone.contains(offs)
    if not inside.any():
        return 0.0
    vals = _eval(w, pts[inside])
    return float(np.count_nonzero(vals > t) * grid.cell_volume)


def ball_measure(region: Region, x0, r: float, cone: Cone | None = None) -> float:
    grid = region.grid
    offs = grid.centers() - np.asarray(x0, dtype=float)
    inside = (np.linalg.norm(offs, axis=-1) < r) & region.mask.ravel()
    if cone is not None:
        inside &= cone.contains(offs)
    return float(np.count_nonzero(inside) * grid.cell_volume)


@dataclass(eq=False)
class SuperlevelProfile:
    center: tuple
    radii: np.ndarray
    thresholds: np.ndarray
    measures: np.ndarray  # shape (n_radii, n_thresholds)
    cone: Cone | None = None

    def __post_init__(self):
        m = self.measures
        if (np.diff(m, axis=1) > 1e-12).any():
            raise WeightError("superlevel measures must be nonincreasing in t")
        if (np.diff(m, axis=0) < -1e-12).any():
            raise WeightError("superlevel measures must be nondecreasing in r")


def superlevel_profile(w, region, x0, radii, thresholds, cone=None) -> SuperlevelProfile:
    radii = np.sort(np.asarray(radii, dtype=float))
    thresholds = np.sort(np.asarray(thresholds, dtype=float))
    meas = np.empty((radii.size, thresholds.size))
    for i, r in enumerate(radii):
        for j, t in enumerate(thresholds):
            meas[i, j] = superlevel_measure(w, region, t, x0, r, cone)
    return SuperlevelProfile(tuple(map(float, x0)), radii, thresholds, meas, cone)


def verify_growth_hypothesis(
    w: BernoulliWeight,
    region: Region,
    x0,
    p: float,
    sigma: float,
    radii,
    thresholds,
    cone: Cone | None = None,
    stability_ratio: float = 0.2,
) -> tuple[float, bool]:
    """Fit the largest c0 with measure{phi > t} >= min(c0 r^sigma t^-p, |B_r|)
    on the sampled (r, t) lattice.

    Pairs whose superlevel fills the whole (cone-restricted) ball impose no
    constraint.  The hypothesis fails when no positive constant works, or
    when the binding constraint degenerates (the per-pair bound at the
    binding pair is below ``stability_ratio`` times the typical bound),
    which is how a c0 that would have to vanish as r -> 0 shows up on a
    finite lattice.
    """
    radii = np.asarray(radii, dtype=float)
    thresholds = np.asarray(thresholds, dtype=float)
    if radii.size == 0 or thresholds.size == 0:
        raise WeightError("need nonempty radii and thresholds")
    bounds = []
    witness = 0.0
    for r in radii:
        bm = ball_measure(region, x0, r, cone)
        for t in thresholds:
            meas = superlevel_measure(w, region, t, x0, r, cone)
            scale = r**sigma * t ** (-p)
            if meas >= bm * (1.0 - 1e-12):
                witness = max(witness, bm / scale)
            else:
                bounds.append(meas / scale)
    if not bounds:
        return witness, witness > 0
    c0 = min(bounds)
    if c0 <= 0:
        return 0.0, False
    typical = float(np.median(bounds))
    return c0, c0 >= stability_ratio * typical


def weight_weak_lq_norm(w: BernoulliWeight, region: Region, q: float) -> float:
    """Weak-L^q norm of the weight sampled at cell centers (singular-set
    point hits, which have zero continuum measure, are ignored)."""
    vals = _eval(w, region.grid.centers()).reshape(region.grid.shape)
    finite_field = ScalarField(region, np.where(np.isfinite(vals), vals, 0.0))
    return weak_lq_norm(finite_field, q)


# ---------------------------------------------------------------------------
# transforms used by problem rescaling


def transform_weight(w: BernoulliWeight, x0, r: float, kappa: float) -> BernoulliWeight:
    """The weight x -> kappa^2 r^2 phi(x0 + r x), exact within the catalog."""
    s = kappa**2 * r**2
    p = w.params
    x0 = np.asarray(x0, dtype=float)
    if w.kind == "constant":
        return constant_weight(s * p["c"])
    if w.kind == "point_singularity":
        new_center = (np.asarray(p["center"]) - x0) / r
        return point_singularity_weight(new_center, p["exponent"], kappa**2 * r ** (2 - p["exponent"]) * p["amplitude"])
    if w.kind == "manifold_distance":
        new_point = (np.asarray(p["point"]) - x0) / r
        return manifold_distance_weight(new_point, p["free_axes"], p["exponent"], kappa**2 * r ** (2 - p["exponent"]) * p["amplitude"])
    if w.kind == "one_sided":
        new_vertex = (np.asarray(p["vertex"]) - x0) / r
        return one_sided_weight(new_vertex, p["normal"], p["exponent"], kappa**2 * r ** (2 - p["exponent"]) * p["amplitude"], s * p["base"])
    if w.kind == "singular_shell":
        center = np.asarray(p["center"] or (0.0,) * x0.size)
        if not np.allclose(center, x0):
            raise WeightError("shell weights only rescale exactly about their center")
        return singular_shell_weight(
            p["r_inner"] / r,
            p["r_outer"] / r,
            p["q"],
            s * p["plateau"],
            kappa**2 * r ** (2 - 1.0 / p["q"]) * p["amplitude"],
            center=(0.0,) * x0.size,
        )
    if w.kind == "sum":
        return sum_weight(*(transform_weight(c, x0, r, kappa) for c in w.components))
    raise WeightError(f"cannot rescale weight kind {w.kind!r} exactly")
