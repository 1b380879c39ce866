"""Free-boundary measurements: boundary extraction, growth-exponent fits,
density ratios, the cusp-exponent formula, BMO seminorms, Harnack ratios.

Measurement conventions:

* sup-growth is measured over dyadic shells rather than pointwise values
  (shells suppress grid anisotropy noise),
* every radius is floored at 4h by default; below that the discrete
  interface width contaminates geometric quantities,
* empirical constants are recorded and compared across resolutions, never
  asserted against theory constants.

All measurements are pure functions of read-only fields; they parallelize
over points and radii trivially.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.ndimage as ndi

from bernmin.field import Region, ScalarField, ball_mean_oscillation, vol_ball


class AnalyzeError(ValueError):
    pass


def _distance_sq(grid, x0):
    mesh = grid.center_mesh()
    return sum((mm - cc) ** 2 for mm, cc in zip(mesh, x0))


def extract_free_boundary(u: ScalarField, gamma: float, eta: float | None = None) -> np.ndarray:
    """Centers of cells with u > gamma + eta having a face neighbor (inside
    the mask) with u <= gamma + eta.  Returns an (n_points, d) array."""
    region = u.region
    if eta is None:
        top = float(u.masked().max())
        eta = 1e-9 * max(top - gamma, 1.0)
    pos = (u.values > gamma + eta) & region.mask
    nonpos = ~pos & region.mask
    struct = ndi.generate_binary_structure(region.grid.dim, 1)
    fb = pos & ndi.binary_dilation(nonpos, structure=struct)
    if not fb.any():
        return np.empty((0, region.grid.dim))
    mesh = region.grid.center_mesh()
    return np.stack([mm[fb] for mm in mesh], axis=-1)


@dataclass(eq=False)
class ExponentFit:
    alpha: float
    residual: float
    radii: np.ndarray
    sup_values: np.ndarray


def _dyadic_radii(r_min: float, r_max: float, h: float) -> np.ndarray:
    floor = max(r_min, 4.0 * h)
    radii = []
    r = r_max
    while r >= floor * (1.0 - 1e-12):
        radii.append(r)
        r *= 0.5
    return np.asarray(radii)


def fit_growth_exponent(
    u: ScalarField,
    x0,
    r_min: float,
    r_max: float,
    center_value: float | None = None,
    radius_floor: float | None = None,
) -> ExponentFit:
    """Least-squares slope of log sup_shell |u - u(x0)| against log r over
    dyadic shells r, r/2, ...; the residual is the RMS misfit of the line."""
    grid = u.region.grid
    h = max(grid.spacing)
    floor = radius_floor if radius_floor is not None else 4.0 * h
    radii = _dyadic_radii(max(r_min, floor), r_max, 0.0)
    if radii.size < 4:
        raise AnalyzeError("need at least 4 dyadic radii above the floor")
    if center_value is None:
        center_value = u.value_at(x0)
    dist2 = _distance_sq(grid, x0)
    sups = np.empty(radii.size)
    attained = np.empty(radii.size)
    for k, r in enumerate(radii):
        shell = (dist2 < r**2) & (dist2 >= (r / 2) ** 2) & u.region.mask
        if not shell.any():
            raise AnalyzeError(f"empty shell at radius {r}")
        devs = np.abs(u.values[shell] - center_value)
        j = int(np.argmax(devs))
        sups[k] = devs[j]
        # abscissa = where the sup is attained, which removes the O(h)
        # shell-edge bias that a nominal dyadic radius would introduce
        attained[k] = math.sqrt(float(dist2[shell][j]))
    if (sups <= 0).any() or (attained <= 0).any():
        raise AnalyzeError("sup values vanish; nothing to fit")
    x = np.log(attained)
    y = np.log(sups)
    slope, intercept = np.polyfit(x, y, 1)
    resid = math.sqrt(float(np.mean((y - (slope * x + intercept)) ** 2)))
    return ExponentFit(float(slope), resid, attained, sups)


@dataclass(eq=False)
class DensityTable:
    radii: np.ndarray
    positive_ratio: np.ndarray  # |{u>gamma} cap B_r| / |B_r|^(alpha2/alpha1)
    zero_ratio: np.ndarray  # |{u<=gamma} cap B_r| / |B_r|^P
    positive_fraction: np.ndarray  # plain volume fraction
    exponent_pos: float
    exponent_zero: float
    empirical_c: float


def cusp_exponent(q_minus: float, q_plus: float, d: int) -> float:
    """P(q-, q+) = (alpha2/alpha1 - 1/q-) q+ / (q+ - 1) with
    alpha1 = 1 - d/(2 q+), alpha2 = 1 - d/(2 q-)."""
    if not (q_plus >= q_minus > d / 2):
        raise AnalyzeError("need q+ >= q- > d/2")
    alpha1 = 1.0 - d / (2.0 * q_plus)
    alpha2 = 1.0 - d / (2.0 * q_minus)
    return (alpha2 / alpha1 - 1.0 / q_minus) * q_plus / (q_plus - 1.0)


def density_ratios(
    u: ScalarField,
    x0,
    gamma: float,
    radii,
    alpha1: float | None = None,
    alpha2: float | None = None,
    q_minus: float | None = None,
    q_plus: float | None = None,
    eta: float | None = None,
) -> DensityTable:
    """Normalized phase-volume ratios around a free boundary point across
    dyadic radii; radii under 4h are dropped.  The minimum positive-phase
    ratio over radii is reported as the empirical constant."""
    grid = u.region.grid
    d = grid.dim
    if alpha1 is None:
        alpha1 = 1.0 - d / (2.0 * q_plus)
    if alpha2 is None:
        alpha2 = 1.0 - d / (2.0 * q_minus)
    if q_minus is not None and q_plus is not None:
        p_exp = cusp_exponent(q_minus, q_plus, d)
    else:
        p_exp = 1.0
    if eta is None:
        top = float(u.masked().max())
        eta = 1e-9 * max(top - gamma, 1.0)
    h = max(grid.spacing)
    radii = np.asarray([r for r in np.sort(np.asarray(radii, dtype=float))[::-1] if r >= 4 * h])
    if radii.size == 0:
        raise AnalyzeError("all radii fall under the 4h floor")
    dist2 = _distance_sq(grid, x0)
    vol = grid.cell_volume
    pos_ratio = np.empty(radii.size)
    zero_ratio = np.empty(radii.size)
    frac = np.empty(radii.size)
    for k, r in enumerate(radii):
        ball = (dist2 < r**2) & u.region.mask
        nball = ball.sum()
        if nball == 0:
            raise AnalyzeError(f"no cells in ball radius {r}")
        pos = ball & (u.values > gamma + eta)
        ball_measure = nball * vol
        pos_measure = pos.sum() * vol
        zero_measure = ball_measure - pos_measure
        pos_ratio[k] = pos_measure / ball_measure ** (alpha2 / alpha1)
        zero_ratio[k] = zero_measure / ball_measure**p_exp
        frac[k] = pos_measure / ball_measure
    return DensityTable(
        radii, pos_ratio, zero_ratio, frac, alpha2 / alpha1, p_exp, float(pos_ratio.min())
    )


def bmo_seminorm(
    u: ScalarField,
    region: Region | None = None,
    n_balls: int = 64,
    seed: int = 0,
    r_max_cap: float | None = None,
) -> float:
    """Max mean oscillation over randomly placed balls, radii log-uniform in
    [4h, dist(center, boundary)]; deterministic given the seed."""
    if n_balls < 32:
        raise AnalyzeError("need at least 32 sample balls")
    region = region or u.region
    grid = region.grid
    h = max(grid.spacing)
    rng = np.random.default_rng(seed)
    # distance to the region boundary (in physical units)
    dist = ndi.distance_transform_edt(region.mask, sampling=grid.spacing)
    eligible = np.argwhere(region.mask & (dist > 4.0 * h))
    if eligible.size == 0:
        raise AnalyzeError("region has no interior deeper than 4h")
    mesh = grid.center_mesh()
    worst = 0.0
    for _ in range(n_balls):
        row = eligible[rng.integers(len(eligible))]
        center = tuple(mesh[a][tuple(row)] for a in range(grid.dim))
        r_hi = float(dist[tuple(row)])
        if r_max_cap is not None:
            r_hi = min(r_hi, r_max_cap)
        r_hi = max(r_hi, 4.0 * h * (1 + 1e-9))
        r = math.exp(rng.uniform(math.log(4.0 * h), math.log(r_hi)))
        worst = max(worst, ball_mean_oscillation(u, center, r))
    return worst


def harnack_ratio(u: ScalarField, center, radius: float, gamma: float = 0.0) -> float:
    """max u / min u over the ball; errors if the ball touches {u <= gamma}."""
    dist2 = _distance_sq(u.region.grid, center)
    ball = (dist2 < radius**2) & u.region.mask
    if not ball.any():
        raise AnalyzeError("ball contains no cells")
    vals = u.values[ball]
    if vals.min() <= gamma:
        raise AnalyzeError("ball touches the non-positive phase")
    return float(vals.max() / vals.min())


def shell_max_slope(u: ScalarField, x0, radii, center_value: float | None = None) -> np.ndarray:
    """Per-shell max of |u - u(x0)| / dist; a diverging-gradient proxy."""
    grid = u.region.grid
    if center_value is None:
        center_value = u.value_at(x0)
    dist2 = _distance_sq(grid, x0)
    out = np.empty(len(radii))
    for k, r in enumerate(radii):
        shell = (dist2 < r**2) & (dist2 >= (r / 2) ** 2) & u.region.mask
        if not shell.any():
            raise AnalyzeError(f"empty shell at radius {r}")
        d = np.sqrt(dist2[shell])
        out[k] = float((np.abs(u.values[shell] - center_value) / d).max())
    return out


def gradient_magnitude(u: ScalarField) -> ScalarField:
    """Cell-centered |grad u| from central differences inside the mask."""
    grid = u.region.grid
    g2 = np.zeros(grid.shape)
    for a in range(grid.dim):
        d = np.gradient(u.values, grid.spacing[a], axis=a)
        g2 += d * d
    return ScalarField(u.region, np.sqrt(g2))


def caccioppoli_ratio(
    u: ScalarField,
    inner_dirichlet: float,
    l2_full: float,
    phi_weak_norm: float,
) -> float:
    """int_{B_1/2} |grad u|^2 / (int_{B_1} u^2 + ||phi||_weak-Lq)."""
    denom = l2_full**2 + phi_weak_norm
    if denom <= 0:
        raise AnalyzeError("degenerate denominator")
    return inner_dirichlet / denom


# ---------------------------------------------------------------------------
# report container


@dataclass(eq=False)
class FreeBoundaryReport:
    points: np.ndarray
    fits: list = dc_field(default_factory=list)  # per-point dicts
    density: list = dc_field(default_factory=list)
    bmo: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "points": [list(map(float, p)) for p in self.points],
            "per_point": self.fits,
            "density": self.density,
            "bmo": self.bmo,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)

    def write_csv(self, path):
        """Flattened: one row per (point, radius) pair of the exponent fits."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["point_index", "radius", "sup_value", "alpha_hat", "residual"])
            for i, rec in enumerate(self.fits):
                for r, s in zip(rec.get("radii", []), rec.get("sup_values", [])):
                    writer.writerow(
                        [
                            i,
                            format(r, ".17g"),
                            format(s, ".17g"),
                            format(rec["alpha_hat"], ".17g"),
                            format(rec["residual"], ".17g"),
                        ]
                    )


def build_report(
    u: ScalarField,
    gamma: float,
    points=None,
    r_min: float = 0.0,
    r_max: float = 0.25,
    density_radii=None,
    q_minus: float | None = None,
    q_plus: float | None = None,
    bmo_balls: int = 0,
    seed: int = 0,
    max_points: int = 32,
) -> FreeBoundaryReport:
    """Fit exponents (and optionally density ratios, BMO) at free boundary
    points; ``points`` defaults to a deterministic subsample of the
    extracted boundary."""
    if points is None:
        points = extract_free_boundary(u, gamma)
        if len(points) > max_points:
            stride = len(points) // max_points
            points = points[::stride][:max_points]
    report = FreeBoundaryReport(np.asarray(points))
    for p in report.points:
        rec = {"point": list(map(float, p))}
        try:
            fit = fit_growth_exponent(u, p, r_min, r_max)
            rec.update(
                alpha_hat=fit.alpha,
                residual=fit.residual,
                radii=[float(r) for r in fit.radii],
                sup_values=[float(s) for s in fit.sup_values],
            )
        except AnalyzeError as err:
            rec["error"] = str(err)
        report.fits.append(rec)
        if density_radii is not None and q_minus is not None:
            try:
                tab = density_ratios(u, p, gamma, density_radii, q_minus=q_minus, q_plus=q_plus)
                report.density.append(
                    {
                        "point": list(map(float, p)),
                        "radii": [float(r) for r in tab.radii],
                        "positive_fraction": [float(v) for v in tab.positive_fraction],
                        "positive_ratio": [float(v) for v in tab.positive_ratio],
                        "zero_ratio": [float(v) for v in tab.zero_ratio],
                        "empirical_c": tab.empirical_c,
                    }
                )
            except AnalyzeError as err:
                report.density.append({"point": list(map(float, p)), "error": str(err)})
    if bmo_balls >= 32:
        report.bmo = bmo_seminorm(u, u.region, bmo_balls, seed)
    return report
