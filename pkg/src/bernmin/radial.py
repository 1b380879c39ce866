"""Closed-form radial machinery: slope function, zero-core profiles, radial
energies, the boundary-constant threshold, and 1D minimization over the
radial family.  This is the independent upper-bound oracle for the full
solver on ball domains.

Formulas assume d >= 3 (they carry d-2 in denominators); the general grid
solver still runs d = 2 experiments, it just cannot use this oracle.
Everything here is a pure function; parameter sweeps parallelize trivially.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from bernmin.field import Region, ScalarField, area_sphere
from bernmin.weights import BernoulliWeight, WeightError, singular_shell_weight

QUAD_RELTOL = 1e-10


class RadialError(ValueError):
    pass


@dataclass(frozen=True)
class RadialConfig:
    d: int
    q: float
    m: float
    plateau_rule: str = "tau_consistent"

    def __post_init__(self):
        if self.d < 3:
            raise RadialError("radial formulas need d >= 3")
        if self.q <= 1.0:
            raise RadialError("need q > 1")
        if self.m <= 0.0:
            raise RadialError("need m > 0")
        if self.plateau_rule not in ("tau_consistent", "as_printed"):
            raise RadialError(f"unknown plateau rule {self.plateau_rule!r}")


def tau(r: float, c: RadialConfig) -> float:
    """Slope of the zero-core harmonic profile at its free radius:
    tau(r) = m (d-2) / (r - r^(d-1))."""
    if not 0.0 < r < 1.0:
        raise RadialError("tau needs r in (0, 1)")
    return c.m * (c.d - 2) / (r - r ** (c.d - 1))


def r_star(d: int) -> float:
    """Radius minimizing tau: (1/(d-1))^(1/(d-2))."""
    if d < 3:
        raise RadialError("r_star needs d >= 3")
    return (1.0 / (d - 1)) ** (1.0 / (d - 2))


def r_outer(d: int) -> float:
    """Midpoint (1 + r_star)/2, the outer edge of the singular shell."""
    return 0.5 * (1.0 + r_star(d))


def plateau_value(c: RadialConfig) -> float:
    """Plateau of the shell weight.

    ``tau_consistent``: tau(r_star)^2 = (m r_star^(1-d))^2, the value that
    makes the slope-comparison chain sqrt(plateau) = tau(r_star) hold.
    ``as_printed``: (m r_star^(d-1))^2, the dimensionally inconsistent
    variant kept for side-by-side runs.
    """
    rs = r_star(c.d)
    if c.plateau_rule == "tau_consistent":
        return (c.m * rs ** (1 - c.d)) ** 2
    return (c.m * rs ** (c.d - 1)) ** 2


def make_shell_weight(c: RadialConfig) -> BernoulliWeight:
    """The three-branch radial weight: plateau core, inverse-power shell
    (rho - r_star)^(-1/q) on [r_star, r_outer), plateau beyond."""
    return singular_shell_weight(
        r_star(c.d), r_outer(c.d), c.q, plateau_value(c), amplitude=1.0
    )


@dataclass(frozen=True)
class RadialProfile:
    """u_r: zero in B_r, harmonic annulus profile reaching m at |x| = 1."""

    r: float
    d: int
    m: float

    def __call__(self, rho):
        rho = np.asarray(rho, dtype=float)
        p = 2 - self.d
        safe = np.maximum(rho, 1e-300)
        vals = self.m * (self.r**p - safe**p) / (self.r**p - 1.0)
        return np.where(rho < self.r, 0.0, vals)

    def slope(self, rho):
        """Radial derivative for rho > r."""
        rho = np.asarray(rho, dtype=float)
        p = 2 - self.d
        return self.m * (self.d - 2) * rho ** (1 - self.d) / (self.r**p - 1.0)

    def field(self, region: Region, center=None) -> ScalarField:
        grid = region.grid
        ctr = np.zeros(grid.dim) if center is None else np.asarray(center)
        mesh = grid.center_mesh()
        rho = np.sqrt(sum((mm - cc) ** 2 for mm, cc in zip(mesh, ctr)))
        return ScalarField(region, self(rho))


def radial_profile(r: float, c: RadialConfig) -> RadialProfile:
    if not 0.0 < r < 1.0:
        raise RadialError("profile radius must lie in (0, 1)")
    return RadialProfile(r=r, d=c.d, m=c.m)


def _weight_radial_data(w: BernoulliWeight, d: int):
    """(phi(rho) callable, breakpoints, singular substitution data) for a
    radially symmetric weight centered at the origin."""
    if w.kind == "constant":
        cval = w.params["c"]
        return (lambda rho: np.full_like(np.asarray(rho, dtype=float), cval)), [], None
    if w.kind == "singular_shell":
        p = w.params
        if p["center"] is not None and any(abs(x) > 0 for x in p["center"]):
            raise RadialError("non-radial weight")

        def phi(rho):
            rho = np.asarray(rho, dtype=float)
            out = np.full(rho.shape, p["plateau"])
            mid = (rho >= p["r_inner"]) & (rho < p["r_outer"])
            out[mid] = p["amplitude"] * (rho[mid] - p["r_inner"]) ** (-1.0 / p["q"])
            return out

        return phi, [p["r_inner"], p["r_outer"]], (p["r_inner"], p["r_outer"], p["q"], p["amplitude"], p["plateau"])
    if w.kind == "point_singularity":
        p = w.params
        if any(abs(x) > 0 for x in p["center"]):
            raise RadialError("non-radial weight")

        def phi(rho):
            rho = np.asarray(rho, dtype=float)
            with np.errstate(divide="ignore"):
                return p["amplitude"] * rho ** (-p["exponent"])

        return phi, [0.0], None
    raise RadialError(f"weight kind {w.kind!r} is not radially symmetric")


def weighted_shell_integral(w: BernoulliWeight, d: int, a: float, b: float) -> float:
    """int_a^b phi(rho) rho^(d-1) d rho to relative accuracy ~1e-8.

    The integrable shell singularity (rho - r_in)^(-1/q) is removed by the
    substitution s = (rho - r_in)^(1 - 1/q); everything else goes to
    adaptive quadrature split at the branch points.
    """
    if b <= a:
        return 0.0
    phi, breaks, shell = _weight_radial_data(w, d)
    total = 0.0
    if shell is not None:
        r_in, r_out, q, amp, _plateau = shell
        lo = max(a, r_in)
        hi = min(b, r_out)
        if hi > lo:
            # substitution: s = (rho - r_in)^(1-1/q), rho = r_in + s^(q/(q-1))
            beta = q / (q - 1.0)

            def g(s):
                rho = r_in + s**beta
                return rho ** (d - 1)

            s0 = (lo - r_in) ** (1.0 / beta) if lo > r_in else 0.0
            s1 = (hi - r_in) ** (1.0 / beta)
            val, _ = quad(g, s0, s1, epsrel=QUAD_RELTOL, epsabs=0.0, limit=200)
            total += amp * beta * val
        # the smooth remainder of [a, b] outside the singular branch
        segments = [(a, min(b, r_in)), (max(a, r_out), b)]
    else:
        pts = sorted({a, b, *[p for p in breaks if a < p < b]})
        segments = list(zip(pts[:-1], pts[1:]))
    for lo, hi in segments:
        if hi > lo:
            val, _ = quad(
                lambda rho: float(phi(rho)) * rho ** (d - 1),
                lo,
                hi,
                epsrel=QUAD_RELTOL,
                epsabs=0.0,
                limit=200,
            )
            total += val
    return total


def radial_energy(r: float, c: RadialConfig, w: BernoulliWeight) -> float:
    """Energy of the zero-core profile u_r:
    area_sphere(d) * ( m^2 (d-2) / (r^(2-d) - 1) + int_r^1 phi rho^(d-1) )."""
    if not 0.0 < r < 1.0:
        raise RadialError("radius must lie in (0, 1)")
    dirichlet = c.m**2 * (c.d - 2) / (r ** (2 - c.d) - 1.0)
    indicator = weighted_shell_integral(w, c.d, r, 1.0)
    return area_sphere(c.d) * (dirichlet + indicator)


def constant_state_energy(c: RadialConfig, w: BernoulliWeight) -> float:
    """Energy of u = m (positivity fills the ball): int_{B_1} phi."""
    return area_sphere(c.d) * weighted_shell_integral(w, c.d, 0.0, 1.0)


def m_threshold(d: int, q: float) -> float:
    """Largest boundary constant for which the zero-core profile at r_outer
    beats u = m: sqrt( ((r_outer)^(2-d) - 1)/(d-2) *
    int_{r_star}^{r_outer} (rho - r_star)^(-1/q) rho^(d-1) )."""
    rs, ro = r_star(d), r_outer(d)
    shell = singular_shell_weight(rs, ro, q, plateau=0.0)
    integral = weighted_shell_integral(shell, d, rs, ro)
    return math.sqrt((ro ** (2 - d) - 1.0) / (d - 2) * integral)


@dataclass(eq=False)
class RadialScan:
    r: np.ndarray
    energy: np.ndarray
    r_opt: float
    energy_opt: float
    at_bound: bool


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_refine(f, a, b, tol):
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
    xm = 0.5 * (a + b)
    return xm, f(xm)


def minimize_radial(
    c: RadialConfig,
    w: BernoulliWeight,
    r_bounds: tuple[float, float] = (1e-3, 1.0 - 1e-3),
    coarse: int = 256,
    tol: float = 1e-6,
) -> RadialScan:
    """Best zero-core radius by coarse scan plus golden-section refinement.

    The energy need not be unimodal (the weight is not monotone), so every
    local basin detected on the coarse scan is refined and the best
    candidate returned; a boundary flag reports optima pinned at the scan
    bounds.  Never returns an energy above any scanned value.
    """
    lo, hi = r_bounds
    if not 0.0 < lo < hi < 1.0:
        raise RadialError("scan bounds must satisfy 0 < lo < hi < 1")
    rs = np.linspace(lo, hi, coarse)
    es = np.array([radial_energy(r, c, w) for r in rs])

    def f(r):
        return radial_energy(r, c, w)

    best_r, best_e = float(rs[np.argmin(es)]), float(es.min())
    at_bound = np.argmin(es) in (0, coarse - 1)
    interior = [
        k
        for k in range(1, coarse - 1)
        if es[k] <= es[k - 1] and es[k] <= es[k + 1]
    ]
    for k in interior:
        r_ref, e_ref = _golden_refine(f, rs[k - 1], rs[k + 1], tol)
        if e_ref < best_e:
            best_r, best_e, at_bound = r_ref, e_ref, False
    return RadialScan(rs, es, best_r, min(best_e, float(es.min())), at_bound)
