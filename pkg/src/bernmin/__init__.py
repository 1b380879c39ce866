"""bernmin: a desk-scale lab for Bernoulli free-boundary energy minimization.

Minimizes J(u) = sum grad u . (A grad u) + phi * 1_{u > gamma} over
cell-centered fields with fixed boundary data, and measures what the
free boundary does: growth exponents, density ratios, cusp formulas,
BMO seminorms.
"""

from bernmin.field import (
    CoefficientField,
    Grid,
    Region,
    ScalarField,
    area_sphere,
    ball_mean_oscillation,
    l2_norm,
    make_region,
    vol_ball,
    weak_lq_norm,
)

__all__ = [
    "CoefficientField",
    "Grid",
    "Region",
    "ScalarField",
    "area_sphere",
    "ball_mean_oscillation",
    "l2_norm",
    "make_region",
    "vol_ball",
    "weak_lq_norm",
]

__version__ = "0.1.0"
