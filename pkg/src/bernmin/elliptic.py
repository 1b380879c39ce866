"""Discrete divergence-form operator grad . (A grad .) and Dirichlet solves.

The bilinear form is the standard Q1 form on the dual mesh: cell centers
act as nodes, the boxes spanned by 2^d adjacent centers are trilinear
elements, and each element carries the average of its corner-cell
coefficient matrices.  The 2x2(x2) tensor Gauss rule integrates the
element form exactly, so the assembled matrix is symmetric and satisfies
lambda ||grad u||^2 <= u.K u <= Lambda ||grad u||^2 elementwise.

Solves are matrix-free-in-spirit: one global sparse matrix per region,
restricted to the active cells by masking, preconditioned conjugate
gradients with the Jacobi diagonal.  Rough coefficients defeat anything
smarter at these sizes.

apply_operator is pure and may run concurrently on shared inputs; the
conjugate-gradient loop is sequential.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp

from bernmin.field import CoefficientField, Region, ScalarField


def box_dilate(mask: np.ndarray) -> np.ndarray:
    """Dilation by the full 3^d neighborhood (element corners are diagonal
    neighbors, so Dirichlet layers must include them)."""
    return ndi.binary_dilation(mask, structure=np.ones((3,) * mask.ndim, dtype=bool))

BLOCK_ENTRY_BUDGET = 120_000_000  # above this, element blocks are streamed


class EllipticError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@lru_cache(maxsize=8)
def reference_gradient_matrices(d: int) -> np.ndarray:
    """Ghat[i, j, k, l] = int_{[0,1]^d} dN_k/dxi_i dN_l/dxi_j dxi for the
    2^d multilinear shape functions."""
    n = 1 << d
    bits = [[(k >> a) & 1 for a in range(d)] for k in range(n)]
    ghat = np.zeros((d, d, n, n))
    for i in range(d):
        for j in range(d):
            for k in range(n):
                for l in range(n):
                    term = 1.0
                    for a in range(d):
                        sk = 1.0 if bits[k][a] else -1.0
                        sl = 1.0 if bits[l][a] else -1.0
                        if a == i and a == j:
                            term *= sk * sl
                        elif a == i:
                            term *= sk * 0.5
                        elif a == j:
                            term *= sl * 0.5
                        else:
                            term *= 1.0 / 3.0 if bits[k][a] == bits[l][a] else 1.0 / 6.0
                    ghat[i, j, k, l] = term
    return ghat


def _corner_flat_indices(shape: tuple[int, ...]) -> np.ndarray:
    """Flat cell indices of the 2^d corners of every element, shape (E, 2^d)."""
    d = len(shape)
    flat = np.arange(int(np.prod(shape))).reshape(shape)
    corners = []
    for offsets in itertools.product((0, 1), repeat=d):
        sl = tuple(slice(o, n - 1 + o) for o, n in zip(offsets, shape))
        corners.append(flat[sl].ravel())
    # itertools orders offsets with the LAST axis fastest; shape-function bit
    # k has axis a in bit position a, so reorder to match
    order = [sum(b << a for a, b in enumerate(offs)) for offs in itertools.product((0, 1), repeat=d)]
    stacked = np.empty((corners[0].size, 1 << d), dtype=np.int64)
    for pos, k in enumerate(order):
        stacked[:, k] = corners[pos]
    return stacked


class DivergenceFormOperator:
    """Assembled Q1 form for one coefficient field over a region's
    conforming elements (optionally a sub-selection of them)."""

    def __init__(self, A: CoefficientField, element_mask: np.ndarray | None = None):
        self.A = A
        self.region = A.region
        grid = self.region.grid
        d = grid.dim
        elems = self.region.conforming_elements
        if element_mask is not None:
            elems = elems & element_mask
        self.element_mask = elems
        all_idx = _corner_flat_indices(grid.shape)
        self.idx = all_idx[elems.ravel()]
        self.n_elements = self.idx.shape[0]
        self.shape = grid.shape
        self.cell_volume = grid.cell_volume
        ghat = reference_gradient_matrices(d)
        h = np.asarray(grid.spacing)
        self._scale = grid.cell_volume / np.multiply.outer(h, h)
        mats = A.matrices.reshape(-1, d, d)
        self._abar = mats[self.idx].mean(axis=1)  # per-element coefficient
        self._ghat = ghat
        n = grid.total_cells
        entries = self.n_elements * (1 << d) ** 2
        if entries <= BLOCK_ENTRY_BUDGET:
            blocks = self._element_blocks(np.arange(self.n_elements))
            rows = np.repeat(self.idx, 1 << d, axis=1).ravel()
            cols = np.tile(self.idx, (1, 1 << d)).ravel()
            self.matrix = sp.coo_matrix(
                (blocks.ravel(), (rows, cols)), shape=(n, n)
            ).tocsr()
            self._diag = self.matrix.diagonal()
        else:  # stream the blocks; keep only what apply() needs
            self.matrix = None
            diag = np.zeros(n)
            chunk = max(1, BLOCK_ENTRY_BUDGET // (1 << d) ** 2)
            for start in range(0, self.n_elements, chunk):
                ids = np.arange(start, min(start + chunk, self.n_elements))
                blocks = self._element_blocks(ids)
                np.add.at(diag, self.idx[ids], np.einsum("ekk->ek", blocks))
            self._diag = diag

    def _element_blocks(self, element_ids: np.ndarray) -> np.ndarray:
        coef = np.einsum("eij,ij->eij", self._abar[element_ids], self._scale)
        return np.einsum("eij,ijkl->ekl", coef, self._ghat)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """K values, flattened over the grid (zero at untouched cells)."""
        v = values.ravel()
        if self.matrix is not None:
            return np.asarray(self.matrix @ v)
        out = np.zeros_like(v)
        chunk = max(1, BLOCK_ENTRY_BUDGET // (4 ** len(self.shape) * 8))
        for start in range(0, self.n_elements, chunk):
            ids = np.arange(start, min(start + chunk, self.n_elements))
            blocks = self._element_blocks(ids)
            local = np.einsum("ekl,el->ek", blocks, v[self.idx[ids]])
            np.add.at(out, self.idx[ids], local)
        return out

    def energy(self, values: np.ndarray) -> float:
        """The quadratic form sum_elements int grad u . (A grad u)."""
        v = values.ravel()
        return float(v @ self.apply(values))

    def energy_on_elements(self, values: np.ndarray, element_sel: np.ndarray) -> float:
        """Form restricted to a boolean selection over this operator's elements."""
        ids = np.flatnonzero(element_sel)
        if ids.size == 0:
            return 0.0
        v = values.ravel()
        blocks = self._element_blocks(ids)
        ue = v[self.idx[ids]]
        return float(np.einsum("ek,ekl,el->", ue, blocks, ue))

    def diagonal(self) -> np.ndarray:
        return self._diag

    def elements_in(self, cell_mask: np.ndarray) -> np.ndarray:
        """Selection (over this operator's elements) of elements all of whose
        corners lie in the given cell mask."""
        return cell_mask.ravel()[self.idx].all(axis=1)

    def elements_touching(self, cell_mask: np.ndarray) -> np.ndarray:
        return cell_mask.ravel()[self.idx].any(axis=1)


@dataclass(eq=False)
class DirichletProblem:
    """PDE holds on ``active``; values are pinned on the complement's
    boundary layer (every non-active corner of an element touching an
    active cell)."""

    A: CoefficientField
    active: Region
    boundary_values: ScalarField
    tolerance: float = 1e-8

    def __post_init__(self):
        if not self.A.region.contains(self.active):
            raise EllipticError("active region escapes the coefficient region")
        if not (1e-14 < self.tolerance < 1e-2):
            raise EllipticError("tolerance out of range (1e-14, 1e-2)")
        layer = box_dilate(self.active.mask) & ~self.active.mask & self.A.region.mask
        if not layer.any():
            raise EllipticError("boundary layer is empty")
        vals = self.boundary_values.values[layer]
        if not np.isfinite(vals).all():
            raise EllipticError("boundary values must be finite on the layer")
        self.layer = layer


def _pcg(op, free: np.ndarray, u: np.ndarray, tol: float, maxiter: int):
    """PCG on the correction system restricted to ``free`` cells; ``u`` holds
    fixed values elsewhere and the warm start on ``free``.  Returns
    (solution, rel_residual, iterations)."""
    free_flat = free.ravel()
    diag = op.diagonal()
    solvable = free_flat & (diag > 0)
    d_inv = np.zeros_like(diag)
    d_inv[solvable] = 1.0 / diag[solvable]

    x = u.ravel().copy()
    # reference scale: residual of the zero-interior state
    base = x.copy()
    base[solvable] = 0.0
    b0 = -op.apply(base)
    scale = math.sqrt(float(np.sum(b0[solvable] ** 2 * d_inv[solvable])))
    if scale == 0.0:
        scale = 1.0

    r = -op.apply(x)
    r[~solvable] = 0.0
    z = d_inv * r
    rho = float(r @ z)
    rel = math.sqrt(max(rho, 0.0)) / scale
    if rel <= tol:
        return x, rel, 0
    p = z.copy()
    for it in range(1, maxiter + 1):
        Ap = op.apply(p)
        Ap[~solvable] = 0.0
        denom = float(p @ Ap)
        if denom <= 0:
            break
        alpha = rho / denom
        x[solvable] += alpha * p[solvable]
        r -= alpha * Ap
        r[~solvable] = 0.0
        z = d_inv * r
        rho_new = float(r @ z)
        rel = math.sqrt(max(rho_new, 0.0)) / scale
        if rel <= tol:
            return x, rel, it
        p = z + (rho_new / rho) * p
        rho = rho_new
    return x, rel, maxiter


def solve_dirichlet(problem: DirichletProblem, x0: ScalarField | None = None) -> ScalarField:
    """Solve the Dirichlet problem to the requested relative residual.

    Deterministic; raises NonConvergenceError past 50 sqrt(n_active)
    iterations.
    """
    grid = problem.active.grid
    domain_mask = problem.active.mask | problem.layer
    domain = Region(grid, domain_mask, kind="custom")
    op = DivergenceFormOperator(problem.A, element_mask=domain.conforming_elements)

    u = np.zeros(grid.shape)
    u[problem.layer] = problem.boundary_values.values[problem.layer]
    if x0 is not None:
        u[problem.active.mask] = x0.values[problem.active.mask]
    maxiter = int(50 * math.sqrt(problem.active.cell_count)) + 10
    x, rel, its = _pcg(op, problem.active.mask, u, problem.tolerance, maxiter)
    if rel > problem.tolerance:
        raise NonConvergenceError("Dirichlet solve did not converge", rel, its)
    return ScalarField(domain, x.reshape(grid.shape))


def apply_operator(A: CoefficientField, u: ScalarField) -> ScalarField:
    """Pointwise grad . (A grad u) on interior cells (hat-residual scaled by
    -1/cellVolume, which recovers the PDE sign: positive for convex u)."""
    if u.region.grid != A.region.grid:
        raise EllipticError("field and coefficient grids differ")
    region = u.region
    op = DivergenceFormOperator(A, element_mask=region.conforming_elements)
    ku = op.apply(u.values).reshape(region.grid.shape)
    interior = region.interior_cells
    out = np.where(interior, -ku / region.grid.cell_volume, 0.0)
    return ScalarField(Region(region.grid, interior, kind="custom"), out)


def subsolution_defect(u: ScalarField, A: CoefficientField) -> float:
    """Largest violation, over interior hat test functions v >= 0, of the
    minimizer inequality int (A grad u) . grad v <= 0, clipped at zero.

    Solutions and energy minimizers return ~0; a field with a strict
    interior dip under A = I returns > 0 (its neighbors see a positive
    hat residual).
    """
    region = u.region
    op = DivergenceFormOperator(A, element_mask=region.conforming_elements)
    ku = op.apply(u.values).reshape(region.grid.shape)
    interior = region.interior_cells
    if not interior.any():
        return 0.0
    return float(max(0.0, ku[interior].max()))


def dirichlet_energy(u: ScalarField, A: CoefficientField) -> float:
    """sum over conforming elements of int grad u . (A grad u)."""
    op = DivergenceFormOperator(A, element_mask=u.region.conforming_elements)
    return op.energy(u.values)
