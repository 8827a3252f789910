"""Periodic cell problems, permeability, Darcy limit and homogenized velocity."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from .fine_stokes import (
    DEFAULT_ALPHA,
    DEFAULT_SIGMA,
    BodyForce,
    FineField,
    IncompatibleDivergence,
    _scatter,
    evaluate_vector,
    field_gradients,
    solve_periodic_cell,
    triangle_gradients,
)
from .geometry import FineGrid, PerforatedDomain, PerforationPattern
from .linalg import BorderedSystem, SingularMatrix, aligned_copy, solve_bordered


class SingularSystem(SingularMatrix):
    pass


@dataclass
class CellSolutions:
    """Correctors w_i (and optionally gamma_ij) on the periodic unit cell."""

    pattern: PerforationPattern
    grid: FineGrid
    w: tuple  # (FineField, FineField)
    K: np.ndarray
    fluid_area: float
    fluid_weights: np.ndarray  # nodal weights (grid nodes) with sum_k wt_k v_k = int_F v
    gamma: Optional[dict] = None  # (i, j) -> FineField

    def average(self, nodal: np.ndarray) -> float:
        """Fluid average (1/|F|) int_F v of a nodal scalar."""
        return float(self.fluid_weights @ nodal) / self.fluid_area

    def adjoint_permeability(self) -> np.ndarray:
        """(1/|F|) int_F grad w_i : grad w_j, which equals K for exact cell solutions."""
        tri = self.grid.triangles()
        fluid = ~self.w[0].solid
        g = [field_gradients(self.grid, w.velocity[tri])[fluid] for w in self.w]
        area = self.grid.triangle_area
        return np.array([[area * np.sum(g[i] * g[j]) for j in range(2)] for i in range(2)]) / self.fluid_area


def _grid_fluid_weights(grid: FineGrid, solid: np.ndarray) -> np.ndarray:
    tri = grid.triangles()[~solid]
    return np.bincount(tri.ravel(), minlength=grid.n_nodes).astype(float) * (grid.triangle_area / 3.0)


def _cell_job(args):
    pattern, grid, rhs, div_rhs, sigma, alpha = args
    return solve_periodic_cell(pattern, grid, rhs, div_rhs, sigma, alpha)


def _run(jobs, args):
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_cell_job, args))
    else:
        out = [_cell_job(a) for a in args]
    return [FineField(w.grid, aligned_copy(w.velocity), aligned_copy(w.pressure), w.solid) for w in out]


def solve_cell_problems(
    pattern: PerforationPattern,
    grid: FineGrid,
    sigma: float = DEFAULT_SIGMA,
    alpha: float = DEFAULT_ALPHA,
    jobs: int = 1,
) -> CellSolutions:
    """Correctors driven by e_1, e_2 and the permeability K_ij = <w_i . e_j>."""
    w = tuple(_run(jobs, [(pattern, grid, tuple(np.eye(2)[i]), None, sigma, alpha) for i in range(2)]))
    wt = _grid_fluid_weights(grid, w[0].solid)
    area = float(np.count_nonzero(~w[0].solid)) * grid.triangle_area
    K = np.array([[wt @ w[i].velocity[:, j] for j in range(2)] for i in range(2)]) / area
    return CellSolutions(pattern, grid, w, K, area, wt)


def gamma_data(cells: CellSolutions, i: int, j: int):
    """Body force 2 d_j w_i - pi_i e_j (fluid only) and divergence -w_i.e_j + <w_i.e_j>."""
    grid = cells.grid
    wi = cells.w[i]
    tri = grid.triangles()
    grads = field_gradients(grid, wi.velocity[tri])  # (ntri, comp, d)
    per_tri = 2.0 * grads[:, :, j]
    nodal = np.zeros((grid.n_nodes, 2))
    nodal[:, j] = -wi.pressure
    force = BodyForce(nodal=nodal, per_triangle=per_tri, fluid_only=True)
    div = -wi.velocity[:, j] + cells.K[i, j]
    return force, div


def solve_gamma(
    pattern: PerforationPattern,
    grid: FineGrid,
    cells: CellSolutions,
    sigma: float = DEFAULT_SIGMA,
    alpha: float = DEFAULT_ALPHA,
    jobs: int = 1,
    div_tol: float = 1e-8,
) -> CellSolutions:
    """Second-order correctors gamma_ij; returns a copy of ``cells`` with ``gamma`` set."""
    if not grid.same_as(cells.grid):
        raise ValueError("gamma problems must use the corrector grid")
    args, keys = [], []
    for i in range(2):
        for j in range(2):
            force, div = gamma_data(cells, i, j)
            total = float(cells.fluid_weights @ div)
            if abs(total) > div_tol:
                raise IncompatibleDivergence(f"gamma_{i + 1}{j + 1} divergence integrates to {total:.3e}")
            args.append((pattern, grid, force, div, sigma, alpha))
            keys.append((i, j))
    fields = _run(jobs, args)
    return replace(cells, gamma=dict(zip(keys, fields)))


# --------------------------------------------------------------------------
# Darcy limit
# --------------------------------------------------------------------------


@dataclass
class DarcySolution:
    grid: FineGrid
    p_star: np.ndarray  # nodal
    gradient: np.ndarray  # (ntri, 2)
    K: np.ndarray
    compatibility_residual: float = 0.0

    def nodal_gradient(self) -> np.ndarray:
        """Area-weighted average of the triangle gradients at each node."""
        tri = self.grid.triangles()
        n = self.grid.n_nodes
        cnt = np.bincount(tri.ravel(), minlength=n).astype(float)
        return np.column_stack(
            [np.bincount(tri.ravel(), weights=np.repeat(self.gradient[:, d], 3), minlength=n) / cnt for d in range(2)]
        )

    def flux(self, f) -> np.ndarray:
        """Per-triangle Darcy flux K (f - grad p*), f averaged over each triangle."""
        fv = evaluate_vector(f, self.grid)[self.grid.triangles()].mean(axis=1)
        return (fv - self.gradient) @ self.K.T


def solve_darcy(domain: PerforatedDomain, K, f, grid: FineGrid) -> DarcySolution:
    """P1 solve of int K grad p . grad q = int K f . grad q with mean-zero p over the rectangle."""
    K = np.asarray(K, dtype=float)
    if K.shape != (2, 2) or not np.allclose(K, K.T, rtol=1e-8, atol=0) or np.any(np.linalg.eigvalsh(K) <= 0):
        raise ValueError("permeability must be symmetric positive definite")
    tri = grid.triangles()
    G = triangle_gradients(grid)
    area = grid.triangle_area
    S = _scatter(tri, area * np.einsum("tid,de,tje->tij", G, K, G), grid.n_nodes)
    fbar = evaluate_vector(f, grid)[tri].mean(axis=1)
    local = area * np.einsum("td,de,tke->tk", fbar, K, G)
    rhs = np.bincount(tri.ravel(), weights=local.ravel(), minlength=grid.n_nodes)
    compat = abs(rhs.sum()) / max(np.abs(rhs).max(), 1e-300)
    weights = np.bincount(tri.ravel(), minlength=grid.n_nodes).astype(float) * (area / 3.0)
    system = BorderedSystem(S, sp.csr_matrix(weights[None, :]), np.zeros(1))
    try:
        p, _ = solve_bordered(system, rhs)
    except SingularMatrix as exc:
        raise SingularSystem(str(exc)) from exc
    grad = np.einsum("tk,tkd->td", p[tri], G)
    return DarcySolution(grid, p, grad, K, float(compat))


# --------------------------------------------------------------------------
# homogenized fields
# --------------------------------------------------------------------------


@dataclass
class HomogenizedField:
    u_star: FineField
    p_eps1: Optional[np.ndarray] = None
    epsilon: float = 1.0


def periodic_sampler(cells: CellSolutions, values: np.ndarray):
    """Bilinear interpolant of nodal cell-grid values, evaluated at y mod 1."""
    xs, ys = cells.grid.axes()
    v = values.reshape(cells.grid.my, cells.grid.mx)
    interp = RegularGridInterpolator((ys, xs), v, method="linear")

    def sample(y1, y2):
        y1 = np.clip(np.mod(y1, 1.0), 0.0, 1.0)
        y2 = np.clip(np.mod(y2, 1.0), 0.0, 1.0)
        return interp(np.column_stack([y2, y1]))

    return sample


def build_homogenized(
    domain: PerforatedDomain,
    cells: CellSolutions,
    darcy: DarcySolution,
    f,
    grid: FineGrid,
) -> HomogenizedField:
    """u* = eps^2 sum_i w_i(x/eps) (f_i - d_i p*) at the fine-grid nodes."""
    if not grid.same_as(darcy.grid):
        raise ValueError("Darcy solution must live on the target grid")
    eps = domain.epsilon
    xy = grid.nodes()
    y1, y2 = xy[:, 0] / eps, xy[:, 1] / eps
    drive = evaluate_vector(f, grid) - darcy.nodal_gradient()
    u = np.zeros((grid.n_nodes, 2))
    p1 = darcy.p_star.copy()
    for i in range(2):
        for d in range(2):
            u[:, d] += periodic_sampler(cells, cells.w[i].velocity[:, d])(y1, y2) * drive[:, i]
        p1 += eps * periodic_sampler(cells, cells.w[i].pressure)(y1, y2) * drive[:, i]
    u *= eps**2
    c = grid.centroids()
    solid = domain.is_solid(c[:, 0], c[:, 1])
    return HomogenizedField(FineField(grid, u, darcy.p_star.copy(), solid), p1, eps)


def cell_grid_for(domain: PerforatedDomain, grid: FineGrid) -> FineGrid:
    """Unit-cell grid whose nodes map exactly onto the global grid nodes."""
    n = domain.epsilon / grid.h
    k = int(round(n))
    if abs(n - k) > 1e-9 * n or k < 2:
        raise ValueError(f"epsilon={domain.epsilon} is not a whole number of fine steps h={grid.h}")
    return FineGrid((0.0, 0.0), 1.0 / k, k + 1, k + 1)
