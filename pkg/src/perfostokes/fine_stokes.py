"""Stabilised equal-order P1-P1 Stokes on fine Cartesian grids.

Discrete form (velocity u, pressure p, test pair v, q)::

    int grad u : grad v - int p div v - int q div u
        - alpha h^2 int grad p . grad q + sigma int_B u . v

The obstacle indicator is sampled at triangle centroids and the penalty mass
is lumped (area/3 per vertex).  Unknowns are ordered [u1 | u2 | p], each block
indexed by the (possibly merged) node numbering of the operator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .geometry import FineGrid, PerforatedDomain, PerforationPattern
from .linalg import BorderedSystem, solve_bordered

DEFAULT_SIGMA = 1e8
DEFAULT_ALPHA = 0.05


class EmptyPattern(ValueError):
    """Periodic cell problem without any obstacle (ill-posed)."""


class IncompatibleDivergence(ValueError):
    pass


class BoundaryMode(str, enum.Enum):
    DIRICHLET = "dirichlet"
    PERIODIC = "periodic"
    FREE = "free"


@dataclass(frozen=True)
class StokesSpec:
    rhs: Optional[Callable] = None
    dirichlet: Optional[Callable] = None
    boundary_mode: BoundaryMode = BoundaryMode.DIRICHLET
    sigma: float = DEFAULT_SIGMA
    alpha: float = DEFAULT_ALPHA
    mean_zero_pressure: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("penalty sigma must be >= 0")
        if self.alpha <= 0:
            raise ValueError("stabilisation alpha must be > 0")


@dataclass
class FineField:
    """Continuous nodal velocity/pressure on a fine grid."""

    grid: FineGrid
    velocity: np.ndarray
    pressure: np.ndarray
    solid: Optional[np.ndarray] = None  # per-triangle obstacle flags, if known

    def __post_init__(self):
        n = self.grid.n_nodes
        self.velocity = np.asarray(self.velocity, dtype=float)
        self.pressure = np.asarray(self.pressure, dtype=float)
        if self.velocity.shape != (n, 2) or self.pressure.shape != (n,):
            raise ValueError(
                f"field arrays {self.velocity.shape}, {self.pressure.shape} do not match {n} grid nodes"
            )
        if not (np.all(np.isfinite(self.velocity)) and np.all(np.isfinite(self.pressure))):
            raise ValueError("field contains non-finite values")

    def tri_values(self):
        """Per-triangle vertex values: velocity (ntri, 3, 2), pressure (ntri, 3)."""
        tri = self.grid.triangles()
        return self.velocity[tri], self.pressure[tri]

    def scaled(self, c: float) -> "FineField":
        return FineField(self.grid, c * self.velocity, c * self.pressure, self.solid)


@dataclass
class BrokenField:
    """Piecewise-P1 field that may jump across coarse edges.

    Values are stored per triangle vertex of the global grid.
    """

    grid: FineGrid
    velocity: np.ndarray  # (ntri, 3, 2)
    pressure: np.ndarray  # (ntri, 3)
    solid: Optional[np.ndarray] = None

    def tri_values(self):
        return self.velocity, self.pressure

    def nodal(self) -> FineField:
        """Continuous field by averaging the values meeting at each node."""
        tri = self.grid.triangles()
        n = self.grid.n_nodes
        cnt = np.bincount(tri.ravel(), minlength=n).astype(float)
        vel = np.column_stack(
            [np.bincount(tri.ravel(), weights=self.velocity[..., d].ravel(), minlength=n) / cnt for d in range(2)]
        )
        pres = np.bincount(tri.ravel(), weights=self.pressure.ravel(), minlength=n) / cnt
        return FineField(self.grid, vel, pres, self.solid)


@dataclass
class BodyForce:
    """Right-hand side given as nodal P1 values and/or per-triangle constants."""

    nodal: Optional[np.ndarray] = None  # (n_nodes, 2)
    per_triangle: Optional[np.ndarray] = None  # (ntri, 2)
    fluid_only: bool = False


# --------------------------------------------------------------------------
# reference element data
# --------------------------------------------------------------------------

# gradients of the three hat functions times h, for the lower and upper triangle
_GRAD = np.array(
    [
        [[-1.0, 0.0], [1.0, -1.0], [0.0, 1.0]],  # (ll, lr, ur)
        [[0.0, -1.0], [1.0, 0.0], [-1.0, 1.0]],  # (ll, ur, ul)
    ]
)
_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def triangle_gradients(grid: FineGrid) -> np.ndarray:
    """Hat-function gradients per triangle, shape (ntri, 3, 2)."""
    g = _GRAD / grid.h
    return np.tile(g, (grid.n_squares, 1, 1))


def field_gradients(grid: FineGrid, tri_vals: np.ndarray) -> np.ndarray:
    """Per-triangle gradient of P1 data given at triangle vertices.

    ``tri_vals`` has shape (ntri, 3) or (ntri, 3, c); the result appends a
    trailing axis of length 2 (d/dx, d/dy).
    """
    G = triangle_gradients(grid)
    if tri_vals.ndim == 2:
        return np.einsum("tk,tkd->td", tri_vals, G)
    return np.einsum("tkc,tkd->tcd", tri_vals, G)


def _scatter(tri, local, n):
    """Assemble per-triangle (ntri, 3, 3) blocks into an n x n matrix."""
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    m = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    m.sum_duplicates()
    return m.tocsr()


class StokesOperator:
    """Discrete operators of the penalised, stabilised Stokes problem on one grid."""

    def __init__(
        self,
        grid: FineGrid,
        domain: Optional[PerforatedDomain],
        sigma: float = DEFAULT_SIGMA,
        alpha: float = DEFAULT_ALPHA,
        mode: BoundaryMode = BoundaryMode.DIRICHLET,
    ):
        self.grid = grid
        self.domain = domain
        self.sigma = float(sigma)
        self.alpha = float(alpha)
        self.mode = BoundaryMode(mode)
        mx, my = grid.mx, grid.my
        if self.mode is BoundaryMode.PERIODIC:
            i, j = np.meshgrid(np.arange(mx), np.arange(my), indexing="xy")
            self.node_map = ((j % (my - 1)) * (mx - 1) + (i % (mx - 1))).ravel()
            self.N = (mx - 1) * (my - 1)
        else:
            self.node_map = np.arange(grid.n_nodes)
            self.N = grid.n_nodes
        self.tri_nodes = grid.triangles()
        self.tri = self.node_map[self.tri_nodes]
        ntri = self.tri.shape[0]
        if domain is None:
            self.solid = np.zeros(ntri, dtype=bool)
        else:
            c = grid.centroids()
            self.solid = domain.is_solid(c[:, 0], c[:, 1])

        area = grid.triangle_area
        G = triangle_gradients(grid)
        ke = area * np.einsum("tid,tjd->tij", G, G)
        self.K = _scatter(self.tri, ke, self.N)
        self.K_fluid = _scatter(self.tri[~self.solid], ke[~self.solid], self.N)
        # (q_i, d phi_j / dx_d) = area/3 * dphi_j/dx_d
        bx = np.broadcast_to((area / 3.0) * G[:, None, :, 0], (ntri, 3, 3))
        by = np.broadcast_to((area / 3.0) * G[:, None, :, 1], (ntri, 3, 3))
        self.Bx = _scatter(self.tri, bx, self.N)
        self.By = _scatter(self.tri, by, self.N)
        me = np.broadcast_to(area * _MASS, (ntri, 3, 3))
        self.M = _scatter(self.tri, me, self.N)
        fluid = ~self.solid
        self.M_fluid = _scatter(self.tri[fluid], me[fluid], self.N)
        self.penalty = self.sigma * np.bincount(
            self.tri[self.solid].ravel(), minlength=self.N
        ).astype(float) * (area / 3.0)
        self.fluid_weights = np.bincount(self.tri[fluid].ravel(), minlength=self.N).astype(float) * (area / 3.0)
        self.S = (self.alpha * grid.h**2) * self.K

    @property
    def n_dof(self) -> int:
        return 3 * self.N

    @property
    def fluid_area(self) -> float:
        return float(np.count_nonzero(~self.solid)) * self.grid.triangle_area

    def velocity_block(self) -> sp.csr_matrix:
        return (self.K + sp.diags(self.penalty)).tocsr()

    def core(self) -> sp.csr_matrix:
        A = self.velocity_block()
        return sp.bmat(
            [[A, None, -self.Bx.T], [None, A, -self.By.T], [-self.Bx, -self.By, -self.S]],
            format="csr",
        )

    def mean_zero_row(self) -> sp.csr_matrix:
        """Pressure constraint: fluid-area-weighted nodal sum (= int_F p)."""
        w = self.fluid_weights
        idx = np.flatnonzero(w) + 2 * self.N
        return sp.csr_matrix((w[w != 0], (np.zeros(idx.size, dtype=int), idx)), shape=(1, self.n_dof))

    def _merge(self, nodal: np.ndarray) -> np.ndarray:
        """Grid-node values -> operator node values (periodic duplicates dropped)."""
        if self.mode is not BoundaryMode.PERIODIC:
            return nodal
        out = np.empty((self.N,) + nodal.shape[1:])
        out[self.node_map] = nodal
        return out

    def load(self, force) -> np.ndarray:
        """Velocity part of the right-hand side, shape (2N,)."""
        if force is None:
            return np.zeros(2 * self.N)
        if not isinstance(force, BodyForce):
            force = BodyForce(nodal=evaluate_vector(force, self.grid))
        mass = self.M_fluid if force.fluid_only else self.M
        out = np.zeros((2, self.N))
        if force.nodal is not None:
            f = self._merge(np.asarray(force.nodal, dtype=float))
            out += (mass @ f).T
        if force.per_triangle is not None:
            pt = np.asarray(force.per_triangle, dtype=float)
            keep = ~self.solid if force.fluid_only else np.ones(len(pt), dtype=bool)
            w = self.grid.triangle_area / 3.0
            for d in range(2):
                vals = np.repeat(pt[keep, d] * w, 3)
                out[d] += np.bincount(self.tri[keep].ravel(), weights=vals, minlength=self.N)
        return out.ravel()

    def to_field(self, x: np.ndarray) -> FineField:
        N = self.N
        nm = self.node_map
        vel = np.column_stack([x[:N][nm], x[N : 2 * N][nm]])
        return FineField(self.grid, vel, x[2 * N : 3 * N][nm], self.solid)


def evaluate_vector(fun, grid: FineGrid) -> np.ndarray:
    """Nodal values (n, 2) of a vector field given as callable or constant."""
    xy = grid.nodes()
    if callable(fun):
        fx, fy = fun(xy[:, 0], xy[:, 1])
        return np.column_stack([np.broadcast_to(fx, len(xy)), np.broadcast_to(fy, len(xy))]).astype(float)
    c = np.asarray(fun, dtype=float)
    return np.tile(c, (len(xy), 1))


def eliminate_dirichlet(core, rhs, dofs, values):
    """Symmetric elimination: boundary rows/columns become identity, rhs lifted."""
    n = core.shape[0]
    lift = np.zeros(n)
    lift[dofs] = values
    rhs = rhs - core @ lift
    rhs[dofs] = values
    keep = np.ones(n)
    keep[dofs] = 0.0
    P = sp.diags(keep)
    core = (P @ core @ P + sp.diags(1.0 - keep)).tocsr()
    return core, rhs


@dataclass
class StokesSystem(BorderedSystem):
    """Assembled fine system plus its right-hand side and operator."""

    rhs: Optional[np.ndarray] = None
    operator: Optional[StokesOperator] = field(default=None, repr=False)

    def solve(self) -> FineField:
        x, _ = solve_bordered(self, self.rhs)
        return self.operator.to_field(x)


def assemble(
    grid: FineGrid,
    domain: Optional[PerforatedDomain],
    spec: StokesSpec,
    force=None,
    div_rhs: Optional[np.ndarray] = None,
    extra_constraints: Optional[sp.spmatrix] = None,
    extra_values: Optional[np.ndarray] = None,
) -> StokesSystem:
    """Assemble the bordered fine Stokes system for ``spec``.

    ``force`` overrides ``spec.rhs``; ``div_rhs`` (nodal) prescribes the
    divergence on the fluid part.  Extra constraint rows are appended after
    the optional mean-zero pressure row.
    """
    op = StokesOperator(grid, domain, spec.sigma, spec.alpha, spec.boundary_mode)
    N = op.N
    core = op.core()
    rhs = np.zeros(3 * N)
    rhs[: 2 * N] = op.load(spec.rhs if force is None else force)
    if div_rhs is not None:
        g = op._merge(np.asarray(div_rhs, dtype=float))
        rhs[2 * N :] = -(op.M_fluid @ g)
    if op.mode is BoundaryMode.DIRICHLET:
        bnd = grid.boundary_nodes()
        if spec.dirichlet is not None:
            gv = evaluate_vector(spec.dirichlet, grid)[bnd]
        else:
            gv = np.zeros((bnd.size, 2))
        core, rhs = eliminate_dirichlet(core, rhs, np.r_[bnd, bnd + N], np.r_[gv[:, 0], gv[:, 1]])
    rows = []
    values = []
    if spec.mean_zero_pressure:
        rows.append(op.mean_zero_row())
        values.append(np.zeros(1))
    if extra_constraints is not None:
        rows.append(sp.csr_matrix(extra_constraints))
        values.append(np.zeros(extra_constraints.shape[0]) if extra_values is None else np.asarray(extra_values))
    C = sp.vstack(rows, format="csr") if rows else None
    cv = np.concatenate(values) if values else None
    return StokesSystem(core, C, cv, rhs=rhs, operator=op)


def solve_reference(domain: PerforatedDomain, grid: FineGrid, spec: StokesSpec) -> FineField:
    """Fine-scale penalised solution on the whole domain (Dirichlet outer boundary)."""
    if BoundaryMode(spec.boundary_mode) is not BoundaryMode.DIRICHLET:
        raise ValueError("reference solves use the Dirichlet boundary mode")
    if not spec.mean_zero_pressure:
        raise ValueError("reference solves need the mean-zero pressure constraint")
    return assemble(grid, domain, spec).solve()


def unit_cell_domain(pattern: PerforationPattern) -> PerforatedDomain:
    return PerforatedDomain((0.0, 0.0, 1.0, 1.0), 1.0, pattern)


def solve_periodic_cell(
    pattern: PerforationPattern,
    grid: FineGrid,
    rhs,
    div_rhs: Optional[np.ndarray] = None,
    sigma: float = DEFAULT_SIGMA,
    alpha: float = DEFAULT_ALPHA,
    div_tol: float = 1e-8,
) -> FineField:
    """Periodic penalised cell Stokes problem on Y with int_F pi = 0.

    ``div_rhs`` is nodal and acts on the fluid part only; it must integrate
    to zero over F.
    """
    if pattern.is_empty:
        raise EmptyPattern("cell problem requires a nonempty obstacle")
    if not np.allclose(grid.rect, (0.0, 0.0, 1.0, 1.0), atol=1e-12):
        raise ValueError(f"cell grid must cover the unit cell, got {grid.rect}")
    spec = StokesSpec(boundary_mode=BoundaryMode.PERIODIC, sigma=sigma, alpha=alpha)
    domain = unit_cell_domain(pattern)
    if div_rhs is not None:
        op = StokesOperator(grid, domain, sigma, alpha, BoundaryMode.PERIODIC)
        total = float(op.fluid_weights @ op._merge(np.asarray(div_rhs, dtype=float)))
        if abs(total) > div_tol:
            raise IncompatibleDivergence(f"prescribed divergence integrates to {total:.3e} over the fluid cell")
    return assemble(grid, domain, spec, force=rhs, div_rhs=div_rhs).solve()
