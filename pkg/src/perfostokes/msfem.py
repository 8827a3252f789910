"""Crouzeix-Raviart multiscale basis (CR2 / CR3 edge weights) and coarse solver.

Each coarse cell is solved once: the local penalised Stokes system (natural
outer boundary) is factorised together with its edge-weight constraints and
the mean-zero pressure row, then every (edge, weight) column is obtained by a
right-hand side that switches one constraint value to 1.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .fine_stokes import (
    DEFAULT_ALPHA,
    DEFAULT_SIGMA,
    BoundaryMode,
    _MASS,
    BrokenField,
    FineField,
    _scatter,
    StokesOperator,
    evaluate_vector,
    triangle_gradients,
)
from .geometry import (
    CoarseEdge,
    CoarseMesh,
    FineGrid,
    PerforatedDomain,
    edge_fully_solid,
    edge_segments,
    restrict_fine_grid,
)
from .linalg import BorderedSystem, aligned_copy, solve_bordered

log = logging.getLogger(__name__)

_GAUSS2 = np.array([-1.0, 1.0]) / math.sqrt(3.0)


class FullySolidEdge(ValueError):
    pass


class MissingBasis(ValueError):
    pass


class AssemblyError(RuntimeError):
    pass


class Variant(str, enum.Enum):
    CR2 = "CR2"
    CR3 = "CR3"


class PressureRecon(str, enum.Enum):
    PIECEWISE_CONSTANT = "piecewise_constant"
    OSCILLATING = "oscillating"


@dataclass(frozen=True)
class WeightSet:
    """Edge weights: CR2 = {e1, e2}; CR3 adds n_E * (2t - 1)."""

    variant: Variant = Variant.CR3

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))

    @property
    def s(self) -> int:
        return 2 if self.variant is Variant.CR2 else 3

    @staticmethod
    def psi(t):
        return 2.0 * np.asarray(t) - 1.0

    def values(self, edge: CoarseEdge, t) -> np.ndarray:
        """Weight vectors at parameters ``t``: shape (s, len(t), 2)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros((self.s, t.size, 2))
        out[0, :, 0] = 1.0
        out[1, :, 1] = 1.0
        if self.s == 3:
            out[2] = self.psi(t)[:, None] * edge.normal[None, :]
        return out

    def normal_index(self, edge: CoarseEdge) -> int:
        """Index j with weight j equal to n_E (e1 for vertical, e2 for horizontal edges)."""
        return edge.normal_component


def edge_weight_rows(edge: CoarseEdge, grid: FineGrid, weights: WeightSet) -> sp.csr_matrix:
    """Rows r_j with r_j . [u1 | u2] = int_E u . w_{E,j} (exact, 2-point Gauss per segment)."""
    seg = edge_segments(edge, grid)
    N = grid.n_nodes
    t0 = seg.t[:-1]
    dt = np.diff(seg.t)
    rows, cols, vals = [], [], []
    for g in _GAUSS2:
        tg = t0 + 0.5 * dt * (1.0 + g)
        wq = 0.5 * dt * seg.length
        lam = (tg - t0) / dt  # barycentric weight of the segment end node
        w = weights.values(edge, tg)  # (s, nseg, 2)
        for j in range(weights.s):
            for d in range(2):
                c = wq * w[j, :, d]
                for nodes, phi in ((seg.nodes[:-1], 1.0 - lam), (seg.nodes[1:], lam)):
                    rows.append(np.full(nodes.size, j))
                    cols.append(nodes + d * N)
                    vals.append(c * phi)
    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(weights.s, 2 * N)
    )
    m.sum_duplicates()
    return m.tocsr()


# --------------------------------------------------------------------------
# local problems
# --------------------------------------------------------------------------


@dataclass
class CellBasis:
    """All local columns Phi_{F,j}|_T, pi_{F,j}|_T of one coarse cell."""

    cell: int
    grid: FineGrid
    columns: list  # [(edge index, weight index)]
    velocity: np.ndarray  # (n_nodes, 2, ncol)
    pressure: np.ndarray  # (n_nodes, ncol)
    stiffness: np.ndarray  # (ncol, ncol) Phi^T A Phi
    div_integral: np.ndarray  # (ncol,) fine-grid int_T div Phi
    div_fluid_integral: np.ndarray  # (ncol,) same over fluid triangles only
    div_deviation: np.ndarray  # (ncol,) L2_F(div Phi - div_const)
    h1_seminorm: np.ndarray  # (ncol,)
    fluid_area: float
    solid: np.ndarray  # per local triangle
    constraint_residual: float
    pressure_mean: np.ndarray  # (ncol,) int_{T cap F} pi
    n_components: int = 1

    @property
    def div_const(self) -> np.ndarray:
        return self.div_integral / self.fluid_area

    def column(self, edge: int, j: int) -> int:
        return self.columns.index((edge, j))


def _fluid_components(grid: FineGrid, solid_tri: np.ndarray) -> int:
    sq = (~solid_tri.reshape(-1, 2)).any(axis=1).reshape(grid.my - 1, grid.mx - 1)
    _, n = ndimage.label(sq)
    return n


def _local_setup(domain, mesh, grid, weights, cell, sigma, alpha, skipped):
    g = restrict_fine_grid(grid, mesh.cell_rect(cell))
    op = StokesOperator(g, domain, sigma, alpha, BoundaryMode.FREE)
    N = op.N
    blocks = [op.mean_zero_row()]
    rows = []  # label of each edge constraint row; fully solid edges get homogeneous rows only
    for e in mesh.cell_edges[cell]:
        R = edge_weight_rows(mesh.edges[e], g, weights)
        blocks.append(sp.hstack([R, sp.csr_matrix((weights.s, N))], format="csr"))
        rows += [None if e in skipped else (int(e), j) for j in range(weights.s)]
    C = sp.vstack(blocks, format="csr")
    return g, op, BorderedSystem(op.core(), C), rows


def solve_cell_basis(
    domain: PerforatedDomain,
    mesh: CoarseMesh,
    grid: FineGrid,
    weights: WeightSet,
    cell: int,
    sigma: float = DEFAULT_SIGMA,
    alpha: float = DEFAULT_ALPHA,
    skipped: frozenset = frozenset(),
) -> CellBasis:
    g, op, system, rows = _local_setup(domain, mesh, grid, weights, cell, sigma, alpha, skipped)
    N = op.N
    labels = [r for r in rows if r is not None]
    ncol = len(labels)
    values = np.zeros((1 + len(rows), ncol))
    for k, lab in enumerate(labels):
        values[1 + rows.index(lab), k] = 1.0
    x, _ = solve_bordered(system, np.zeros((3 * N, ncol)), values)
    residual = float(np.abs(system.constraints @ x - values).max())
    vel = np.stack([x[:N], x[N : 2 * N]], axis=1)  # (N, 2, ncol)
    pres = x[2 * N :]
    # coarse stiffness integrates over the fluid part only
    A = op.K_fluid
    stiff = x[:N].T @ (A @ x[:N]) + x[N : 2 * N].T @ (A @ x[N : 2 * N])
    stiff = 0.5 * (stiff + stiff.T)

    tri = op.tri
    G = triangle_gradients(g)
    area = g.triangle_area
    fluid = ~op.solid
    # div Phi per triangle: (ntri, ncol)
    div = np.einsum("tkn,tk->tn", vel[tri, 0, :], G[:, :, 0]) + np.einsum("tkn,tk->tn", vel[tri, 1, :], G[:, :, 1])
    div_int = area * div.sum(axis=0)
    div_fluid = area * div[fluid].sum(axis=0)
    fluid_area = op.fluid_area
    dev = np.sqrt(area * ((div[fluid] - div_int / fluid_area) ** 2).sum(axis=0))
    grads = np.einsum("tkcn,tkd->tcdn", vel[tri], G)
    h1 = np.sqrt(area * (grads**2).sum(axis=(0, 1, 2)))
    pmean = op.fluid_weights @ pres
    ncomp = _fluid_components(g, op.solid)
    if ncomp > 1:
        log.warning("cell %d: fluid part has %d connected components", cell, ncomp)
    return CellBasis(
        cell=cell,
        grid=g,
        columns=labels,
        velocity=vel,
        pressure=pres,
        stiffness=stiff,
        div_integral=div_int,
        div_fluid_integral=div_fluid,
        div_deviation=dev,
        h1_seminorm=h1,
        fluid_area=fluid_area,
        solid=op.solid,
        constraint_residual=residual,
        pressure_mean=np.atleast_1d(pmean),
        n_components=ncomp,
    )


@dataclass
class BasisFunction:
    edge: int
    index: int
    parts: dict  # cell -> FineField on the restricted grid
    div_const: dict  # cell -> scalar


def _skipped_edges(domain, mesh, grid) -> frozenset:
    return frozenset(e.index for e in mesh.edges if edge_fully_solid(domain, e, grid))


def build_basis(
    domain: PerforatedDomain,
    mesh: CoarseMesh,
    grid: FineGrid,
    weights: WeightSet,
    edge: int,
    i: int,
    sigma: float = DEFAULT_SIGMA,
    alpha: float = DEFAULT_ALPHA,
) -> BasisFunction:
    """Multiscale basis pair (Phi_{E,i}, pi_{E,i}) on the cells adjacent to ``edge``."""
    E = mesh.edges[edge]
    if edge_fully_solid(domain, E, grid):
        raise FullySolidEdge(f"edge {edge} lies entirely inside an obstacle")
    skipped = _skipped_edges(domain, mesh, grid)
    parts, dc = {}, {}
    for c in E.adjacent():
        cb = solve_cell_basis(domain, mesh, grid, weights, c, sigma, alpha, skipped)
        k = cb.column(edge, i)
        parts[c] = FineField(cb.grid, cb.velocity[:, :, k], cb.pressure[:, k], cb.solid)
        dc[c] = float(cb.div_const[k])
    return BasisFunction(edge, i, parts, dc)


def build_bubble(
    domain: PerforatedDomain,
    mesh: CoarseMesh,
    grid: FineGrid,
    cell: int,
    i: int,
    weights: Optional[WeightSet] = None,
    sigma: float = DEFAULT_SIGMA,
    alpha: float = DEFAULT_ALPHA,
) -> FineField:
    """Cell bubble driven by e_i with zero edge moments (diagnostic only)."""
    weights = weights or WeightSet(Variant.CR2)
    g, op, system, labels = _local_setup(domain, mesh, grid, weights, cell, sigma, alpha, frozenset())
    if op.fluid_area == 0.0:
        raise FullySolidEdge(f"cell {cell} has no fluid")
    rhs = np.zeros(3 * op.N)
    rhs[: 2 * op.N] = op.load(np.eye(2)[i])
    x, _ = solve_bordered(system, rhs, np.zeros(system.k))
    return op.to_field(x)


# --------------------------------------------------------------------------
# coarse space
# --------------------------------------------------------------------------


@dataclass
class CoarseSpace:
    domain: PerforatedDomain
    mesh: CoarseMesh
    grid: FineGrid
    weights: WeightSet
    cells: list
    dof_map: dict  # (edge, j) -> global dof, internal non-skipped edges only
    skipped: tuple
    sigma: float = DEFAULT_SIGMA
    alpha: float = DEFAULT_ALPHA

    @property
    def n_dof(self) -> int:
        return len(self.dof_map)

    def basis_function(self, edge: int, i: int) -> BasisFunction:
        if (edge, i) not in self.dof_map:
            raise MissingBasis(f"no basis function for edge {edge}, weight {i}")
        parts, dc = {}, {}
        for c in self.mesh.edges[edge].adjacent():
            cb = self.cells[c]
            k = cb.column(edge, i)
            parts[c] = FineField(cb.grid, cb.velocity[:, :, k], cb.pressure[:, k], cb.solid)
            dc[c] = float(cb.div_const[k])
        return BasisFunction(edge, i, parts, dc)


def _canonical(cb: CellBasis) -> CellBasis:
    for name, val in vars(cb).items():
        if isinstance(val, np.ndarray) and val.dtype.kind == "f":
            setattr(cb, name, aligned_copy(val))
    return cb


def _cell_job(args):
    return solve_cell_basis(*args)


def build_space(
    domain: PerforatedDomain,
    mesh: CoarseMesh,
    grid: FineGrid,
    weights: WeightSet,
    sigma: float = DEFAULT_SIGMA,
    alpha: float = DEFAULT_ALPHA,
    jobs: int = 1,
) -> CoarseSpace:
    """Solve the local problems of every cell (in parallel if ``jobs > 1``)."""
    skipped = _skipped_edges(domain, mesh, grid)
    args = [(domain, mesh, grid, weights, c, sigma, alpha, skipped) for c in range(mesh.n_cells)]
    if jobs > 1 and mesh.n_cells > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            cells = list(ex.map(_cell_job, args))
    else:
        cells = [_cell_job(a) for a in args]
    cells = [_canonical(cb) for cb in cells]
    dof_map = {}
    for e in mesh.internal_edges:
        if e.index in skipped:
            continue
        for j in range(weights.s):
            dof_map[(e.index, j)] = len(dof_map)
    return CoarseSpace(domain, mesh, grid, weights, cells, dof_map, tuple(sorted(skipped)), sigma, alpha)




def _fluid_mass(grid: FineGrid, solid: np.ndarray) -> sp.csr_matrix:
    tri = grid.triangles()[~solid]
    me = np.broadcast_to(grid.triangle_area * _MASS, (tri.shape[0], 3, 3))
    return _scatter(tri, me, grid.n_nodes)


@dataclass
class CoarseSystem(BorderedSystem):
    rhs: Optional[np.ndarray] = None
    space: Optional[CoarseSpace] = field(default=None, repr=False)
    lift: dict = field(default_factory=dict)  # (edge, j) -> prescribed moment on boundary edges
    divergence: Optional[np.ndarray] = None  # (ncells, ndof)


def boundary_moments(space: CoarseSpace, g) -> dict:
    """int_E g . w_{E,j} for every boundary edge, g given as callable or constant."""
    out = {}
    grid = space.grid
    gvals = evaluate_vector(g, grid)
    for e in space.mesh.boundary_edges:
        R = edge_weight_rows(e, grid, space.weights)
        vec = np.concatenate([gvals[:, 0], gvals[:, 1]])
        m = R @ vec
        for j in range(space.weights.s):
            out[(e.index, j)] = float(m[j])
    return out


def assemble_coarse(space: CoarseSpace, f=None, g=None, check_tol: float = 1e-8) -> CoarseSystem:
    """Coarse saddle system [[A, -D^T], [-D, 0]] plus the fluid-weighted mean-zero row."""
    mesh = space.mesh
    nd = space.n_dof
    nc = mesh.n_cells
    lift = boundary_moments(space, g) if g is not None else {}
    rows, cols, vals = [], [], []
    F = np.zeros(nd)
    D = np.zeros((nc, nd))
    Fp = np.zeros(nc)
    for cb in space.cells:
        T = cb.cell
        gidx = np.array([space.dof_map.get(lab, -1) for lab in cb.columns])
        cvals = np.array([lift.get(lab, 0.0) for lab in cb.columns])
        inner = gidx >= 0
        A_T = cb.stiffness
        ii = np.flatnonzero(inner)
        rows.append(np.repeat(gidx[ii], ii.size))
        cols.append(np.tile(gidx[ii], ii.size))
        vals.append(A_T[np.ix_(ii, ii)].ravel())
        # analytic divergence: int_T div Phi_{E,i} = (+-) int_E Phi_{E,i} . n_E
        d_T = np.zeros(len(cb.columns))
        for k, (e, j) in enumerate(cb.columns):
            E = mesh.edges[e]
            if j == space.weights.normal_index(E):
                d_T[k] = E.outward_sign(T)
        if np.abs(d_T - cb.div_integral).max() > check_tol:
            raise AssemblyError(
                f"cell {T}: analytic and fine-grid divergence differ by {np.abs(d_T - cb.div_integral).max():.3e}"
            )
        D[T, gidx[ii]] = d_T[ii]
        if f is not None:
            M = _fluid_mass(cb.grid, cb.solid)
            fv = evaluate_vector(f, cb.grid)
            load = cb.velocity[:, 0, :].T @ (M @ fv[:, 0]) + cb.velocity[:, 1, :].T @ (M @ fv[:, 1])
            F[gidx[ii]] += load[ii]
        if lift:
            F[gidx[ii]] -= A_T[np.ix_(ii, ~inner)] @ cvals[~inner]
            Fp[T] += d_T[~inner] @ cvals[~inner]
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nd, nd)).tocsr()
    A = 0.5 * (A + A.T)
    Ds = sp.csr_matrix(D)
    core = sp.bmat([[A, -Ds.T], [-Ds, sp.csr_matrix((nc, nc))]], format="csr")
    areas = np.array([cb.fluid_area for cb in space.cells])
    C = sp.csr_matrix(np.concatenate([np.zeros(nd), areas])[None, :])
    rhs = np.concatenate([F, Fp])
    return CoarseSystem(core, C, np.zeros(1), rhs=rhs, space=space, lift=lift, divergence=D)


@dataclass
class CoarseSolution:
    u_coeffs: np.ndarray
    p_cells: np.ndarray
    lift: dict
    reconstructed: Optional[BrokenField] = None
    pressure_recon_mode: PressureRecon = PressureRecon.PIECEWISE_CONSTANT
    multiplier: float = 0.0

    def cell_coefficients(self, space: CoarseSpace, cb: CellBasis) -> np.ndarray:
        c = np.zeros(len(cb.columns))
        for k, lab in enumerate(cb.columns):
            if lab in space.dof_map:
                c[k] = self.u_coeffs[space.dof_map[lab]]
            else:
                c[k] = self.lift.get(lab, 0.0)
        return c


def solve_coarse(system: CoarseSystem, mode=PressureRecon.PIECEWISE_CONSTANT) -> CoarseSolution:
    x, lam = solve_bordered(system, system.rhs)
    nd = system.space.n_dof
    sol = CoarseSolution(x[:nd].copy(), x[nd:].copy(), dict(system.lift), multiplier=float(lam[0]))
    reconstruct(system.space, sol, mode)
    return sol


def reconstruct(space: CoarseSpace, solution: CoarseSolution, mode=PressureRecon.PIECEWISE_CONSTANT) -> BrokenField:
    """Fine-scale velocity/pressure of the coarse solution on the global grid."""
    mode = PressureRecon(mode)
    G = space.grid
    ntri = G.n_triangles
    vel = np.zeros((ntri, 3, 2))
    pres = np.zeros((ntri, 3))
    solid = np.zeros(ntri, dtype=bool)
    for cb in space.cells:
        c = solution.cell_coefficients(space, cb)
        u = cb.velocity @ c  # (n, 2)
        p = np.full(cb.grid.n_nodes, solution.p_cells[cb.cell])
        if mode is PressureRecon.OSCILLATING:
            p = p + cb.pressure @ c
        gidx = cell_triangles_in_global(G, cb.grid)
        tri = cb.grid.triangles()
        vel[gidx] = u[tri]
        pres[gidx] = p[tri]
        solid[gidx] = cb.solid
    field_ = BrokenField(G, vel, pres, solid)
    solution.reconstructed = field_
    solution.pressure_recon_mode = mode
    return field_


def cell_triangles_in_global(global_grid: FineGrid, cell_grid: FineGrid) -> np.ndarray:
    """Global triangle indices of the local triangles of a restricted grid, in local order."""
    di = cell_grid.offset[0] - global_grid.offset[0]
    dj = cell_grid.offset[1] - global_grid.offset[1]
    i, j = np.meshgrid(np.arange(cell_grid.mx - 1), np.arange(cell_grid.my - 1), indexing="xy")
    sq = ((j + dj) * (global_grid.mx - 1) + (i + di)).ravel()
    out = np.empty(2 * sq.size, dtype=np.int64)
    out[0::2] = 2 * sq
    out[1::2] = 2 * sq + 1
    return out


def jump_moments(space: CoarseSpace, solution: CoarseSolution) -> np.ndarray:
    """int_E [[u_H]] . w_{E,j} for every internal edge (rows) and weight (cols)."""
    out = []
    for e in space.mesh.internal_edges:
        if e.index in space.skipped:
            continue
        m = []
        for c in e.cells:
            cb = space.cells[c]
            u = cb.velocity @ solution.cell_coefficients(space, cb)
            R = edge_weight_rows(e, cb.grid, space.weights)
            m.append(R @ np.concatenate([u[:, 0], u[:, 1]]))
        out.append(m[1] - m[0])
    return np.array(out)


def cell_divergence(space: CoarseSpace, solution: CoarseSolution) -> np.ndarray:
    """Fine-grid int_T div u_H for every coarse cell."""
    out = np.zeros(space.mesh.n_cells)
    for cb in space.cells:
        out[cb.cell] = cb.div_integral @ solution.cell_coefficients(space, cb)
    return out


def solve_msfem(
    domain: PerforatedDomain,
    nx: int,
    ny: int,
    grid: FineGrid,
    variant=Variant.CR3,
    f=None,
    g=None,
    mode=PressureRecon.PIECEWISE_CONSTANT,
    sigma: float = DEFAULT_SIGMA,
    alpha: float = DEFAULT_ALPHA,
    jobs: int = 1,
):
    """Convenience driver: mesh, basis, coarse solve and reconstruction."""
    from .geometry import build_coarse_mesh

    mesh = build_coarse_mesh(domain, nx, ny)
    space = build_space(domain, mesh, grid, WeightSet(variant), sigma, alpha, jobs)
    sol = solve_coarse(assemble_coarse(space, f, g), mode)
    return space, sol
