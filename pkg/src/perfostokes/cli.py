"""Command-line front end: ``perfostokes <command> --config run.ini``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import analysis, homogenization, msfem
from .config import ConfigError, RunConfig, load_config
from .export import write_csv, write_vtk
from .fine_stokes import EmptyPattern, FineField, StokesSpec, solve_reference
from .geometry import FineGrid, GeometryError, build_coarse_mesh, uniform_grid
from .linalg import LinAlgError

log = logging.getLogger("perfostokes")

EXIT_NUMERIC, EXIT_CONFIG, EXIT_GEOMETRY = 1, 2, 3
COMMANDS = ("cell", "darcy", "basis", "bubble", "solve", "reference", "convergence")


class Context:
    def __init__(self, cfg: RunConfig, out: str, jobs: int):
        self.cfg = cfg
        self.out = out
        self.jobs = jobs

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def wants(self, fmt: str) -> bool:
        return fmt in self.cfg.formats

    def csv(self, name, header, rows):
        if self.wants("csv"):
            write_csv(self.path(name), header, rows)

    def vtk(self, name, field, title):
        if self.wants("vtk"):
            write_vtk(self.path(name), field, title)


# --------------------------------------------------------------------------
# shared pieces
# --------------------------------------------------------------------------


def _global_grid(cfg: RunConfig, h=None) -> FineGrid:
    return uniform_grid(cfg.rect, cfg.h if h is None else h)


def _reference(cfg: RunConfig, domain, grid):
    spec = StokesSpec(rhs=cfg.force(), dirichlet=cfg.boundary(), sigma=cfg.sigma, alpha=cfg.alpha)
    return solve_reference(domain, grid, spec)


def _msfem(cfg: RunConfig, domain, grid, jobs, H=None):
    nx, ny = cfg.coarse_counts(H)
    mesh = build_coarse_mesh(domain, nx, ny)
    space = msfem.build_space(domain, mesh, grid, msfem.WeightSet(cfg.variant), cfg.sigma, cfg.alpha, jobs)
    system = msfem.assemble_coarse(space, cfg.force(), cfg.boundary())
    sol = msfem.solve_coarse(system, cfg.pressure_recon)
    return space, sol


def fluid_mean_shift(field: FineField, solid) -> FineField:
    """Copy of ``field`` whose pressure has zero mean over the fluid triangles."""
    grid = field.grid
    tri = grid.triangles()[~solid]
    w = np.bincount(tri.ravel(), minlength=grid.n_nodes) * (grid.triangle_area / 3.0)
    p = field.pressure - (w @ field.pressure) / w.sum()
    return FineField(grid, field.velocity, p, field.solid)


def homogenized_error(cfg: RunConfig, eps: float, jobs: int = 1):
    """Reference solution vs homogenized velocity u* and Darcy pressure p* for one epsilon."""
    domain = cfg.make_domain(eps)
    grid = _global_grid(cfg, eps / cfg.steps_per_cell)
    ref = _reference(cfg, domain, grid)
    cells = homogenization.solve_cell_problems(
        domain.pattern, homogenization.cell_grid_for(domain, grid), cfg.sigma, cfg.alpha, jobs
    )
    darcy = homogenization.solve_darcy(domain, cells.K, cfg.force() or (0.0, 0.0), grid)
    hom = homogenization.build_homogenized(domain, cells, darcy, cfg.force() or (0.0, 0.0), grid)
    approx = fluid_mean_shift(hom.u_star, ref.solid)
    return analysis.field_error(ref, approx), cells


def _report_row(report: analysis.ErrorReport):
    return [getattr(report, c) for c in analysis.ErrorReport.COLUMNS]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_cell(ctx: Context) -> None:
    cfg = ctx.cfg
    pattern = cfg.make_pattern()
    if pattern.is_empty:
        raise EmptyPattern("cell problem requires a nonempty obstacle")
    grid = uniform_grid((0.0, 0.0, 1.0, 1.0), cfg.cell_h)
    cells = homogenization.solve_cell_problems(pattern, grid, cfg.sigma, cfg.alpha, ctx.jobs)
    if cfg.gamma:
        cells = homogenization.solve_gamma(pattern, grid, cells, cfg.sigma, cfg.alpha, ctx.jobs)
    adj = cells.adjoint_permeability()
    ctx.csv(
        "permeability.csv",
        ["i", "j", "K", "K_energy"],
        [[i + 1, j + 1, cells.K[i, j], adj[i, j]] for i in range(2) for j in range(2)],
    )
    for i, w in enumerate(cells.w):
        ctx.vtk(f"w{i + 1}.vtk", w, f"cell corrector w{i + 1}")
    for (i, j), gm in sorted((cells.gamma or {}).items()):
        ctx.vtk(f"gamma_{i + 1}{j + 1}.vtk", gm, f"second-order corrector gamma{i + 1}{j + 1}")
    print("permeability K (fluid average of w_i . e_j):")
    for i in range(2):
        print("  " + "  ".join(f"{cells.K[i, j]: .10e}" for j in range(2)))


def cmd_darcy(ctx: Context) -> None:
    cfg = ctx.cfg
    pattern = cfg.make_pattern()
    if pattern.is_empty:
        raise EmptyPattern("cell problem requires a nonempty obstacle")
    domain = cfg.make_domain()
    cells = homogenization.solve_cell_problems(
        pattern, uniform_grid((0.0, 0.0, 1.0, 1.0), cfg.cell_h), cfg.sigma, cfg.alpha, ctx.jobs
    )
    grid = _global_grid(cfg)
    f = cfg.force() or (0.0, 0.0)
    darcy = homogenization.solve_darcy(domain, cells.K, f, grid)
    flux = darcy.flux(f)
    tri = grid.triangles()
    n = grid.n_nodes
    cnt = np.bincount(tri.ravel(), minlength=n)
    nodal_flux = np.column_stack(
        [np.bincount(tri.ravel(), weights=np.repeat(flux[:, d], 3), minlength=n) / cnt for d in range(2)]
    )
    ctx.vtk("darcy.vtk", FineField(grid, nodal_flux, darcy.p_star), "Darcy flux and pressure")
    ctx.csv(
        "darcy.csv",
        ["K11", "K12", "K21", "K22", "p_min", "p_max", "compatibility_residual"],
        [[*cells.K.ravel(), darcy.p_star.min(), darcy.p_star.max(), darcy.compatibility_residual]],
    )


def cmd_basis(ctx: Context) -> None:
    cfg = ctx.cfg
    if cfg.edge is None:
        raise ConfigError("basis command needs [basis] edge")
    domain = cfg.make_domain()
    grid = _global_grid(cfg)
    nx, ny = cfg.coarse_counts()
    mesh = build_coarse_mesh(domain, nx, ny)
    if cfg.edge >= len(mesh.edges) or not mesh.edges[cfg.edge].internal:
        raise ConfigError(f"edge {cfg.edge} is not an internal coarse edge")
    weights = msfem.WeightSet(cfg.variant)
    if cfg.weight >= weights.s:
        raise ConfigError(f"weight index {cfg.weight} out of range for {weights.variant.value}")
    bf = msfem.build_basis(domain, mesh, grid, weights, cfg.edge, cfg.weight, cfg.sigma, cfg.alpha)
    rows = []
    for c, part in sorted(bf.parts.items()):
        ctx.vtk(f"basis_E{cfg.edge}_{cfg.weight}_T{c}.vtk", part, f"basis edge {cfg.edge} weight {cfg.weight} cell {c}")
        vec = np.concatenate([part.velocity[:, 0], part.velocity[:, 1]])
        for e in mesh.cell_edges[c]:
            m = msfem.edge_weight_rows(mesh.edges[e], part.grid, weights) @ vec
            rows += [[c, int(e), j, m[j], bf.div_const[c]] for j in range(weights.s)]
    ctx.csv(f"basis_E{cfg.edge}_{cfg.weight}.csv", ["cell", "edge", "weight", "moment", "div_const"], rows)


def cmd_bubble(ctx: Context) -> None:
    cfg = ctx.cfg
    domain = cfg.make_domain()
    grid = _global_grid(cfg)
    nx, ny = cfg.coarse_counts()
    mesh = build_coarse_mesh(domain, nx, ny)
    if cfg.cell >= mesh.n_cells or cfg.weight > 1:
        raise ConfigError("bubble needs [basis] cell inside the mesh and weight in {0, 1}")
    field = msfem.build_bubble(domain, mesh, grid, cfg.cell, cfg.weight, msfem.WeightSet(cfg.variant), cfg.sigma, cfg.alpha)
    ctx.vtk(f"bubble_T{cfg.cell}_{cfg.weight}.vtk", field, f"bubble cell {cfg.cell} component {cfg.weight}")
    ctx.csv(
        f"bubble_T{cfg.cell}_{cfg.weight}.csv",
        ["cell", "component", "max_speed"],
        [[cfg.cell, cfg.weight, float(np.linalg.norm(field.velocity, axis=1).max())]],
    )


def cmd_solve(ctx: Context) -> None:
    cfg = ctx.cfg
    domain = cfg.make_domain()
    grid = _global_grid(cfg)
    space, sol = _msfem(cfg, domain, grid, ctx.jobs)
    ctx.vtk("msfem.vtk", sol.reconstructed, f"MsFEM {cfg.variant} solution")
    inv = {v: k for k, v in space.dof_map.items()}
    ctx.csv(
        "coefficients.csv",
        ["dof", "edge", "weight", "value"],
        [[d, inv[d][0], inv[d][1], sol.u_coeffs[d]] for d in range(space.n_dof)],
    )
    ctx.csv("pressure.csv", ["cell", "p"], [[c, p] for c, p in enumerate(sol.p_cells)])
    if cfg.reference:
        ref = _reference(cfg, domain, grid)
        ctx.vtk("reference.vtk", ref, "reference solution")
        rep = analysis.field_error(ref, sol.reconstructed)
        corr = analysis.correlation(sol.reconstructed.nodal().velocity[:, 0], ref.velocity[:, 0])
        ctx.csv(
            "errors.csv",
            ["variant", "nx", "ny", *analysis.ErrorReport.COLUMNS, "u1_correlation"],
            [[cfg.variant, space.mesh.nx, space.mesh.ny, *_report_row(rep), corr]],
        )
        print(f"{cfg.variant}: l2_rel={rep.l2_rel:.6e} h1_rel={rep.h1_broken_rel:.6e} p_rel={rep.pressure_l2_rel:.6e}")


def cmd_reference(ctx: Context) -> None:
    cfg = ctx.cfg
    domain = cfg.make_domain()
    grid = _global_grid(cfg)
    ref = _reference(cfg, domain, grid)
    ctx.vtk("reference.vtk", ref, "reference solution")
    speed = np.linalg.norm(ref.velocity, axis=1)
    ctx.csv("reference.csv", ["nodes", "max_speed", "p_min", "p_max"], [[grid.n_nodes, speed.max(), ref.pressure.min(), ref.pressure.max()]])


def cmd_convergence(ctx: Context) -> None:
    cfg = ctx.cfg
    values = cfg.sweep_values
    if len(values) < 3:
        raise analysis.InsufficientData(f"convergence needs at least 3 sweep values, got {len(values)}")
    table = analysis.ConvergenceTable(cfg.sweep_mode)
    if cfg.sweep_mode == "H":
        domain = cfg.make_domain()
        grid = _global_grid(cfg)
        ref = _reference(cfg, domain, grid)
        for H in values:
            _, sol = _msfem(cfg, domain, grid, ctx.jobs, H)
            table.add(H, analysis.field_error(ref, sol.reconstructed))
    else:
        for eps in values:
            rep, _ = homogenized_error(cfg, eps, ctx.jobs)
            table.add(eps, rep)
    slopes = table.slopes()
    rows = [[v, *_report_row(r)] for v, r in table.rows]
    rows.append(["slope", *[slopes[c] for c in analysis.ErrorReport.COLUMNS]])
    ctx.csv("convergence.csv", [cfg.sweep_mode, *analysis.ErrorReport.COLUMNS], rows)
    for c in ("l2_abs", "h1_broken_abs", "pressure_l2_abs"):
        print(f"slope {c}: {slopes[c]:.4f}")


HANDLERS = {
    "cell": cmd_cell,
    "darcy": cmd_darcy,
    "basis": cmd_basis,
    "bubble": cmd_bubble,
    "solve": cmd_solve,
    "reference": cmd_reference,
    "convergence": cmd_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perfostokes", description="Multiscale Stokes solver for perforated domains")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, metavar="PATH")
        s.add_argument("--out", metavar="DIR", default=None)
        s.add_argument("--variant", choices=("cr2", "cr3"), default=None)
        s.add_argument("--jobs", type=int, default=None, metavar="N")
        s.add_argument("--seed", type=int, default=None, help="reserved; has no effect")
    return p


def resolve_jobs(flag) -> int:
    if flag is not None:
        jobs = flag
    else:
        env = os.environ.get("PERFOSTOKES_JOBS", "").strip()
        try:
            jobs = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"PERFOSTOKES_JOBS must be an integer, got {env!r}") from None
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    return jobs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.variant:
            cfg = replace(cfg, variant=args.variant.upper())
        ctx = Context(cfg, args.out or cfg.directory, resolve_jobs(args.jobs))
        HANDLERS[args.command](ctx)
    except (ConfigError, EmptyPattern, analysis.InsufficientData) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GeometryError, msfem.FullySolidEdge) as exc:
        print(f"geometry error: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except (LinAlgError, msfem.AssemblyError, ArithmeticError, ValueError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
