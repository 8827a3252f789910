"""Shared (session-scoped) setups; the downscaled periodic test is reused by several modules."""

import numpy as np
import pytest

from perfostokes.fine_stokes import StokesSpec, solve_reference
from perfostokes.geometry import DiamondBand, Disc, PerforatedDomain, uniform_grid

SWIRL_EPS = 1 / 16
SWIRL_H = 1 / 256
CHANNEL_H = 1 / 200

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def swirl(x, y):
    return -(y - 0.5), x - 0.5


def poiseuille(x, y):
    return 4.0 * y * (1.0 - y), np.zeros_like(y)


@pytest.fixture(scope="session")
def swirl_domain():
    return PerforatedDomain((0.0, 0.0, 1.0, 1.0), SWIRL_EPS, Disc((0.5, 0.5), 0.25))


@pytest.fixture(scope="session")
def swirl_grid():
    return uniform_grid((0.0, 0.0, 1.0, 1.0), SWIRL_H)


@pytest.fixture(scope="session")
def swirl_reference(swirl_domain, swirl_grid):
    return solve_reference(swirl_domain, swirl_grid, StokesSpec(rhs=swirl))


@pytest.fixture(scope="session")
def channel_domain():
    return PerforatedDomain((0.0, 0.0, 1.5, 1.0), 0.15, DiamondBand(), window=(0.25, 0.0, 1.4, 1.0))


@pytest.fixture(scope="session")
def channel_grid():
    return uniform_grid((0.0, 0.0, 1.5, 1.0), CHANNEL_H)


@pytest.fixture(scope="session")
def channel_reference(channel_domain, channel_grid):
    return solve_reference(channel_domain, channel_grid, StokesSpec(dirichlet=poiseuille))


@pytest.fixture(scope="session")
def swirl_spaces(swirl_domain, swirl_grid):
    """CR2 and CR3 coarse spaces on the 4x4 mesh of the downscaled periodic test."""
    from perfostokes.geometry import build_coarse_mesh
    from perfostokes.msfem import WeightSet, build_space

    mesh = build_coarse_mesh(swirl_domain, 4, 4)
    return {v: build_space(swirl_domain, mesh, swirl_grid, WeightSet(v)) for v in ("CR2", "CR3")}


@pytest.fixture(scope="session")
def channel_solutions(channel_domain, channel_grid):
    """MsFEM solutions of the channel test on the 6x4 mesh, per variant."""
    from perfostokes.msfem import solve_msfem

    return {v: solve_msfem(channel_domain, 6, 4, channel_grid, v, f=None, g=poiseuille) for v in ("CR2", "CR3")}


def unit_cell_grid(n):
    from perfostokes.geometry import FineGrid

    return FineGrid((0.0, 0.0), 1.0 / n, n + 1, n + 1)


@pytest.fixture(scope="session")
def cells_256():
    """Correctors of the centred disc of radius 1/4 at h = 1/256 (the finest oracle grid)."""
    from perfostokes.homogenization import solve_cell_problems

    return solve_cell_problems(Disc((0.5, 0.5), 0.25), unit_cell_grid(256))
