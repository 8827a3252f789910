"""Error norms on the fine grid and log-log convergence fits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .fine_stokes import BrokenField, FineField, field_gradients

AnyField = Union[FineField, BrokenField]


class GridMismatch(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class ErrorReport:
    """Velocity errors over all of Omega and pressure errors over fluid triangles."""

    l2_abs: float
    l2_rel: float
    h1_broken_abs: float
    h1_broken_rel: float
    pressure_l2_rel: float
    pressure_l2_abs: float = 0.0

    COLUMNS = ("l2_abs", "l2_rel", "h1_broken_abs", "h1_broken_rel", "pressure_l2_abs", "pressure_l2_rel")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.COLUMNS}


def _tri_values(f: AnyField):
    v, p = f.tri_values()
    return np.asarray(v, dtype=float), np.asarray(p, dtype=float)


def p1_l2_squared(area: float, vals: np.ndarray) -> float:
    """Exact int of the square of a P1 function given by per-triangle vertex values (ntri, 3, ...)."""
    s = vals.sum(axis=1)
    q = (vals**2).sum(axis=1)
    return float(area / 12.0 * (s**2 + q).sum())


def _h1_squared(grid, vals: np.ndarray) -> float:
    g = field_gradients(grid, vals)
    return float(grid.triangle_area * (g**2).sum())


def _rel(a: float, b: float) -> float:
    if b > 0:
        return float(a / b)
    return 0.0 if a == 0 else float("inf")


def field_error(reference: AnyField, approx: AnyField, fluid: np.ndarray = None) -> ErrorReport:
    """Errors of ``approx`` against ``reference``; relative values use the reference norms.

    Velocity: L2 and broken H1 seminorm over every triangle.  Pressure: L2
    over triangles whose centroid is fluid (taken from ``reference.solid``
    unless ``fluid`` is given).
    """
    ga, gb = reference.grid, approx.grid
    if not ga.same_as(gb):
        raise GridMismatch("fields live on different fine grids")
    va, pa = _tri_values(reference)
    vb, pb = _tri_values(approx)
    area = ga.triangle_area
    dv = vb - va
    l2 = np.sqrt(p1_l2_squared(area, dv))
    l2_ref = np.sqrt(p1_l2_squared(area, va))
    h1 = np.sqrt(_h1_squared(ga, dv))
    h1_ref = np.sqrt(_h1_squared(ga, va))
    if fluid is None:
        fluid = ~np.asarray(reference.solid, dtype=bool)
    dp = (pb - pa)[fluid]
    pl2 = np.sqrt(p1_l2_squared(area, dp))
    pl2_ref = np.sqrt(p1_l2_squared(area, pa[fluid]))
    return ErrorReport(
        l2_abs=float(l2),
        l2_rel=_rel(l2, l2_ref),
        h1_broken_abs=float(h1),
        h1_broken_rel=_rel(h1, h1_ref),
        pressure_l2_rel=_rel(pl2, pl2_ref),
        pressure_l2_abs=float(pl2),
    )


def correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation coefficient of two nodal arrays."""
    return float(np.corrcoef(np.ravel(a), np.ravel(b))[0, 1])


def rate_fit(params: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(param)."""
    x = np.asarray(params, dtype=float)
    y = np.asarray(errors, dtype=float)
    if x.size < 3 or x.size != y.size:
        raise InsufficientData(f"need at least 3 (param, error) pairs, got {x.size}")
    if np.any(x <= 0) or np.any(y <= 0):
        raise InsufficientData("rate fit needs positive parameters and errors")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@dataclass
class ConvergenceTable:
    """Rows of (parameter, ErrorReport); slopes are fitted per error column."""

    parameter: str = "H"
    rows: list = field(default_factory=list)

    def add(self, value: float, report: ErrorReport) -> None:
        self.rows.append((float(value), report))

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for _, r in self.rows])

    @property
    def values(self) -> np.ndarray:
        return np.array([v for v, _ in self.rows])

    def slopes(self) -> dict:
        if len(self.rows) < 3:
            raise InsufficientData(f"need at least 3 rows, got {len(self.rows)}")
        return {c: rate_fit(self.values, self.column(c)) for c in ErrorReport.COLUMNS}
