"""Atomic CSV and legacy ASCII VTK writers."""

from __future__ import annotations

import io
import os
import tempfile
from typing import Iterable, Sequence

import numpy as np

from .fine_stokes import BrokenField, FineField


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(fmt(v) for v in r) + "\n")
    return buf.getvalue()


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write(path, csv_text(header, rows))


def _block(arr: np.ndarray) -> str:
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in np.atleast_2d(arr)) + "\n"


def vtk_text(field, title: str = "perfostokes field") -> str:
    """Legacy VTK 3.0 unstructured grid with point data velocity and pressure."""
    if isinstance(field, BrokenField):
        field = field.nodal()
    if not isinstance(field, FineField):
        raise TypeError("expected a FineField or BrokenField")
    grid = field.grid
    xy = grid.nodes()
    tri = grid.triangles()
    n, m = len(xy), len(tri)
    out = io.StringIO()
    out.write("# vtk DataFile Version 3.0\n")
    out.write(title.replace("\n", " ")[:255] + "\n")
    out.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
    out.write(f"POINTS {n} double\n")
    out.write(_block(np.column_stack([xy, np.zeros(n)])))
    out.write(f"CELLS {m} {4 * m}\n")
    out.write("\n".join(f"3 {a} {b} {c}" for a, b, c in tri) + "\n")
    out.write(f"CELL_TYPES {m}\n")
    out.write("5\n" * m)
    out.write(f"POINT_DATA {n}\n")
    out.write("VECTORS velocity double\n")
    out.write(_block(np.column_stack([field.velocity, np.zeros(n)])))
    out.write("SCALARS pressure double 1\nLOOKUP_TABLE default\n")
    out.write("\n".join(repr(float(v)) for v in field.pressure) + "\n")
    return out.getvalue()


def write_vtk(path: str, field, title: str = "perfostokes field") -> None:
    atomic_write(path, vtk_text(field, title))


def read_vtk(path: str):
    """Minimal reader for files produced by :func:`write_vtk` (points, velocity, pressure)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    i = 0
    pts = vel = pres = None
    while i < len(lines):
        tok = lines[i].split()
        if tok[:1] == ["POINTS"]:
            n = int(tok[1])
            pts = np.loadtxt(lines[i + 1 : i + 1 + n], ndmin=2)
            i += n
        elif tok[:1] == ["VECTORS"]:
            vel = np.loadtxt(lines[i + 1 : i + 1 + n], ndmin=2)
            i += n
        elif tok[:1] == ["LOOKUP_TABLE"]:
            pres = np.loadtxt(lines[i + 1 : i + 1 + n])
            i += n
        i += 1
    return pts, vel, pres
