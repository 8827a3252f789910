"""Perforated domains, coarse quadrilateral meshes and fine Cartesian grids.

Obstacles are only ever resolved through point queries (``is_solid``); no
boundary-fitted meshing happens anywhere in the package.

Orientation convention used throughout: vertical coarse edges have normal +x,
horizontal ones +y, and the arclength parameter of an edge increases in +y
(vertical) or +x (horizontal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

_TOL = 1e-12


class GeometryError(Exception):
    """Invalid geometric input."""


class NonAlignedCell(GeometryError):
    pass


class NonAlignedEdge(GeometryError):
    pass


# --------------------------------------------------------------------------
# perforation patterns (all in unit-cell coordinates)
# --------------------------------------------------------------------------


class PerforationPattern:
    """Obstacle shape B inside the unit cell Y = (0, 1)^2."""

    def contains(self, y1, y2):
        raise NotImplementedError

    def bbox(self):
        """Bounding box (xmin, ymin, xmax, ymax) in cell units, or None."""
        raise NotImplementedError

    @property
    def is_empty(self) -> bool:
        return False

    def validate(self, samples: int = 128) -> None:
        """Check that B stays away from dY and that Y minus B is connected."""
        if self.is_empty:
            return
        box = self.bbox()
        if box[0] <= 0.0 or box[1] <= 0.0 or box[2] >= 1.0 or box[3] >= 1.0:
            raise GeometryError(f"obstacle bounding box {box} touches the cell boundary")
        t = (np.arange(samples) + 0.5) / samples
        yy, xx = np.meshgrid(t, t, indexing="ij")
        fluid = ~self.contains(xx, yy)
        _, ncomp = ndimage.label(fluid)
        if ncomp != 1:
            raise GeometryError(f"fluid part of the cell has {ncomp} components")


@dataclass(frozen=True)
class Disc(PerforationPattern):
    center: tuple = (0.5, 0.5)
    radius: float = 0.25

    def contains(self, y1, y2):
        return (np.asarray(y1) - self.center[0]) ** 2 + (np.asarray(y2) - self.center[1]) ** 2 < self.radius**2

    def bbox(self):
        cx, cy = self.center
        r = self.radius
        return (cx - r, cy - r, cx + r, cy + r)


@dataclass(frozen=True)
class DiamondBand(PerforationPattern):
    """Tilted band 1_{|y1+y2-1|<1/2} 1_{|y1-y2|<1/4} (channel test obstacle)."""

    def contains(self, y1, y2):
        y1 = np.asarray(y1)
        y2 = np.asarray(y2)
        return (np.abs(y1 + y2 - 1.0) < 0.5) & (np.abs(y1 - y2) < 0.25)

    def bbox(self):
        # corners of the rotated rectangle: x = (s + d)/2 with s in 1 +- 1/2, d in +- 1/4
        return (0.125, 0.125, 0.875, 0.875)


@dataclass(frozen=True)
class Union(PerforationPattern):
    parts: tuple = ()

    def contains(self, y1, y2):
        out = np.zeros(np.broadcast(np.asarray(y1), np.asarray(y2)).shape, dtype=bool)
        for p in self.parts:
            out |= p.contains(y1, y2)
        return out

    def bbox(self):
        boxes = [p.bbox() for p in self.parts if not p.is_empty]
        if not boxes:
            return None
        b = np.array(boxes)
        return (b[:, 0].min(), b[:, 1].min(), b[:, 2].max(), b[:, 3].max())

    @property
    def is_empty(self) -> bool:
        return all(p.is_empty for p in self.parts)


@dataclass(frozen=True)
class Empty(PerforationPattern):
    def contains(self, y1, y2):
        return np.zeros(np.broadcast(np.asarray(y1), np.asarray(y2)).shape, dtype=bool)

    def bbox(self):
        return None

    @property
    def is_empty(self) -> bool:
        return True


# --------------------------------------------------------------------------
# domain
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PerforatedDomain:
    """Rectangle with a periodic array of holes of period ``epsilon``.

    The lattice of cells is anchored at the origin: Y_i = eps * (Y + i).
    A hole B_i is kept iff Y_i lies inside ``rect`` and, when a ``window`` is
    given, B_i lies inside the window.
    """

    rect: tuple
    epsilon: float = 1.0
    pattern: PerforationPattern = field(default_factory=Empty)
    window: Optional[tuple] = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.rect
        if not (x1 > x0 and y1 > y0):
            raise GeometryError(f"degenerate rectangle {self.rect}")
        if self.epsilon <= 0:
            raise GeometryError("epsilon must be positive")
        self.pattern.validate()

    @property
    def width(self) -> float:
        return self.rect[2] - self.rect[0]

    @property
    def height(self) -> float:
        return self.rect[3] - self.rect[1]

    def _active(self, i1, i2):
        eps = self.epsilon
        x0, y0, x1, y1 = self.rect
        tol = _TOL * max(1.0, abs(x0), abs(x1), abs(y0), abs(y1))
        ok = (eps * i1 >= x0 - tol) & (eps * (i1 + 1) <= x1 + tol)
        ok &= (eps * i2 >= y0 - tol) & (eps * (i2 + 1) <= y1 + tol)
        if self.window is not None and not self.pattern.is_empty:
            bx0, by0, bx1, by1 = self.pattern.bbox()
            w0, v0, w1, v1 = self.window
            ok &= (eps * (i1 + bx0) > w0) & (eps * (i1 + bx1) < w1)
            ok &= (eps * (i2 + by0) > v0) & (eps * (i2 + by1) < v1)
        return ok

    def active_cells(self) -> np.ndarray:
        """Integer lattice indices (k, 2) of all active hole cells."""
        if self.pattern.is_empty:
            return np.zeros((0, 2), dtype=int)
        eps = self.epsilon
        x0, y0, x1, y1 = self.rect
        r1 = np.arange(math.floor(x0 / eps) - 1, math.ceil(x1 / eps) + 1)
        r2 = np.arange(math.floor(y0 / eps) - 1, math.ceil(y1 / eps) + 1)
        i1, i2 = np.meshgrid(r1, r2, indexing="xy")
        i1 = i1.ravel()
        i2 = i2.ravel()
        keep = self._active(i1, i2)
        return np.column_stack([i1[keep], i2[keep]])

    def is_solid(self, x, y):
        """Vectorised membership test for the active holes."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.pattern.is_empty:
            return np.zeros(np.broadcast(x, y).shape, dtype=bool)
        s1 = x / self.epsilon
        s2 = y / self.epsilon
        i1 = np.floor(s1)
        i2 = np.floor(s2)
        return self._active(i1, i2) & self.pattern.contains(s1 - i1, s2 - i2)


def is_solid(domain: PerforatedDomain, x) -> bool:
    """Point query: True iff ``x`` lies in an active hole."""
    return bool(domain.is_solid(x[0], x[1]))


# --------------------------------------------------------------------------
# coarse mesh
# --------------------------------------------------------------------------

BOTTOM, RIGHT, TOP, LEFT = range(4)


@dataclass(frozen=True)
class CoarseEdge:
    index: int
    start: tuple
    end: tuple
    vertical: bool
    cells: tuple  # (minus-side cell, plus-side cell); -1 where outside

    @property
    def normal(self) -> np.ndarray:
        return np.array([1.0, 0.0]) if self.vertical else np.array([0.0, 1.0])

    @property
    def normal_component(self) -> int:
        return 0 if self.vertical else 1

    @property
    def length(self) -> float:
        return abs(self.end[1] - self.start[1]) if self.vertical else abs(self.end[0] - self.start[0])

    @property
    def internal(self) -> bool:
        return self.cells[0] >= 0 and self.cells[1] >= 0

    def adjacent(self):
        return tuple(c for c in self.cells if c >= 0)

    def outward_sign(self, cell: int) -> int:
        """+1 if the edge normal points out of ``cell``."""
        if cell == self.cells[0]:
            return 1
        if cell == self.cells[1]:
            return -1
        raise ValueError(f"cell {cell} is not adjacent to edge {self.index}")


@dataclass(frozen=True)
class CoarseMesh:
    rect: tuple
    nx: int
    ny: int
    edges: tuple
    cell_edges: np.ndarray  # (ncells, 4): bottom, right, top, left

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def hx(self) -> float:
        return (self.rect[2] - self.rect[0]) / self.nx

    @property
    def hy(self) -> float:
        return (self.rect[3] - self.rect[1]) / self.ny

    @property
    def H(self) -> float:
        return max(self.hx, self.hy)

    def cell_index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def cell_ij(self, c: int):
        return c % self.nx, c // self.nx

    def cell_rect(self, c: int) -> tuple:
        i, j = self.cell_ij(c)
        x0, y0 = self.rect[0], self.rect[1]
        return (x0 + i * self.hx, y0 + j * self.hy, x0 + (i + 1) * self.hx, y0 + (j + 1) * self.hy)

    @property
    def internal_edges(self):
        return [e for e in self.edges if e.internal]

    @property
    def boundary_edges(self):
        return [e for e in self.edges if not e.internal]


def build_coarse_mesh(domain: PerforatedDomain, nx: int, ny: int) -> CoarseMesh:
    if nx < 1 or ny < 1:
        raise GeometryError("coarse mesh needs at least one cell per direction")
    x0, y0, x1, y1 = domain.rect
    xs = [x0 + (x1 - x0) * i / nx for i in range(nx + 1)]
    ys = [y0 + (y1 - y0) * j / ny for j in range(ny + 1)]
    edges = []
    cell_edges = -np.ones((nx * ny, 4), dtype=int)

    def cell(i, j):
        return j * nx + i if 0 <= i < nx and 0 <= j < ny else -1

    # vertical edges, x = xs[i], between cell (i-1, j) and (i, j)
    for j in range(ny):
        for i in range(nx + 1):
            e = CoarseEdge(len(edges), (xs[i], ys[j]), (xs[i], ys[j + 1]), True, (cell(i - 1, j), cell(i, j)))
            edges.append(e)
            if e.cells[0] >= 0:
                cell_edges[e.cells[0], RIGHT] = e.index
            if e.cells[1] >= 0:
                cell_edges[e.cells[1], LEFT] = e.index
    # horizontal edges, y = ys[j], between cell (i, j-1) and (i, j)
    for j in range(ny + 1):
        for i in range(nx):
            e = CoarseEdge(len(edges), (xs[i], ys[j]), (xs[i + 1], ys[j]), False, (cell(i, j - 1), cell(i, j)))
            edges.append(e)
            if e.cells[0] >= 0:
                cell_edges[e.cells[0], TOP] = e.index
            if e.cells[1] >= 0:
                cell_edges[e.cells[1], BOTTOM] = e.index
    cell_edges.setflags(write=False)
    return CoarseMesh(tuple(domain.rect), nx, ny, tuple(edges), cell_edges)


# --------------------------------------------------------------------------
# fine grids
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FineGrid:
    """Tensor grid of ``mx`` x ``my`` nodes with step ``h``.

    Node (i, j) sits at ``origin + (offset + (i, j)) * h`` so that a restricted
    grid reproduces the parent's coordinates bit for bit.  Every grid square is
    split along its lower-left to upper-right diagonal.
    """

    origin: tuple
    h: float
    mx: int
    my: int
    offset: tuple = (0, 0)

    @property
    def n_nodes(self) -> int:
        return self.mx * self.my

    @property
    def n_squares(self) -> int:
        return (self.mx - 1) * (self.my - 1)

    @property
    def n_triangles(self) -> int:
        return 2 * self.n_squares

    @property
    def triangle_area(self) -> float:
        return 0.5 * self.h * self.h

    @property
    def rect(self) -> tuple:
        xs, ys = self.axes()
        return (xs[0], ys[0], xs[-1], ys[-1])

    def axes(self):
        xs = self.origin[0] + (self.offset[0] + np.arange(self.mx)) * self.h
        ys = self.origin[1] + (self.offset[1] + np.arange(self.my)) * self.h
        return xs, ys

    def nodes(self) -> np.ndarray:
        xs, ys = self.axes()
        xx, yy = np.meshgrid(xs, ys, indexing="xy")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def triangles(self) -> np.ndarray:
        """(ntri, 3) node indices; triangle 2k is the lower, 2k+1 the upper half of square k."""
        mx = self.mx
        i, j = np.meshgrid(np.arange(mx - 1), np.arange(self.my - 1), indexing="xy")
        ll = (j * mx + i).ravel()
        lr = ll + 1
        ul = ll + mx
        ur = ul + 1
        tri = np.empty((2 * ll.size, 3), dtype=np.int64)
        tri[0::2] = np.column_stack([ll, lr, ur])
        tri[1::2] = np.column_stack([ll, ur, ul])
        return tri

    def centroids(self) -> np.ndarray:
        h = self.h
        i, j = np.meshgrid(np.arange(self.mx - 1), np.arange(self.my - 1), indexing="xy")
        bx = self.origin[0] + (self.offset[0] + i.ravel()) * h
        by = self.origin[1] + (self.offset[1] + j.ravel()) * h
        c = np.empty((2 * bx.size, 2))
        c[0::2, 0] = bx + 2 * h / 3
        c[0::2, 1] = by + h / 3
        c[1::2, 0] = bx + h / 3
        c[1::2, 1] = by + 2 * h / 3
        return c

    def boundary_nodes(self) -> np.ndarray:
        mx, my = self.mx, self.my
        i, j = np.meshgrid(np.arange(mx), np.arange(my), indexing="xy")
        mask = (i == 0) | (i == mx - 1) | (j == 0) | (j == my - 1)
        return np.flatnonzero(mask.ravel())

    def same_as(self, other: "FineGrid") -> bool:
        if self.mx != other.mx or self.my != other.my:
            return False
        a = self.axes()
        b = other.axes()
        return np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def uniform_grid(rect: Sequence[float], h: float) -> FineGrid:
    """Grid on ``rect`` with step ``h``; the rectangle must be a whole number of steps."""
    x0, y0, x1, y1 = rect
    nx = _integer_ratio(x1 - x0, h)
    ny = _integer_ratio(y1 - y0, h)
    if nx is None or ny is None:
        raise NonAlignedCell(f"rectangle {tuple(rect)} is not a whole number of steps h={h}")
    return FineGrid((float(x0), float(y0)), float(h), nx + 1, ny + 1)


def _integer_ratio(length: float, h: float) -> Optional[int]:
    r = length / h
    k = round(r)
    if k < 1 or abs(r - k) > 1e-9 * max(1.0, r):
        return None
    return int(k)


def restrict_fine_grid(grid: FineGrid, cell_rect: Sequence[float]) -> FineGrid:
    """Sub-grid covering a coarse cell; nodes coincide exactly with the parent's."""
    x0, y0, x1, y1 = cell_rect
    h = grid.h
    gx0 = grid.origin[0] + grid.offset[0] * h
    gy0 = grid.origin[1] + grid.offset[1] * h
    idx = []
    for v, g0 in ((x0, gx0), (y0, gy0), (x1, gx0), (y1, gy0)):
        k = _integer_ratio(v - g0, h) if abs(v - g0) > 1e-14 else 0
        if k is None:
            raise NonAlignedCell(f"cell corner {v} is not on the fine grid (h={h})")
        idx.append(k)
    i0, j0, i1, j1 = idx
    if i1 <= i0 or j1 <= j0 or i1 >= grid.mx or j1 >= grid.my:
        raise NonAlignedCell(f"cell {tuple(cell_rect)} is not inside the fine grid")
    return FineGrid(grid.origin, h, i1 - i0 + 1, j1 - j0 + 1, (grid.offset[0] + i0, grid.offset[1] + j0))


@dataclass(frozen=True)
class EdgeSegments:
    """Fine sub-segments of a coarse edge on a particular grid."""

    nodes: np.ndarray  # (n+1,) grid node indices in increasing parameter order
    t: np.ndarray  # (n+1,) parameter values in [0, 1]
    length: float

    @property
    def n_segments(self) -> int:
        return self.nodes.size - 1

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.diff(self.t) * self.length


def edge_segments(edge: CoarseEdge, grid: FineGrid) -> EdgeSegments:
    h = grid.h
    gx0 = grid.origin[0] + grid.offset[0] * h
    gy0 = grid.origin[1] + grid.offset[1] * h
    (ax, ay), (bx, by) = edge.start, edge.end

    def idx(v, g0, name):
        if abs(v - g0) <= 1e-14:
            return 0
        k = _integer_ratio(v - g0, h)
        if k is None:
            raise NonAlignedEdge(f"edge {edge.index}: {name}={v} is not on a grid line")
        return k

    if edge.vertical:
        i = idx(ax, gx0, "x")
        j0, j1 = idx(ay, gy0, "y0"), idx(by, gy0, "y1")
        if not (0 <= i < grid.mx and 0 <= j0 < j1 < grid.my):
            raise NonAlignedEdge(f"edge {edge.index} is not inside the grid")
        nodes = np.arange(j0, j1 + 1) * grid.mx + i
    else:
        j = idx(ay, gy0, "y")
        i0, i1 = idx(ax, gx0, "x0"), idx(bx, gx0, "x1")
        if not (0 <= j < grid.my and 0 <= i0 < i1 < grid.mx):
            raise NonAlignedEdge(f"edge {edge.index} is not inside the grid")
        nodes = j * grid.mx + np.arange(i0, i1 + 1)
    n = nodes.size - 1
    return EdgeSegments(nodes, np.arange(n + 1) / n, edge.length)


def edge_fully_solid(domain: PerforatedDomain, edge: CoarseEdge, grid: FineGrid) -> bool:
    """True if every fine-segment midpoint of ``edge`` is inside an obstacle."""
    seg = edge_segments(edge, grid)
    tm = 0.5 * (seg.t[:-1] + seg.t[1:])
    (ax, ay), (bx, by) = edge.start, edge.end
    return bool(np.all(domain.is_solid(ax + tm * (bx - ax), ay + tm * (by - ay))))
