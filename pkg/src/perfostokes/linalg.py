"""Sparse direct solves for symmetric indefinite (saddle-point) systems.

Matrices are plain ``scipy.sparse`` objects built from triplets; the
factorisation itself is UMFPACK (through cvxopt), which copes with the dense
border rows that mean-value constraints introduce far better than SuperLU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from cvxopt import matrix as cvx_matrix
from cvxopt import spmatrix as cvx_spmatrix
from cvxopt import umfpack

RESIDUAL_TOL = 1e-10
_MAX_REFINE = 4


class LinAlgError(Exception):
    """Base class for solver failures."""


class SingularMatrix(LinAlgError):
    pass


class ResidualTooLarge(LinAlgError):
    pass


class DependentConstraints(LinAlgError):
    pass


def from_triplets(rows, cols, vals, shape) -> sp.csr_matrix:
    """Compressed-row matrix from triplets; duplicate entries are summed."""
    m = sp.coo_matrix(
        (np.asarray(vals, dtype=float).ravel(), (np.asarray(rows).ravel(), np.asarray(cols).ravel())),
        shape=shape,
    )
    m.sum_duplicates()
    return m.tocsr()


def aligned_copy(a: np.ndarray, align: int = 64) -> np.ndarray:
    """C-contiguous copy starting on an ``align``-byte boundary.

    BLAS kernels may sum in an alignment-dependent order; giving arrays that
    come back from worker processes the same alignment as locally computed
    ones keeps results bitwise identical for any worker count.
    """
    a = np.asarray(a)
    buf = np.empty(a.nbytes + align, dtype=np.uint8)
    off = (-buf.ctypes.data) % align
    out = buf[off : off + a.nbytes].view(a.dtype).reshape(a.shape)
    out[...] = a
    return out


def _to_cvx(A) -> cvx_spmatrix:
    A = sp.coo_matrix(A)
    A.sum_duplicates()
    return cvx_spmatrix(
        cvx_matrix(A.data.astype(float)),
        cvx_matrix(A.row.astype(np.int64)),
        cvx_matrix(A.col.astype(np.int64)),
        A.shape,
    )


class Factorization:
    """LU factorisation of a square sparse matrix, reusable for many right-hand sides."""

    def __init__(self, A, residual_tol: float = RESIDUAL_TOL):
        A = sp.csr_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.A = A
        self.residual_tol = residual_tol
        self._M = _to_cvx(A)
        try:
            symbolic = umfpack.symbolic(self._M)
            self._F = umfpack.numeric(self._M, symbolic)
        except ArithmeticError as exc:
            raise SingularMatrix(str(exc)) from exc

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def _raw_solve(self, b: np.ndarray) -> np.ndarray:
        x = cvx_matrix(np.asfortranarray(b, dtype=float))
        umfpack.solve(self._M, self._F, x)
        return np.array(x).reshape(b.shape)

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        vec = b.ndim == 1
        B = b.reshape(self.n, -1)
        X = self._raw_solve(B)
        bnorm = np.linalg.norm(B, axis=0)
        scale = np.where(bnorm > 0, bnorm, 1.0)
        for _ in range(_MAX_REFINE):
            R = B - self.A @ X
            rel = np.linalg.norm(R, axis=0) / scale
            if not np.all(np.isfinite(X)):
                raise SingularMatrix("non-finite solution (zero pivot)")
            if np.all(rel <= self.residual_tol):
                break
            X = X + self._raw_solve(R)
        else:
            R = B - self.A @ X
            rel = np.linalg.norm(R, axis=0) / scale
            if not np.all(rel <= self.residual_tol):
                raise ResidualTooLarge(f"relative residual {rel.max():.3e} > {self.residual_tol:.1e}")
        return X.ravel() if vec else X


def solve(A, b) -> np.ndarray:
    """Direct solve with residual check ``|Ax - b| / |b| <= 1e-10``."""
    return Factorization(A).solve(b)


@dataclass
class BorderedSystem:
    """Saddle system [[core, C^T], [C, 0]] with constraint rows C."""

    core: sp.spmatrix
    constraints: Optional[sp.spmatrix] = None
    constraint_values: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.core.shape[0]

    @property
    def k(self) -> int:
        return 0 if self.constraints is None else self.constraints.shape[0]

    def matrix(self) -> sp.csr_matrix:
        if self.k == 0:
            return sp.csr_matrix(self.core)
        C = sp.csr_matrix(self.constraints)
        return sp.bmat([[self.core, C.T], [C, None]], format="csr")

    def check_constraints(self) -> None:
        if self.k == 0:
            return
        C = sp.csr_matrix(self.constraints)
        # rows touch few columns; rank-test only the used ones
        used = np.unique(C.indices)
        dense = C[:, used].toarray()
        if np.linalg.matrix_rank(dense) < self.k:
            raise DependentConstraints(f"{self.k} constraint rows are linearly dependent")

    def factorize(self) -> "BorderedFactorization":
        self.check_constraints()
        return BorderedFactorization(self)


class BorderedFactorization:
    def __init__(self, system: BorderedSystem):
        self.system = system
        self.lu = Factorization(system.matrix())

    def solve(self, rhs, constraint_values=None):
        """Return (solution, multipliers); 2-D inputs solve several columns at once."""
        n, k = self.system.n, self.system.k
        rhs = np.asarray(rhs, dtype=float)
        vec = rhs.ndim == 1
        R = rhs.reshape(n, -1)
        if constraint_values is None:
            cv = self.system.constraint_values
            constraint_values = np.zeros(k) if cv is None else cv
        D = np.asarray(constraint_values, dtype=float).reshape(k, -1 if k else R.shape[1])
        if D.shape[1] != R.shape[1]:
            if D.shape[1] == 1:
                D = np.repeat(D, R.shape[1], axis=1)
            elif R.shape[1] == 1:
                R = np.repeat(R, D.shape[1], axis=1)
            else:
                raise ValueError("right-hand side and constraint value columns disagree")
        X = self.lu.solve(np.vstack([R, D]))
        x, lam = X[:n], X[n:]
        if vec and x.shape[1] == 1:
            return x[:, 0], lam[:, 0]
        return x, lam


def solve_bordered(system: BorderedSystem, rhs, constraint_values=None):
    """Solve the bordered system; returns (solution, multipliers)."""
    return system.factorize().solve(rhs, constraint_values)
