"""Finite-difference elliptic operators ``-Δ_h + c`` on a :class:`Grid2D`.

Neumann data is imposed through mirrored ghost nodes, which puts ``2 g / h``
into the right-hand side of every boundary row.  Multiplying the boundary rows
by the trapezoidal factors (1/2 on edges, 1/4 at corners) makes the assembled
matrix symmetric, so the same operator is self-adjoint in the trapezoidal
inner product :func:`saddleprobe.mesh.field_inner`.  Dirichlet data replaces the
boundary rows by identity rows and lifts the known values to the right-hand
side of the interior rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .mesh import Grid2D, check_field, check_trace

__all__ = [
    "SolverConfig",
    "EllipticOperator",
    "SingularOperatorError",
    "ConvergenceError",
    "assemble",
    "solve",
    "flux_matrix",
    "neumann_stencil",
    "trapezoid_factors",
    "dump_matrix",
]

Mode = Literal["neumann", "dirichlet"]


class SingularOperatorError(ValueError):
    """Raised for the pure-Neumann Laplacian, whose kernel is the constants."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SolverConfig:
    method: Literal["direct", "cg"] = "direct"
    tol: float = 1e-10
    maxiter: int | None = None  # defaults to 10 * n_nodes

    def __post_init__(self):
        if self.method not in ("direct", "cg"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not 0.0 < self.tol < 1.0:
            raise ValueError(f"tol must lie in (0, 1), got {self.tol}")
        if self.maxiter is not None and self.maxiter < 1:
            raise ValueError(f"maxiter must be >= 1, got {self.maxiter}")


def _neumann_1d(n: int, h: float) -> sps.csr_matrix:
    main = np.full(n, 2.0)
    off = np.full(n - 1, -1.0)
    T = sps.diags([off, main, off], [-1, 0, 1], format="lil")
    T[0, 1] = -2.0
    T[n - 1, n - 2] = -2.0
    return (T / h**2).tocsr()


def _dirichlet_1d(n: int, h: float) -> sps.csr_matrix:
    main = np.full(n, 2.0)
    off = np.full(n - 1, -1.0)
    return (sps.diags([off, main, off], [-1, 0, 1]) / h**2).tocsr()


@lru_cache(maxsize=16)
def _neumann_laplacian(nx: int, ny: int) -> sps.csr_matrix:
    grid = Grid2D(nx, ny)
    return (sps.kron(sps.eye(ny), _neumann_1d(nx, grid.hx))
            + sps.kron(_neumann_1d(ny, grid.hy), sps.eye(nx))).tocsr()


@lru_cache(maxsize=16)
def _plain_laplacian(nx: int, ny: int) -> sps.csr_matrix:
    # 5-point stencil on every node; only interior rows are meaningful.
    grid = Grid2D(nx, ny)
    return (sps.kron(sps.eye(ny), _dirichlet_1d(nx, grid.hx))
            + sps.kron(_dirichlet_1d(ny, grid.hy), sps.eye(nx))).tocsr()


def trapezoid_factors(grid: Grid2D) -> np.ndarray:
    """Flat per-node factors 1, 1/2 (edges), 1/4 (corners)."""
    return (grid.node_weights / (grid.hx * grid.hy)).ravel()


def neumann_stencil(grid: Grid2D, c) -> sps.csr_matrix:
    """Unsymmetrized ghost-node operator ``-Δ_h + c`` (row form of the PDE)."""
    c = np.asarray(c, dtype=float).ravel()
    return (_neumann_laplacian(grid.nx, grid.ny) + sps.diags(c)).tocsr()


def flux_matrix(grid: Grid2D) -> sps.csr_matrix:
    """Map a loop trace of outward fluxes to the ghost-elimination source ``2g/h``."""
    i, j = grid.loop
    on_x = (i == 0) | (i == grid.nx - 1)
    on_y = (j == 0) | (j == grid.ny - 1)
    vals = 2.0 * on_x / grid.hx + 2.0 * on_y / grid.hy
    return sps.csr_matrix(
        (vals, (grid.loop_index, np.arange(grid.n_boundary))),
        shape=(grid.n_nodes, grid.n_boundary),
    )


@dataclass(frozen=True, eq=False)
class EllipticOperator:
    """Assembled ``-Δ_h + c`` with a boundary mode.

    ``matrix`` is the symmetric system actually factorized.  ``apply`` gives
    the PDE row action: the ghost-node stencil in Neumann mode, and the full
    5-point stencil with identity boundary rows in Dirichlet mode.
    """

    grid: Grid2D
    c: np.ndarray
    mode: Mode
    matrix: sps.csr_matrix
    row_scale: np.ndarray = field(repr=False)
    stencil: sps.csr_matrix = field(repr=False)

    @cached_property
    def factor(self):
        return spla.splu(self.matrix.tocsc())

    def apply(self, u) -> np.ndarray:
        u = check_field(self.grid, u).ravel()
        return (self.stencil @ u).reshape(self.grid.shape)

    def rhs(self, source=None, boundary_data=None) -> np.ndarray:
        """Flat right-hand side of the symmetric system."""
        grid = self.grid
        b = np.zeros(grid.n_nodes)
        if source is not None:
            b += check_field(grid, source).ravel()
        if self.mode == "neumann":
            if boundary_data is not None:
                b += flux_matrix(grid) @ check_trace(grid, boundary_data)
            return self.row_scale * b
        bdata = np.zeros(grid.n_boundary) if boundary_data is None else check_trace(grid, boundary_data)
        lift = np.zeros(grid.n_nodes)
        lift[grid.loop_index] = bdata
        b = b - self.stencil @ lift
        b[grid.loop_index] = bdata
        return b

    def coercivity(self, u) -> float:
        """Ratio ``(A u, u) / |u|^2`` in the trapezoidal inner product."""
        u = check_field(self.grid, u)
        w = self.grid.node_weights
        return float(np.sum(w * self.apply(u) * u) / np.sum(w * u * u))


@lru_cache(maxsize=32)
def _assemble_cached(nx: int, ny: int, c_bytes: bytes, mode: str) -> EllipticOperator:
    grid = Grid2D(nx, ny)
    c = np.frombuffer(c_bytes, dtype=float).reshape(grid.shape).copy()
    c.setflags(write=False)
    if mode == "neumann":
        stencil = neumann_stencil(grid, c)
        scale = trapezoid_factors(grid)
        matrix = (sps.diags(scale) @ stencil).tocsr()
    else:
        full = (_plain_laplacian(nx, ny) + sps.diags(c.ravel())).tocsr()
        bmask = np.zeros(grid.n_nodes, dtype=bool)
        bmask[grid.loop_index] = True
        keep = sps.diags((~bmask).astype(float))
        # Interior rows keep the full stencil; boundary rows become identity.
        stencil = (keep @ full + sps.diags(bmask.astype(float))).tocsr()
        matrix = (keep @ full @ keep + sps.diags(bmask.astype(float))).tocsr()
        scale = np.ones(grid.n_nodes)
    matrix.sort_indices()
    return EllipticOperator(grid, c, mode, matrix, scale, stencil)


def assemble(grid: Grid2D, c, mode: Mode = "neumann") -> EllipticOperator:
    """Assemble ``-Δ_h + c`` with Neumann (ghost-node) or Dirichlet rows.

    Operators are cached by ``(grid, c, mode)`` so repeated solves reuse one
    factorization.

    Raises
    ------
    SingularOperatorError
        In Neumann mode with ``c`` identically zero.
    """
    if mode not in ("neumann", "dirichlet"):
        raise ValueError(f"unknown boundary mode {mode!r}")
    c = np.broadcast_to(np.asarray(c, dtype=float), grid.shape)
    c = check_field(grid, c)
    if np.any(c < 0):
        raise ValueError("coefficient c must be nonnegative")
    if mode == "neumann" and not np.any(c > 0):
        raise SingularOperatorError(
            "pure Neumann Laplacian is singular; add a positive background coefficient"
        )
    return _assemble_cached(grid.nx, grid.ny, np.ascontiguousarray(c).tobytes(), mode)


def solve(op: EllipticOperator, source=None, boundary_data=None,
          cfg: SolverConfig | None = None) -> np.ndarray:
    """Solve ``-Δu + c u = source`` with flux or Dirichlet ``boundary_data``."""
    cfg = cfg or SolverConfig()
    b = op.rhs(source, boundary_data)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(op.grid.shape)
    if cfg.method == "direct":
        u = op.factor.solve(b)
    else:
        maxiter = cfg.maxiter or 10 * op.grid.n_nodes
        u, info = spla.cg(op.matrix, b, rtol=cfg.tol, atol=0.0, maxiter=maxiter)
        res = np.linalg.norm(op.matrix @ u - b) / bnorm
        if info != 0 or res > cfg.tol:
            raise ConvergenceError("conjugate gradient did not converge", res)
    return u.reshape(op.grid.shape)


def dump_matrix(op: EllipticOperator, path) -> None:
    """Write the system matrix as ``row col value`` lines."""
    coo = op.matrix.tocoo()
    lines = [f"{r} {c} {v:.17g}" for r, c, v in zip(coo.row, coo.col, coo.data)]
    Path(path).write_text("\n".join(lines) + "\n")
