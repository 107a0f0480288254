"""Uniform grids on the unit square and operators on the boundary loop.

Fields are stored as arrays of shape ``(ny, nx)`` with ``field[j, i]`` the
value at ``(x_i, y_j)``; flattening in C order gives the node index
``k = j * nx + i``.  Boundary traces are 1-D arrays ordered along the closed
counterclockwise loop that starts at the origin corner.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sps

__all__ = [
    "Grid2D",
    "build_grid",
    "trace",
    "embed",
    "normal_derivative",
    "surface_laplacian",
    "surface_laplacian_matrix",
    "boundary_inner",
    "field_inner",
    "field_norm",
    "check_field",
    "check_trace",
    "write_field",
    "read_field",
    "write_trace",
    "read_trace",
]


@dataclass(frozen=True)
class Grid2D:
    """Node-centred uniform grid on ``[0, 1]^2``.

    Parameters
    ----------
    nx, ny : int
        Number of nodes along x and y (each at least 3).
    """

    nx: int
    ny: int

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise TypeError("node counts must be integers")
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs at least 3 nodes per axis, got ({self.nx}, {self.ny})")

    @property
    def hx(self) -> float:
        return 1.0 / (self.nx - 1)

    @property
    def hy(self) -> float:
        return 1.0 / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def n_boundary(self) -> int:
        return 2 * (self.nx - 1) + 2 * (self.ny - 1)

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx)

    @cached_property
    def y(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.ny)

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate fields ``(X, Y)`` of shape ``(ny, nx)``."""
        return np.meshgrid(self.x, self.y, indexing="xy")

    @cached_property
    def loop(self) -> tuple[np.ndarray, np.ndarray]:
        """Column and row indices ``(i, j)`` of the boundary loop."""
        nx, ny = self.nx, self.ny
        i = np.concatenate([
            np.arange(0, nx - 1),               # bottom, left to right
            np.full(ny - 1, nx - 1),            # right, bottom to top
            np.arange(nx - 1, 0, -1),           # top, right to left
            np.zeros(ny - 1, dtype=int),        # left, top to bottom
        ])
        j = np.concatenate([
            np.zeros(nx - 1, dtype=int),
            np.arange(0, ny - 1),
            np.full(nx - 1, ny - 1),
            np.arange(ny - 1, 0, -1),
        ])
        return i, j

    @cached_property
    def loop_index(self) -> np.ndarray:
        """Flat node index of every loop position."""
        i, j = self.loop
        return j * self.nx + i

    @cached_property
    def segment_lengths(self) -> np.ndarray:
        """Length of the segment from loop node ``k`` to ``k + 1``."""
        return np.concatenate([
            np.full(self.nx - 1, self.hx),
            np.full(self.ny - 1, self.hy),
            np.full(self.nx - 1, self.hx),
            np.full(self.ny - 1, self.hy),
        ])

    @cached_property
    def arclength_weights(self) -> np.ndarray:
        """Dual-cell arclength per loop node (``hx``, ``hy``, or their mean at corners)."""
        seg = self.segment_lengths
        return 0.5 * (seg + np.roll(seg, 1))

    @cached_property
    def normals(self) -> np.ndarray:
        """Outward unit normal per loop node; corners get the normalized diagonal."""
        i, j = self.loop
        n = np.zeros((self.n_boundary, 2))
        n[i == 0, 0] = -1.0
        n[i == self.nx - 1, 0] = 1.0
        n[j == 0, 1] = -1.0
        n[j == self.ny - 1, 1] = 1.0
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def corner_mask(self) -> np.ndarray:
        i, j = self.loop
        return ((i == 0) | (i == self.nx - 1)) & ((j == 0) | (j == self.ny - 1))

    @cached_property
    def node_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights, shape ``(ny, nx)``; they sum to 1."""
        wx = np.full(self.nx, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.hy)
        wy[[0, -1]] *= 0.5
        return np.outer(wy, wx)

    @cached_property
    def interior_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[1:-1, 1:-1] = True
        return m

    def sample_mask(self, margin: int = 2) -> np.ndarray:
        """Nodes at least ``margin`` steps away from every edge."""
        m = np.zeros(self.shape, dtype=bool)
        if self.nx > 2 * margin and self.ny > 2 * margin:
            m[margin:self.ny - margin, margin:self.nx - margin] = True
        return m

    def node_of(self, x: float, y: float) -> tuple[int, int]:
        """Nearest node ``(i, j)`` to the point ``(x, y)``."""
        return int(round(x / self.hx)), int(round(y / self.hy))


def build_grid(nx: int, ny: int) -> Grid2D:
    return Grid2D(int(nx), int(ny))


def check_field(grid: Grid2D, field) -> np.ndarray:
    arr = np.asarray(field, dtype=float)
    if arr.shape != grid.shape:
        raise ValueError(f"field shape {arr.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field contains non-finite values")
    return arr


def check_trace(grid: Grid2D, values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (grid.n_boundary,):
        raise ValueError(f"trace length {arr.shape} does not match loop length {grid.n_boundary}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("trace contains non-finite values")
    return arr


def trace(grid: Grid2D, field) -> np.ndarray:
    """Restrict a field to the boundary loop."""
    i, j = grid.loop
    return check_field(grid, field)[j, i].copy()


def embed(grid: Grid2D, values, fill: float = 0.0) -> np.ndarray:
    """Place boundary values into a field that is ``fill`` in the interior."""
    out = np.full(grid.shape, float(fill))
    i, j = grid.loop
    out[j, i] = check_trace(grid, values)
    return out


def normal_derivative(grid: Grid2D, field) -> np.ndarray:
    """Outward normal derivative on the loop by second-order one-sided differences.

    Corners take the mean of the two axis derivatives.
    """
    u = check_field(grid, field)
    hx, hy = grid.hx, grid.hy
    dx = np.zeros(grid.shape)
    dy = np.zeros(grid.shape)
    dx[:, 0] = (3 * u[:, 0] - 4 * u[:, 1] + u[:, 2]) / (2 * hx)
    dx[:, -1] = (3 * u[:, -1] - 4 * u[:, -2] + u[:, -3]) / (2 * hx)
    dy[0, :] = (3 * u[0, :] - 4 * u[1, :] + u[2, :]) / (2 * hy)
    dy[-1, :] = (3 * u[-1, :] - 4 * u[-2, :] + u[-3, :]) / (2 * hy)

    i, j = grid.loop
    on_x = (i == 0) | (i == grid.nx - 1)
    on_y = (j == 0) | (j == grid.ny - 1)
    out = np.where(on_x, dx[j, i], 0.0) + np.where(on_y, dy[j, i], 0.0)
    out[on_x & on_y] *= 0.5
    return out


def surface_laplacian_matrix(grid: Grid2D) -> sps.csr_matrix:
    """Sparse matrix of the loop Laplacian ``P``.

    ``P = W^{-1} K`` with ``K`` the periodic stiffness matrix built from segment
    lengths and ``W`` the arclength weights.  On a uniform loop this is the
    ``(-1, 2, -1) / h^2`` stencil; in general ``P`` is self-adjoint for the
    arclength-weighted inner product.
    """
    n = grid.n_boundary
    seg = grid.segment_lengths
    inv = 1.0 / seg
    k = np.arange(n)
    nxt = (k + 1) % n
    rows = np.concatenate([k, k, nxt, nxt])
    cols = np.concatenate([k, nxt, k, nxt])
    vals = np.concatenate([inv, -inv, -inv, inv])
    stiff = sps.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return (sps.diags(1.0 / grid.arclength_weights) @ stiff).tocsr()


def surface_laplacian(grid: Grid2D, values, power: int = 1) -> np.ndarray:
    """Apply ``P`` (``power`` times) to a boundary trace."""
    if power < 0 or int(power) != power:
        raise ValueError(f"power must be a nonnegative integer, got {power}")
    out = check_trace(grid, values).copy()
    if power == 0:
        return out
    P = surface_laplacian_matrix(grid)
    for _ in range(int(power)):
        out = P @ out
    return out


def boundary_inner(grid: Grid2D, a, b) -> float:
    """Arclength-weighted inner product on the loop."""
    return float(np.sum(grid.arclength_weights * np.asarray(a) * np.asarray(b)))


def field_inner(grid: Grid2D, a, b) -> float:
    """Trapezoidal L2 inner product of two fields."""
    return float(np.sum(grid.node_weights * np.asarray(a) * np.asarray(b)))


def field_norm(grid: Grid2D, a) -> float:
    return float(np.sqrt(field_inner(grid, a, a)))


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_field(path, grid: Grid2D, field, extra_lines: list[str] | None = None) -> None:
    """Write ``nx ny`` then ``ny`` rows of ``nx`` values (y increasing)."""
    u = check_field(grid, field)
    lines = [f"{grid.nx} {grid.ny}"]
    lines += [" ".join(_fmt(v) for v in row) for row in u]
    if extra_lines:
        lines += extra_lines
    Path(path).write_text("\n".join(lines) + "\n")


def read_field(path) -> tuple[Grid2D, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    nx, ny = (int(t) for t in lines[0].split())
    grid = build_grid(nx, ny)
    rows = [[float(t) for t in line.split()] for line in lines[1:1 + ny]]
    return grid, check_field(grid, np.array(rows))


def write_trace(path, values) -> None:
    vals = np.asarray(values, dtype=float)
    lines = [str(vals.size)] + [_fmt(v) for v in vals]
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    n = int(tokens[0])
    vals = np.array([float(t) for t in tokens[1:1 + n]])
    if vals.size != n:
        raise ValueError(f"trace file declares {n} values, found {vals.size}")
    return vals
