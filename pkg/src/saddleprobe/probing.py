"""Direct sampling: probing functions, the probing index and its kernel.

The probing function of an interior node ``x`` is the boundary trace of the
discrete Neumann Green's function of ``-Δ + mu_bar`` with a unit-mass source
at ``x``.  The index scores ``x`` by the ``P^s``-filtered boundary inner
product of that trace with the data mismatch ``trace(u0) - f``, divided by a
``P^t`` norm of the trace.

Because the assembled operator is symmetric, all probing traces come from
one solve per *boundary* node, and the un-normalized index equals the
solution of a single Neumann problem whose flux is the filtered mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .forward import CauchyData
from .mesh import Grid2D, check_field, surface_laplacian, surface_laplacian_matrix, trace
from .operators import assemble, solve

__all__ = [
    "ProbeConfig",
    "IndexField",
    "KernelReport",
    "DegenerateWeightError",
    "probe_trace",
    "probe_matrix",
    "surface_laplacian_power",
    "data_mismatch",
    "index_green",
    "index_adjoint",
    "weight_norms",
    "kernel_matrix",
    "project_nonnegative",
    "write_index",
]

WEIGHT_FLOOR = 1e-14


class DegenerateWeightError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    s: int = 1          # Λ = P^s on the probing trace
    t: float = 1.0      # |η|_W^2 = (P^t η, η)_Γ
    epsilon: float = 1e-2
    mu_bar: float = 1.0
    margin: int = 2

    def __post_init__(self):
        if self.s < 0 or int(self.s) != self.s:
            raise ValueError(f"s must be a nonnegative integer, got {self.s}")
        if not self.t >= 0:
            raise ValueError(f"t must be nonnegative, got {self.t}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.mu_bar > 0:
            raise ValueError("mu_bar must be positive")


@dataclass
class IndexField:
    """Index values on the grid; non-sample nodes hold 0 for ``index_green``."""

    grid: Grid2D
    values: np.ndarray
    samples: np.ndarray
    config: ProbeConfig
    method: str = "green"
    argmax: tuple[float, float, float] = field(init=False)
    argmax_node: tuple[int, int] = field(init=False)

    def __post_init__(self):
        self.values = check_field(self.grid, self.values)
        masked = np.where(self.samples, self.values, -np.inf).ravel()
        k = int(np.argmax(masked))  # first maximum = lowest node index
        j, i = divmod(k, self.grid.nx)
        self.argmax_node = (i, j)
        self.argmax = (float(self.grid.x[i]), float(self.grid.y[j]), float(self.values[j, i]))

    def as_source(self) -> np.ndarray:
        """Index divided by ``epsilon``: the first saddle iterate from a zero source."""
        return self.values / self.config.epsilon


def _unit_source(grid: Grid2D, node) -> np.ndarray:
    i, j = node
    if not (0 < i < grid.nx - 1 and 0 < j < grid.ny - 1):
        raise ValueError(f"probe node {node} is not strictly interior")
    src = np.zeros(grid.shape)
    src[j, i] = 1.0 / (grid.hx * grid.hy)
    return src


def probe_trace(grid: Grid2D, node, mu_bar: float = 1.0) -> np.ndarray:
    """Boundary trace of the Green's function sourced at interior ``node = (i, j)``."""
    op = assemble(grid, np.full(grid.shape, float(mu_bar)), "neumann")
    return trace(grid, solve(op, _unit_source(grid, node)))


@lru_cache(maxsize=8)
def _probe_matrix_cached(nx: int, ny: int, mu_bar: float) -> np.ndarray:
    grid = Grid2D(nx, ny)
    op = assemble(grid, np.full(grid.shape, mu_bar), "neumann")
    rhs = np.zeros((grid.n_nodes, grid.n_boundary))
    rhs[grid.loop_index, np.arange(grid.n_boundary)] = 1.0
    # Symmetry of the scaled system turns column k into the value at loop node
    # k of every interior Green's function.
    Z = op.factor.solve(rhs) / (grid.hx * grid.hy)
    Z.setflags(write=False)
    return Z


def probe_matrix(grid: Grid2D, mu_bar: float = 1.0) -> np.ndarray:
    """Array ``(n_nodes, n_boundary)``; row ``x`` is the probing trace of interior node ``x``.

    Rows of boundary nodes are not probing functions and should not be used.
    """
    return _probe_matrix_cached(grid.nx, grid.ny, float(mu_bar))


def surface_laplacian_power(grid: Grid2D, t: float) -> np.ndarray:
    """Dense ``P^t`` for real ``t >= 0`` through the arclength-symmetric eigendecomposition."""
    n = grid.n_boundary
    if t == 0:
        return np.eye(n)
    if float(t).is_integer():
        return np.linalg.matrix_power(surface_laplacian_matrix(grid).toarray(), int(t))
    w = np.sqrt(grid.arclength_weights)
    sym = (w[:, None] * surface_laplacian_matrix(grid).toarray()) / w[None, :]
    sym = 0.5 * (sym + sym.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals**t @ vecs.T) * (w[None, :] / w[:, None])


def data_mismatch(data: CauchyData, u0) -> np.ndarray:
    """``trace(u0) - f``: positive where the data is damped by extra absorption."""
    return trace(data.grid, u0) - data.f


def _samples(grid: Grid2D, samples, margin: int) -> np.ndarray:
    if samples is None:
        return grid.sample_mask(margin)
    mask = np.asarray(samples, dtype=bool)
    if mask.shape != grid.shape:
        raise ValueError("sample mask must have the grid shape")
    if (mask & ~grid.interior_mask).any():
        raise ValueError("sample nodes must be strictly interior")
    return mask


def weight_norms(grid: Grid2D, cfg: ProbeConfig, samples=None) -> np.ndarray:
    """``|η_x|_W`` at every sample node (zero elsewhere)."""
    mask = _samples(grid, samples, cfg.margin)
    eta = probe_matrix(grid, cfg.mu_bar)[mask.ravel()]
    Pt = surface_laplacian_power(grid, cfg.t)
    q = np.einsum("ik,k,ik->i", eta @ Pt.T, grid.arclength_weights, eta)
    out = np.zeros(grid.shape)
    out[mask] = np.sqrt(np.clip(q, 0.0, None))
    return out


def index_green(grid: Grid2D, data: CauchyData, u0, cfg: ProbeConfig | None = None,
                samples=None, normalize: bool = True) -> IndexField:
    """Probing index from the probing functions themselves.

    ``I(x) = (P^s η_x, trace(u0) - f)_Γ / |η_x|_W`` at each sample node;
    ``normalize=False`` drops the denominator.
    """
    cfg = cfg or ProbeConfig()
    mask = _samples(grid, samples, cfg.margin)
    eta = probe_matrix(grid, cfg.mu_bar)[mask.ravel()]
    filt = surface_laplacian(grid, data_mismatch(data, u0), cfg.s)
    # (P^s η, m)_Γ = (η, P^s m)_Γ since P is arclength self-adjoint
    num = eta @ (grid.arclength_weights * filt)
    vals = np.zeros(grid.shape)
    if normalize:
        den = weight_norms(grid, cfg, mask)[mask]
        if np.any(den < WEIGHT_FLOOR):
            raise DegenerateWeightError("probing weight below 1e-14")
        num = num / den
    vals[mask] = num
    return IndexField(grid, vals, mask, cfg, "green")


def index_adjoint(grid: Grid2D, data: CauchyData, u0, cfg: ProbeConfig | None = None,
                  normalize: bool = False) -> IndexField:
    """Probing index as one Neumann solve with the filtered mismatch as flux."""
    cfg = cfg or ProbeConfig()
    op = assemble(grid, np.full(grid.shape, float(cfg.mu_bar)), "neumann")
    lam = solve(op, None, surface_laplacian(grid, data_mismatch(data, u0), cfg.s))
    mask = grid.sample_mask(cfg.margin)
    if normalize:
        den = weight_norms(grid, cfg, mask)
        if np.any(den[mask] < WEIGHT_FLOOR):
            raise DegenerateWeightError("probing weight below 1e-14")
        lam = np.where(mask, lam / np.where(mask, den, 1.0), 0.0)
    return IndexField(grid, lam, mask, cfg, "adjoint")


@dataclass
class KernelReport:
    C: np.ndarray
    C_sym: np.ndarray
    dominance: np.ndarray  # |C_ii| / max_{j != i} |C_ij| per row


def kernel_matrix(grid: Grid2D, nodes, cfg: ProbeConfig | None = None) -> KernelReport:
    """Kernel ``C_ij = (P^s η_i, η_j)_Γ / |η_i|_W`` over sample ``nodes`` ``[(i, j), ...]``."""
    cfg = cfg or ProbeConfig()
    nodes = [tuple(int(v) for v in nd) for nd in nodes]
    if len(set(nodes)) != len(nodes):
        raise ValueError("sample nodes must be distinct")
    for nd in nodes:
        _unit_source(grid, nd)  # validates interiority
    flat = [j * grid.nx + i for i, j in nodes]
    eta = probe_matrix(grid, cfg.mu_bar)[flat]
    Ps = surface_laplacian_power(grid, cfg.s)
    Pt = surface_laplacian_power(grid, cfg.t)
    w = grid.arclength_weights
    G = (eta @ Ps.T) @ (w[:, None] * eta.T)
    G = 0.5 * (G + G.T)  # exact in exact arithmetic
    norms = np.sqrt(np.clip(np.einsum("ik,k,ik->i", eta @ Pt.T, w, eta), 0.0, None))
    if np.any(norms < WEIGHT_FLOOR):
        raise DegenerateWeightError("probing weight below 1e-14")
    C = G / norms[:, None]
    C_sym = G / np.outer(norms, norms)
    off = np.abs(C.copy())
    np.fill_diagonal(off, 0.0)
    offmax = off.max(axis=1) if len(nodes) > 1 else np.zeros(1)
    with np.errstate(divide="ignore"):
        dominance = np.where(offmax > 0, np.abs(np.diag(C)) / offmax, np.inf)
    return KernelReport(C, C_sym, dominance)


def project_nonnegative(idx: IndexField) -> IndexField:
    return IndexField(idx.grid, np.maximum(idx.values, 0.0), idx.samples, idx.config, idx.method)


def write_index(path, idx: IndexField) -> None:
    from .mesh import write_field
    x, y, v = idx.argmax
    write_field(path, idx.grid, idx.values,
                [f"argmax {x:.17g} {y:.17g} {v:.17g}"])
