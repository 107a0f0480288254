"""Saddle-point reconstruction of the induced source ``lambda = (mu - mu_bar) u``.

The pair ``(u, lambda)`` solves

    -Δu + mu_bar u + lambda = 0,    ∂u/∂ν = g,
    -Δλ + mu_bar λ = 0,             ∂λ/∂ν = P^s (trace(u) - f) / eps,

which is the optimality system of

    min |lambda|^2 + (1/eps) (P^s (trace u - f), trace u - f)_Γ
    s.t. -Δu + mu_bar u + lambda = 0, ∂u/∂ν = g.

The flux sign makes the coupled system well posed for every ``eps > 0``;
positive induced sources (absorbing inclusions) then come out positive.

Everything is assembled in the symmetric row scaling of
:mod:`saddleprobe.operators`, so a block system here is the Neumann matrix
``S = D A`` acting on both unknowns plus the boundary couplings.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .forward import CauchyData, background_solve
from .mesh import (
    Grid2D,
    field_norm,
    normal_derivative,
    surface_laplacian,
    surface_laplacian_matrix,
    trace,
)
from .operators import assemble, flux_matrix, solve, trapezoid_factors

__all__ = [
    "SaddleConfig",
    "SaddleState",
    "NonConvergenceError",
    "adi_step",
    "run_iterative_probing",
    "estimate_iteration_spectrum",
    "coupled_system",
    "coupled_residual",
    "solve_coupled",
    "biharmonic_limit",
    "lu_solve_refined",
    "SweepRow",
    "epsilon_sweep",
    "write_sweep",
    "write_iteration_log",
    "ConstrainedResult",
    "constrained_solve",
    "recover_medium",
    "dtn_system",
    "dtn_solve",
]


class NonConvergenceError(RuntimeError):
    """Iteration stalled or diverged; ``rho_hat`` carries the contraction evidence."""

    def __init__(self, message: str, rho_hat: float, state: SaddleState | None = None):
        super().__init__(f"{message} (rho_hat = {rho_hat:.4g})")
        self.rho_hat = rho_hat
        self.state = state


@dataclass(frozen=True)
class SaddleConfig:
    epsilon: float = 1e-2
    mu_bar: float = 1.0
    s: int = 1
    max_iter: int = 500
    tol: float = 1e-10
    mode: Literal["neumann", "dirichlet"] = "neumann"
    # None picks 2 / (2 + kappa/eps) from a spectral estimate; 1.0 is the plain sweep.
    relaxation: float | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.mu_bar > 0:
            raise ValueError(f"mu_bar must be positive, got {self.mu_bar}")
        if self.s < 0 or int(self.s) != self.s:
            raise ValueError(f"s must be a nonnegative integer, got {self.s}")
        if not 0.0 < self.tol < 1.0:
            raise ValueError(f"tol must lie in (0, 1), got {self.tol}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.mode not in ("neumann", "dirichlet"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.relaxation is not None and not 0.0 < self.relaxation <= 1.0:
            raise ValueError(f"relaxation must lie in (0, 1], got {self.relaxation}")


@dataclass
class SaddleState:
    u: np.ndarray
    lam: np.ndarray
    iterations: int = 0
    inc_u: list[float] = field(default_factory=list)
    inc_lam: list[float] = field(default_factory=list)
    rho_hat: float = float("nan")
    relaxation: float = 1.0
    converged: bool = False

    def increments(self) -> np.ndarray:
        return np.hypot(np.asarray(self.inc_u), np.asarray(self.inc_lam))


def _neumann_op(grid: Grid2D, mu_bar: float):
    return assemble(grid, np.full(grid.shape, float(mu_bar)), "neumann")


def _fit_flux(data: CauchyData, tr_u, cfg: SaddleConfig) -> np.ndarray:
    return surface_laplacian(data.grid, tr_u - data.f, cfg.s) / cfg.epsilon


def adi_step(state: SaddleState, data: CauchyData, cfg: SaddleConfig,
             relaxation: float = 1.0) -> SaddleState:
    """One alternating sweep: state solve for ``u^k``, then flux solve for ``lambda^{k+1}``.

    With ``relaxation < 1`` the new source is blended with the old one,
    ``lambda <- (1 - r) lambda + r lambda_new``; the fixed point is unchanged.
    """
    grid = data.grid
    op = _neumann_op(grid, cfg.mu_bar)
    u = solve(op, -state.lam, data.g)
    lam_new = solve(op, None, _fit_flux(data, trace(grid, u), cfg))
    if relaxation != 1.0:
        lam_new = (1.0 - relaxation) * state.lam + relaxation * lam_new
    return SaddleState(
        u=u,
        lam=lam_new,
        iterations=state.iterations + 1,
        inc_u=state.inc_u + [field_norm(grid, u - state.u)],
        inc_lam=state.inc_lam + [field_norm(grid, lam_new - state.lam)],
        rho_hat=state.rho_hat,
        relaxation=relaxation,
    )


def estimate_iteration_spectrum(data: CauchyData, cfg: SaddleConfig, n_iter: int = 30,
                                seed: int = 0) -> float:
    """Largest eigenvalue of the linear part of the plain sweep (power iteration).

    The sweep is ``lambda -> c - K lambda`` with ``K`` self-adjoint and
    positive semidefinite in the trapezoidal inner product, so the Rayleigh
    quotient converges to ``max eig K`` from below.
    """
    grid = data.grid
    op = _neumann_op(grid, cfg.mu_bar)
    w = grid.node_weights
    v = np.random.default_rng(seed).standard_normal(grid.shape)
    kappa = 0.0
    for _ in range(n_iter):
        nv = np.sqrt(np.sum(w * v * v))
        if nv == 0.0:
            return 0.0
        v = v / nv
        z = solve(op, None, surface_laplacian(grid, trace(grid, solve(op, v)), cfg.s) / cfg.epsilon)
        kappa = float(np.sum(w * z * v))
        v = z
    return kappa


def _rho_hat(incs: np.ndarray, window: int = 10) -> float:
    incs = incs[incs > 0]
    if incs.size < 2:
        return 0.0
    m = min(window, incs.size - 1)
    return float((incs[-1] / incs[-1 - m]) ** (1.0 / m))


def run_iterative_probing(data: CauchyData, cfg: SaddleConfig | None = None) -> SaddleState:
    """Iterate :func:`adi_step` from ``(u0, 0)`` to the saddle point.

    The plain sweep contracts only when ``eps`` exceeds the top eigenvalue
    of its linear part; the default relaxation ``2 / (2 + kappa/eps)`` makes
    it contract for every ``eps``.

    Raises
    ------
    NonConvergenceError
        When increments blow up or ``max_iter`` is exhausted.
    """
    cfg = cfg or SaddleConfig()
    grid = data.grid
    if cfg.relaxation is None:
        kappa = 1.05 * estimate_iteration_spectrum(data, cfg)
        relax = min(1.0, 2.0 / (2.0 + kappa))
    else:
        relax = cfg.relaxation
    u0 = background_solve(grid, cfg.mu_bar, data.g)
    state = SaddleState(u0, np.zeros(grid.shape), relaxation=relax)
    first = None
    for _ in range(cfg.max_iter):
        state = adi_step(state, data, cfg, relax)
        inc = float(np.hypot(state.inc_u[-1], state.inc_lam[-1]))
        first = inc if first is None else first
        if not np.isfinite(inc) or (first > 0 and inc > 1e8 * first):
            state.rho_hat = _rho_hat(state.increments())
            raise NonConvergenceError("iterative probing diverged; eps too small for this relaxation",
                                      state.rho_hat, state)
        scale_u = max(field_norm(grid, state.u), 1e-300)
        scale_l = max(field_norm(grid, state.lam), 1e-300)
        rel = max(state.inc_u[-1] / scale_u,
                  state.inc_lam[-1] / scale_l if state.inc_lam[-1] > 0 else 0.0)
        if rel < cfg.tol:
            state.converged = True
            break
    state.rho_hat = _rho_hat(state.increments())
    if not state.converged:
        raise NonConvergenceError(f"no convergence in {cfg.max_iter} sweeps", state.rho_hat, state)
    return state


def _boundary_selector(grid: Grid2D) -> sps.csr_matrix:
    nb = grid.n_boundary
    return sps.csr_matrix((np.ones(nb), (np.arange(nb), grid.loop_index)),
                          shape=(nb, grid.n_nodes))


def _power(P: sps.csr_matrix, s: int) -> sps.csr_matrix:
    out = sps.identity(P.shape[0], format="csr")
    for _ in range(s):
        out = (P @ out).tocsr()
    return out


def coupled_system(data: CauchyData, cfg: SaddleConfig):
    """Block matrix and right-hand side for the unknown ``[u; lambda]``."""
    grid = data.grid
    op = _neumann_op(grid, cfg.mu_bar)
    D = sps.diags(trapezoid_factors(grid))
    DE = (D @ flux_matrix(grid)).tocsr()
    PsB = (_power(surface_laplacian_matrix(grid), cfg.s) @ _boundary_selector(grid)).tocsr()
    K = sps.bmat([[op.matrix, D], [-(DE @ PsB) / cfg.epsilon, op.matrix]], format="csc")
    rhs = np.concatenate([
        DE @ data.g,
        -(DE @ surface_laplacian(grid, data.f, cfg.s)) / cfg.epsilon,
    ])
    return K, rhs


def coupled_residual(data: CauchyData, cfg: SaddleConfig, u, lam) -> float:
    """Relative residual of ``(u, lam)`` in the coupled block system."""
    K, rhs = coupled_system(data, cfg)
    x = np.concatenate([np.ravel(u), np.ravel(lam)])
    return float(np.linalg.norm(K @ x - rhs) / np.linalg.norm(rhs))


def lu_solve_refined(K, rhs, steps: int = 2) -> np.ndarray:
    """Sparse LU solve followed by ``steps`` rounds of iterative refinement.

    The block systems are nonsymmetric with condition numbers near 1e5 at
    desk scale; SuperLU's threshold pivoting alone loses about one digit
    there, and refinement recovers it.
    """
    K = sps.csc_matrix(K)
    lu = spla.splu(K)
    x = lu.solve(rhs)
    for _ in range(steps):
        x = x + lu.solve(rhs - K @ x)
    return x


def solve_coupled(data: CauchyData, cfg: SaddleConfig | None = None) -> SaddleState:
    """Solve the saddle system in one sparse LU factorization."""
    cfg = cfg or SaddleConfig()
    grid = data.grid
    K, rhs = coupled_system(data, cfg)
    x = lu_solve_refined(K, rhs)
    n = grid.n_nodes
    return SaddleState(x[:n].reshape(grid.shape), x[n:].reshape(grid.shape),
                       iterations=1, converged=True)


def biharmonic_limit(data: CauchyData, cfg: SaddleConfig | None = None) -> np.ndarray:
    """The zero-noise limit: ``(-Δ + mu_bar)^2 u = 0`` with ``∂u/∂ν = g`` and ``u = f``.

    The Neumann condition lives inside the ghost-node operator ``A``; the
    boundary rows of ``A A`` are replaced by the Dirichlet rows ``u = f``.
    This is the optimality system of ``min |A u - E g|`` subject to
    ``trace(u) = f``.
    """
    cfg = cfg or SaddleConfig()
    grid = data.grid
    A = _neumann_op(grid, cfg.mu_bar).stencil
    bmask = np.zeros(grid.n_nodes, dtype=bool)
    bmask[grid.loop_index] = True
    AA = (A @ A).tocsr()
    ub = np.zeros(grid.n_nodes)
    ub[grid.loop_index] = data.f
    # Boundary unknowns are known; eliminate them so trace(u) = f exactly.
    rhs = (A @ (flux_matrix(grid) @ data.g) - AA @ ub)[~bmask]
    Q = AA[~bmask][:, ~bmask]
    u = ub.copy()
    u[~bmask] = lu_solve_refined(Q, rhs)
    return u.reshape(grid.shape)


@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    err_u: float
    err_trace: float
    norm_lambda: float
    error: str | None = None


def epsilon_sweep(data: CauchyData, cfg: SaddleConfig | None, epsilons) -> list[SweepRow]:
    """Coupled solves along a decreasing ``eps`` sequence, measured against the limit."""
    cfg = cfg or SaddleConfig()
    eps = [float(e) for e in epsilons]
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be positive and strictly decreasing")
    grid = data.grid
    ubar = biharmonic_limit(data, cfg)
    w = grid.arclength_weights
    rows = []
    for e in eps:
        try:
            st = solve_coupled(data, _replace(cfg, epsilon=e))
        except Exception as exc:  # record and keep sweeping
            nan = float("nan")
            rows.append(SweepRow(e, nan, nan, nan, f"{type(exc).__name__}: {exc}"))
            continue
        mis = trace(grid, st.u) - data.f
        rows.append(SweepRow(
            e,
            field_norm(grid, st.u - ubar),
            float(np.sqrt(np.sum(w * mis * mis))),
            field_norm(grid, st.lam),
        ))
    return rows


def _replace(cfg: SaddleConfig, **changes) -> SaddleConfig:
    from dataclasses import replace
    return replace(cfg, **changes)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_sweep(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epsilon", "err_u", "err_trace", "norm_lambda"])
        for r in rows:
            wr.writerow([_fmt(r.epsilon), _fmt(r.err_u), _fmt(r.err_trace), _fmt(r.norm_lambda)])


def write_iteration_log(path, state: SaddleState) -> None:
    """Rows ``k,inc_u,inc_lambda,rho_hat``; ``rho_hat`` is the running 10-step estimate."""
    incs = state.increments()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["k", "inc_u", "inc_lambda", "rho_hat"])
        for k in range(len(state.inc_u)):
            wr.writerow([k + 1, _fmt(state.inc_u[k]), _fmt(state.inc_lam[k]),
                         _fmt(_rho_hat(incs[:k + 1]))])


@dataclass
class ConstrainedResult:
    u: np.ndarray
    p: np.ndarray
    lam: np.ndarray
    iterations: int
    damping: float
    inc_lam: list[float] = field(default_factory=list)


def constrained_solve(data: CauchyData, cfg: SaddleConfig | None = None,
                      damping: float | None = 0.5) -> ConstrainedResult:
    """Damped fixed point for the nonnegative saddle system ``lambda = max(0, p)``.

    Each sweep solves the multiplier equation for ``p`` from the current
    state, relaxes ``lambda <- (1 - t) lambda + t max(0, p)`` and re-solves
    the state.  ``damping=None`` picks ``t = 2 / (2 + kappa/eps)`` as in
    :func:`run_iterative_probing`.  On exit ``lambda = max(0, p)`` exactly and
    ``u`` is the state for that source.
    """
    cfg = cfg or SaddleConfig()
    grid = data.grid
    if damping is None:
        damping = min(1.0, 2.0 / (2.0 + 1.05 * estimate_iteration_spectrum(data, cfg)))
    if not 0.0 < damping <= 1.0:
        raise ValueError(f"damping must lie in (0, 1], got {damping}")
    op = _neumann_op(grid, cfg.mu_bar)
    lam = np.zeros(grid.shape)
    u = solve(op, None, data.g)
    incs: list[float] = []
    for k in range(1, cfg.max_iter + 1):
        p = solve(op, None, _fit_flux(data, trace(grid, u), cfg))
        lam_new = (1.0 - damping) * lam + damping * np.maximum(0.0, p)
        inc = field_norm(grid, lam_new - lam)
        incs.append(inc)
        lam = lam_new
        u = solve(op, -lam, data.g)
        if not np.isfinite(inc) or (incs[0] > 0 and inc > 1e8 * incs[0]):
            break
        if inc <= cfg.tol * max(field_norm(grid, lam), 1e-300) or inc == 0.0:
            p = solve(op, None, _fit_flux(data, trace(grid, u), cfg))
            lam = np.maximum(0.0, p)
            u = solve(op, -lam, data.g)
            return ConstrainedResult(u, p, lam, k, damping, incs)
    raise NonConvergenceError(
        f"constrained iteration did not converge with damping {damping:g}; try a smaller damping",
        _rho_hat(np.asarray(incs)),
    )


def recover_medium(u, lam, floor: float = 1e-6):
    """Pointwise medium ``max(0, lambda) / u`` where ``u >= floor``, else 0.

    Returns ``(mu_hat, mask)`` with ``mask`` true where the quotient was taken.
    """
    if not floor > 0:
        raise ValueError("floor must be positive")
    u = np.asarray(u, dtype=float)
    lam = np.asarray(lam, dtype=float)
    mask = u >= floor
    mu = np.zeros_like(u)
    mu[mask] = np.maximum(0.0, lam[mask]) / u[mask]
    if not mask.any():
        warnings.warn("state is below the floor everywhere; medium fully masked", RuntimeWarning)
    return mu, mask


def _normal_derivative_matrix(grid: Grid2D) -> sps.csr_matrix:
    cols = []
    for k in range(grid.n_nodes):
        e = np.zeros(grid.n_nodes)
        e[k] = 1.0
        cols.append(normal_derivative(grid, e.reshape(grid.shape)))
    return sps.csr_matrix(np.array(cols).T)


def dtn_system(data: CauchyData, cfg: SaddleConfig, flux_from: str = "state"):
    """Block system of the Dirichlet-data variant for ``[u; lambda]``.

    ``u = f`` on the boundary and the multiplier flux fits ``g`` against the
    normal derivative of the current state (``flux_from="state"``) or of the
    Dirichlet background solve (``"background"``, which decouples the blocks).
    """
    grid = data.grid
    c = np.full(grid.shape, float(cfg.mu_bar))
    opD = assemble(grid, c, "dirichlet")
    opN = assemble(grid, c, "neumann")
    interior = np.ones(grid.n_nodes)
    interior[grid.loop_index] = 0.0
    DE = (sps.diags(trapezoid_factors(grid)) @ flux_matrix(grid)).tocsr()
    Ps = _power(surface_laplacian_matrix(grid), cfg.s)
    if flux_from == "state":
        coupling = (DE @ Ps @ _normal_derivative_matrix(grid)) / cfg.epsilon
        rhs_lam = DE @ (Ps @ data.g) / cfg.epsilon
    elif flux_from == "background":
        u0 = solve(opD, None, data.f)
        coupling = sps.csr_matrix((grid.n_nodes, grid.n_nodes))
        rhs_lam = DE @ (Ps @ (data.g - normal_derivative(grid, u0))) / cfg.epsilon
    else:
        raise ValueError(f"unknown flux_from {flux_from!r}")
    K = sps.bmat([[opD.matrix, sps.diags(interior)], [coupling, opN.matrix]], format="csc")
    rhs = np.concatenate([opD.rhs(None, data.f), rhs_lam])
    return K, rhs


def dtn_solve(data: CauchyData, cfg: SaddleConfig | None = None,
              flux_from: str = "state") -> SaddleState:
    """Dirichlet-to-Neumann variant: impose ``u = f`` and fit the flux ``g``."""
    cfg = cfg or SaddleConfig(mode="dirichlet")
    if cfg.mode != "dirichlet":
        raise ValueError("dtn_solve requires mode='dirichlet'")
    grid = data.grid
    K, rhs = dtn_system(data, cfg, flux_from)
    x = lu_solve_refined(K, rhs)
    n = grid.n_nodes
    return SaddleState(x[:n].reshape(grid.shape), x[n:].reshape(grid.shape),
                       iterations=1, converged=True)
