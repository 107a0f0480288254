"""Time-dependent saddle systems on a fixed spatial grid.

``time_reversal_solve`` recovers an initial heat state from its terminal
observation through the forward/backward optimality system; ``sideway_march``
marches the state and the mismatch-driven source forward together from
lateral Cauchy data.  Every time step is implicit Euler.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .forward import CauchyData, Inclusion
from .mesh import (
    Grid2D,
    check_field,
    check_trace,
    surface_laplacian,
    surface_laplacian_matrix,
    trace,
    write_field,
)
from .operators import assemble, flux_matrix, neumann_stencil, solve, trapezoid_factors
from .saddle import SaddleConfig, _boundary_selector, _power, lu_solve_refined, solve_coupled

__all__ = [
    "TimeGrid",
    "SpaceTimeField",
    "TimeCauchyData",
    "heat_forward",
    "time_reversal_system",
    "time_reversal_solve",
    "sideway_march",
    "positive_centroid",
    "TrajectoryReport",
    "moving_potential_experiment",
    "write_space_time",
    "write_trajectory",
]


@dataclass(frozen=True)
class TimeGrid:
    T: float = 0.1
    nt: int = 10

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("final time T must be positive")
        if self.nt < 2 or int(self.nt) != self.nt:
            raise ValueError(f"nt must be an integer >= 2, got {self.nt}")

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)


@dataclass
class SpaceTimeField:
    tgrid: TimeGrid
    levels: np.ndarray  # (nt + 1, ny, nx)

    def __post_init__(self):
        if self.levels.shape[0] != self.tgrid.nt + 1:
            raise ValueError("need one field per time level")
        if not np.all(np.isfinite(self.levels)):
            raise ValueError("space-time field has non-finite values")

    def __getitem__(self, n) -> np.ndarray:
        return self.levels[n]


@dataclass(frozen=True)
class TimeCauchyData:
    grid: Grid2D
    tgrid: TimeGrid
    f: np.ndarray  # (nt + 1, n_boundary)
    g: np.ndarray

    def __post_init__(self):
        shape = (self.tgrid.nt + 1, self.grid.n_boundary)
        if self.f.shape != shape or self.g.shape != shape:
            raise ValueError(f"time-dependent traces must have shape {shape}")


def _per_level(values, nt1: int, inner_shape: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape == inner_shape:
        return np.broadcast_to(arr, (nt1,) + inner_shape)
    if arr.shape != (nt1,) + inner_shape:
        raise ValueError(f"expected shape {inner_shape} or {(nt1,) + inner_shape}, got {arr.shape}")
    return arr


def heat_forward(grid: Grid2D, tg: TimeGrid, mu, y0, flux=None) -> SpaceTimeField:
    """Implicit Euler for ``y_t - Δy + mu y = 0`` with outward flux per level.

    ``mu`` is one field or one field per level; ``flux`` is ``None`` (zero),
    one trace, or one trace per level.
    """
    nt1 = tg.nt + 1
    mus = _per_level(mu, nt1, grid.shape)
    flux = np.zeros(grid.n_boundary) if flux is None else flux
    fluxes = _per_level(flux, nt1, (grid.n_boundary,))
    if np.any(mus < 0):
        raise ValueError("mu must be nonnegative")
    dt = tg.dt
    out = np.empty((nt1,) + grid.shape)
    out[0] = check_field(grid, y0)
    for n in range(tg.nt):
        op = assemble(grid, mus[n + 1] + 1.0 / dt, "neumann")
        out[n + 1] = solve(op, out[n] / dt, fluxes[n + 1])
    return SpaceTimeField(tg, out)


def time_reversal_system(grid: Grid2D, tg: TimeGrid, z, epsilon: float, alpha: float = 1e-4):
    """Space-time block system for ``[y^0..y^nt, lambda^0..lambda^nt]``.

    Rows, all in the symmetric spatial scaling ``D``:

    * state steps ``(y^{n+1} - y^n)/dt + L y^{n+1} + lambda^{n+1} = 0``,
    * multiplier steps ``(lambda^n - lambda^{n+1})/dt + L lambda^n = 0``,
    * terminal ``eps lambda^nt - y^nt = -z``,
    * initial ``lambda^0 + alpha L y^0 = 0``, i.e. ``lambda(0) = alpha Δ y(0)``,

    with ``L = -Δ_h`` under zero flux.
    """
    z = check_field(grid, z).ravel()
    N, nt, dt = grid.n_nodes, tg.nt, tg.dt
    D = sps.diags(trapezoid_factors(grid))
    S0 = (D @ neumann_stencil(grid, np.zeros(grid.shape))).tocsr()
    Dt = (D / dt).tocsr()
    ny_ = nt + 1
    blocks = [[None] * (2 * ny_) for _ in range(2 * ny_)]
    rhs = np.zeros(2 * ny_ * N)
    # row r: 0..nt-1 state steps, nt..2nt-1 multiplier steps, 2nt terminal, 2nt+1 initial
    for n in range(nt):
        blocks[n][n] = -Dt
        blocks[n][n + 1] = Dt + S0
        blocks[n][ny_ + n + 1] = D
    for n in range(nt):
        r = nt + n
        blocks[r][ny_ + n] = Dt + S0
        blocks[r][ny_ + n + 1] = -Dt
    blocks[2 * nt][nt] = -D
    blocks[2 * nt][ny_ + nt] = epsilon * D
    rhs[2 * nt * N:(2 * nt + 1) * N] = -(D @ z)
    blocks[2 * nt + 1][0] = alpha * S0
    blocks[2 * nt + 1][ny_] = D
    K = sps.bmat(blocks, format="csc")
    return K, rhs


def _cosine_modes(n: int, h: float):
    """Eigenpairs of the 1-D ghost-node Neumann matrix: ``cos(pi p i / (n-1))``."""
    p = np.arange(n)
    V = np.cos(np.pi * np.outer(np.arange(n), p) / (n - 1))
    return V, (2.0 / h**2) * (1.0 - np.cos(np.pi * p / (n - 1)))


def _modal_time_reversal(grid: Grid2D, tg: TimeGrid, z, epsilon: float, alpha: float):
    Vx, kx = _cosine_modes(grid.nx, grid.hx)
    Vy, ky = _cosine_modes(grid.ny, grid.hy)
    zc = np.linalg.solve(Vy, np.linalg.solve(Vx, np.asarray(z).T).T)
    k = ky[:, None] + kx[None, :]
    nt, dt = tg.nt, tg.dt
    r = 1.0 / (1.0 + k * dt)
    rn = r**nt
    # dt * sum_{m=1}^{nt} r^(2(nt-m)+1)
    S = dt * r * sum(r ** (2 * j) for j in range(nt))
    det = rn**2 + alpha * k * (epsilon + S)
    lam_T = -alpha * k * zc / det
    y = np.empty((nt + 1,) + grid.shape)
    lam = np.empty_like(y)
    y[0] = rn * zc / det
    for n in range(nt + 1):
        lam[n] = r ** (nt - n) * lam_T
    for n in range(nt):
        y[n + 1] = r * (y[n] - dt * lam[n + 1])
    back = lambda c: Vy @ c @ Vx.T
    return np.array([back(c) for c in y]), np.array([back(c) for c in lam])


def time_reversal_solve(grid: Grid2D, tg: TimeGrid, z, cfg: SaddleConfig | None = None,
                        alpha: float = 1e-4, method: str = "modal"):
    """Recover ``y(0)`` from ``z ~ y(T)``; returns ``(y, lambda)`` space-time fields.

    ``method="modal"`` solves the system of :func:`time_reversal_system`
    exactly in the cosine eigenbasis of ``L`` (each mode reduces to a 2x2
    system in ``y^0`` and ``lambda^nt``); ``"sparse"`` factorizes the
    assembled space-time matrix, which is slow beyond small grids.
    """
    cfg = cfg or SaddleConfig()
    if cfg.epsilon < 1e-8:
        warnings.warn("epsilon below 1e-8: space-time system is ill-conditioned", RuntimeWarning)
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    z = check_field(grid, z)
    if method == "modal":
        ys, lams = _modal_time_reversal(grid, tg, z, cfg.epsilon, alpha)
    elif method == "sparse":
        K, rhs = time_reversal_system(grid, tg, z, cfg.epsilon, alpha)
        x = lu_solve_refined(K, rhs).reshape(2, tg.nt + 1, *grid.shape)
        ys, lams = x[0].copy(), x[1].copy()
    else:
        raise ValueError(f"unknown method {method!r}")
    return SpaceTimeField(tg, ys), SpaceTimeField(tg, lams)


def _sideway_matrix(grid: Grid2D, tg: TimeGrid, cfg: SaddleConfig):
    op = assemble(grid, np.full(grid.shape, cfg.mu_bar + 1.0 / tg.dt), "neumann")
    D = sps.diags(trapezoid_factors(grid))
    DE = (D @ flux_matrix(grid)).tocsr()
    PsB = (_power(surface_laplacian_matrix(grid), cfg.s) @ _boundary_selector(grid)).tocsr()
    K = sps.bmat([[op.matrix, D], [-(DE @ PsB) / cfg.epsilon, op.matrix]], format="csc")
    return K, D, DE


def sideway_march(data: TimeCauchyData, cfg: SaddleConfig | None = None, y0=None, lam0=None):
    """Joint forward march of state and source from lateral Cauchy data.

    Each step solves the coupled pair

        (y' - y)/dt - Δy' + mu_bar y' + lam' = 0,   ∂y'/∂ν = g(t'),
        (lam' - lam)/dt - Δlam' + mu_bar lam' = 0,  ∂lam'/∂ν = P^s(trace y' - f(t'))/eps,

    as one block system.  Unless ``y0``/``lam0`` are given, the march starts
    from the steady saddle solution for the first data pair, so stationary
    data is a fixed point of the march.
    """
    cfg = cfg or SaddleConfig()
    grid, tg = data.grid, data.tgrid
    K, D, DE = _sideway_matrix(grid, tg, cfg)
    lu = spla.splu(K)
    N, dt = grid.n_nodes, tg.dt
    ys = np.empty((tg.nt + 1,) + grid.shape)
    lams = np.zeros_like(ys)
    if y0 is None or lam0 is None:
        start = solve_coupled(CauchyData(grid, data.f[0], data.g[0], mu_bar=cfg.mu_bar), cfg)
    ys[0] = start.u if y0 is None else check_field(grid, y0)
    lams[0] = start.lam if lam0 is None else check_field(grid, lam0)
    for n in range(tg.nt):
        fit = surface_laplacian(grid, data.f[n + 1], cfg.s) / cfg.epsilon
        rhs = np.concatenate([
            D @ (ys[n].ravel() / dt) + DE @ data.g[n + 1],
            D @ (lams[n].ravel() / dt) - DE @ fit,
        ])
        x = lu.solve(rhs)
        x = x + lu.solve(rhs - K @ x)  # one refinement step
        ys[n + 1] = x[:N].reshape(grid.shape)
        lams[n + 1] = x[N:].reshape(grid.shape)
    return SpaceTimeField(tg, ys), SpaceTimeField(tg, lams)


def positive_centroid(grid: Grid2D, lam, atol: float = 1e-12) -> tuple[float, float] | None:
    """Quadrature centroid of ``max(0, lam)``; ``None`` when ``max(lam) <= atol``."""
    X, Y = grid.coords
    pos = np.maximum(np.asarray(lam), 0.0)
    if not pos.max() > atol:
        return None
    w = pos * grid.node_weights
    mass = w.sum()
    return float((w * X).sum() / mass), float((w * Y).sum() / mass)


@dataclass
class TrajectoryReport:
    times: np.ndarray
    centroids: np.ndarray   # (nt + 1, 2), NaN where nothing was detected
    targets: np.ndarray     # (nt + 1, 2)
    errors: np.ndarray      # NaN where nothing was detected
    detected: np.ndarray

    def mean_error(self, t_from: float = 0.0) -> float:
        sel = (self.times >= t_from) & self.detected
        return float(np.mean(self.errors[sel])) if sel.any() else float("nan")


def moving_potential_experiment(grid: Grid2D, tg: TimeGrid, gamma, radius: float,
                                amplitude: float, cfg: SaddleConfig | None = None,
                                shape: str = "disk", g=None,
                                detect_rtol: float = 1e-8) -> TrajectoryReport:
    """Track an inclusion moving along ``gamma`` (centres per time level).

    Data come from :func:`heat_forward` with ``mu(t) = mu_bar + amplitude *
    chi(x - gamma(t))`` started from the steady state of ``mu(0)``; the
    reconstruction is :func:`sideway_march` from its default start.  A level
    counts as a detection when ``max(lam) > detect_rtol * max|y|``; below
    that the source is round-off.
    """
    cfg = cfg or SaddleConfig()
    centres = np.asarray(gamma, dtype=float)
    if centres.shape != (tg.nt + 1, 2):
        raise ValueError("gamma needs one centre per time level")
    g = np.ones(grid.n_boundary) if g is None else check_trace(grid, g)
    X, Y = grid.coords
    margin = 2.0 * max(grid.hx, grid.hy)
    mus = np.empty((tg.nt + 1,) + grid.shape)
    for n, (cx, cy) in enumerate(centres):
        if shape == "disk":
            inc = Inclusion.disk((cx, cy), radius, amplitude)
        else:
            inc = Inclusion.rectangle((cx - radius, cy - radius), (2 * radius, 2 * radius), amplitude)
        x0, y0, x1, y1 = inc.bounding_box()
        if min(x0, y0, 1.0 - x1, 1.0 - y1) < margin - 1e-12:
            raise ValueError(f"inclusion at level {n} comes within 2h of the boundary")
        mus[n] = cfg.mu_bar + amplitude * inc.indicator(X, Y)
    u_init = solve(assemble(grid, mus[0], "neumann"), None, g)
    states = heat_forward(grid, tg, mus, u_init, g)
    f = np.array([trace(grid, y) for y in states.levels])
    gs = np.broadcast_to(g, f.shape).copy()
    _, lam = sideway_march(TimeCauchyData(grid, tg, f, gs), cfg)
    atol = detect_rtol * np.max(np.abs(states.levels))

    cents = np.full((tg.nt + 1, 2), np.nan)
    detected = np.zeros(tg.nt + 1, dtype=bool)
    for n in range(tg.nt + 1):
        c = positive_centroid(grid, lam[n], atol)
        if c is not None:
            cents[n] = c
            detected[n] = True
    errors = np.where(detected, np.hypot(*(cents - centres).T), np.nan)
    return TrajectoryReport(tg.times, cents, centres, errors, detected)


def write_space_time(directory, grid: Grid2D, field: SpaceTimeField, stem: str) -> None:
    """One grid file per level plus a manifest ``nt dt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{stem}_manifest.txt").write_text(f"{field.tgrid.nt} {field.tgrid.dt:.17g}\n")
    for n, lev in enumerate(field.levels):
        write_field(d / f"{stem}_{n:04d}.txt", grid, lev)


def write_trajectory(path, report: TrajectoryReport) -> None:
    lines = ["t,cx,cy,gx,gy,err"]
    for t, c, gm, e in zip(report.times, report.centroids, report.targets, report.errors):
        lines.append(",".join(format(float(v), ".17g") for v in (t, *c, *gm, e)))
    Path(path).write_text("\n".join(lines) + "\n")
