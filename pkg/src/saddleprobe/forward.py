"""Synthetic media, the forward Neumann solve, and Cauchy data generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .mesh import Grid2D, check_field, check_trace, trace
from .operators import SolverConfig, assemble, solve

__all__ = [
    "Inclusion",
    "Medium",
    "CauchyData",
    "InclusionError",
    "realize_medium",
    "solve_forward",
    "background_solve",
    "make_cauchy",
    "standard_phantom",
]


class InclusionError(ValueError):
    """An inclusion comes closer than two grid steps to the boundary."""


@dataclass(frozen=True)
class Inclusion:
    """Disk ``(center, radius)`` or axis-aligned rectangle ``(corner, extents)``."""

    shape: Literal["disk", "rectangle"]
    center: tuple[float, float]
    size: tuple[float, ...]
    amplitude: float

    def __post_init__(self):
        if self.shape not in ("disk", "rectangle"):
            raise ValueError(f"unknown inclusion shape {self.shape!r}")
        if self.amplitude < 0:
            raise ValueError("inclusion amplitude must be nonnegative")

    @classmethod
    def disk(cls, center, radius: float, amplitude: float) -> Inclusion:
        return cls("disk", (float(center[0]), float(center[1])), (float(radius),), float(amplitude))

    @classmethod
    def rectangle(cls, corner, extents, amplitude: float) -> Inclusion:
        return cls("rectangle", (float(corner[0]), float(corner[1])),
                   (float(extents[0]), float(extents[1])), float(amplitude))

    def bounding_box(self) -> tuple[float, float, float, float]:
        if self.shape == "disk":
            (cx, cy), r = self.center, self.size[0]
            return cx - r, cy - r, cx + r, cy + r
        (x0, y0), (w, h) = self.center, self.size
        return x0, y0, x0 + w, y0 + h

    def indicator(self, X, Y) -> np.ndarray:
        if self.shape == "disk":
            (cx, cy), r = self.center, self.size[0]
            return (X - cx) ** 2 + (Y - cy) ** 2 <= r * r
        x0, y0, x1, y1 = self.bounding_box()
        return (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)

    def centroid(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bounding_box()
        return 0.5 * (x0 + x1), 0.5 * (y0 + y1)


@dataclass(frozen=True)
class Medium:
    background: float = 1.0
    inclusions: tuple[Inclusion, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.background > 0:
            raise ValueError("background coefficient must be positive")


@dataclass(frozen=True)
class CauchyData:
    """Dirichlet observation ``f`` and Neumann input ``g`` on the boundary loop."""

    grid: Grid2D
    f: np.ndarray
    g: np.ndarray
    noise_level: float = 0.0
    mu_bar: float = 1.0

    def __post_init__(self):
        check_trace(self.grid, self.f)
        check_trace(self.grid, self.g)


def realize_medium(grid: Grid2D, medium: Medium) -> np.ndarray:
    """Nodal coefficient ``mu = background + sum(amplitude * indicator)``."""
    X, Y = grid.coords
    mu = np.full(grid.shape, float(medium.background))
    margin = 2.0 * max(grid.hx, grid.hy)
    for inc in medium.inclusions:
        x0, y0, x1, y1 = inc.bounding_box()
        if min(x0, y0, 1.0 - x1, 1.0 - y1) < margin - 1e-12:
            raise InclusionError(f"inclusion {inc} lies within 2h of the boundary")
        mu += inc.amplitude * inc.indicator(X, Y)
    return mu


def solve_forward(grid: Grid2D, mu, g, cfg: SolverConfig | None = None):
    """Solve ``-Δu + mu u = 0`` with flux ``g``; return ``(u, trace(u))``."""
    mu = check_field(grid, mu)
    op = assemble(grid, mu, "neumann")
    u = solve(op, None, g, cfg)
    return u, trace(grid, u)


def background_solve(grid: Grid2D, mu_bar: float, g, cfg: SolverConfig | None = None) -> np.ndarray:
    """``u0``: the forward solution for the constant background ``mu_bar``."""
    return solve_forward(grid, np.full(grid.shape, float(mu_bar)), g, cfg)[0]


def make_cauchy(grid: Grid2D, medium: Medium, g=None, noise_level: float = 0.0,
                seed: int | None = 0) -> CauchyData:
    """Forward-simulate Cauchy data, adding seeded uniform noise to ``f`` only.

    ``f_noisy = f + noise_level * max|f| * U[-1, 1]`` per loop node.  ``g``
    defaults to the unit flux.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be nonnegative")
    g = np.ones(grid.n_boundary) if g is None else check_trace(grid, g)
    _, f = solve_forward(grid, realize_medium(grid, medium), g)
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        f = f + noise_level * np.max(np.abs(f)) * rng.uniform(-1.0, 1.0, size=f.shape)
    return CauchyData(grid, f, g.copy(), float(noise_level), float(medium.background))


def standard_phantom(amplitude: float = 5.0) -> Medium:
    """Disk of radius 0.15 at (0.3, 0.7) on a unit background."""
    return Medium(1.0, (Inclusion.disk((0.3, 0.7), 0.15, amplitude),))
