"""Saddle-point and direct-sampling reconstruction of absorption media on the unit square."""

from .mesh import Grid2D, build_grid
from .operators import ConvergenceError, SingularOperatorError, SolverConfig, assemble, solve
from .forward import CauchyData, Inclusion, InclusionError, Medium, make_cauchy, standard_phantom
from .probing import ProbeConfig, index_adjoint, index_green
from .saddle import (
    NonConvergenceError,
    SaddleConfig,
    constrained_solve,
    recover_medium,
    run_iterative_probing,
    solve_coupled,
)
from .evolution import TimeGrid, heat_forward, sideway_march, time_reversal_solve

__version__ = "0.1.0"

__all__ = [
    "Grid2D", "build_grid",
    "ConvergenceError", "SingularOperatorError", "SolverConfig", "assemble", "solve",
    "CauchyData", "Inclusion", "InclusionError", "Medium", "make_cauchy", "standard_phantom",
    "ProbeConfig", "index_adjoint", "index_green",
    "NonConvergenceError", "SaddleConfig", "constrained_solve", "recover_medium",
    "run_iterative_probing", "solve_coupled",
    "TimeGrid", "heat_forward", "sideway_march", "time_reversal_solve",
]
