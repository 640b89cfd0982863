"""Sparse initial source identification for advection-diffusion equations.

A primal-dual solver for the L2 + L1 regularized control problem, followed by
a structure-enhancement step that turns the smooth optimal control into a
finite sum of point sources.
"""
from .enhance import Atom, SparseSource, enhance, find_local_maxima, solve_intensities
from .experiments import ProblemConfig, Report, evaluate, make_case, make_target, run_experiment
from .gd import GdParams, run_gd
from .grid import Field, Grid2D, inner_product, make_grid, norm
from .pde import Coefficients, Region, TimeStepOperator, assemble_operator, estimate_opnorm
from .pdhg import OptimizerResult, PdhgParams, run_pdhg, validate_params

__version__ = "0.1.0"

__all__ = [
    "Atom",
    "Coefficients",
    "Field",
    "GdParams",
    "Grid2D",
    "OptimizerResult",
    "PdhgParams",
    "ProblemConfig",
    "Region",
    "Report",
    "SparseSource",
    "TimeStepOperator",
    "assemble_operator",
    "enhance",
    "estimate_opnorm",
    "evaluate",
    "find_local_maxima",
    "inner_product",
    "make_case",
    "make_grid",
    "make_target",
    "norm",
    "run_experiment",
    "run_gd",
    "run_pdhg",
    "solve_intensities",
    "validate_params",
]
