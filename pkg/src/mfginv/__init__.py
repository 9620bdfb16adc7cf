"""Discrete mean-field games on the periodic grid: forward solver and inverse recovery."""

from .grid import GridSpec, divergence, grad, space_diff, time_diff_half, wrap
from .fields import (
    Convolver,
    GroundMetricModel,
    InteractionEnergy,
    InteractionKernel,
    LocalEnergy,
    QuadraticCost,
    StaggeredState,
    entry_maps,
    expand_kernel,
    kernel_from_exp,
    metric_at,
    residuals,
)
from .forward import ForwardConfig, ForwardProblem, make_boundary, solve_forward
from .pdhg import Duals, Observation, Primal, SolverAbort, SolverConfig
from .inverse_metric import solve_inverse_metric
from .inverse_kernel import solve_inverse_kernel
from .bregman import bregman_divergence, run_bregman
from .noise import inject_noise

__all__ = [
    "GridSpec", "divergence", "grad", "space_diff", "time_diff_half", "wrap",
    "Convolver", "GroundMetricModel", "InteractionEnergy", "InteractionKernel", "LocalEnergy",
    "QuadraticCost", "StaggeredState", "entry_maps", "expand_kernel", "kernel_from_exp",
    "metric_at", "residuals", "ForwardConfig", "ForwardProblem", "make_boundary",
    "solve_forward", "Duals", "Observation", "Primal", "SolverAbort", "SolverConfig",
    "solve_inverse_metric", "solve_inverse_kernel", "bregman_divergence", "run_bregman",
    "inject_noise",
]
