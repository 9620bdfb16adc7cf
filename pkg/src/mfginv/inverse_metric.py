"""Recovery of the metric kernel ``g0`` from density/velocity observations."""

from __future__ import annotations

import numpy as np

from . import pdhg
from .fields import AffineEntryMaps, LocalEnergy, QuadraticCost, check_spd
from .grid import GridSpec, divergence, grad
from .pdhg import Duals, Observation, Primal, SolverConfig, SolveResult


class MetricInverse(pdhg.InverseProblem):
    """Unknown ``theta = g0`` (cell layout); running cost known."""

    def __init__(self, spec: GridSpec, maps: AffineEntryMaps, cost: QuadraticCost | None = None,
                 fixed_mask: np.ndarray | None = None):
        if maps.dim != spec.dim:
            raise ValueError("entry maps and grid disagree on dimension")
        self.spec = spec
        self.maps = maps
        self.cost = cost or QuadraticCost()
        self._energy = LocalEnergy(self.cost, spec)
        self.fixed_mask = (np.zeros(spec.space_shape, dtype=bool) if fixed_mask is None
                           else np.asarray(fixed_mask, dtype=bool))

    def metric(self, theta):
        return self.maps.value(theta)

    def energy(self, theta):
        return self._energy

    def regularizer(self, theta, gamma, p):
        if gamma == 0:
            return 0.0
        D = grad(theta, self.spec.dx, self.spec.dim)
        return gamma / (p * self.spec.dt) * float(np.sum(np.abs(D) ** p))

    def regularizer_grad(self, theta, gamma, p):
        if gamma == 0:
            return np.zeros_like(theta)
        spec = self.spec
        s = pdhg.hp_subgradient(grad(theta, spec.dx, spec.dim), p)
        return -gamma / spec.dt * divergence(s, spec.dx, spec.dim)

    def theta_grad(self, theta, rho, vel, d_G, adj):
        return np.sum(self.maps.deriv(theta) * d_G, axis=(0, 1))


def inverse_objective(problem: MetricInverse, x: Primal, obs: Observation, cfg: SolverConfig) -> float:
    return pdhg.objective_terms(problem, x, obs, pdhg.resolve_weights(cfg, obs))["obj"]


def lagrangian_metric(problem: MetricInverse, x: Primal, duals: Duals, obs: Observation,
                      cfg: SolverConfig) -> float:
    return pdhg.lagrangian(problem, x, duals, obs, pdhg.resolve_weights(cfg, obs))


def grad_primal_metric(problem: MetricInverse, x: Primal, duals: Duals, obs: Observation,
                       cfg: SolverConfig):
    """``(d_rho, d_v, d_g0)`` of the metric Lagrangian."""
    g = pdhg.grad_primal(problem, x, duals, obs, pdhg.resolve_weights(cfg, obs))
    return g.rho, g.vel, g.theta


def solve_inverse_metric(obs: Observation, cfg: SolverConfig, g0_init, known_entries=None,
                         maps: AffineEntryMaps | None = None, cost: QuadraticCost | None = None,
                         truth=None, **kwargs) -> SolveResult:
    """Run the primal-dual iteration for ``g0``.

    ``known_entries`` is a boolean mask (or ``{cell: value}`` mapping) of
    cells held fixed; with a mapping the values are written into ``g0_init``.
    """
    from .fields import entry_maps

    spec = obs.spec
    maps = maps or entry_maps("scalar", spec.dim)
    g0 = np.broadcast_to(np.asarray(g0_init, dtype=float), spec.space_shape).copy()
    mask = _known_mask(known_entries, g0, spec)
    check_spd(maps.value(g0), "initial ground metric")
    problem = MetricInverse(spec, maps, cost, mask)
    x0 = kwargs.pop("x0", None) or pdhg.initial_primal(obs, g0, cfg.rho_min)
    return pdhg.run_pdhg(problem, obs, cfg, x0, truth=truth, **kwargs)


def _known_mask(known_entries, theta, spec_shape_src):
    shape = theta.shape
    mask = np.zeros(shape, dtype=bool)
    if known_entries is None:
        return mask
    if isinstance(known_entries, dict):
        for cell, value in known_entries.items():
            cell = (cell,) if np.isscalar(cell) else tuple(cell)
            theta[cell] = value
            mask[cell] = True
        return mask
    known = np.asarray(known_entries, dtype=bool)
    if known.shape != shape:
        raise ValueError(f"known-entry mask must have shape {shape}")
    return known.copy()
