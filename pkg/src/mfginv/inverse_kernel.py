"""Recovery of the interaction kernel ``K~`` from density/velocity observations."""

from __future__ import annotations

import numpy as np

from . import pdhg
from .fields import InteractionEnergy, check_spd, expand_kernel, InteractionKernel, kernel_pair_gradient
from .grid import GridSpec
from .pdhg import Duals, Observation, Primal, SolverConfig, SolveResult


class KernelInverse(pdhg.InverseProblem):
    """Unknown ``theta = K~`` on the quotient grid; metric tensor known."""

    def __init__(self, spec: GridSpec, G: np.ndarray, fixed_mask: np.ndarray | None = None,
                 method: str = "auto"):
        self.spec = spec
        self.G = np.asarray(G, dtype=float)
        if self.G.shape != (spec.dim, spec.dim, *spec.space_shape):
            raise ValueError("metric tensor does not match the grid")
        check_spd(self.G)
        self.method = method
        self.fixed_mask = (np.zeros(spec.quotient_shape, dtype=bool) if fixed_mask is None
                           else np.asarray(fixed_mask, dtype=bool))
        self._cache: tuple[bytes, InteractionEnergy] | None = None

    def metric(self, theta):
        return self.G

    def energy(self, theta):
        key = np.asarray(theta).tobytes()
        if self._cache is None or self._cache[0] != key:
            self._cache = (key, InteractionEnergy(np.array(theta, dtype=float), self.spec, self.method))
        return self._cache[1]

    def _diffs(self, theta):
        return [np.diff(theta, axis=a) / self.spec.dx for a in range(self.spec.dim)]

    def regularizer(self, theta, gamma, p):
        # neighbour pairs inside the quotient grid only, no wrap
        if gamma == 0:
            return 0.0
        total = sum(float(np.sum(np.abs(D) ** p)) for D in self._diffs(theta))
        return gamma / (p * self.spec.dt) * total

    def regularizer_grad(self, theta, gamma, p):
        out = np.zeros_like(theta, dtype=float)
        if gamma == 0:
            return out
        for a, D in enumerate(self._diffs(theta)):
            s = pdhg.hp_subgradient(D, p)
            lo = [slice(None)] * theta.ndim
            hi = [slice(None)] * theta.ndim
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            out[tuple(lo)] -= s
            out[tuple(hi)] += s
        return gamma / (self.spec.dt * self.spec.dx) * out

    def theta_grad(self, theta, rho, vel, d_G, adj):
        # xi carries -(K * rho); the pairing derivative is a pair correlation
        return -kernel_pair_gradient(adj.Pxi, rho[1:-1], self.spec, self.method)


def inverse_objective_kernel(problem: KernelInverse, x: Primal, obs: Observation,
                             cfg: SolverConfig) -> float:
    return pdhg.objective_terms(problem, x, obs, pdhg.resolve_weights(cfg, obs))["obj"]


def lagrangian_kernel(problem: KernelInverse, x: Primal, duals: Duals, obs: Observation,
                      cfg: SolverConfig) -> float:
    return pdhg.lagrangian(problem, x, duals, obs, pdhg.resolve_weights(cfg, obs))


def grad_primal_kernel(problem: KernelInverse, x: Primal, duals: Duals, obs: Observation,
                       cfg: SolverConfig):
    """``(d_rho, d_v, d_ktilde)`` of the kernel Lagrangian."""
    g = pdhg.grad_primal(problem, x, duals, obs, pdhg.resolve_weights(cfg, obs))
    return g.rho, g.vel, g.theta


def known_kernel_mask(known_entries, ktilde: np.ndarray) -> np.ndarray:
    """Boolean mask over the quotient grid; a mapping also writes its values."""
    mask = np.zeros(ktilde.shape, dtype=bool)
    if known_entries is None:
        return mask
    if isinstance(known_entries, dict):
        for q, value in known_entries.items():
            q = (q,) if np.isscalar(q) else tuple(q)
            ktilde[q] = value
            mask[q] = True
        return mask
    known = np.asarray(known_entries, dtype=bool)
    if known.shape != ktilde.shape:
        raise ValueError(f"known-entry mask must have shape {ktilde.shape}")
    return known.copy()


def solve_inverse_kernel(obs: Observation, cfg: SolverConfig, ktilde_init, known_entries=None,
                         G: np.ndarray | None = None, truth=None, method: str = "auto",
                         **kwargs) -> SolveResult:
    """Run the primal-dual iteration for ``K~``.

    ``G`` defaults to the identity metric. ``known_entries`` as in
    :func:`known_kernel_mask`, e.g. ``{0: 1.0}`` or ``{(0, 0): 1.0}``.
    """
    spec = obs.spec
    if G is None:
        G = np.broadcast_to(np.eye(spec.dim).reshape((spec.dim, spec.dim) + (1,) * spec.dim),
                            (spec.dim, spec.dim, *spec.space_shape)).copy()
    k0 = np.broadcast_to(np.asarray(ktilde_init, dtype=float), spec.quotient_shape).copy()
    mask = known_kernel_mask(known_entries, k0)
    problem = KernelInverse(spec, G, mask, method)
    x0 = kwargs.pop("x0", None) or pdhg.initial_primal(obs, k0, cfg.rho_min)
    return pdhg.run_pdhg(problem, obs, cfg, x0, truth=truth, **kwargs)


def kernel_slice(ktilde: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Expanded kernel ``K(x, 0)`` over all cells, shape ``S``."""
    K = expand_kernel(InteractionKernel(ktilde, spec))
    zero = (0,) * spec.dim
    return K[(slice(None),) * spec.dim + zero]
