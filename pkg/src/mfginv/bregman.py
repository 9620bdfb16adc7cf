"""Outer Bregman iteration around the primal-dual inverse solvers.

Each outer step replaces the regularizer ``J`` by the Bregman distance
``D_J^q(theta, theta_l) = J(theta) - J(theta_l) - <q, theta - theta_l>``
and then sets ``q_{l+1} = q_l - dC/dtheta``, the constraint part of the
theta-gradient at the inner solution. At an exact inner saddle point this
makes ``q_{l+1}`` a subgradient of ``J`` at ``theta_{l+1}``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import pdhg
from .pdhg import Duals, InverseProblem, Observation, Primal, SolverConfig

log = logging.getLogger(__name__)


@dataclass
class BregmanState:
    q: np.ndarray
    l: int = 0
    history: list[dict] = field(default_factory=list)
    thetas: list[np.ndarray] = field(default_factory=list)
    # constraint gradient used for each q update, kept for bookkeeping checks
    steps: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def start(cls, theta: np.ndarray) -> "BregmanState":
        return cls(np.zeros_like(np.asarray(theta, dtype=float)))


def bregman_divergence(problem: InverseProblem, theta, theta_ref, q, gamma: float, p: int) -> float:
    """``J(theta) - J(theta_ref) - <q, theta - theta_ref>``."""
    theta = np.asarray(theta, dtype=float)
    theta_ref = np.asarray(theta_ref, dtype=float)
    if theta.shape != theta_ref.shape or np.shape(q) != theta.shape:
        raise ValueError("theta, theta_ref and q must share one shape")
    return (problem.regularizer(theta, gamma, p) - problem.regularizer(theta_ref, gamma, p)
            - float(np.sum(q * (theta - theta_ref))))


@dataclass
class BregmanResult:
    theta: np.ndarray
    state: BregmanState
    primal: Primal
    duals: Duals
    inner_traces: list[list[dict]]


def run_bregman(problem: InverseProblem, obs: Observation, cfg: SolverConfig, x0: Primal,
                outer_iters: int, inner_iters: int | None = None, truth=None,
                warm_start: bool = True, callback=None) -> BregmanResult:
    """Run ``outer_iters`` Bregman steps around :func:`pdhg.run_pdhg`.

    ``inner_iters`` defaults to ``cfg.iters // outer_iters``. With
    ``warm_start`` each inner solve continues from the previous primal and
    dual iterates; otherwise it restarts from ``x0`` with zero duals.
    ``callback(l, state, result)`` runs after each outer step.
    """
    if outer_iters < 1:
        raise ValueError("outer_iters must be at least 1")
    inner = inner_iters if inner_iters is not None else max(1, cfg.iters // outer_iters)
    state = BregmanState.start(x0.theta)
    x, duals = x0.copy(), None
    theta_ref = x0.theta.copy()
    traces = []
    for l in range(1, outer_iters + 1):
        start = x if warm_start else x0.copy()
        start_duals = duals if warm_start else None
        try:
            res = pdhg.run_pdhg(problem, obs, cfg, start, duals=start_duals, q=state.q,
                                truth=truth, iters=inner)
        except pdhg.SolverAbort as exc:
            raise pdhg.SolverAbort(exc.iteration, f"inner solve of outer step {l}") from exc
        x, duals = res.primal, res.duals
        wts = res.weights
        if res.backoffs:
            # later inner solves keep the reduced steps instead of diverging again
            last = res.backoffs[-1]
            cfg = replace(cfg, tau_rho=last["tau_rho"], tau_v=last["tau_v"],
                          tau_theta=last["tau_theta"], sigma=last["sigma"],
                          max_backoff=cfg.max_backoff - len(res.backoffs))
        g = pdhg.grad_primal(problem, x, duals, obs, wts)
        terms = pdhg.objective_terms(problem, x, obs, wts)
        obj = (terms["obj"] - terms["reg"]
               + bregman_divergence(problem, x.theta, theta_ref, state.q, wts.gamma, wts.p))
        step = g.theta_constraint
        state.q = np.where(problem.fixed_mask, 0.0, state.q - step)
        state.steps.append(step.copy())
        state.l = l
        theta_ref = x.theta.copy()
        state.thetas.append(theta_ref)
        err = pdhg.relative_error(x.theta, truth) if truth is not None else math.nan
        state.history.append({"l": l, "inner_iters": inner, "obj": obj, "theta_err": err,
                              "backoffs": len(res.backoffs)})
        traces.append(res.trace)
        log.info("bregman step %d: obj=%.6g err=%.4g", l, obj, err)
        if callback is not None:
            callback(l, state, res)
    return BregmanResult(x.theta.copy(), state, x, duals, traces)
