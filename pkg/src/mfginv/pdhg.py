"""Primal-dual engine shared by the metric and kernel inverse problems.

The Lagrangian is

    L = misfit(rho, v) + J(theta) - <q, theta>
        + <psi, r_hje> + <Phi, r_cont> + <chi, r_curl> + <Theta, r_loop>

with the residuals of :func:`mfginv.fields.residuals_from`. The primal
gradients below are the exact adjoints of those residual maps, so that they
agree with finite differences of :func:`lagrangian` to rounding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fields import (
    RHO_MIN,
    Residuals,
    apply_metric,
    flux_of,
    outer_faces,
    residuals_from,
)
from .grid import GridSpec, divergence, grad

log = logging.getLogger(__name__)


class SolverAbort(RuntimeError):
    """A non-finite iterate was produced; carries the iteration index."""

    def __init__(self, iteration: int, what: str = "iterate"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class SolverConfig:
    """Weights, step sizes and budget of one primal-dual solve.

    ``alpha``/``beta`` left as ``None`` are resolved from the observation as
    ``alpha_scale / ||rho_hat||^2`` and ``beta_scale / (v_hat . v_hat)``,
    using plain l2 norms of the stacked space-time values.
    """

    alpha: float | None = None
    alpha_scale: float = 1.0
    alpha0: float = 0.0
    beta: float | None = None
    beta_scale: float = 1.0
    gamma: float = 1e-5
    p: int = 2
    tau_rho: float = 2e-3
    tau_v: float = 2e-3
    tau_theta: float = 2e-3
    sigma: float = 1e-3
    iters: int = 60000
    objective_mode: str = "L2"
    pin_boundary: bool = False
    rho_min: float = RHO_MIN
    log_every: int = 500
    seed: int = 0
    max_backoff: int = 0

    def __post_init__(self):
        for name in ("tau_rho", "tau_v", "tau_theta", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"step size {name} must be positive")
        if self.p not in (1, 2):
            raise ValueError(f"norm index p must be 1 or 2, got {self.p}")
        if self.objective_mode not in ("L2", "KL"):
            raise ValueError(f"objective_mode must be 'L2' or 'KL', got {self.objective_mode!r}")
        for name in ("alpha0", "gamma", "alpha_scale", "beta_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.max_backoff < 0:
            raise ValueError("max_backoff must be nonnegative")
        if self.iters < 0:
            raise ValueError("iters must be nonnegative")


@dataclass
class Observation:
    """Observed density (half-step layout) and velocity (face layout)."""

    rho_hat: np.ndarray
    vel_hat: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        self.spec.check(self.rho_hat, "cell-half", "rho_hat")
        self.spec.check(self.vel_hat, "face", "vel_hat")
        if not (np.all(np.isfinite(self.rho_hat)) and np.all(np.isfinite(self.vel_hat))):
            raise ValueError("observations must be finite")

    @property
    def rho0(self) -> np.ndarray:
        return self.rho_hat[0]

    @property
    def rhoT(self) -> np.ndarray:
        return self.rho_hat[-1]


@dataclass(frozen=True)
class Weights:
    alpha: float
    alpha0: float
    beta: float
    gamma: float
    p: int
    mode: str = "L2"
    rho_min: float = RHO_MIN


def resolve_weights(cfg: SolverConfig, obs: Observation) -> Weights:
    alpha = cfg.alpha
    if alpha is None:
        alpha = cfg.alpha_scale / float(np.sum(obs.rho_hat**2))
    beta = cfg.beta
    if beta is None:
        vv = float(np.sum(obs.vel_hat**2))
        beta = cfg.beta_scale / vv if vv > 0 else cfg.beta_scale
    return Weights(alpha, cfg.alpha0, beta, cfg.gamma, cfg.p, cfg.objective_mode, cfg.rho_min)


@dataclass
class Duals:
    """Multipliers of the four discrete constraints.

    ``psi`` (n-1, dim, *S); ``Phi`` (n, *S); ``chi`` (n, *S) in 2-D, else
    ``None``; ``loop`` shaped like the loop residual.
    """

    psi: np.ndarray
    Phi: np.ndarray
    chi: np.ndarray | None
    loop: np.ndarray

    @classmethod
    def zeros(cls, spec: GridSpec) -> "Duals":
        n, dim, S = spec.n, spec.dim, spec.space_shape
        chi = np.zeros((n, *S)) if dim == 2 else None
        loop = np.zeros((n, 1)) if dim == 1 else np.zeros((n, 2, spec.m))
        return cls(np.zeros((n - 1, dim, *S)), np.zeros((n, *S)), chi, loop)

    def copy(self) -> "Duals":
        return Duals(self.psi.copy(), self.Phi.copy(),
                     None if self.chi is None else self.chi.copy(), self.loop.copy())

    def shapes(self):
        return (self.psi.shape, self.Phi.shape, None if self.chi is None else self.chi.shape,
                self.loop.shape)

    def ascend(self, res: Residuals, sigma: float) -> None:
        self.psi += sigma * res.hje
        self.Phi += sigma * res.cont
        if self.chi is not None:
            self.chi += sigma * res.curl
        self.loop += sigma * res.loop

    def finite(self) -> bool:
        arrs = [self.psi, self.Phi, self.loop] + ([] if self.chi is None else [self.chi])
        return all(np.all(np.isfinite(a)) for a in arrs)


def pairing(duals: Duals, res: Residuals) -> float:
    """``sum dual * residual`` over all four constraints."""
    total = float(np.sum(duals.psi * res.hje)) + float(np.sum(duals.Phi * res.cont))
    if duals.chi is not None:
        total += float(np.sum(duals.chi * res.curl))
    return total + float(np.sum(duals.loop * res.loop))


# ---------------------------------------------------------------------------
# misfit
# ---------------------------------------------------------------------------


def _xlogx_ratio(x, ref):
    return x * np.log(x / ref)


def misfit_terms(rho, vel, obs: Observation, wts: Weights) -> dict[str, float]:
    dt = obs.spec.dt
    if wts.mode == "L2":
        mr = 0.5 * wts.alpha * float(np.sum((rho - obs.rho_hat) ** 2))
        mv = 0.5 * wts.beta * float(np.sum((vel - obs.vel_hat) ** 2))
        bd = 0.0
        if wts.alpha0:
            bd = wts.alpha0 / (2 * dt) * float(
                np.sum((rho[0] - obs.rho_hat[0]) ** 2) + np.sum((rho[-1] - obs.rho_hat[-1]) ** 2)
            )
        return {"misfit_rho": mr, "misfit_v": mv, "misfit_boundary": bd}
    r = np.maximum(rho, wts.rho_min)
    rh = np.maximum(obs.rho_hat, wts.rho_min)
    mr = wts.alpha * float(np.sum(_xlogx_ratio(r, rh)))
    weight = _face_weight(rh, obs.spec.dim)
    mv = 0.5 * wts.beta * float(np.sum(weight * (vel - obs.vel_hat) ** 2))
    bd = 0.0
    if wts.alpha0:
        bd = wts.alpha0 / dt * float(
            np.sum(_xlogx_ratio(r[0], rh[0])) + np.sum(_xlogx_ratio(r[-1], rh[-1]))
        )
    return {"misfit_rho": mr, "misfit_v": mv, "misfit_boundary": bd}


def _face_weight(rho_hat, dim):
    return rho_hat[(slice(0, -1), None) + (slice(None),) * dim]


def misfit_grad(rho, vel, obs: Observation, wts: Weights):
    dt = obs.spec.dt
    if wts.mode == "L2":
        d_rho = wts.alpha * (rho - obs.rho_hat)
        if wts.alpha0:
            d_rho[0] += wts.alpha0 / dt * (rho[0] - obs.rho_hat[0])
            d_rho[-1] += wts.alpha0 / dt * (rho[-1] - obs.rho_hat[-1])
        d_v = wts.beta * (vel - obs.vel_hat)
        return d_rho, d_v
    r = np.maximum(rho, wts.rho_min)
    rh = np.maximum(obs.rho_hat, wts.rho_min)
    d_rho = wts.alpha * (np.log(r / rh) + 1.0)
    if wts.alpha0:
        d_rho[0] += wts.alpha0 / dt * (np.log(r[0] / rh[0]) + 1.0)
        d_rho[-1] += wts.alpha0 / dt * (np.log(r[-1] / rh[-1]) + 1.0)
    d_v = wts.beta * _face_weight(rh, obs.spec.dim) * (vel - obs.vel_hat)
    return d_rho, d_v


# ---------------------------------------------------------------------------
# constraint adjoint
# ---------------------------------------------------------------------------


@dataclass
class Adjoint:
    """Partial derivatives of the dual pairing with respect to derived fields.

    ``Pw`` = d/dw (face), ``Pm`` = d/dm (face), ``Pxi`` = d/dxi (cells at
    ``k = 1..n-1``), ``Prho`` = explicit d/drho from the time difference.
    """

    Pw: np.ndarray
    Pm: np.ndarray
    Pxi: np.ndarray
    Prho: np.ndarray


def pairing_adjoint(duals: Duals, spec: GridSpec) -> Adjoint:
    dim, dx, dt, n = spec.dim, spec.dx, spec.dt, spec.n
    psi = duals.psi
    Pxi = -divergence(psi, dx, dim)
    Pw = np.zeros((n, dim, *spec.space_shape))
    Pw[1:] += psi / dt
    Pw[:-1] -= psi / dt
    if dim == 2:
        chi = duals.chi
        # adjoints of the forward differences along axis 2 (w1) and axis 1 (w2)
        Pw[:, 0] += (np.roll(chi, 1, axis=2) - chi) / dx
        Pw[:, 1] -= (np.roll(chi, 1, axis=1) - chi) / dx
        Pw[:, 0] += duals.loop[:, 0][:, None, :]
        Pw[:, 1] += duals.loop[:, 1][:, :, None]
    else:
        Pw[:, 0] += duals.loop[:, 0][:, None]
    Pm = -grad(duals.Phi, dx, dim)
    Prho = np.zeros((n + 1, *spec.space_shape))
    Prho[1:] += duals.Phi / dt
    Prho[:-1] -= duals.Phi / dt
    return Adjoint(Pw, Pm, Pxi, Prho)


def constraint_grads(rho, vel, G, hess_apply, duals: Duals, spec: GridSpec):
    """Gradients of the dual pairing in ``rho``, ``v`` and the metric entries.

    ``hess_apply(rho_slices, d)`` applies the derivative of the potential
    (``F''(rho) d`` or ``K * d``). Returns ``(d_rho, d_v, d_G, adj)`` where
    ``d_G`` has shape ``(dim, dim, *S)``.
    """
    dim = spec.dim
    adj = pairing_adjoint(duals, spec)
    lead = (slice(0, -1), None) + (slice(None),) * dim
    Gv = apply_metric(G, vel)
    d_v = apply_metric(G, adj.Pw) + rho[lead] * adj.Pm
    pxi = adj.Pxi[(slice(None), None) + (slice(None),) * dim]
    d_v[1:] += pxi * Gv[1:]
    d_rho = adj.Prho.copy()
    d_rho[:-1] += np.sum(adj.Pm * vel, axis=1)
    d_rho[1:-1] -= hess_apply(rho[1:-1], adj.Pxi)
    d_G = outer_faces(adj.Pw, vel, dim) + 0.5 * outer_faces(pxi * vel[1:], vel[1:], dim)
    return d_rho, d_v, d_G, adj


# ---------------------------------------------------------------------------
# problem interface
# ---------------------------------------------------------------------------


class InverseProblem:
    """What the engine needs to know about the unknown parameter ``theta``.

    Subclasses supply the metric tensor and potential induced by ``theta``,
    the regularizer ``J`` and the theta-part of the constraint gradient.
    """

    spec: GridSpec
    fixed_mask: np.ndarray

    def metric(self, theta) -> np.ndarray:
        raise NotImplementedError

    def energy(self, theta):
        """Object with ``potential`` and ``hess_apply``."""
        raise NotImplementedError

    def regularizer(self, theta, gamma: float, p: int) -> float:
        raise NotImplementedError

    def regularizer_grad(self, theta, gamma: float, p: int) -> np.ndarray:
        raise NotImplementedError

    def theta_grad(self, theta, rho, vel, d_G, adj: Adjoint) -> np.ndarray:
        raise NotImplementedError

    def residuals(self, rho, vel, theta) -> Residuals:
        en = self.energy(theta)
        return residuals_from(rho, vel, self.metric(theta), en.potential, self.spec)


def hp_subgradient(diff: np.ndarray, p: int) -> np.ndarray:
    """``|x|^(p-1) sign(x)`` with ``sign(0) = 0``."""
    if p == 1:
        return np.sign(diff)
    return np.abs(diff) ** (p - 1) * np.sign(diff)


@dataclass
class Primal:
    rho: np.ndarray
    vel: np.ndarray
    theta: np.ndarray

    def copy(self) -> "Primal":
        return Primal(self.rho.copy(), self.vel.copy(), self.theta.copy())

    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.rho)) and np.all(np.isfinite(self.vel))
                    and np.all(np.isfinite(self.theta)))


def objective_terms(problem: InverseProblem, x: Primal, obs: Observation, wts: Weights,
                    q: np.ndarray | None = None) -> dict[str, float]:
    terms = misfit_terms(x.rho, x.vel, obs, wts)
    reg = problem.regularizer(x.theta, wts.gamma, wts.p)
    if q is not None:
        reg -= float(np.sum(q * x.theta))
    terms["reg"] = reg
    terms["obj"] = terms["misfit_rho"] + terms["misfit_v"] + terms["misfit_boundary"] + reg
    return terms


def lagrangian(problem: InverseProblem, x: Primal, duals: Duals, obs: Observation,
               wts: Weights, q: np.ndarray | None = None) -> float:
    obj = objective_terms(problem, x, obs, wts, q)["obj"]
    return obj + pairing(duals, problem.residuals(x.rho, x.vel, x.theta))


@dataclass
class PrimalGrad:
    rho: np.ndarray
    vel: np.ndarray
    theta: np.ndarray
    theta_constraint: np.ndarray


def grad_primal(problem: InverseProblem, x: Primal, duals: Duals, obs: Observation,
                wts: Weights, q: np.ndarray | None = None) -> PrimalGrad:
    """Gradient of :func:`lagrangian` in ``(rho, v, theta)``; pinned theta entries zeroed."""
    G = problem.metric(x.theta)
    en = problem.energy(x.theta)
    c_rho, c_v, d_G, adj = constraint_grads(x.rho, x.vel, G, en.hess_apply, duals, problem.spec)
    m_rho, m_v = misfit_grad(x.rho, x.vel, obs, wts)
    c_theta = problem.theta_grad(x.theta, x.rho, x.vel, d_G, adj)
    d_theta = c_theta + problem.regularizer_grad(x.theta, wts.gamma, wts.p)
    if q is not None:
        d_theta = d_theta - q
    d_theta = np.where(problem.fixed_mask, 0.0, d_theta)
    c_theta = np.where(problem.fixed_mask, 0.0, c_theta)
    return PrimalGrad(m_rho + c_rho, m_v + c_v, d_theta, c_theta)


def pdhg_step(problem: InverseProblem, x: Primal, duals: Duals, obs: Observation,
              wts: Weights, cfg: SolverConfig, q: np.ndarray | None = None) -> Primal:
    """One primal descent / extrapolation / dual ascent step; updates ``duals`` in place."""
    g = grad_primal(problem, x, duals, obs, wts, q)
    if cfg.pin_boundary:
        g.rho[0] = 0.0
        g.rho[-1] = 0.0
    new = Primal(x.rho - cfg.tau_rho * g.rho, x.vel - cfg.tau_v * g.vel,
                 x.theta - cfg.tau_theta * g.theta)
    if wts.mode == "KL":
        np.maximum(new.rho, wts.rho_min, out=new.rho)
    # pinned entries keep their exact bits
    new.theta[problem.fixed_mask] = x.theta[problem.fixed_mask]
    star = Primal(2 * new.rho - x.rho, 2 * new.vel - x.vel, 2 * new.theta - x.theta)
    star.theta[problem.fixed_mask] = x.theta[problem.fixed_mask]
    duals.ascend(problem.residuals(star.rho, star.vel, star.theta), cfg.sigma)
    return new


@dataclass
class SolveResult:
    theta: np.ndarray
    primal: Primal
    duals: Duals
    trace: list[dict] = field(default_factory=list)
    weights: Weights | None = None
    iterations: int = 0
    backoffs: list = field(default_factory=list)


def initial_primal(obs: Observation, theta0: np.ndarray, rho_min: float = RHO_MIN) -> Primal:
    """Constant density at the observed mean, observed boundary slices, zero velocity."""
    spec = obs.spec
    mean = float(np.mean(obs.rho_hat))
    rho = np.full(spec.shape("cell-half"), max(mean, rho_min))
    rho[0] = obs.rho_hat[0]
    rho[-1] = obs.rho_hat[-1]
    return Primal(rho, np.zeros(spec.shape("face")), np.asarray(theta0, dtype=float).copy())


def run_pdhg(problem: InverseProblem, obs: Observation, cfg: SolverConfig, x0: Primal,
             duals: Duals | None = None, q: np.ndarray | None = None,
             truth: np.ndarray | None = None, iters: int | None = None,
             callback=None) -> SolveResult:
    """Iterate :func:`pdhg_step` for ``iters`` (default ``cfg.iters``) steps."""
    spec = problem.spec
    wts = resolve_weights(cfg, obs)
    if duals is None:
        duals = Duals.zeros(spec)
    elif duals.shapes() != Duals.zeros(spec).shapes():
        raise ValueError("warm-start duals do not match the problem shape")
    iters = cfg.iters if iters is None else iters
    x = x0.copy()
    trace: list[dict] = []
    every = max(1, cfg.log_every)
    backoffs: list[dict] = []
    # two checkpoints so a restart begins before the blow-up started
    older = newer = (0, x.copy(), duals.copy(), 0)
    k = 0
    # overflow on a diverging run is reported through SolverAbort, not warnings
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        while k < iters:
            if k % every == 0:
                if k > newer[0]:
                    older, newer = newer, (k, x.copy(), duals.copy(), len(trace))
                trace.append(_trace_row(problem, x, obs, wts, q, truth, k))
            x = pdhg_step(problem, x, duals, obs, wts, cfg, q)
            if not _cheap_finite(x, duals):
                if len(backoffs) >= cfg.max_backoff:
                    raise SolverAbort(k + 1)
                cfg = _halve_steps(cfg)
                backoffs.append({"iter": k + 1, "restart": older[0], "tau_rho": cfg.tau_rho,
                                 "tau_v": cfg.tau_v, "tau_theta": cfg.tau_theta, "sigma": cfg.sigma})
                log.info("non-finite iterate at %d; restarting from %d with halved steps",
                         k + 1, older[0])
                k, x, duals_ck, ntrace = older[0], older[1].copy(), older[2], older[3]
                _restore(duals, duals_ck)
                del trace[ntrace:]
                newer = older
                continue
            if callback is not None:
                callback(k, x, duals)
            k += 1
    trace.append(_trace_row(problem, x, obs, wts, q, truth, iters))
    return SolveResult(x.theta.copy(), x, duals, trace, wts, iters, backoffs)


def _halve_steps(cfg: SolverConfig) -> SolverConfig:
    return replace(cfg, tau_rho=cfg.tau_rho / 2, tau_v=cfg.tau_v / 2,
                   tau_theta=cfg.tau_theta / 2, sigma=cfg.sigma / 2)


def _restore(duals: Duals, saved: Duals) -> None:
    # duals are updated in place, so the caller's object must keep its identity
    for name in ("psi", "Phi", "loop", "chi"):
        src = getattr(saved, name)
        if src is not None:
            getattr(duals, name)[...] = src


def _cheap_finite(x: Primal, duals: Duals) -> bool:
    # a sum is finite iff every entry is, barring overflow near the float limit
    arrs = (x.rho, x.vel, x.theta, duals.psi, duals.Phi, duals.loop, duals.chi)
    return all(a is None or np.isfinite(np.sum(a)) for a in arrs)


def relative_error(theta, truth) -> float:
    return float(np.linalg.norm(theta - truth) / np.linalg.norm(truth))


def _trace_row(problem, x, obs, wts, q, truth, k) -> dict:
    terms = objective_terms(problem, x, obs, wts, q)
    res = problem.residuals(x.rho, x.vel, x.theta).norms()
    row = {"iter": k, "obj": terms["obj"], "misfit_rho": terms["misfit_rho"],
           "misfit_v": terms["misfit_v"], "reg": terms["reg"],
           "r_hje": res["hje"], "r_cont": res["cont"], "r_curl": res["curl"],
           "r_loop": res["loop"],
           "theta_err": relative_error(x.theta, truth) if truth is not None else math.nan}
    return row
