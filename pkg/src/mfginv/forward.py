"""Discrete forward MFG: minimal kinetic plus running/interaction energy.

The saddle point of

    L(m, rho, phi) = sum 1/2 m^T G m / rho + sum_{k=1}^{n-1} E(rho[k])
                     + <phi, (rho[k+1] - rho[k]) / dt + div m[k]>

is found by a gradient primal-dual iteration followed, optionally, by a
Newton polish on the KKT system. ``E`` is the slice energy divided by
``dx^dim`` (``sum F(rho)`` or ``1/2 sum rho (K * rho)``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import (
    RHO_MIN,
    GroundMetricModel,
    InteractionEnergy,
    LocalEnergy,
    apply_metric,
    check_spd,
    quad_form,
    residuals_from,
)
from .grid import GridSpec, divergence, grad, time_diff_half
from .pdhg import SolverAbort

log = logging.getLogger(__name__)

BOUNDARY_PRESETS = ("gaussian-bump", "double-bump", "uniform")


def torus_distance(x: np.ndarray, c: float) -> np.ndarray:
    d = np.abs(x - c) % 1.0
    return np.minimum(d, 1.0 - d)


def make_boundary(kind: str, spec: GridSpec, center=0.5, width: float = 0.1,
                  background: float = 0.1, mass: float = 1.0, centers=None,
                  weights=None) -> np.ndarray:
    """Strictly positive density slice with ``sum rho dx^dim = mass``.

    ``gaussian-bump``: ``background + exp(-|x - center|^2 / (2 width^2))``
    with periodic distance per axis. ``double-bump`` sums bumps at
    ``centers`` (scaled by ``weights``). ``uniform`` is constant.
    """
    if kind not in BOUNDARY_PRESETS:
        raise ValueError(f"unknown boundary preset {kind!r}; expected one of {BOUNDARY_PRESETS}")
    if kind == "uniform":
        rho = np.ones(spec.space_shape)
    else:
        if not width > 0:
            raise ValueError(f"bump width must be positive, got {width}")
        if background < 0:
            raise ValueError("background density must be nonnegative")
        if kind == "gaussian-bump":
            centers = [center]
            weights = [1.0]
        else:
            centers = centers if centers is not None else [0.25, 0.75]
            weights = weights if weights is not None else [1.0] * len(centers)
        xs = spec.coords()
        rho = np.full(spec.space_shape, float(background))
        for c, wgt in zip(centers, weights):
            c = np.broadcast_to(np.asarray(c, dtype=float), (spec.dim,))
            r2 = sum(torus_distance(xs[a], c[a]) ** 2 for a in range(spec.dim))
            rho = rho + wgt * np.exp(-r2 / (2 * width**2))
        if not np.all(rho > 0):
            raise ValueError("boundary density must be strictly positive; raise the background")
    return rho * (mass / (np.sum(rho) * spec.cell_volume))


@dataclass
class ForwardProblem:
    """Boundary densities, energy model and metric of one forward solve."""

    spec: GridSpec
    rho0: np.ndarray
    rhoT: np.ndarray
    energy: LocalEnergy | InteractionEnergy
    metric: GroundMetricModel | np.ndarray

    def __post_init__(self):
        spec = self.spec
        spec.check(self.rho0, "cell", "rho0")
        spec.check(self.rhoT, "cell", "rhoT")
        if not (np.all(self.rho0 > 0) and np.all(self.rhoT > 0)):
            raise ValueError("rho0 and rhoT must be strictly positive")
        if abs(np.sum(self.rho0) - np.sum(self.rhoT)) > 1e-10 * max(1.0, np.sum(self.rho0)):
            raise ValueError("rho0 and rhoT must carry equal total mass")
        check_spd(self.G)

    @property
    def G(self) -> np.ndarray:
        if isinstance(self.metric, GroundMetricModel):
            return self.metric.tensor()
        return np.asarray(self.metric, dtype=float)


@dataclass
class ForwardConfig:
    """Forward solver settings.

    Step sizes left ``None`` are set from the norm of the constraint operator.
    ``tol`` is the convergence criterion on the max-abs KKT residual; with
    ``newton`` on, a Newton polish continues down to ``polish_tol``.
    """

    iters: int = 2000
    tau_m: float | None = None
    tau_rho: float | None = None
    sigma: float | None = None
    tol: float = 1e-6
    newton: bool = True
    polish_tol: float = 1e-11
    newton_iters: int = 60
    rho_min: float = RHO_MIN
    log_every: int = 100


@dataclass
class ForwardResult:
    rho: np.ndarray
    vel: np.ndarray
    phi: np.ndarray
    m: np.ndarray
    diagnostics: list[dict] = field(default_factory=list)
    converged: bool = False
    kkt: float = math.inf
    meta: dict = field(default_factory=dict)


def forward_objective(m: np.ndarray, rho: np.ndarray, problem: ForwardProblem,
                      rho_min: float = RHO_MIN) -> float:
    """``sum 1/2 m^T G m / rho + sum_{k=1}^{n-1} E(rho[k])``."""
    kinetic = 0.5 * float(np.sum(quad_form(problem.G, m) / np.maximum(rho[:-1], rho_min)))
    return kinetic + sum(problem.energy.value(rho[k]) for k in range(1, problem.spec.n))


def kkt_residuals(m, rho, phi, problem: ForwardProblem):
    """``(dL/dm, dL/drho interior, continuity)`` of the forward Lagrangian."""
    spec, G = problem.spec, problem.G
    dim = spec.dim
    r = rho[:-1][(slice(None), None) + (slice(None),) * dim]
    Gm = apply_metric(G, m)
    e_m = Gm / r - grad(phi, spec.dx, dim)
    e_rho = (-0.5 * quad_form(G, m)[1:] / rho[1:-1] ** 2
             + problem.energy.potential(rho[1:-1]) + (phi[:-1] - phi[1:]) / spec.dt)
    e_cont = time_diff_half(rho, spec.dt) + divergence(m, spec.dx, dim)
    return e_m, e_rho, e_cont


def _kkt_max(parts) -> float:
    return max(float(np.max(np.abs(p))) for p in parts)


def _diag_row(k, stage, m, rho, phi, problem, rho_min):
    spec = problem.spec
    vel = m / np.maximum(rho[:-1], rho_min)[(slice(None), None) + (slice(None),) * spec.dim]
    res = residuals_from(rho, vel, problem.G, problem.energy.potential, spec).max_abs()
    kkt = _kkt_max(kkt_residuals(m, rho, phi, problem))
    return {"iter": k, "stage": stage, "obj": forward_objective(m, rho, problem, rho_min),
            "kkt": kkt, "r_cont": res["cont"], "r_hje": res["hje"], "r_curl": res["curl"],
            "r_loop": res["loop"]}


def initial_guess(problem: ForwardProblem):
    spec = problem.spec
    s = (np.arange(spec.n + 1) / spec.n)[(slice(None),) + (None,) * spec.dim]
    rho = (1 - s) * problem.rho0 + s * problem.rhoT
    return np.zeros(spec.shape("face")), rho, np.zeros(spec.shape("cell-int"))


def solve_forward(problem: ForwardProblem, cfg: ForwardConfig | None = None) -> ForwardResult:
    """Solve the forward problem; boundary slices of ``rho`` are never updated."""
    cfg = cfg or ForwardConfig()
    spec = problem.spec
    dim = spec.dim
    G = problem.G
    m, rho, phi = initial_guess(problem)
    op_norm = math.sqrt(4 * dim / spec.dx**2 + 4 / spec.dt**2)
    tau_m = cfg.tau_m or 0.9 / op_norm
    tau_rho = cfg.tau_rho or 0.9 / op_norm
    sigma = cfg.sigma or 0.9 / op_norm
    diags: list[dict] = []
    every = max(1, cfg.log_every)
    lead = (slice(None), None) + (slice(None),) * dim

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(cfg.iters):
            if k % every == 0:
                diags.append(_diag_row(k, "pdhg", m, rho, phi, problem, cfg.rho_min))
            e_m, e_rho, _ = kkt_residuals(m, rho, phi, problem)
            m_new = m - tau_m * e_m
            rho_new = rho.copy()
            rho_new[1:-1] = np.maximum(rho[1:-1] - tau_rho * e_rho, cfg.rho_min)
            m_star = 2 * m_new - m
            rho_star = 2 * rho_new - rho
            phi = phi + sigma * (time_diff_half(rho_star, spec.dt) + divergence(m_star, spec.dx, dim))
            m, rho = m_new, rho_new
            if not (np.all(np.isfinite(m)) and np.all(np.isfinite(rho)) and np.all(np.isfinite(phi))):
                raise SolverAbort(k + 1, "forward iterate")

    kkt = _kkt_max(kkt_residuals(m, rho, phi, problem))
    n_done = cfg.iters
    if cfg.newton and kkt > cfg.polish_tol:
        m, rho, phi, n_newton = _newton_polish(m, rho, phi, problem, cfg, diags, n_done)
        n_done += n_newton
        kkt = _kkt_max(kkt_residuals(m, rho, phi, problem))
    diags.append(_diag_row(n_done, "final", m, rho, phi, problem, cfg.rho_min))
    vel = m / np.maximum(rho[:-1], cfg.rho_min)[lead]
    meta = {"energy": problem.energy.kind, "energy_scaling": f"1/dx^{dim}",
            "tau_m": tau_m, "tau_rho": tau_rho, "sigma": sigma}
    return ForwardResult(rho, vel, phi, m, diags, kkt <= cfg.tol, kkt, meta)


# ---------------------------------------------------------------------------
# Newton polish
# ---------------------------------------------------------------------------


def _space_grad_matrix(spec: GridSpec) -> sp.csr_matrix:
    """Forward periodic difference, cells -> faces, for one time slice."""
    m, dim = spec.m, spec.dim
    N = m**dim
    idx = np.arange(N).reshape(spec.space_shape)
    blocks = []
    eye = sp.identity(N, format="csr")
    for a in range(dim):
        shifted = np.roll(idx, -1, axis=a).ravel()
        S = sp.csr_matrix((np.ones(N), (np.arange(N), shifted)), shape=(N, N))
        blocks.append((S - eye) / spec.dx)
    return sp.vstack(blocks, format="csr")


def _time_matrix(spec: GridSpec) -> sp.csr_matrix:
    """Interior densities -> continuity rows: ``(rho[k+1] - rho[k]) / dt``."""
    n, N = spec.n, spec.m**spec.dim
    rows, cols, vals = [], [], []
    for kp in range(1, n):
        c = (kp - 1) * N + np.arange(N)
        rows += [(kp - 1) * N + np.arange(N), kp * N + np.arange(N)]
        cols += [c, c]
        vals += [np.full(N, 1 / spec.dt), np.full(N, -1 / spec.dt)]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n * N, (n - 1) * N))


def _energy_hessian(problem: ForwardProblem, rho_int: np.ndarray) -> sp.spmatrix:
    spec = problem.spec
    N = spec.m**spec.dim
    en = problem.energy
    if isinstance(en, LocalEnergy):
        return sp.diags(en.cost.d2F(rho_int).ravel())
    block = sp.csr_matrix(en.conv.matrix * spec.cell_volume)
    return sp.block_diag([block] * (spec.n - 1), format="csr")


def _newton_polish(m, rho, phi, problem, cfg, diags, k0):
    spec = problem.spec
    n, dim = spec.n, spec.dim
    N = spec.m**dim
    G = problem.G
    Dsp = _space_grad_matrix(spec)
    Grad = sp.kron(sp.identity(n), Dsp, format="csr")
    Tt = _time_matrix(spec)
    Nm, Nr, Np = n * dim * N, (n - 1) * N, n * N
    gauge = np.concatenate([np.zeros(Nm + Nr), np.ones(Np)])[:, None]

    def F(m, rho, phi):
        return np.concatenate([p.ravel() for p in kkt_residuals(m, rho, phi, problem)])

    def jacobian(m, rho):
        r = rho[:-1]
        Gflat = G.reshape(dim, dim, N)
        # d e_m / d m : block diagonal G_i / rho[k, i]
        rows, cols, vals = [], [], []
        base = np.arange(n)[:, None] * dim * N + np.arange(N)[None, :]
        rinv = 1.0 / r.reshape(n, N)
        for a in range(dim):
            for b in range(dim):
                rows.append((base + a * N).ravel())
                cols.append((base + b * N).ravel())
                vals.append((Gflat[a, b][None, :] * rinv).ravel())
        Amm = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(Nm, Nm))
        Gm = apply_metric(G, m).reshape(n, dim, N)
        # d e_m / d rho_int for k >= 1
        rows, cols, vals = [], [], []
        for a in range(dim):
            kk = np.arange(1, n)[:, None]
            rows.append((kk * dim * N + a * N + np.arange(N)[None, :]).ravel())
            cols.append(((kk - 1) * N + np.arange(N)[None, :]).ravel())
            vals.append((-Gm[1:, a] / r.reshape(n, N)[1:] ** 2).ravel())
        Amr = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(Nm, Nr))
        q = quad_form(G, m).reshape(n, N)[1:]
        Arr = sp.diags((q / r.reshape(n, N)[1:] ** 3).ravel()) + _energy_hessian(problem, rho[1:-1])
        return sp.bmat([[Amm, Amr, -Grad], [Amr.T, Arr, Tt.T], [-Grad.T, Tt, None]], format="csc")

    def unpack(x):
        dm = x[:Nm].reshape(m.shape)
        dr = x[Nm:Nm + Nr].reshape((n - 1, *spec.space_shape))
        dp = x[Nm + Nr:Nm + Nr + Np].reshape(phi.shape)
        return dm, dr, dp

    res = F(m, rho, phi)
    it = 0
    for it in range(1, cfg.newton_iters + 1):
        J = jacobian(m, rho)
        K = sp.bmat([[J, sp.csc_matrix(gauge)], [sp.csc_matrix(gauge.T), None]], format="csc")
        step = spla.spsolve(K, np.concatenate([-res, [0.0]]))
        dm, dr, dp = unpack(step)
        if not np.all(np.isfinite(step)):
            raise SolverAbort(k0 + it, "Newton step")
        t = 1.0
        norm0 = np.linalg.norm(res)
        while True:
            rho_t = rho.copy()
            rho_t[1:-1] = rho[1:-1] + t * dr
            if np.all(rho_t[1:-1] > cfg.rho_min):
                res_t = F(m + t * dm, rho_t, phi + t * dp)
                if np.linalg.norm(res_t) <= (1 - 1e-4 * t) * norm0 or t < 1e-10:
                    break
            t *= 0.5
            if t < 1e-10:
                raise SolverAbort(k0 + it, "Newton line search")
        m, rho, phi, res = m + t * dm, rho_t, phi + t * dp, res_t
        # gauge: phi is defined up to a constant
        phi = phi - phi.mean()
        res = F(m, rho, phi)
        diags.append(_diag_row(k0 + it, "newton", m, rho, phi, problem, cfg.rho_min))
        if np.max(np.abs(res)) <= cfg.polish_tol:
            break
    return m, rho, phi, it
