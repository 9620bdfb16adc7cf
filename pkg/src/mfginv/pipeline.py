"""Experiment orchestration: forward solve, noise, inverse sweeps, Bregman runs."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .bregman import run_bregman
from .config import ConfigError, ExperimentConfig
from .fields import (
    InteractionEnergy,
    LocalEnergy,
    QuadraticCost,
    entry_maps,
    kernel_from_exp,
)
from .forward import ForwardConfig, ForwardProblem, make_boundary, solve_forward
from .grid import GridSpec
from .inverse_kernel import KernelInverse, kernel_slice, known_kernel_mask
from .inverse_metric import MetricInverse, _known_mask
from .noise import RNG_NAME, inject_noise
from .pdhg import Observation, SolverConfig, initial_primal, run_pdhg

log = logging.getLogger(__name__)

STAGES = ("forward", "inverse", "bregman")


class StageError(RuntimeError):
    """A solver failure tagged with the pipeline stage it happened in."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def grid_of(cfg: ExperimentConfig) -> GridSpec:
    g = cfg.grid
    return GridSpec(g.dim, g.m, g.n, float(g.T))


def truth_metric(cfg: ExperimentConfig, spec: GridSpec):
    """``(g0, maps)`` of the configured metric."""
    t = cfg.truth.metric
    maps = entry_maps(t.maps, spec.dim)
    if t.kind == "file":
        g0, _, preset = io.read_metric(t.path, spec)
        if preset != t.maps:
            raise ConfigError(f"metric file uses entry maps {preset!r}, config says {t.maps!r}")
        return g0, maps
    if t.kind == "constant":
        return np.full(spec.space_shape, float(t.value)), maps
    xs = spec.coords()
    prod = np.ones(spec.space_shape)
    for x in xs:
        prod = prod * np.sin(np.pi * t.frequency * x) ** 2
    return t.value - t.amplitude * prod, maps


def truth_kernel(cfg: ExperimentConfig, spec: GridSpec) -> np.ndarray:
    t = cfg.truth.kernel
    if t.path:
        return io.read_kernel(t.path, spec)[0]
    return kernel_from_exp(spec, t.A, t.eps)


def boundary_of(section, spec: GridSpec) -> np.ndarray:
    return make_boundary(section.kind, spec, center=section.center, width=section.width,
                         background=section.background, mass=section.mass,
                         centers=section.centers, weights=section.weights)


def forward_problem(cfg: ExperimentConfig, spec: GridSpec) -> ForwardProblem:
    g0, maps = truth_metric(cfg, spec)
    G = maps.value(g0)
    if cfg.energy_kind == "running-cost":
        energy = LocalEnergy(QuadraticCost(cfg.energy.scale), spec)
    else:
        energy = InteractionEnergy(cfg.energy.scale * truth_kernel(cfg, spec), spec)
    return ForwardProblem(spec, boundary_of(cfg.boundary.rho0, spec),
                          boundary_of(cfg.boundary.rhoT, spec), energy, G)


def forward_config(cfg: ExperimentConfig) -> ForwardConfig:
    f = cfg.forward
    return ForwardConfig(iters=f.iters, tau_m=f.tau_m, tau_rho=f.tau_rho, sigma=f.sigma,
                         tol=f.tol, newton=f.newton, polish_tol=f.polish_tol,
                         newton_iters=f.newton_iters, log_every=f.log_every)


def solver_config(cfg: ExperimentConfig, gamma: float, alpha_scale: float | None = None) -> SolverConfig:
    s = cfg.inverse
    return SolverConfig(alpha=s.alpha, alpha_scale=s.alpha_scale if alpha_scale is None else alpha_scale,
                        alpha0=s.alpha0, beta=s.beta, beta_scale=s.beta_scale, gamma=gamma, p=s.p,
                        tau_rho=s.tau_rho, tau_v=s.tau_v, tau_theta=s.tau_theta, sigma=s.sigma,
                        iters=s.iters, objective_mode=s.objective_mode,
                        pin_boundary=s.pin_boundary, log_every=s.log_every, seed=cfg.seed,
                        max_backoff=s.max_backoff)


@dataclass
class InverseSetup:
    """Everything an inverse solve needs besides the observation."""

    problem: object
    theta0: np.ndarray
    truth: np.ndarray
    target: str


def inverse_setup(cfg: ExperimentConfig, spec: GridSpec, target: str | None = None) -> InverseSetup:
    target = target or cfg.problem
    g0_true, maps = truth_metric(cfg, spec)
    s = cfg.inverse
    if target == "metric":
        if cfg.energy_kind != "running-cost":
            raise ConfigError("metric recovery needs the running-cost energy")
        truth = g0_true
        known = {tuple(c): float(truth[tuple(c)]) for c in s.known}
        if s.known_line is not None:
            for c in np.ndindex(spec.space_shape):
                if c[0] == s.known_line:
                    known[c] = float(truth[c])
        theta0 = _theta_init(s.theta_init, known, spec.space_shape)
        mask = _known_mask(known, theta0, spec)
        problem = MetricInverse(spec, maps, QuadraticCost(cfg.energy.scale), mask)
    elif target == "kernel":
        if cfg.energy_kind != "interaction":
            raise ConfigError("kernel recovery needs the interaction energy")
        truth = cfg.energy.scale * truth_kernel(cfg, spec)
        known = {tuple(c): float(truth[tuple(c)]) for c in s.known}
        theta0 = _theta_init(s.theta_init, known, spec.quotient_shape)
        mask = known_kernel_mask(known, theta0)
        problem = KernelInverse(spec, maps.value(g0_true), mask)
    else:
        raise ConfigError(f"unknown target {target!r}")
    return InverseSetup(problem, theta0, truth, target)


def _theta_init(init, known: dict, shape) -> np.ndarray:
    if init == "known-mean":
        value = float(np.mean(list(known.values()))) if known else 1.0
    else:
        value = float(init)
    theta = np.full(shape, value)
    for c, v in known.items():
        theta[c] = v
    return theta


def sweep_points(cfg: ExperimentConfig) -> list[dict]:
    s = cfg.inverse
    if s.points:
        return [{"eps_star": float(p.eps_star),
                 "gamma": float(p.gamma if p.gamma is not None else s.gammas[0]),
                 "alpha_scale": p.alpha_scale} for p in s.points]
    return [{"eps_star": float(e), "gamma": float(g), "alpha_scale": None}
            for e in cfg.noise.eps_star for g in s.gammas]


def noise_seed(cfg: ExperimentConfig, eps_star: float) -> list[int]:
    """Seed material for one noise level; identical for equal ``(seed, eps_star)``."""
    return [int(cfg.noise.seed), int(round(eps_star * 1e6))]


def tag(point: dict) -> str:
    return f"eps{point['eps_star']:g}_gamma{point['gamma']:g}"


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.floating):
        return _clean(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


TRACE_COLUMNS = ["iter", "obj", "misfit_rho", "misfit_v", "reg", "r_hje", "r_cont", "r_curl",
                 "r_loop", "theta_err"]
DIAG_COLUMNS = ["iter", "obj", "r_cont", "r_hje", "r_curl", "r_loop"]
BREGMAN_COLUMNS = ["l", "inner_iters", "obj", "theta_err"]


def write_theta(path_dir: Path, theta: np.ndarray, spec: GridSpec, setup: InverseSetup,
                cfg: ExperimentConfig, name: str | None = None) -> None:
    if setup.target == "metric":
        io.write_metric(path_dir / (name or "g0.csv"), theta, spec, cfg.truth.metric.maps)
    else:
        io.write_kernel(path_dir / (name or "ktilde.csv"), theta, spec)
        if name is None:
            io.write_field(path_dir / "kernel_slice.csv", kernel_slice(theta, spec), spec, "cell")


def write_truth(out: Path, setup: InverseSetup, spec: GridSpec, cfg: ExperimentConfig) -> None:
    """Truth parameter next to the runs, for truth-vs-recovered plots."""
    name = "truth_g0.csv" if setup.target == "metric" else "truth_ktilde.csv"
    write_theta(out, setup.truth, spec, setup, cfg, name=name)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def observe(cfg: ExperimentConfig, spec: GridSpec, out: Path | None) -> tuple[Observation, dict]:
    """Load observations or generate them with the forward solver."""
    ob = cfg.observations
    if ob.rho is not None:
        rho, _, _ = io.read_field(ob.rho, spec, "cell-half")
        vel, _, _ = io.read_field(ob.vel, spec, "face")
        return Observation(rho, vel, spec), {"source": "files"}
    try:
        res = solve_forward(forward_problem(cfg, spec), forward_config(cfg))
    except Exception as exc:  # noqa: BLE001 - relabelled with the stage
        raise StageError("forward", exc) from exc
    final = res.diagnostics[-1]
    info = {"source": "forward", "converged": bool(res.converged), "kkt": res.kkt,
            "r_cont": final["r_cont"], "r_hje": final["r_hje"], "r_curl": final["r_curl"],
            "r_loop": final["r_loop"], "obj": final["obj"], **res.meta}
    if out is not None:
        io.write_field(out / "rho.csv", res.rho, spec, "cell-half")
        io.write_field(out / "vel.csv", res.vel, spec, "face")
        io.write_table(out / "diagnostics.csv", res.diagnostics, DIAG_COLUMNS, spec)
    return Observation(res.rho, res.vel, spec), info


def _inverse_job(args):
    cfg_dict, rho, vel, point, target = args
    from .config import config_from_dict

    cfg = config_from_dict(cfg_dict)
    spec = grid_of(cfg)
    obs = Observation(rho, vel, spec)
    return _run_point(cfg, spec, obs, point, target)


def _run_point(cfg: ExperimentConfig, spec: GridSpec, clean: Observation, point: dict, target: str):
    setup = inverse_setup(cfg, spec, target)
    obs = inject_noise(clean, point["eps_star"], noise_seed(cfg, point["eps_star"]))
    scfg = solver_config(cfg, point["gamma"], point.get("alpha_scale"))
    x0 = initial_primal(obs, setup.theta0, scfg.rho_min)
    res = run_pdhg(setup.problem, obs, scfg, x0, truth=setup.truth)
    return setup, res


def inverse_stage(cfg: ExperimentConfig, spec: GridSpec, obs: Observation, out: Path | None,
                  target: str | None = None) -> list[dict]:
    target = target or cfg.problem
    points = sweep_points(cfg)
    workers = max(1, min(int(os.environ.get("MFGINV_THREADS", "1") or 1), len(points)))
    try:
        if workers > 1:
            jobs = [(cfg.to_dict(), obs.rho_hat, obs.vel_hat, p, target) for p in points]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_inverse_job, jobs))
        else:
            results = [_run_point(cfg, spec, obs, p, target) for p in points]
    except Exception as exc:  # noqa: BLE001
        raise StageError("inverse", exc) from exc
    summary = []
    if out is not None and results:
        write_truth(out, results[0][0], spec, cfg)
    for point, (setup, res) in zip(points, results):
        last = res.trace[-1]
        entry = {"eps_star": point["eps_star"], "gamma": point["gamma"], "target": target,
                 "iterations": res.iterations, "theta_err": last["theta_err"],
                 "obj": last["obj"], "r_hje": last["r_hje"], "r_cont": last["r_cont"],
                 "r_curl": last["r_curl"], "r_loop": last["r_loop"], "dir": f"runs/{tag(point)}",
                 "step_backoffs": res.backoffs}
        summary.append(entry)
        if out is not None:
            d = out / "runs" / tag(point)
            write_theta(d, res.theta, spec, setup, cfg)
            io.write_table(d / "trace.csv", res.trace, TRACE_COLUMNS, spec)
    return summary


def bregman_stage(cfg: ExperimentConfig, spec: GridSpec, clean: Observation, out: Path | None,
                  target: str | None = None, outer: int | None = None) -> list[dict]:
    b = cfg.bregman
    target = target or cfg.problem
    outer = outer or b.outer
    levels = b.eps_star if b.eps_star is not None else cfg.noise.eps_star
    summary = []
    for eps in levels:
        setup = inverse_setup(cfg, spec, target)
        obs = inject_noise(clean, float(eps), noise_seed(cfg, float(eps)))
        scfg = solver_config(cfg, b.gamma)
        x0 = initial_primal(obs, setup.theta0, scfg.rho_min)
        try:
            res = run_bregman(setup.problem, obs, scfg, x0, outer, b.inner_iters,
                              truth=setup.truth, warm_start=b.warm_start)
        except Exception as exc:  # noqa: BLE001
            raise StageError("bregman", exc) from exc
        d = f"bregman/eps{float(eps):g}"
        if out is not None:
            write_truth(out, setup, spec, cfg)
            for l, theta in enumerate(res.state.thetas, start=1):
                write_theta(out / d, theta, spec, setup, cfg, name=f"theta_{l}.csv")
            io.write_table(out / d / "bregman_trace.csv", res.state.history, BREGMAN_COLUMNS, spec)
        summary.append({"eps_star": float(eps), "gamma": b.gamma, "target": target,
                        "outer": outer, "history": res.state.history, "dir": d})
    return summary


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    status: int
    out: Path | None
    summary: dict = field(default_factory=dict)
    plan: list[str] = field(default_factory=list)


def plan_of(cfg: ExperimentConfig, stages, target: str | None = None) -> list[str]:
    spec = grid_of(cfg)
    lines = [f"grid {spec.comment()[2:]}, problem {target or cfg.problem}"]
    if "forward" in stages:
        src = "load observations" if cfg.observations.rho else f"forward solve ({cfg.energy_kind})"
        lines.append(f"forward: {src}")
    if "inverse" in stages and cfg.inverse.enabled:
        pts = sweep_points(cfg)
        lines.append(f"inverse: {len(pts)} run(s) x {cfg.inverse.iters} iterations")
        lines += [f"  - {tag(p)}" for p in pts]
    if "bregman" in stages and (cfg.bregman.enabled or "inverse" not in stages):
        levels = cfg.bregman.eps_star if cfg.bregman.eps_star is not None else cfg.noise.eps_star
        lines.append(f"bregman: {len(levels)} run(s) x {cfg.bregman.outer} outer steps, "
                     f"gamma={cfg.bregman.gamma:g}")
    return lines


def run_pipeline(cfg: ExperimentConfig, stages=STAGES, out=None, dry_run: bool = False,
                 target: str | None = None, outer: int | None = None) -> PipelineResult:
    """Run the requested stages; ``dry_run`` only returns the plan."""
    plan = plan_of(cfg, stages, target)
    out_dir = Path(out or cfg.output)
    if dry_run:
        return PipelineResult(0, None, {}, plan)
    from .config import write_resolved

    spec = grid_of(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out_dir)
    summary: dict = {"grid": spec.comment()[2:], "problem": target or cfg.problem,
                     "rng": RNG_NAME, "noise_seed": cfg.noise.seed, "seed": cfg.seed}
    obs, info = observe(cfg, spec, out_dir)
    summary["forward"] = info
    if "inverse" in stages and cfg.inverse.enabled:
        summary["inverse"] = inverse_stage(cfg, spec, obs, out_dir, target)
    if "bregman" in stages and (cfg.bregman.enabled or "inverse" not in stages):
        summary["bregman"] = bregman_stage(cfg, spec, obs, out_dir, target, outer)
    summary = _clean(summary)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return PipelineResult(0, out_dir, summary, plan)
