"""Experiment configuration: strict JSON documents and named presets.

A document is an object whose top-level keys are the sections of
:class:`ExperimentConfig`. ``"preset": "<name>"`` starts from one of
:data:`PRESETS` and the remaining keys override it section by section.
Unknown keys anywhere are an error.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .forward import BOUNDARY_PRESETS


class ConfigError(ValueError):
    """Invalid configuration document."""


def _gamma_grid(lo: int, hi: int) -> list[float]:
    return [float(f"1e{e}") for e in range(lo, hi + 1)]


@dataclass
class GridSection:
    m: int
    n: int
    dim: int = 1
    T: float = 1.0

    def __post_init__(self):
        for k in ("m", "n", "dim"):
            if not isinstance(getattr(self, k), int) or isinstance(getattr(self, k), bool):
                raise ConfigError(f"grid.{k} must be an integer")
        if self.dim not in (1, 2):
            raise ConfigError("grid.dim must be 1 or 2")
        if self.m < 2 or self.n < 2:
            raise ConfigError("grid.m and grid.n must be at least 2")
        if not self.T > 0:
            raise ConfigError("grid.T must be positive")


@dataclass
class BoundarySection:
    kind: str = "gaussian-bump"
    center: float | list = 0.25
    width: float = 0.1
    background: float = 0.1
    mass: float = 1.0
    centers: list | None = None
    weights: list | None = None

    def __post_init__(self):
        if self.kind not in BOUNDARY_PRESETS:
            raise ConfigError(f"boundary kind must be one of {BOUNDARY_PRESETS}")
        if self.kind != "uniform" and not self.width > 0:
            raise ConfigError("boundary width must be positive")
        if not self.mass > 0:
            raise ConfigError("boundary mass must be positive")


@dataclass
class BoundaryPair:
    rho0: BoundarySection = field(default_factory=lambda: BoundarySection(center=0.25))
    rhoT: BoundarySection = field(default_factory=lambda: BoundarySection(center=0.75))

    def __post_init__(self):
        if abs(self.rho0.mass - self.rhoT.mass) > 1e-12:
            raise ConfigError("rho0 and rhoT must carry the same mass")


METRIC_TRUTHS = ("sin2", "constant", "file")


@dataclass
class MetricTruth:
    """``sin2``: ``value - amplitude * prod_a sin(pi f x_a)^2``."""

    kind: str = "sin2"
    value: float = 1.0
    amplitude: float = 0.6
    frequency: int = 1
    maps: str = "scalar"
    path: str | None = None

    def __post_init__(self):
        if self.kind not in METRIC_TRUTHS:
            raise ConfigError(f"truth.metric.kind must be one of {METRIC_TRUTHS}")
        if self.kind == "file" and not self.path:
            raise ConfigError("truth.metric.path is required for kind 'file'")
        if self.maps not in ("scalar", "identity", "linear-test51"):
            raise ConfigError("truth.metric.maps must be scalar, identity or linear-test51")


@dataclass
class KernelTruth:
    """``exp(-x^T A x / eps)`` sampled on the quotient grid, or a kernel file."""

    A: list | None = None
    eps: float = 0.1
    path: str | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError("truth.kernel.eps must be positive")


@dataclass
class TruthSection:
    metric: MetricTruth = field(default_factory=MetricTruth)
    kernel: KernelTruth = field(default_factory=KernelTruth)


@dataclass
class EnergySection:
    """``auto`` picks the running cost for metric problems and the kernel otherwise."""

    kind: str = "auto"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("auto", "running-cost", "interaction"):
            raise ConfigError("energy.kind must be auto, running-cost or interaction")


@dataclass
class ForwardSection:
    iters: int = 2000
    tau_m: float | None = None
    tau_rho: float | None = None
    sigma: float | None = None
    tol: float = 1e-6
    newton: bool = True
    polish_tol: float = 1e-11
    newton_iters: int = 60
    log_every: int = 100


@dataclass
class PointSection:
    """One explicit sweep point; unset entries fall back to the inverse section."""

    eps_star: float = 0.0
    gamma: float | None = None
    alpha_scale: float | None = None


@dataclass
class InverseSection:
    enabled: bool = True
    gammas: list = field(default_factory=lambda: [1e-5])
    points: list | None = None
    alpha: float | None = None
    alpha_scale: float = 1.0
    alpha0: float = 0.0
    beta: float | None = None
    beta_scale: float = 1.0
    p: int = 2
    tau_rho: float = 2e-3
    tau_v: float = 2e-3
    tau_theta: float = 2e-3
    sigma: float = 1e-3
    iters: int = 60000
    objective_mode: str = "L2"
    pin_boundary: bool = False
    log_every: int = 500
    known: list = field(default_factory=lambda: [[0]])
    known_line: int | None = None
    theta_init: float | str = "known-mean"
    # halvings of all step sizes allowed when an iterate turns non-finite
    max_backoff: int = 4

    def __post_init__(self):
        if not isinstance(self.gammas, list) or not self.gammas:
            raise ConfigError("inverse.gammas must be a non-empty list")
        if any(g < 0 for g in self.gammas):
            raise ConfigError("inverse.gammas must be nonnegative")
        if self.points is not None:
            self.points = [p if isinstance(p, PointSection) else _build(PointSection, p, "inverse.points")
                           for p in self.points]
        if self.objective_mode not in ("L2", "KL"):
            raise ConfigError("inverse.objective_mode must be L2 or KL")
        if self.p not in (1, 2):
            raise ConfigError("inverse.p must be 1 or 2")
        for k in ("tau_rho", "tau_v", "tau_theta", "sigma"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"inverse.{k} must be positive")
        if not isinstance(self.max_backoff, int) or self.max_backoff < 0:
            raise ConfigError("inverse.max_backoff must be a nonnegative integer")
        if isinstance(self.theta_init, str) and self.theta_init != "known-mean":
            raise ConfigError("inverse.theta_init must be a number or 'known-mean'")


@dataclass
class NoiseSection:
    eps_star: list = field(default_factory=lambda: [0.0])
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.eps_star, list) or not self.eps_star:
            raise ConfigError("noise.eps_star must be a non-empty list")
        if any(e < 0 for e in self.eps_star):
            raise ConfigError("noise.eps_star entries must be nonnegative")


@dataclass
class BregmanSection:
    enabled: bool = False
    outer: int = 7
    gamma: float = 1e-2
    eps_star: list | None = None
    inner_iters: int | None = None
    warm_start: bool = True

    def __post_init__(self):
        if self.outer < 1:
            raise ConfigError("bregman.outer must be at least 1")


@dataclass
class ObservationSection:
    """Paths of observation files to load instead of running the forward solver."""

    rho: str | None = None
    vel: str | None = None

    def __post_init__(self):
        if (self.rho is None) != (self.vel is None):
            raise ConfigError("observations need both rho and vel paths")


@dataclass
class ExperimentConfig:
    grid: GridSection
    problem: str
    preset: str | None = None
    energy: EnergySection = field(default_factory=EnergySection)
    truth: TruthSection = field(default_factory=TruthSection)
    boundary: BoundaryPair = field(default_factory=BoundaryPair)
    forward: ForwardSection = field(default_factory=ForwardSection)
    inverse: InverseSection = field(default_factory=InverseSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    bregman: BregmanSection = field(default_factory=BregmanSection)
    observations: ObservationSection = field(default_factory=ObservationSection)
    output: str = "out"
    seed: int = 0

    def __post_init__(self):
        if self.problem not in ("metric", "kernel"):
            raise ConfigError("problem must be 'metric' or 'kernel'")
        if self.truth.metric.kind == "sin2" and self.truth.metric.value - self.truth.metric.amplitude <= 0:
            raise ConfigError("sin2 truth metric must stay positive (value > amplitude)")

    @property
    def energy_kind(self) -> str:
        if self.energy.kind != "auto":
            return self.energy.kind
        return "running-cost" if self.problem == "metric" else "interaction"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_NESTED: dict[type, dict[str, type]] = {
    ExperimentConfig: {"grid": GridSection, "energy": EnergySection, "truth": TruthSection,
                       "boundary": BoundaryPair, "forward": ForwardSection,
                       "inverse": InverseSection, "noise": NoiseSection,
                       "bregman": BregmanSection, "observations": ObservationSection},
    TruthSection: {"metric": MetricTruth, "kernel": KernelTruth},
    BoundaryPair: {"rho0": BoundarySection, "rhoT": BoundarySection},
}


def required_keys(cls=ExperimentConfig, prefix: str = "") -> list[str]:
    from dataclasses import MISSING

    out = []
    for f in fields(cls):
        if f.default is MISSING and f.default_factory is MISSING:
            out.append(prefix + f.name)
            sub = _NESTED.get(cls, {}).get(f.name)
            if sub is not None:
                out.extend(required_keys(sub, prefix + f.name + "."))
    return out


def _build(cls, data, where: str):
    from dataclasses import MISSING

    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    missing = [n for n, f in known.items()
               if f.default is MISSING and f.default_factory is MISSING and n not in data]
    if missing:
        lead = f"{where}." if where else ""
        raise ConfigError("missing required key(s): " + ", ".join(lead + m for m in missing))
    kwargs = {}
    for k, v in data.items():
        sub = _NESTED.get(cls, {}).get(k)
        kwargs[k] = _build(sub, v, f"{where}.{k}" if where else k) if sub is not None else v
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_METRIC_1D = {
    "grid": {"dim": 1, "m": 50, "n": 30, "T": 1.0},
    "problem": "metric",
    "truth": {"metric": {"kind": "sin2", "value": 1.0, "amplitude": 0.6, "frequency": 1,
                         "maps": "scalar"}},
    "inverse": {"gammas": _gamma_grid(-8, -3), "p": 2, "tau_rho": 2e-3, "tau_v": 2e-3,
                "tau_theta": 2e-3, "sigma": 1e-3, "iters": 60000, "known": [[0]]},
}

_KERNEL_1D = {
    "grid": {"dim": 1, "m": 50, "n": 30, "T": 1.0},
    "problem": "kernel",
    "truth": {"kernel": {"A": None, "eps": 0.1},
              "metric": {"kind": "constant", "value": 1.0, "maps": "scalar"}},
    "inverse": {"gammas": _gamma_grid(-6, -3), "p": 2, "tau_rho": 1e-3, "tau_v": 1e-3,
                "tau_theta": 1e-3, "sigma": 1e-3, "iters": 3000000, "known": [[0]],
                "theta_init": "known-mean"},
}

_METRIC_2D = {
    "grid": {"dim": 2, "m": 50, "n": 30, "T": 1.0},
    "problem": "metric",
    "truth": {"metric": {"kind": "sin2", "value": 1.0, "amplitude": 0.6, "frequency": 1,
                         "maps": "linear-test51"}},
    "boundary": {"rho0": {"center": [0.25, 0.25]}, "rhoT": {"center": [0.75, 0.6]}},
    "inverse": {"gammas": [1e-2], "alpha_scale": 1e3, "p": 2, "tau_rho": 1e-6, "tau_v": 1e-6,
                "tau_theta": 1e-4, "sigma": 1e-6, "iters": 200000, "known": [],
                "known_line": 0},
}

PRESETS: dict[str, dict] = {
    "test-5.1": _METRIC_2D,
    "test-5.2": {
        "grid": {"dim": 2, "m": 24, "n": 30, "T": 1.0},
        "problem": "kernel",
        "truth": {"kernel": {"A": [[3.0, 1.0], [1.0, 3.0]], "eps": 0.5},
                  "metric": {"kind": "constant", "value": 1.0, "maps": "identity"}},
        "boundary": {"rho0": {"center": [0.25, 0.25]}, "rhoT": {"center": [0.75, 0.6]}},
        "inverse": {"gammas": [1e-3], "alpha_scale": 100.0, "p": 2, "tau_rho": 1e-5,
                    "tau_v": 1e-5, "tau_theta": 1e-3, "sigma": 1e-5, "iters": 150000,
                    "known": [[0, 0]]},
    },
    "test-5.3": _merge(_METRIC_1D, {"noise": {"eps_star": [0.1, 0.4, 1.0]}}),
    "test-5.4": _merge(_KERNEL_1D, {"noise": {"eps_star": [0.1, 0.4, 1.0]}}),
    "test-5.5": _merge(_METRIC_1D, {
        "noise": {"eps_star": [1.0]},
        "inverse": {"gammas": [1e-4]},
        "bregman": {"enabled": True, "outer": 7, "gamma": 1e-2},
    }),
    "test-B.1": _merge(_METRIC_1D, {"noise": {"eps_star": [0.0]}}),
    "test-B.2": _merge(_METRIC_1D, {
        "inverse": {"objective_mode": "KL", "alpha": 0.01, "alpha0": 0.01, "beta": 1.0,
                    "gammas": _gamma_grid(-8, -5), "iters": 3000000},
    }),
    "test-B.2-kernel": _merge(_KERNEL_1D, {
        "inverse": {"objective_mode": "KL", "alpha": 10.0, "alpha0": 10.0, "beta": 1.0,
                    "gammas": _gamma_grid(-5, -2), "iters": 3000000},
    }),
    "test-B.3": _merge(_METRIC_2D, {
        "inverse": {"points": [
            {"eps_star": 0.1, "alpha_scale": 10.0, "gamma": 0.01},
            {"eps_star": 0.4, "alpha_scale": 1.0, "gamma": 0.01},
            {"eps_star": 1.0, "alpha_scale": 100.0, "gamma": 1.0},
        ]},
    }),
    "test-B.4": _merge(_KERNEL_1D, {
        "noise": {"eps_star": [1.0]},
        "inverse": {"gammas": [1e-3]},
        "bregman": {"enabled": True, "outer": 11, "gamma": 1e-1},
    }),
}


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return copy.deepcopy(PRESETS[name])


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    name = data.get("preset")
    if name is not None:
        data = _merge(preset_dict(name), data)
    return _build(ExperimentConfig, data, "")


def preset_config(name: str) -> ExperimentConfig:
    return config_from_dict({"preset": name})


def load_config(path) -> ExperimentConfig:
    """Parse and validate a JSON config file.

    A path that does not exist but names a preset loads that preset.
    """
    p = Path(path)
    if not p.exists():
        if str(path) in PRESETS:
            return preset_config(str(path))
        raise ConfigError(f"config file {path} not found")
    text = p.read_text()
    if not text.strip():
        raise ConfigError(f"{path}: empty config; required keys: {', '.join(required_keys())}"
                          " (or a 'preset')")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(data)


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    """Write the fully resolved config next to the outputs."""
    out = Path(out_dir) / "config.resolved.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(cfg.to_json())
    return out
