"""Metric and kernel models, auxiliary MFG fields and the discrete residuals.

The metric tensor is stored as an array of shape ``(dim, dim, *S)`` so that it
broadcasts against face fields ``(..., dim, *S)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .grid import GridSpec, divergence, grad, space_diff, time_diff_half

RHO_MIN = 1e-8


class NotSPDError(ValueError):
    """Raised when an evaluated ground metric is not symmetric positive definite."""


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineEntryMaps:
    """Entry maps ``f_ab(g) = slope[a, b] * g + offset[a, b]``.

    Every preset the solvers ship with is affine, which keeps ``f'_ab``
    constant. Both matrices must be symmetric.
    """

    slope: np.ndarray
    offset: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        for mat in (self.slope, self.offset):
            mat = np.asarray(mat, dtype=float)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ValueError("entry-map coefficients must be square matrices")
            if not np.array_equal(mat, mat.T):
                raise ValueError("entry maps must satisfy f_ab = f_ba")
        object.__setattr__(self, "slope", np.asarray(self.slope, dtype=float))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))

    @property
    def dim(self) -> int:
        return self.slope.shape[0]

    def value(self, g0: np.ndarray) -> np.ndarray:
        g0 = np.asarray(g0, dtype=float)
        pad = (slice(None), slice(None)) + (None,) * g0.ndim
        return self.slope[pad] * g0 + self.offset[pad]

    def deriv(self, g0: np.ndarray) -> np.ndarray:
        g0 = np.asarray(g0, dtype=float)
        pad = (slice(None), slice(None)) + (None,) * g0.ndim
        return np.broadcast_to(self.slope[pad], (self.dim, self.dim) + g0.shape)


ENTRY_MAP_PRESETS = ("linear-test51", "identity", "scalar")


def entry_maps(preset: str, dim: int) -> AffineEntryMaps:
    """Named entry-map families.

    ``linear-test51`` is the 2-D family ``[[g+4, g+2], [g+2, 2g+1]]``;
    ``scalar`` is ``G = g * I`` (``G = g`` in 1-D); ``identity`` ignores ``g``.
    """
    eye = np.eye(dim)
    if preset == "scalar":
        return AffineEntryMaps(eye, np.zeros((dim, dim)), preset)
    if preset == "identity":
        return AffineEntryMaps(np.zeros((dim, dim)), eye, preset)
    if preset == "linear-test51":
        if dim != 2:
            raise ValueError("linear-test51 entry maps are two-dimensional")
        return AffineEntryMaps(
            np.array([[1.0, 1.0], [1.0, 2.0]]), np.array([[4.0, 2.0], [2.0, 1.0]]), preset
        )
    raise ValueError(f"unknown entry-map preset {preset!r}; expected one of {ENTRY_MAP_PRESETS}")


@dataclass
class GroundMetricModel:
    """Per-cell metric kernel ``g0`` plus the entry maps producing ``G_M``."""

    g0: np.ndarray
    maps: AffineEntryMaps

    @property
    def dim(self) -> int:
        return self.maps.dim

    def tensor(self, g0: np.ndarray | None = None) -> np.ndarray:
        """``G_M`` at every cell, shape ``(dim, dim, *S)``."""
        return self.maps.value(self.g0 if g0 is None else g0)

    def tensor_deriv(self, g0: np.ndarray | None = None) -> np.ndarray:
        return self.maps.deriv(self.g0 if g0 is None else g0)


def metric_at(model: GroundMetricModel, cell) -> np.ndarray:
    """The ``dim x dim`` metric matrix at one cell."""
    if np.isscalar(cell):
        cell = (cell,)
    return model.maps.value(np.asarray(model.g0[tuple(cell)]))


def check_spd(G: np.ndarray, what: str = "ground metric") -> None:
    """Raise :class:`NotSPDError` if ``G`` fails to be SPD at some cell."""
    dim = G.shape[0]
    if dim == 1:
        bad = ~(G[0, 0] > 0)
    else:
        det = G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0]
        bad = ~((G[0, 0] > 0) & (det > 0))
    if np.any(bad):
        idx = tuple(int(c) for c in np.argwhere(bad)[0])
        raise NotSPDError(f"{what} is not positive definite at cell {idx}")


def apply_metric(G: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``G_i v_i`` for a face field ``v`` of shape ``(..., dim, *S)``."""
    dim = G.shape[0]
    if dim == 1:
        return G[0] * v
    return np.stack([G[0, 0] * v[..., 0, :, :] + G[0, 1] * v[..., 1, :, :],
                     G[1, 0] * v[..., 0, :, :] + G[1, 1] * v[..., 1, :, :]], axis=-3)


def quad_form(G: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``v_i^T G_i v_i``, contracting the component axis."""
    return np.sum(v * apply_metric(G, v), axis=-G.ndim + 1)


def outer_faces(a: np.ndarray, b: np.ndarray, dim: int) -> np.ndarray:
    """``sum over leading axes of a[..., p, i] * b[..., q, i]``, shape ``(dim, dim, *S)``."""
    lead = tuple(range(a.ndim - dim - 1))
    ca = [np.take(a, p, axis=-dim - 1) for p in range(dim)]
    cb = [np.take(b, q, axis=-dim - 1) for q in range(dim)]
    return np.stack([np.stack([np.sum(ca[p] * cb[q], axis=lead) for q in range(dim)])
                     for p in range(dim)])


# ---------------------------------------------------------------------------
# interaction kernel
# ---------------------------------------------------------------------------


def fold_index(m: int) -> np.ndarray:
    """Torus distance ``min(s, m - s)`` for every shift ``s`` in ``0..m-1``."""
    s = np.arange(m)
    return np.minimum(s, m - s)


def kernel_from_exp(spec: GridSpec, A=None, eps: float = 0.1) -> np.ndarray:
    """Sample ``exp(-x^T A x / eps)`` at quotient-grid coordinates ``q * dx``."""
    dim = spec.dim
    A = np.eye(dim) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape != (dim, dim):
        raise ValueError(f"adaptation matrix must be {dim}x{dim}")
    q = np.arange(spec.m // 2 + 1) * spec.dx
    xs = np.meshgrid(*([q] * dim), indexing="ij")
    quad = sum(A[a, b] * xs[a] * xs[b] for a in range(dim) for b in range(dim))
    return np.exp(-quad / eps)


@dataclass
class InteractionKernel:
    """Single-argument kernel on the quotient grid ``{0..m//2}^dim``."""

    ktilde: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        self.ktilde = np.asarray(self.ktilde, dtype=float)
        if self.ktilde.shape != self.spec.quotient_shape:
            raise ValueError(
                f"kernel must live on the quotient grid {self.spec.quotient_shape}, "
                f"got {self.ktilde.shape}"
            )


class KernelGeometry:
    """Index tables tying the quotient grid to shifts and cell pairs of one grid.

    Built once per grid and read-only afterwards.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        m, dim = spec.m, spec.dim
        nq = m // 2 + 1
        f = fold_index(m)
        # quotient flat index of every shift s in V
        if dim == 1:
            self.shift_q = f.copy()
        else:
            self.shift_q = (f[:, None] * nq + f[None, :])
        self.nquot = nq**dim
        # quotient flat index of every ordered cell pair (i, i'), flattened cells
        cells = np.indices(spec.space_shape).reshape(dim, -1)
        diff = (cells[:, None, :] - cells[:, :, None]) % m  # [axis, i, i'] = i' - i
        qa = f[diff]
        if dim == 1:
            self.pair_q = qa[0]
        else:
            self.pair_q = qa[0] * nq + qa[1]
        self.multiplicity = np.bincount(self.pair_q.ravel(), minlength=self.nquot).reshape(
            spec.quotient_shape
        )

    def shift_kernel(self, ktilde: np.ndarray) -> np.ndarray:
        """``K(0, s)`` for every shift ``s``, shape ``S``."""
        return np.asarray(ktilde).ravel()[self.shift_q]

    def pair_matrix(self, ktilde: np.ndarray) -> np.ndarray:
        """Pairwise kernel ``K(i, i')`` over flattened cells, shape ``(m^dim, m^dim)``."""
        return np.asarray(ktilde).ravel()[self.pair_q]


_GEOMETRY: dict[GridSpec, KernelGeometry] = {}


def kernel_geometry(spec: GridSpec) -> KernelGeometry:
    geo = _GEOMETRY.get(spec)
    if geo is None:
        geo = _GEOMETRY[spec] = KernelGeometry(spec)
    return geo


def expand_kernel(k: InteractionKernel) -> np.ndarray:
    """Pairwise kernel on ``V x V``, shape ``(*S, *S)``."""
    spec = k.spec
    K = kernel_geometry(spec).pair_matrix(k.ktilde)
    return K.reshape(spec.space_shape * 2)


DIRECT_MAX_M = 32


class Convolver:
    """Torus convolution ``(K * rho)_i = sum_i' K(i, i') rho_i' dx^dim``.

    Works on arrays whose trailing ``dim`` axes are spatial. ``method`` picks
    the direct double sum, the FFT path, or ``auto`` (direct for
    ``m <= 32``).
    """

    def __init__(self, ktilde: np.ndarray, spec: GridSpec, method: str = "auto"):
        if method not in ("auto", "direct", "fft"):
            raise ValueError(f"unknown convolution method {method!r}")
        self.spec = spec
        self.geo = kernel_geometry(spec)
        self.ktilde = np.asarray(ktilde, dtype=float)
        if method == "auto":
            method = "direct" if spec.m <= DIRECT_MAX_M else "fft"
        self.method = method

    @cached_property
    def matrix(self) -> np.ndarray:
        return self.geo.pair_matrix(self.ktilde)

    @cached_property
    def spectrum(self) -> np.ndarray:
        axes = tuple(range(-self.spec.dim, 0))
        return sfft.rfftn(self.geo.shift_kernel(self.ktilde), axes=axes).real

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        return self.direct(rho) if self.method == "direct" else self.fft(rho)

    def direct(self, rho: np.ndarray) -> np.ndarray:
        spec = self.spec
        lead = rho.shape[: rho.ndim - spec.dim]
        flat = rho.reshape(lead + (-1,))
        out = flat @ self.matrix.T
        return out.reshape(rho.shape) * spec.cell_volume

    def fft(self, rho: np.ndarray) -> np.ndarray:
        spec = self.spec
        axes = tuple(range(-spec.dim, 0))
        # shift kernel is even, so its transform is real
        out = sfft.irfftn(sfft.rfftn(rho, axes=axes) * self.spectrum, s=spec.space_shape, axes=axes)
        return out * spec.cell_volume


def kernel_pair_gradient(a: np.ndarray, b: np.ndarray, spec: GridSpec, method: str = "auto") -> np.ndarray:
    """``d/dK~_q`` of ``sum a_i (K * b)_i`` over all leading slices.

    Equals ``dx^dim * sum over pairs (i, i') at torus distance q of a_i b_i'``.
    """
    geo = kernel_geometry(spec)
    if method == "auto":
        method = "direct" if spec.m <= DIRECT_MAX_M else "fft"
    dim = spec.dim
    if method == "direct":
        A = a.reshape(-1, spec.m**dim)
        B = b.reshape(-1, spec.m**dim)
        M = A.T @ B
        g = np.bincount(geo.pair_q.ravel(), weights=M.ravel(), minlength=geo.nquot)
    else:
        axes = tuple(range(-dim, 0))
        fa = sfft.rfftn(a, axes=axes)
        fb = sfft.rfftn(b, axes=axes)
        lead = tuple(range(a.ndim - dim))
        corr = sfft.irfftn(np.sum(np.conj(fa) * fb, axis=lead), s=spec.space_shape, axes=tuple(range(dim)))
        g = np.bincount(geo.shift_q.ravel(), weights=corr.ravel(), minlength=geo.nquot)
    return g.reshape(spec.quotient_shape) * spec.cell_volume


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticCost:
    """Running cost ``F(rho) = scale * rho^2 / 2``."""

    scale: float = 1.0

    def F(self, rho):
        return 0.5 * self.scale * rho**2

    def dF(self, rho):
        return self.scale * rho

    def d2F(self, rho):
        return np.full_like(np.asarray(rho, dtype=float), self.scale)


class LocalEnergy:
    """Per-slice energy ``sum_i F(rho_i)`` (the discrete running cost over ``dx^dim``)."""

    kind = "running-cost"

    def __init__(self, cost: QuadraticCost, spec: GridSpec):
        self.cost = cost
        self.spec = spec

    def value(self, rho: np.ndarray) -> float:
        return float(np.sum(self.cost.F(rho)))

    def potential(self, rho: np.ndarray) -> np.ndarray:
        return self.cost.dF(rho)

    def hess_apply(self, rho: np.ndarray, d: np.ndarray) -> np.ndarray:
        return self.cost.d2F(rho) * d


class InteractionEnergy:
    """Per-slice energy ``1/2 sum_i rho_i (K * rho)_i``."""

    kind = "interaction"

    def __init__(self, ktilde: np.ndarray, spec: GridSpec, method: str = "auto"):
        self.spec = spec
        self.conv = Convolver(ktilde, spec, method)

    @property
    def ktilde(self) -> np.ndarray:
        return self.conv.ktilde

    def value(self, rho: np.ndarray) -> float:
        return 0.5 * float(np.sum(rho * self.conv(rho)))

    def potential(self, rho: np.ndarray) -> np.ndarray:
        return self.conv(rho)

    def hess_apply(self, rho: np.ndarray, d: np.ndarray) -> np.ndarray:
        return self.conv(d)


# ---------------------------------------------------------------------------
# staggered state and residuals
# ---------------------------------------------------------------------------


@dataclass
class StaggeredState:
    """Density on time half-steps and velocity on faces.

    Flux ``m = rho v`` pairs face ``(i + e_a/2, k)`` with ``rho[k]``; the
    derived fields are recomputed on every access.
    """

    rho: np.ndarray
    vel: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        self.spec.check(self.rho, "cell-half", "rho")
        self.spec.check(self.vel, "face", "vel")

    def flux(self) -> np.ndarray:
        return flux_of(self.rho, self.vel, self.spec.dim)

    def w(self, G: np.ndarray) -> np.ndarray:
        return apply_metric(G, self.vel)

    def copy(self) -> "StaggeredState":
        return StaggeredState(self.rho.copy(), self.vel.copy(), self.spec)


def flux_of(rho: np.ndarray, vel: np.ndarray, dim: int) -> np.ndarray:
    idx = (slice(0, -1), None) + (slice(None),) * dim
    return rho[idx] * vel


def xi_field(rho: np.ndarray, vel: np.ndarray, G: np.ndarray, potential) -> np.ndarray:
    """Discrete Hamiltonian density at half-steps ``k = 1..n-1``.

    ``xi[k-1] = 1/2 v[k]^T G v[k] - potential(rho[k])`` using the
    positive-direction faces of each cell. ``potential`` maps density slices
    to ``F'(rho)`` or ``K * rho``.
    """
    v = vel[1:]
    return 0.5 * quad_form(G, v) - potential(rho[1:-1])


def xi_metric(state: StaggeredState, model: GroundMetricModel, cost: QuadraticCost) -> np.ndarray:
    return xi_field(state.rho, state.vel, model.tensor(), cost.dF)


def xi_kernel(state: StaggeredState, G: np.ndarray, conv: Convolver) -> np.ndarray:
    return xi_field(state.rho, state.vel, G, conv)


@dataclass
class Residuals:
    """The four discrete MFG constraint residuals."""

    hje: np.ndarray
    cont: np.ndarray
    curl: np.ndarray | None
    loop: np.ndarray

    def max_abs(self) -> dict[str, float]:
        out = {}
        for name in ("cont", "hje", "curl", "loop"):
            r = getattr(self, name)
            out[name] = 0.0 if r is None or r.size == 0 else float(np.max(np.abs(r)))
        return out

    def norms(self) -> dict[str, float]:
        out = {}
        for name in ("cont", "hje", "curl", "loop"):
            r = getattr(self, name)
            out[name] = 0.0 if r is None else float(np.linalg.norm(r))
        return out


def curl_residual(w: np.ndarray, dx: float) -> np.ndarray:
    """``(w1[i+e2] - w1[i]) / dx - (w2[i+e1] - w2[i]) / dx`` for 2-D face fields."""
    return (space_diff(w[..., 0, :, :], 1, dx, 2) - space_diff(w[..., 1, :, :], 0, dx, 2))


def loop_residual(w: np.ndarray, dim: int) -> np.ndarray:
    """Line sums of ``w`` along each axis, shape ``(n, dim, m^(dim-1))``.

    1-D: ``(n, 1)``. 2-D: ``[k, 0, i2] = sum_i1 w[k, 0, i1, i2]`` and
    ``[k, 1, i1] = sum_i2 w[k, 1, i1, i2]``.
    """
    if dim == 1:
        return np.sum(w[:, 0], axis=1)[:, None]
    return np.stack([np.sum(w[:, 0], axis=1), np.sum(w[:, 1], axis=2)], axis=1)


def residuals_from(rho, vel, G, potential, spec: GridSpec) -> Residuals:
    dim, dx, dt = spec.dim, spec.dx, spec.dt
    w = apply_metric(G, vel)
    xi = xi_field(rho, vel, G, potential)
    hje = grad(xi, dx, dim) + (w[1:] - w[:-1]) / dt
    cont = time_diff_half(rho, dt) + divergence(flux_of(rho, vel, dim), dx, dim)
    curl = curl_residual(w, dx) if dim == 2 else None
    return Residuals(hje, cont, curl, loop_residual(w, dim))


def residuals(state: StaggeredState, model, energy=None) -> Residuals:
    """Residuals of the discrete MFG system for ``state``.

    ``model`` is a :class:`GroundMetricModel` or a metric tensor array;
    ``energy`` provides ``potential`` (``LocalEnergy``/``InteractionEnergy``)
    or defaults to the quadratic running cost.
    """
    G = model.tensor() if isinstance(model, GroundMetricModel) else np.asarray(model)
    if energy is None:
        energy = LocalEnergy(QuadraticCost(), state.spec)
    return residuals_from(state.rho, state.vel, G, energy.potential, state.spec)
