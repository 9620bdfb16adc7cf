"""Periodic grid geometry and elementary difference operators.

Array layouts (0-based, spatial shape ``S = (m,) * dim``):

``cell-half``
    ``(n + 1, *S)``; slot ``k`` holds the density at time ``(k + 1/2) dt``,
    so slot 0 is the initial slice and slot ``n`` the terminal slice.
``cell-int``
    ``(n, *S)``; slot ``k`` holds a cell value at integer time step ``k + 1``.
``face``
    ``(n, dim, *S)``; entry ``[k, a, i]`` lives on the face ``i + e_a / 2``
    at time step ``k + 1``.
``cell``
    ``S``; a time-independent cell value (metric kernel, for instance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAYOUTS = ("cell-half", "cell-int", "face", "cell")


@dataclass(frozen=True)
class GridSpec:
    """Uniform ``m^dim x n`` discretization of the torus times ``[0, T]``."""

    dim: int
    m: int
    n: int
    T: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.m < 2 or self.n < 2:
            raise ValueError(f"need m >= 2 and n >= 2, got m={self.m}, n={self.n}")
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")

    @property
    def dx(self) -> float:
        return 1.0 / self.m

    @property
    def dt(self) -> float:
        return self.T / self.n

    @property
    def space_shape(self) -> tuple[int, ...]:
        return (self.m,) * self.dim

    @property
    def cell_volume(self) -> float:
        """``dx ** dim``."""
        return self.dx**self.dim

    @property
    def quotient_shape(self) -> tuple[int, ...]:
        """Shape of the quotient grid ``{0..m//2}^dim`` of torus distances."""
        return (self.m // 2 + 1,) * self.dim

    def shape(self, layout: str) -> tuple[int, ...]:
        if layout == "cell-half":
            return (self.n + 1, *self.space_shape)
        if layout == "cell-int":
            return (self.n, *self.space_shape)
        if layout == "face":
            return (self.n, self.dim, *self.space_shape)
        if layout == "cell":
            return self.space_shape
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")

    def zeros(self, layout: str) -> np.ndarray:
        return np.zeros(self.shape(layout))

    def coords(self) -> tuple[np.ndarray, ...]:
        """Cell-centre coordinates ``i * dx`` as an ``ij``-indexed meshgrid."""
        x = np.arange(self.m) * self.dx
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    def comment(self) -> str:
        return f"# m={self.m},n={self.n},T={self.T!r},dim={self.dim}"

    def check(self, arr: np.ndarray, layout: str, name: str = "field") -> np.ndarray:
        want = self.shape(layout)
        if arr.shape != want:
            raise ValueError(f"{name}: expected {layout} shape {want}, got {arr.shape}")
        return arr


def wrap(i, spec: GridSpec) -> tuple[int, ...]:
    """Reduce a cell index tuple onto the torus."""
    if np.isscalar(i):
        i = (i,)
    return tuple(int(c) % spec.m for c in i)


def space_diff(f: np.ndarray, axis: int, dx: float, dim: int) -> np.ndarray:
    """Forward periodic difference ``(f[i + e_axis] - f[i]) / dx``.

    The spatial axes of ``f`` are its trailing ``dim`` axes; any leading
    (time) axes are carried through untouched.
    """
    ax = axis - dim
    return (np.roll(f, -1, axis=ax) - f) / dx


def grad(f: np.ndarray, dx: float, dim: int) -> np.ndarray:
    """Stack of forward differences along every spatial axis.

    Shape ``(..., *S)`` maps to ``(..., dim, *S)``: the face layout.
    """
    return np.stack([space_diff(f, a, dx, dim) for a in range(dim)], axis=-dim - 1)


def divergence(flux: np.ndarray, dx: float, dim: int) -> np.ndarray:
    """Backward-difference divergence ``sum_a (flux[a, i] - flux[a, i - e_a]) / dx``.

    ``flux`` has shape ``(..., dim, *S)``; the result drops the component axis.
    Summed over the torus it vanishes identically.
    """
    out = 0.0
    for a in range(dim):
        fa = np.take(flux, a, axis=-dim - 1)
        out = out + (fa - np.roll(fa, 1, axis=a - dim))
    return out / dx


def time_diff_half(rho: np.ndarray, dt: float) -> np.ndarray:
    """Forward time difference ``(rho[k + 1] - rho[k]) / dt`` of a half-step field.

    Returns a ``cell-int`` shaped array; time is never wrapped.
    """
    return (rho[1:] - rho[:-1]) / dt
