"""Additive uniform observation noise scaled by the clean-field norms."""

from __future__ import annotations

import numpy as np

from .pdhg import Observation

RNG_NAME = "numpy.random.Generator(PCG64)"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def inject_noise(obs: Observation, eps_star: float, seed: int) -> Observation:
    """Corrupt every density and velocity entry independently.

    Each density entry gets ``eps_star * ||rho_hat|| * U[-0.5, 0.5]`` and
    each velocity component ``eps_star * ||v_hat|| * U[-0.5, 0.5]``, with
    plain l2 norms of the clean space-time fields. Boundary slices are
    corrupted like the interior.
    """
    if eps_star < 0:
        raise ValueError("noise factor must be nonnegative")
    if eps_star == 0:
        return Observation(obs.rho_hat.copy(), obs.vel_hat.copy(), obs.spec)
    rng = make_rng(seed)
    nr = float(np.linalg.norm(obs.rho_hat))
    nv = float(np.linalg.norm(obs.vel_hat))
    rho = obs.rho_hat + eps_star * nr * rng.uniform(-0.5, 0.5, size=obs.rho_hat.shape)
    vel = obs.vel_hat + eps_star * nv * rng.uniform(-0.5, 0.5, size=obs.vel_hat.shape)
    return Observation(rho, vel, obs.spec)
