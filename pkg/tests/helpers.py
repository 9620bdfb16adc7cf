"""Independent reference implementations used as test oracles.

Everything here is written with explicit index loops straight from the
definitions, so it shares no code path with the vectorized package.
"""

from __future__ import annotations

import itertools

import numpy as np

from mfginv import pdhg
from mfginv.fields import entry_maps
from mfginv.grid import GridSpec
from mfginv.inverse_kernel import KernelInverse
from mfginv.inverse_metric import MetricInverse


def cells(spec: GridSpec):
    return list(itertools.product(range(spec.m), repeat=spec.dim))


def shifted(i, axis, step, m):
    j = list(i)
    j[axis] = (j[axis] + step) % m
    return tuple(j)


def loop_space_diff(f2d, axis, spec):
    """``(f[i + e_axis] - f[i]) / dx`` cell by cell."""
    out = np.zeros(spec.space_shape)
    for i in cells(spec):
        out[i] = (f2d[shifted(i, axis, 1, spec.m)] - f2d[i]) / spec.dx
    return out


def loop_divergence(flux_slice, spec):
    """``sum_v (m[v, i] - m[v, i - e_v]) / dx`` for one time slice ``(dim, *S)``."""
    out = np.zeros(spec.space_shape, dtype=flux_slice.dtype)
    for i in cells(spec):
        for v in range(spec.dim):
            out[i] += (flux_slice[(v,) + i] - flux_slice[(v,) + shifted(i, v, -1, spec.m)]) / spec.dx
    return out


def loop_convolve(K_pairs, rho, spec):
    """``sum_i' K(i, i') rho_i' dx^dim`` from an explicit pair table."""
    out = np.zeros(spec.space_shape)
    for i in cells(spec):
        for ip in cells(spec):
            out[i] += K_pairs[i + ip] * rho[ip] * spec.dx**spec.dim
    return out


def torus_dist(i, ip, m):
    return tuple(min((b - a) % m, (a - b) % m) for a, b in zip(i, ip))


def loop_expand(ktilde, spec):
    K = np.zeros(spec.space_shape * 2)
    for i in cells(spec):
        for ip in cells(spec):
            K[i + ip] = ktilde[torus_dist(i, ip, spec.m)]
    return K


def metric_matrix(G, i):
    dim = G.shape[0]
    return np.array([[G[(a, b) + i] for b in range(dim)] for a in range(dim)])


def reference_residuals(rho, vel, G, potential_slice, spec):
    """The four residual fields written out cell by cell.

    ``potential_slice(r)`` maps one density slice to ``F'(r)`` or ``K * r``.
    """
    n, m, dim, dx, dt = spec.n, spec.m, spec.dim, spec.dx, spec.dt
    dt_ = np.result_type(rho, vel, G)
    w = np.zeros(vel.shape, dtype=dt_)
    for k in range(n):
        for i in cells(spec):
            vv = np.array([vel[(k, a) + i] for a in range(dim)])
            ww = metric_matrix(G, i) @ vv
            for a in range(dim):
                w[(k, a) + i] = ww[a]
    xi = np.zeros((n - 1,) + spec.space_shape, dtype=dt_)
    for k in range(1, n):
        pot = potential_slice(rho[k])
        for i in cells(spec):
            vv = np.array([vel[(k, a) + i] for a in range(dim)])
            xi[(k - 1,) + i] = 0.5 * vv @ metric_matrix(G, i) @ vv - pot[i]
    hje = np.zeros((n - 1, dim) + spec.space_shape, dtype=dt_)
    for k in range(n - 1):
        for a in range(dim):
            for i in cells(spec):
                hje[(k, a) + i] = ((xi[(k,) + shifted(i, a, 1, m)] - xi[(k,) + i]) / dx
                                   + (w[(k + 1, a) + i] - w[(k, a) + i]) / dt)
    cont = np.zeros((n,) + spec.space_shape, dtype=dt_)
    for k in range(n):
        flux = np.stack([rho[k] * vel[k, a] for a in range(dim)])
        cont[k] = (rho[k + 1] - rho[k]) / dt + loop_divergence(flux, spec)
    curl = None
    if dim == 2:
        curl = np.zeros((n,) + spec.space_shape, dtype=dt_)
        for k in range(n):
            for i in cells(spec):
                curl[(k,) + i] = ((w[(k, 0) + shifted(i, 1, 1, m)] - w[(k, 0) + i]) / dx
                                  - (w[(k, 1) + shifted(i, 0, 1, m)] - w[(k, 1) + i]) / dx)
        loop = np.zeros((n, 2, m), dtype=dt_)
        for k in range(n):
            for j in range(m):
                loop[k, 0, j] = sum(w[k, 0, i1, j] for i1 in range(m))
                loop[k, 1, j] = sum(w[k, 1, j, i2] for i2 in range(m))
    else:
        loop = np.array([[sum(w[k, 0, i] for i in range(m))] for k in range(n)])
    return hje, cont, curl, loop


# ---------------------------------------------------------------------------
# random inverse-problem instances
# ---------------------------------------------------------------------------


def random_duals(spec, rng):
    d = pdhg.Duals.zeros(spec)
    d.psi[:] = rng.normal(size=d.psi.shape)
    d.Phi[:] = rng.normal(size=d.Phi.shape)
    d.loop[:] = rng.normal(size=d.loop.shape)
    if d.chi is not None:
        d.chi[:] = rng.normal(size=d.chi.shape)
    return d


def random_obs(spec, rng):
    return pdhg.Observation(0.5 + rng.random(spec.shape("cell-half")),
                            rng.normal(size=spec.shape("face")), spec)


def metric_instance(spec, rng, preset=None):
    preset = preset or ("scalar" if spec.dim == 1 else "linear-test51")
    problem = MetricInverse(spec, entry_maps(preset, spec.dim))
    x = pdhg.Primal(0.5 + rng.random(spec.shape("cell-half")), rng.normal(size=spec.shape("face")),
                    1.0 + rng.random(spec.space_shape))
    return problem, random_obs(spec, rng), x, random_duals(spec, rng)


def kernel_instance(spec, rng, method="auto"):
    G = np.zeros((spec.dim, spec.dim) + spec.space_shape)
    for a in range(spec.dim):
        G[a, a] = 1.0 + rng.random(spec.space_shape)
    problem = KernelInverse(spec, G, method=method)
    x = pdhg.Primal(0.5 + rng.random(spec.shape("cell-half")), rng.normal(size=spec.shape("face")),
                    rng.normal(size=spec.quotient_shape))
    return problem, random_obs(spec, rng), x, random_duals(spec, rng)


def fd_gradient(fun, arr, h=1e-6, indices=None):
    """Central differences of ``fun()`` with respect to entries of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    for idx in (indices if indices is not None else np.ndindex(arr.shape)):
        old = arr[idx]
        arr[idx] = old + h
        fp = fun()
        arr[idx] = old - h
        fm = fun()
        arr[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b):
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def fd_check(problem, x, duals, obs, wts, h=1e-6):
    """Largest relative mismatch per primal block between analytic and FD gradients."""
    g = pdhg.grad_primal(problem, x, duals, obs, wts)

    def L():
        return pdhg.lagrangian(problem, x, duals, obs, wts)

    free = [idx for idx in np.ndindex(x.theta.shape) if not problem.fixed_mask[idx]]
    out = {}
    for name, idxs in (("rho", None), ("vel", None), ("theta", free)):
        num = fd_gradient(L, getattr(x, name), h, idxs)
        out[name] = rel_err(getattr(g, name), num)
    return out


# ---------------------------------------------------------------------------
# loop-based metric Lagrangian, differentiated by complex step
# ---------------------------------------------------------------------------


def reference_metric_lagrangian(rho, vel, g0, duals, obs, wts, spec, slope, offset, cost_scale=1.0):
    """L2-mode metric Lagrangian with ``p = 2``, built from loops.

    Every operation is analytic so a complex perturbation of one entry
    yields the exact directional derivative in the imaginary part.
    """
    dim = spec.dim
    G = np.zeros((dim, dim) + spec.space_shape, dtype=complex)
    for i in cells(spec):
        for a in range(dim):
            for b in range(dim):
                G[(a, b) + i] = slope[a][b] * g0[i] + offset[a][b]
    misfit = 0.5 * wts.alpha * np.sum((rho - obs.rho_hat) ** 2)
    misfit += 0.5 * wts.beta * np.sum((vel - obs.vel_hat) ** 2)
    if wts.alpha0:
        misfit += wts.alpha0 / (2 * spec.dt) * (np.sum((rho[0] - obs.rho_hat[0]) ** 2)
                                                + np.sum((rho[-1] - obs.rho_hat[-1]) ** 2))
    reg = 0.0
    for i in cells(spec):
        for a in range(dim):
            d = (g0[shifted(i, a, 1, spec.m)] - g0[i]) / spec.dx
            reg += wts.gamma / (2 * spec.dt) * d * d
    hje, cont, curl, loop = reference_residuals(rho, vel, G, lambda r: cost_scale * r, spec)
    pair = np.sum(duals.psi * hje) + np.sum(duals.Phi * cont) + np.sum(duals.loop * loop)
    if curl is not None:
        pair += np.sum(duals.chi * curl)
    return misfit + reg + pair


def complex_step_grad(fun, arrs, which, h=1e-30):
    """Gradient of ``fun(*arrs)`` in ``arrs[which]`` by complex step."""
    base = [np.asarray(a, dtype=complex) for a in arrs]
    target = base[which]
    out = np.zeros(target.shape)
    for idx in np.ndindex(target.shape):
        target[idx] += 1j * h
        out[idx] = fun(*base).imag / h
        target[idx] -= 1j * h
    return out
