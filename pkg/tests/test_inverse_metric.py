import numpy as np
import pytest

from helpers import (
    complex_step_grad,
    fd_check,
    metric_instance,
    random_duals,
    reference_metric_lagrangian,
    reference_residuals,
)
from mfginv import pdhg
from mfginv.fields import LocalEnergy, QuadraticCost, entry_maps
from mfginv.forward import ForwardProblem, make_boundary, solve_forward
from mfginv.grid import GridSpec
from mfginv.inverse_metric import (
    MetricInverse,
    grad_primal_metric,
    inverse_objective,
    lagrangian_metric,
    solve_inverse_metric,
)
from mfginv.pdhg import Duals, Observation, Primal, SolverAbort, SolverConfig


def at_rest(spec, c=1.0):
    rho = np.full(spec.shape("cell-half"), c)
    return rho, np.zeros(spec.shape("face"))


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def test_objective_vanishes_on_observation():
    spec = GridSpec(1, 6, 5)
    rng = np.random.default_rng(0)
    obs = Observation(0.5 + rng.random((6, 6)), rng.normal(size=(5, 1, 6)), spec)
    problem = MetricInverse(spec, entry_maps("scalar", 1))
    x = Primal(obs.rho_hat.copy(), obs.vel_hat.copy(), np.full(6, 1.7))
    for mode in ("L2", "KL"):
        cfg = SolverConfig(alpha0=0.5, gamma=0.3, objective_mode=mode)
        assert inverse_objective(problem, x, obs, cfg) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("p", [1, 2])
def test_unit_step_regularizer(p):
    # one unit step on the torus makes two jumps of size 1/dx
    spec = GridSpec(1, 8, 4, T=4.0)
    problem = MetricInverse(spec, entry_maps("scalar", 1))
    g0 = np.zeros(8)
    g0[3:6] = 1.0
    assert spec.dt == 1.0
    assert problem.regularizer(g0, 1.0, p) == pytest.approx(2 * (1 / p) * (1 / spec.dx) ** p)


@pytest.mark.parametrize("mode", ["L2", "KL"])
def test_objective_matches_definition(mode):
    spec = GridSpec(2, 4, 3)
    rng = np.random.default_rng(1)
    problem, obs, x, _ = metric_instance(spec, rng)
    cfg = SolverConfig(alpha=0.7, alpha0=0.2, beta=0.4, gamma=0.05, p=2, objective_mode=mode)
    dt, dx = spec.dt, spec.dx
    r, rh, v, vh = x.rho, obs.rho_hat, x.vel, obs.vel_hat
    if mode == "L2":
        want = 0.35 * np.sum((r - rh) ** 2) + 0.2 * np.sum((v - vh) ** 2)
        want += 0.2 / (2 * dt) * (np.sum((r[0] - rh[0]) ** 2) + np.sum((r[-1] - rh[-1]) ** 2))
    else:
        want = 0.7 * np.sum(r * np.log(r / rh))
        want += 0.2 * sum(rh[k][None] * (v[k] - vh[k]) ** 2 for k in range(spec.n)).sum()
        want += 0.2 / dt * (np.sum(r[0] * np.log(r[0] / rh[0])) + np.sum(r[-1] * np.log(r[-1] / rh[-1])))
    g = x.theta
    reg = 0.0
    for i in range(4):
        for j in range(4):
            reg += ((g[(i + 1) % 4, j] - g[i, j]) / dx) ** 2 + ((g[i, (j + 1) % 4] - g[i, j]) / dx) ** 2
    want += 0.05 / (2 * dt) * reg
    assert inverse_objective(problem, x, obs, cfg) == pytest.approx(want, rel=1e-12)


def test_default_weights_use_raw_norms():
    spec = GridSpec(1, 6, 5)
    rng = np.random.default_rng(2)
    obs = Observation(0.5 + rng.random((6, 6)), rng.normal(size=(5, 1, 6)), spec)
    w = pdhg.resolve_weights(SolverConfig(alpha_scale=3.0), obs)
    assert w.alpha == pytest.approx(3.0 / np.sum(obs.rho_hat**2))
    assert w.beta == pytest.approx(1.0 / np.sum(obs.vel_hat**2))
    assert w.alpha0 == 0.0


def test_misfit_weight_scaling_identity():
    spec = GridSpec(1, 6, 5)
    rng = np.random.default_rng(3)
    obs = Observation(0.5 + rng.random((6, 6)), rng.normal(size=(5, 1, 6)), spec)
    rho = 0.5 + rng.random((6, 6))
    vel = rng.normal(size=(5, 1, 6))
    c = 8.0  # power of two keeps the identity exact in floating point
    base = pdhg.resolve_weights(SolverConfig(alpha=0.3, beta=0.2), obs)
    scaled = pdhg.resolve_weights(SolverConfig(alpha=0.3 / c, beta=0.2), obs)
    assert (c * pdhg.misfit_terms(rho, vel, obs, scaled)["misfit_rho"]
            == pdhg.misfit_terms(rho, vel, obs, base)["misfit_rho"])


def test_kl_mode_floors_density():
    spec = GridSpec(1, 4, 3)
    obs = Observation(np.ones((4, 4)), np.zeros((3, 1, 4)), spec)
    rho = np.ones((4, 4))
    rho[1, 1] = -1.0
    wts = pdhg.resolve_weights(SolverConfig(alpha=1.0, beta=1.0, objective_mode="KL"), obs)
    terms = pdhg.misfit_terms(rho, np.zeros((3, 1, 4)), obs, wts)
    assert np.isfinite(terms["misfit_rho"])


def test_config_validation():
    with pytest.raises(ValueError, match="step size"):
        SolverConfig(tau_rho=0.0)
    with pytest.raises(ValueError, match="norm index"):
        SolverConfig(p=3)
    with pytest.raises(ValueError, match="objective_mode"):
        SolverConfig(objective_mode="L1")
    with pytest.raises(ValueError, match="gamma"):
        SolverConfig(gamma=-1.0)


# ---------------------------------------------------------------------------
# Lagrangian and gradients
# ---------------------------------------------------------------------------


def test_lagrangian_reduces_to_objective():
    spec = GridSpec(2, 4, 3)
    rng = np.random.default_rng(4)
    problem, obs, x, duals = metric_instance(spec, rng)
    cfg = SolverConfig(alpha=0.7, beta=0.4, gamma=0.05)
    obj = inverse_objective(problem, x, obs, cfg)
    assert lagrangian_metric(problem, x, Duals.zeros(spec), obs, cfg) == obj
    # a feasible state: uniform density at rest, constant kernel
    rho, vel = at_rest(spec, 1.2)
    x0 = Primal(rho, vel, np.full(spec.space_shape, 0.9))
    assert lagrangian_metric(problem, x0, duals, obs, cfg) == pytest.approx(
        inverse_objective(problem, x0, obs, cfg), abs=1e-12)


@pytest.mark.parametrize("dim", [1, 2])
def test_pairing_matches_independent_residuals(dim):
    spec = GridSpec(dim, 6 if dim == 1 else 4, 4)
    rng = np.random.default_rng(5)
    problem, obs, x, duals = metric_instance(spec, rng)
    cfg = SolverConfig(alpha=0.7, beta=0.4, gamma=0.05)
    G = problem.metric(x.theta)
    hje, cont, curl, loop = reference_residuals(x.rho, x.vel, G, lambda r: r, spec)
    pair = np.sum(duals.psi * hje) + np.sum(duals.Phi * cont) + np.sum(duals.loop * loop)
    if dim == 2:
        pair += np.sum(duals.chi * curl)
    diff = lagrangian_metric(problem, x, duals, obs, cfg) - inverse_objective(problem, x, obs, cfg)
    assert diff == pytest.approx(pair, rel=1e-11)


def test_gradients_vanish_at_observed_rest_state():
    spec = GridSpec(1, 6, 5)
    rho, vel = at_rest(spec, 0.8)
    obs = Observation(rho, vel, spec)
    problem = MetricInverse(spec, entry_maps("scalar", 1))
    x = Primal(rho.copy(), vel.copy(), np.full(6, 1.3))
    for p in (1, 2):
        g = grad_primal_metric(problem, x, Duals.zeros(spec), obs,
                               SolverConfig(gamma=0.1, p=p, alpha0=0.3))
        assert all(np.all(a == 0) for a in g)
        # rho log(rho / rho_hat) has slope 1 at rho = rho_hat, scaled by the weights
        d_rho, d_v, d_g = grad_primal_metric(problem, x, Duals.zeros(spec), obs,
                                             SolverConfig(alpha=0.5, gamma=0.1, p=p, alpha0=0.3,
                                                          objective_mode="KL"))
        assert np.all(d_v == 0) and np.all(d_g == 0)
        np.testing.assert_allclose(d_rho[1:-1], 0.5, rtol=1e-15)
        np.testing.assert_allclose(d_rho[[0, -1]], 0.5 + 0.3 / spec.dt, rtol=1e-15)


def test_p1_flat_kernel_has_no_regularizer_pull():
    spec = GridSpec(2, 4, 3)
    problem = MetricInverse(spec, entry_maps("linear-test51", 2))
    assert np.all(problem.regularizer_grad(np.full((4, 4), 2.0), 1.0, 1) == 0)
    assert problem.regularizer(np.full((4, 4), 2.0), 1.0, 1) == 0


@pytest.mark.parametrize("dim, mode, p", [(1, "L2", 2), (1, "KL", 2), (2, "L2", 2), (2, "KL", 2),
                                          (1, "L2", 1), (2, "L2", 1)])
def test_gradients_match_finite_differences(dim, mode, p):
    spec = GridSpec(1, 6, 5) if dim == 1 else GridSpec(2, 4, 3)
    rng = np.random.default_rng(10 * dim + p)
    problem, obs, x, duals = metric_instance(spec, rng)
    if p == 1:
        # every face difference of g0 well away from the kink
        x.theta[:] = 1.0 + 0.1 * rng.permutation(x.theta.size).reshape(x.theta.shape)
    cfg = SolverConfig(alpha=0.7, alpha0=0.3, beta=0.4, gamma=0.05, p=p, objective_mode=mode)
    errs = fd_check(problem, x, duals, obs, pdhg.resolve_weights(cfg, obs))
    assert max(errs.values()) <= (1e-6 if p == 2 else 1e-5), errs


def test_pinned_entries_have_zero_gradient():
    spec = GridSpec(1, 6, 5)
    rng = np.random.default_rng(6)
    problem, obs, x, duals = metric_instance(spec, rng)
    problem.fixed_mask[[0, 3]] = True
    g = grad_primal_metric(problem, x, duals, obs, SolverConfig(gamma=0.1))
    assert g[2][0] == 0 and g[2][3] == 0 and np.all(g[2][[1, 2, 4, 5]] != 0)


def test_dual_step_raises_lagrangian_linearly():
    spec = GridSpec(2, 4, 3)
    rng = np.random.default_rng(7)
    problem, obs, x, duals = metric_instance(spec, rng)
    cfg = SolverConfig(alpha=0.7, beta=0.4, gamma=0.05)
    res = problem.residuals(x.rho, x.vel, x.theta)
    before = lagrangian_metric(problem, x, duals, obs, cfg)
    sigma = 1e-3
    duals.ascend(res, sigma)
    after = lagrangian_metric(problem, x, duals, obs, cfg)
    sq = sum(float(np.sum(r**2)) for r in (res.hje, res.cont, res.curl, res.loop))
    assert after - before == pytest.approx(sigma * sq, rel=1e-9)


# ---------------------------------------------------------------------------
# primal-dual step
# ---------------------------------------------------------------------------


def test_step_fixed_point():
    spec = GridSpec(1, 6, 5)
    rho, vel = at_rest(spec)
    obs = Observation(rho, vel, spec)
    problem = MetricInverse(spec, entry_maps("scalar", 1))
    x = Primal(rho.copy(), vel.copy(), np.ones(6))
    duals = Duals.zeros(spec)
    cfg = SolverConfig(gamma=0.1)
    new = pdhg.pdhg_step(problem, x, duals, obs, pdhg.resolve_weights(cfg, obs), cfg)
    assert all(np.array_equal(a, b) for a, b in ((new.rho, x.rho), (new.vel, x.vel), (new.theta, x.theta)))
    assert all(np.all(d == 0) for d in (duals.psi, duals.Phi, duals.loop))


def test_first_step_follows_misfit_only():
    spec = GridSpec(1, 6, 5)
    rho_hat, vel = at_rest(spec, 1.0)
    obs = Observation(rho_hat, vel, spec)
    problem = MetricInverse(spec, entry_maps("scalar", 1))
    x = Primal(np.full_like(rho_hat, 1.5), vel.copy(), np.ones(6))
    duals = Duals.zeros(spec)
    cfg = SolverConfig(alpha=2.0, beta=1.0, tau_rho=0.1)
    new = pdhg.pdhg_step(problem, x, duals, obs, pdhg.resolve_weights(cfg, obs), cfg)
    np.testing.assert_allclose(new.rho, 1.5 - 0.1 * 2.0 * 0.5, rtol=1e-15)
    assert np.all(new.vel == 0) and np.all(new.theta == 1.0)
    assert np.max(np.abs(duals.Phi)) == 0 and np.max(np.abs(duals.psi)) == 0


def test_step_matches_reference_iteration():
    # vectorized steps against a loop-built Lagrangian differentiated by complex step
    spec = GridSpec(1, 4, 3)
    rng = np.random.default_rng(8)
    maps = entry_maps("scalar", 1)
    problem, obs, x, duals = metric_instance(spec, rng)
    cfg = SolverConfig(alpha=0.7, alpha0=0.2, beta=0.4, gamma=0.05, tau_rho=0.02, tau_v=0.02,
                       tau_theta=0.02, sigma=0.01)
    wts = pdhg.resolve_weights(cfg, obs)
    ref_x, ref_d = x.copy(), duals.copy()

    def L(r, v, g):
        return reference_metric_lagrangian(r, v, g, ref_d, obs, wts, spec, maps.slope, maps.offset)

    for _ in range(100):
        x = pdhg.pdhg_step(problem, x, duals, obs, wts, cfg)
        args = (ref_x.rho, ref_x.vel, ref_x.theta)
        g = [complex_step_grad(L, args, k) for k in range(3)]
        new = Primal(ref_x.rho - cfg.tau_rho * g[0], ref_x.vel - cfg.tau_v * g[1],
                     ref_x.theta - cfg.tau_theta * g[2])
        star = [2 * a - b for a, b in zip((new.rho, new.vel, new.theta), args)]
        hje, cont, _, loop = reference_residuals(star[0], star[1], maps.value(star[2]), lambda r: r, spec)
        ref_d.psi += cfg.sigma * hje
        ref_d.Phi += cfg.sigma * cont
        ref_d.loop += cfg.sigma * loop
        ref_x = new
    for a, b in ((x.rho, ref_x.rho), (x.vel, ref_x.vel), (x.theta, ref_x.theta),
                 (duals.psi, ref_d.psi), (duals.Phi, ref_d.Phi), (duals.loop, ref_d.loop)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------------------
# solves
# ---------------------------------------------------------------------------


def forward_obs(spec, g0, cost=QuadraticCost()):
    r0 = make_boundary("gaussian-bump", spec, center=0.3)
    rT = make_boundary("gaussian-bump", spec, center=0.7)
    G = entry_maps("scalar", spec.dim).value(g0)
    fw = solve_forward(ForwardProblem(spec, r0, rT, LocalEnergy(cost, spec), G))
    assert fw.converged
    return Observation(fw.rho, fw.vel, spec)


def test_constant_metric_closed_loop():
    spec = GridSpec(1, 16, 8)
    c = 1.5
    truth = np.full(16, c)
    obs = forward_obs(spec, truth)
    cfg = SolverConfig(alpha=100.0, beta=100.0, gamma=0.0, tau_rho=2e-3, tau_v=2e-3,
                       tau_theta=5e-2, sigma=5e-2, iters=4000, log_every=1000)
    res = solve_inverse_metric(obs, cfg, 1.0, known_entries={0: c}, truth=truth)
    assert res.trace[0]["theta_err"] > 0.3
    assert res.trace[-1]["theta_err"] <= 1e-3
    assert res.theta[0] == c


def test_initial_state_and_trace():
    spec = GridSpec(1, 8, 5)
    obs = forward_obs(spec, np.ones(8))
    res = solve_inverse_metric(obs, SolverConfig(gamma=0.0, iters=30, log_every=10), 1.0)
    assert [row["iter"] for row in res.trace] == [0, 10, 20, 30]
    assert all(row["reg"] == 0 for row in res.trace)
    assert np.isnan(res.trace[0]["theta_err"])
    x0 = pdhg.initial_primal(obs, np.ones(8))
    np.testing.assert_array_equal(x0.rho[0], obs.rho_hat[0])
    np.testing.assert_array_equal(x0.rho[-1], obs.rho_hat[-1])
    assert np.all(x0.rho[1:-1] == np.mean(obs.rho_hat)) and np.all(x0.vel == 0)


def test_pinned_entries_bit_stable():
    spec = GridSpec(1, 8, 5)
    obs = forward_obs(spec, np.ones(8))
    pinned = 0.123456789012345678
    seen = []
    res = solve_inverse_metric(obs, SolverConfig(gamma=1e-3, iters=500), 1.0,
                               known_entries={2: pinned, 5: 1.0},
                               callback=lambda k, x, d: seen.append(x.theta[[2, 5]].copy()))
    assert all(s[0] == pinned and s[1] == 1.0 for s in seen)
    assert np.any(res.theta != 1.0)


def test_boundary_pinning_option():
    spec = GridSpec(1, 8, 5)
    obs = forward_obs(spec, np.ones(8))
    rng = np.random.default_rng(0)
    noisy = Observation(obs.rho_hat + 0.01 * rng.random(obs.rho_hat.shape), obs.vel_hat, spec)
    res = solve_inverse_metric(noisy, SolverConfig(pin_boundary=True, alpha0=1.0, iters=50), 1.0)
    np.testing.assert_array_equal(res.primal.rho[0], noisy.rho_hat[0])
    res = solve_inverse_metric(noisy, SolverConfig(alpha0=1.0, iters=50), 1.0)
    assert np.any(res.primal.rho[0] != noisy.rho_hat[0])


def test_non_spd_initial_metric_rejected():
    spec = GridSpec(1, 8, 5)
    obs = forward_obs(spec, np.ones(8))
    from mfginv.fields import NotSPDError

    with pytest.raises(NotSPDError):
        solve_inverse_metric(obs, SolverConfig(iters=1), -1.0)


def test_divergence_aborts_with_iteration():
    spec = GridSpec(1, 8, 5)
    obs = forward_obs(spec, np.ones(8))
    with pytest.raises(SolverAbort) as info:
        solve_inverse_metric(obs, SolverConfig(tau_rho=5.0, tau_v=5.0, tau_theta=5.0, sigma=5.0,
                                               alpha=1.0, beta=1.0, iters=10000), 1.0)
    assert 1 <= info.value.iteration < 10000
    assert str(info.value.iteration) in str(info.value)


def test_step_backoff_recovers_from_divergence():
    spec = GridSpec(1, 8, 5)
    obs = forward_obs(spec, np.ones(8))
    cfg = SolverConfig(tau_rho=5.0, tau_v=5.0, tau_theta=5.0, sigma=5.0, alpha=1.0, beta=1.0,
                       iters=2000, log_every=100, max_backoff=10)
    res = solve_inverse_metric(obs, cfg, 1.0)
    assert res.backoffs
    for n, b in enumerate(res.backoffs, start=1):
        assert b["tau_rho"] == b["tau_v"] == b["tau_theta"] == b["sigma"] == 5.0 / 2**n
        assert b["restart"] % 100 == 0 and b["restart"] < b["iter"]
    assert [row["iter"] for row in res.trace] == list(range(0, 2001, 100))
    assert res.primal.finite() and res.duals.finite()


def test_step_backoff_is_inert_on_stable_runs():
    spec = GridSpec(1, 8, 5)
    obs = forward_obs(spec, 1.0 - 0.3 * np.sin(np.pi * np.arange(8) / 8) ** 2)
    a = solve_inverse_metric(obs, SolverConfig(iters=500, max_backoff=0), 1.0, known_entries={0: 1.0})
    b = solve_inverse_metric(obs, SolverConfig(iters=500, max_backoff=4), 1.0, known_entries={0: 1.0})
    assert not b.backoffs
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.primal.vel, b.primal.vel)
