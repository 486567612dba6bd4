"""Time integration, Newton driver, block iteration, and equilibration."""

import numpy as np
import pytest
import scipy.sparse as sp

from ekflow import linalg
from ekflow.femcore import integrate, make_conforming
from ekflow.mesh import RefineRule, build_uniform
from ekflow.physics import FieldState, Forcing, NondimGroups, Species
from ekflow.stepper import (
    BlockConfig,
    NewtonConfig,
    StepContext,
    StepFailure,
    TimeScheme,
    advance_step,
    bdf_coefficients,
    equilibrate_pnp,
    extrapolate_velocity,
    newton_solve,
    perturb_concentrations,
)


def _zero_state(mesh, nspecies=2, c0=1.0):
    n = mesh.n_eq
    return FieldState(v=np.zeros((n, mesh.dim)), p=np.zeros(n), phi=np.zeros(n),
                      c=np.full((n, nspecies), c0))


# ----------------------------------------------------------------------
# difference formulas


def test_bdf_coefficients():
    assert bdf_coefficients(1) == (1.0, -1.0, 0.0)
    assert bdf_coefficients(2) == (1.5, -2.0, 0.5)
    for order in (1, 2):
        assert sum(bdf_coefficients(order)) == 0.0
    with pytest.raises(ValueError):
        bdf_coefficients(3)


def test_bdf2_exact_on_quadratic():
    # (b0 u2 + b1 u1 + b2 u0)/dt reproduces du/dt at t2 for u = t^2
    dt = 0.3
    t = np.array([0.0, dt, 2 * dt])
    u = t**2
    b0, b1, b2 = bdf_coefficients(2)
    deriv = (b0 * u[2] + b1 * u[1] + b2 * u[0]) / dt
    assert deriv == pytest.approx(2 * t[2], rel=1e-13)


def test_extrapolation():
    np.testing.assert_allclose(
        extrapolate_velocity(np.array([2.0, 1.0]), np.array([0.5, 1.0])),
        [3.5, 1.0])


def test_time_scheme_orders():
    s = TimeScheme(dt=0.1)
    assert s.order == 1 and s.beta == (1.0, -1.0, 0.0)
    s.k = 1
    assert s.order == 2 and s.beta == (1.5, -2.0, 0.5)
    with pytest.raises(ValueError):
        TimeScheme(dt=0.0)


# ----------------------------------------------------------------------
# Newton driver


def _quadratic_builder(u):
    U = u[0]
    A = sp.csr_matrix(np.array([[2.0 * U]]))
    return A, np.array([-(U * U - 4.0)])


def test_newton_frozen_iterates():
    # F(U) = U^2 - 4 from U = 3: 3 -> 13/6 -> 313/156 -> ...
    cfg = NewtonConfig(solver=linalg.SolverConfig(method="gmres",
                                                  preconditioner="none"))
    u = np.array([3.0])
    iterates = [u[0]]
    for _ in range(3):
        A, b = _quadratic_builder(u)
        u = u + np.array([b[0] / A[0, 0]])
        iterates.append(u[0])
    assert iterates[1] == pytest.approx(13.0 / 6.0, abs=1e-15)
    assert iterates[2] == pytest.approx(313.0 / 156.0, abs=1e-15)
    assert iterates[2] == pytest.approx(2.0064102564, abs=1e-9)

    u_fin, iters, status, hist = newton_solve(_quadratic_builder,
                                              np.array([3.0]), cfg)
    assert status == "converged"
    assert u_fin[0] == pytest.approx(2.0, abs=1e-10)
    # quadratic convergence: each correction roughly squares
    assert hist[2] < hist[1] ** 2 * 10


def test_newton_nonconverged_status():
    # F(U) = U^2 + 1 has no real root
    def build(u):
        U = u[0]
        return sp.csr_matrix([[2.0 * U]]), np.array([-(U * U + 1.0)])

    cfg = NewtonConfig(max_iters=5, solver=linalg.SolverConfig(
        method="gmres", preconditioner="none"))
    _, iters, status, _ = newton_solve(build, np.array([3.0]), cfg)
    assert status == "nonconverged"
    assert iters == 5


def test_newton_propagates_inner_failure():
    def build(u):
        return sp.csr_matrix([[0.0]]), np.array([1.0])

    cfg = NewtonConfig(solver=linalg.SolverConfig(method="bicgstab",
                                                  preconditioner="none",
                                                  max_iters=5))
    with pytest.raises(StepFailure):
        newton_solve(build, np.array([1.0]), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(tol=0.0)
    with pytest.raises(ValueError):
        NewtonConfig(max_iters=0)
    with pytest.raises(ValueError):
        BlockConfig(max_iters=0)


# ----------------------------------------------------------------------
# coupled stepping


def _walls(mesh):
    tags = ["x_min", "x_max", "y_min", "y_max"][: 2 * mesh.dim]
    return np.unique(np.concatenate([mesh.boundary_nodes(t) for t in tags]))


def test_quiescent_step_is_fixed_point():
    mesh = build_uniform((1, 1), 3)
    state = _zero_state(mesh)
    groups = NondimGroups(Sc=1.0, kappa=0.5, Lambda=1.0)
    wall = _walls(mesh)
    pin = wall[:1]
    ctx = StepContext(
        mesh=mesh, groups=groups,
        ns_bc=lambda t: [(wall, 0, 0.0), (wall, 1, 0.0), (pin, 2, 0.0)],
        pnp_bc=lambda t: [(wall, 0, 0.0), (wall, 1, 1.0), (wall, 2, 1.0)])
    scheme = TimeScheme(dt=0.01)
    for _ in range(2):
        diag = advance_step(ctx, state, scheme)
    assert scheme.k == 2
    assert diag["step"] == 2
    assert np.abs(state.v).max() < 1e-9
    assert np.abs(state.phi).max() < 1e-9
    assert np.abs(state.c - 1.0).max() < 1e-9


def test_step_exact_for_quadratic_in_time_diffusion():
    # z = 0 decouples one species into pure diffusion; c = 1 + t^2 uniform
    # with source 2t is reproduced exactly by the BDF2 step.
    mesh = build_uniform((1, 1), 2)
    n = mesh.n_eq
    dt = 0.2
    groups = NondimGroups(Sc=1.0, kappa=0.5, Lambda=0.5,
                          species=(Species(z=0.0, D=1.0),))
    state = FieldState(v=np.zeros((n, 2)), p=np.zeros(n), phi=np.zeros(n),
                       c=np.ones((n, 1)))
    state.c_k = np.full((n, 1), 1.0 + dt**2)
    state.c_km1 = np.full((n, 1), 1.0)
    pin = mesh.boundary_nodes("x_min")[:1]
    forcing = Forcing(species=[lambda pts, t: np.full(len(pts), 2.0 * t)])
    ctx = StepContext(mesh=mesh, groups=groups, pnp_only=True, forcing=forcing,
                      pnp_bc=lambda t: [(pin, 0, 0.0)])
    scheme = TimeScheme(dt=dt, k=1)  # BDF2 with exact history
    advance_step(ctx, state, scheme)
    t2 = 2 * dt
    np.testing.assert_allclose(state.c[:, 0], 1.0 + t2**2, rtol=1e-9)
    assert np.abs(state.phi).max() < 1e-9


def test_step_rotates_history():
    mesh = build_uniform((1, 1), 2)
    state = _zero_state(mesh)
    wall = _walls(mesh)
    groups = NondimGroups(Sc=1.0, kappa=0.5, Lambda=1.0)
    ctx = StepContext(mesh=mesh, groups=groups, pnp_only=True,
                      pnp_bc=lambda t: [(wall, 0, 0.0)])
    scheme = TimeScheme(dt=0.05)
    c_before = state.c.copy()
    advance_step(ctx, state, scheme)
    np.testing.assert_array_equal(state.c_k, state.c)
    np.testing.assert_array_equal(state.c_km1, c_before)
    assert scheme.k == 1 and scheme.order == 2


def test_nan_forcing_raises_step_failure():
    mesh = build_uniform((1, 1), 2)
    state = _zero_state(mesh)
    wall = _walls(mesh)
    groups = NondimGroups(Sc=1.0, kappa=0.5, Lambda=1.0)
    forcing = Forcing(species=[lambda pts, t: np.full(len(pts), np.nan),
                               lambda pts, t: np.zeros(len(pts))])
    ctx = StepContext(mesh=mesh, groups=groups, pnp_only=True, forcing=forcing,
                      pnp_bc=lambda t: [(wall, 0, 0.0)])
    with pytest.raises(StepFailure):
        advance_step(ctx, state, TimeScheme(dt=0.05))


# ----------------------------------------------------------------------
# equilibration and perturbation


def test_equilibrate_develops_screening_layers():
    mesh = build_uniform((1, 1), 4)
    state = _zero_state(mesh)
    groups = NondimGroups(Sc=1.0, kappa=0.5, Lambda=0.2)
    lo = mesh.boundary_nodes("x_min")
    hi = mesh.boundary_nodes("x_max")
    ctx = StepContext(mesh=mesh, groups=groups, pnp_only=True,
                      pnp_bc=lambda t: [(lo, 0, 0.5), (hi, 0, 0.0)])
    diag = equilibrate_pnp(ctx, state, dt0=0.01, steady_tol=1e-7, max_steps=200)
    assert diag["rate"] < 1e-7
    assert diag["pseudo_steps"] < 50  # growing pseudo-steps beat fixed dt
    # counter-ions enriched / co-ions depleted at the positive wall
    assert state.c[lo, 1].mean() > 1.05
    assert state.c[lo, 0].mean() < 0.95
    # blocking walls conserve each species' total content
    assert integrate(mesh, state.c[:, 0]) == pytest.approx(1.0, abs=1e-6)
    assert integrate(mesh, state.c[:, 1]) == pytest.approx(1.0, abs=1e-6)
    # binary 1:1 symmetry: co-ion profile mirrors the counter-ion profile
    assert state.c[lo, 0].mean() == pytest.approx(state.c[hi, 1].mean(), rel=1e-6)
    assert state.c[lo, 1].mean() == pytest.approx(state.c[hi, 0].mean(), rel=1e-6)


def test_perturbation_bounds_and_determinism():
    mesh = build_uniform((1, 1), 3)
    state = _zero_state(mesh)
    base = state.c.copy()
    perturb_concentrations(state, 0.01, seed=42)
    rel = state.c / base - 1.0
    assert np.abs(rel).max() <= 0.01
    assert np.abs(rel).max() > 0.005   # actually perturbed
    assert abs(np.abs(rel).mean() - 0.005) < 0.001  # E|xi| = 1/2
    np.testing.assert_array_equal(state.c_k, state.c)

    repeat = _zero_state(mesh)
    perturb_concentrations(repeat, 0.01, seed=42)
    np.testing.assert_array_equal(repeat.c, state.c)

    other = _zero_state(mesh)
    perturb_concentrations(other, 0.01, seed=43)
    assert not np.array_equal(other.c, state.c)

    with pytest.raises(ValueError):
        perturb_concentrations(state, 1.0, seed=0)


def test_perturbation_keeps_hanging_nodes_conforming():
    from ekflow.mesh import refine

    rule = RefineRule(lambda ctr, ext: np.where(ctr[:, 0] < 0.5, 3, 2), 3)
    mesh = refine(build_uniform((1, 1), 2), rule)
    assert mesh.n_eq > mesh.n_free  # the field really has hanging entries
    state = _zero_state(mesh)
    perturb_concentrations(state, 0.05, seed=1, mesh=mesh)
    np.testing.assert_allclose(state.c, make_conforming(mesh, state.c),
                               atol=1e-15)
