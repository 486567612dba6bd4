"""Weak-form kernels, stabilization parameters, and nondimensional groups."""

import numpy as np
import pytest

from ekflow import linalg
from ekflow.femcore import ElementBatch, assemble, assemble_blocks, deinterleave
from ekflow.mesh import build_uniform
from ekflow.physics import (
    DimensionalInputs,
    FieldState,
    Forcing,
    NondimGroups,
    Species,
    TauSet,
    boundary_flux,
    compute_taus,
    divergence_norm,
    ns_kernel,
    pnp_jacobian,
    pnp_residual,
    _taus_for_batch,
)


def _state(mesh, seed=None, dim=2, nspecies=2):
    n = mesh.n_eq
    if seed is None:
        return FieldState(v=np.zeros((n, dim)), p=np.zeros(n), phi=np.zeros(n),
                          c=np.ones((n, nspecies)))
    rng = np.random.default_rng(seed)
    x = mesh.coords
    v = 0.3 * np.stack([np.sin(2 * x[:, 0]) * np.cos(x[:, 1]),
                        np.cos(x[:, 0]) * np.sin(2 * x[:, 1])], axis=1)[:, :dim]
    phi = 0.2 * np.cos(x[:, 0] + 0.5 * x[:, 1])
    c = 1.0 + 0.2 * np.stack([np.sin(x[:, 0] + s) * np.cos(x[:, 1])
                              for s in range(nspecies)], axis=1)
    st = FieldState(v=v, p=0.1 * x[:, 0], phi=phi, c=c)
    st.c_k = c * (1.0 + 0.05 * rng.standard_normal(c.shape))
    st.c_km1 = c * (1.0 + 0.05 * rng.standard_normal(c.shape))
    st.vtilde = v * 1.1
    return st


# ----------------------------------------------------------------------
# nondimensional groups


def test_water_groups():
    # 1:1 salt in water at 298 K, 1 mol/m^3 on both species, 100 nm channel.
    inp = DimensionalInputs(eta=8.90e-4, rho=1000.0, diffusivities=(1e-9, 1e-9),
                            eps_r=78.5, T=298.0, L_ch=1e-7,
                            c_init=(1.0, 1.0), valences=(1, -1))
    g = inp.nondimensionalize()
    assert g.Sc == pytest.approx(890.0, rel=1e-12)
    assert g.kappa == pytest.approx(0.514931, rel=1e-4)
    assert inp.debye_length == pytest.approx(9.61704e-9, rel=1e-4)
    assert g.Lambda == pytest.approx(9.61704e-9 / 1e-7, rel=1e-4)
    np.testing.assert_allclose(g.valences, [1.0, -1.0])
    np.testing.assert_allclose(g.diffusivities, [1.0, 1.0])


def test_ionic_strength_and_thermal_voltage():
    inp = DimensionalInputs(eta=1e-3, rho=1000.0, diffusivities=(2e-9, 1e-9),
                            eps_r=80.0, T=298.0, L_ch=1e-6,
                            c_init=(2.0, 1.0), valences=(1, -2))
    assert inp.ionic_strength == pytest.approx(0.5 * (2.0 + 4.0))
    assert inp.thermal_voltage == pytest.approx(8.314 * 298.0 / 96485.33)


def test_groups_validation():
    with pytest.raises(ValueError):
        NondimGroups(Sc=-1.0, kappa=0.5, Lambda=0.1)
    with pytest.raises(ValueError):
        NondimGroups(Sc=1.0, kappa=0.5, Lambda=0.0)


# ----------------------------------------------------------------------
# stabilization parameters


def test_tau_quiescent_limit():
    g = NondimGroups(Sc=3.0, kappa=0.5, Lambda=0.1)
    taus = compute_taus(0.02, g, dim=2, g=np.array([0.0]))
    assert taus.tau_m[0] == pytest.approx(0.01, rel=1e-14)
    assert taus.tau_c[0] == pytest.approx(0.01, rel=1e-14)
    assert taus.tau_sol[0] == 0.0


def test_tau_formula_values():
    # dt=0.1, h=0.25 -> g=64; vsq=4; Sc=2; dim=2.
    g = NondimGroups(Sc=2.0, kappa=1.0, Lambda=1.0)
    taus = compute_taus(0.1, g, dim=2, h=np.array([0.25]), vsq=np.array([4.0]))
    base = 4.0 / 0.01 + 64.0 * 4.0
    tau_m = 1.0 / np.sqrt(base + 6.0 * 4.0 * 2.0 * 64.0**2)
    tau_c = 1.0 / np.sqrt(base + 6.0 * 2.0 * 64.0**2)
    assert taus.tau_m[0] == pytest.approx(tau_m, rel=1e-14)
    assert taus.tau_c[0] == pytest.approx(tau_c, rel=1e-14)
    assert taus.tau_sol[0] == pytest.approx(1.0 / (2.0 * 64.0 * tau_m), rel=1e-14)


def test_tau_monotonicity():
    g = NondimGroups(Sc=5.0, kappa=0.5, Lambda=0.1)
    h = np.full(8, 1.0 / 32.0)
    speeds = np.linspace(0.0, 10.0, 8) ** 2
    taus = compute_taus(0.01, g, dim=2, h=h, vsq=speeds)
    assert np.all(np.diff(taus.tau_m) <= 0)
    assert np.all(np.diff(taus.tau_c) <= 0)
    assert np.all(np.diff(taus.tau_sol) >= 0)
    # shrinking dt shrinks both taus
    t2 = compute_taus(0.001, g, dim=2, h=h, vsq=speeds)
    assert np.all(t2.tau_m <= taus.tau_m)
    assert np.all(t2.tau_c <= taus.tau_c)


def test_tau_rejects_bad_dt():
    g = NondimGroups(Sc=1.0, kappa=0.5, Lambda=0.1)
    with pytest.raises(ValueError):
        compute_taus(0.0, g, dim=2, h=np.array([0.5]))


# ----------------------------------------------------------------------
# flow kernel


def test_quiescent_flow_is_fixed_point():
    mesh = build_uniform((1, 1), 3)
    st = _state(mesh)
    groups = NondimGroups(Sc=2.0, kappa=0.5, Lambda=0.3)
    batch = ElementBatch(mesh)
    taus = _taus_for_batch(batch, st, 0.01, groups)
    Ke, Fe = ns_kernel(batch, st, taus, groups, 0.01, (1.5, -2.0, 0.5))
    # electroneutral charge and zero history: zero load vector
    assert np.abs(Fe).max() == 0.0

    wall = np.unique(np.concatenate([mesh.boundary_nodes(t) for t in
                                     ("x_min", "x_max", "y_min", "y_max")]))
    pin = wall[:1]
    sysm = assemble_blocks(mesh, 3, Ke, Fe,
                           dirichlet=[(wall, 0, 0.0), (wall, 1, 0.0), (pin, 2, 0.0)])
    res = linalg.solve(sysm, linalg.SolverConfig(method="gmres",
                                                 preconditioner="block_jacobi",
                                                 block_size=3))
    assert res.status == "converged"
    full = deinterleave(sysm.expand(res.x), 3)
    assert np.abs(full).max() < 1e-9


def test_electroneutral_body_force_vanishes():
    # with sum_s z c = 0 pointwise, the Coulomb term drops out of the load
    mesh = build_uniform((1, 1), 2)
    n = mesh.n_eq
    x = mesh.coords
    base = FieldState(v=np.zeros((n, 2)), p=np.zeros(n), phi=np.zeros(n),
                      c=np.ones((n, 2)))
    charged = FieldState(v=np.zeros((n, 2)), p=np.zeros(n),
                         phi=1.0 + 3.0 * x[:, 0] - 2.0 * x[:, 1],
                         c=np.ones((n, 2)))
    groups = NondimGroups(Sc=1.0, kappa=2.0, Lambda=0.2)
    batch = ElementBatch(mesh)
    taus = _taus_for_batch(batch, base, 0.05, groups)
    _, Fe0 = ns_kernel(batch, base, taus, groups, 0.05, (1.0, -1.0, 0.0))
    _, Fe1 = ns_kernel(batch, charged, taus, groups, 0.05, (1.0, -1.0, 0.0))
    np.testing.assert_allclose(Fe1, Fe0, atol=1e-14)


def test_momentum_body_force_sign():
    # single positive species in a potential gradient: force along -grad(phi)
    mesh = build_uniform((1, 1), 2)
    n = mesh.n_eq
    x = mesh.coords
    st = FieldState(v=np.zeros((n, 2)), p=np.zeros(n), phi=x[:, 0].copy(),
                    c=np.ones((n, 1)))
    groups = NondimGroups(Sc=1.0, kappa=2.0, Lambda=0.5,
                          species=(Species(z=1.0),))
    batch = ElementBatch(mesh)
    taus = _taus_for_batch(batch, st, 0.05, groups)
    _, Fe = ns_kernel(batch, st, taus, groups, 0.05, (1.0, -1.0, 0.0))
    # load vector rows for v_x: - kappa/(2 Lambda^2) * rho_e * dphi/dx < 0
    fx = Fe[:, 0::3]
    assert fx.sum() < 0
    fy = Fe[:, 1::3]
    assert np.abs(fy).max() < 1e-14


# ----------------------------------------------------------------------
# transport kernels


def test_uniform_equilibrium_residual_vanishes():
    mesh = build_uniform((1, 1), 3)
    st = _state(mesh)
    groups = NondimGroups(Sc=1.0, kappa=0.5, Lambda=0.2)
    batch = ElementBatch(mesh)
    taus = _taus_for_batch(batch, st, 0.01, groups)
    Fe = pnp_residual(batch, st, taus, groups, 0.01, (1.5, -2.0, 0.5))
    assert np.abs(Fe).max() < 1e-14


def test_jacobian_matches_finite_differences():
    # analytic transport Jacobian vs forward differences of the residual
    mesh = build_uniform((1, 1), 2)
    st = _state(mesh, seed=11)
    groups = NondimGroups(Sc=2.0, kappa=0.5, Lambda=0.15,
                          species=(Species(1.0, 1.0), Species(-1.0, 0.7)))
    batch = ElementBatch(mesh)
    dt, beta = 0.02, (1.5, -2.0, 0.5)
    taus = _taus_for_batch(batch, st, dt, groups)
    nc = 3
    n = mesh.n_eq

    def residual_vec(u):
        fields = deinterleave(u, nc)
        st.phi = np.ascontiguousarray(fields[:, 0])
        st.c = np.ascontiguousarray(fields[:, 1:])
        Fe = pnp_residual(batch, st, taus, groups, dt, beta)
        sysm = assemble_blocks(mesh, nc, np.zeros((len(Fe), 3 * 4, 3 * 4)), Fe)
        return sysm.b.copy()

    u0 = np.empty((n, nc))
    u0[:, 0] = st.phi
    u0[:, 1:] = st.c
    u0 = u0.ravel()

    Ke = pnp_jacobian(batch, st, taus, groups, dt, beta)
    sysm = assemble_blocks(mesh, nc, Ke, np.zeros((len(Ke), 3 * 4)))
    J = sysm.A.toarray()

    eps = 1e-7
    f0 = residual_vec(u0)
    red_cols = J.shape[1]
    J_fd = np.zeros_like(J)
    tb = mesh.t_block(nc).toarray()
    for j in range(red_cols):
        du = tb[:, j] * eps
        J_fd[:, j] = (residual_vec(u0 + du) - f0) / eps
    rel = np.linalg.norm(J - J_fd) / np.linalg.norm(J)
    assert rel < 1e-6


def test_species_couple_only_through_potential():
    # d R_{c^1} / d c^2 must vanish: check Jacobian block sparsity
    mesh = build_uniform((1, 1), 1)
    st = _state(mesh, seed=3)
    groups = NondimGroups(Sc=1.0, kappa=0.5, Lambda=0.2)
    batch = ElementBatch(mesh)
    taus = _taus_for_batch(batch, st, 0.02, groups)
    Ke = pnp_jacobian(batch, st, taus, groups, 0.02, (1.5, -2.0, 0.5))
    m = 4
    nc = 3
    K = Ke.reshape(len(Ke), m, nc, m, nc)
    np.testing.assert_allclose(K[:, :, 1, :, 2], 0.0, atol=1e-15)
    np.testing.assert_allclose(K[:, :, 2, :, 1], 0.0, atol=1e-15)


# ----------------------------------------------------------------------
# derived quantities


def test_wall_flux_of_uniform_migration():
    # phi = -E y, c = 1 for z = +-1: net wall flux is 2E
    mesh = build_uniform((1, 1), 3)
    n = mesh.n_eq
    E = 0.75
    st = FieldState(v=np.zeros((n, 2)), p=np.zeros(n),
                    phi=-E * mesh.coords[:, 1], c=np.ones((n, 2)))
    groups = NondimGroups(Sc=1.0, kappa=0.5, Lambda=0.1)
    js, net = boundary_flux(mesh, st, groups, "y_max")
    assert js[0] == pytest.approx(E, rel=1e-12)
    assert js[1] == pytest.approx(-E, rel=1e-12)
    assert net == pytest.approx(2.0 * E, rel=1e-12)


def test_wall_flux_rejects_unknown_tag():
    mesh = build_uniform((1, 1), 1)
    st = _state(mesh)
    groups = NondimGroups(Sc=1.0, kappa=0.5, Lambda=0.1)
    with pytest.raises(ValueError):
        boundary_flux(mesh, st, groups, "z_min")


def test_divergence_norm():
    mesh = build_uniform((1, 1), 4)
    x = mesh.coords
    # v = (x, -y) is divergence free; v = (x, y) has div = 2
    v_free = np.stack([x[:, 0], -x[:, 1]], axis=1)
    v_src = np.stack([x[:, 0], x[:, 1]], axis=1)
    assert divergence_norm(mesh, v_free) < 1e-13
    assert divergence_norm(mesh, v_src) == pytest.approx(2.0, rel=1e-12)


# ----------------------------------------------------------------------
# state bookkeeping


def test_state_rotation_and_extrapolation():
    mesh = build_uniform((1, 1), 1)
    n = mesh.n_eq
    st = FieldState(v=np.ones((n, 2)), p=np.zeros(n), phi=np.zeros(n),
                    c=np.ones((n, 2)))
    st.v_k = np.full((n, 2), 2.0)
    st.v_km1 = np.full((n, 2), 0.5)
    vt = st.extrapolate(order=2)
    np.testing.assert_allclose(vt, 3.5)
    vt1 = st.extrapolate(order=1)
    np.testing.assert_allclose(vt1, 2.0)

    st.v = np.full((n, 2), 7.0)
    st.c = np.full((n, 2), 4.0)
    st.rotate()
    np.testing.assert_allclose(st.v_k, 7.0)
    np.testing.assert_allclose(st.v_km1, 2.0)
    np.testing.assert_allclose(st.c_k, 4.0)


def test_state_validation_rejects_nan():
    mesh = build_uniform((1, 1), 1)
    n = mesh.n_eq
    st = _state(mesh)
    st.v[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        st.validate()
