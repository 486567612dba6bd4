"""Equilibrium double-layer case versus an independent 1-D oracle.

The oracle solves the steady Poisson-Boltzmann problem on a fine uniform
finite-difference grid: with zero species flux the concentrations close
algebraically as c_s = A_s exp(-z_s phi) with A_s fixed by unit mass, and
the potential satisfies -2 Lambda^2 phi'' = sum_s z_s c_s with Dirichlet
ends.  Newton on phi uses a banded Jacobian plus a rank-one Woodbury
correction per species (the mass normalisation couples every node).  The
discretisation, solver, and nonlinear closure all differ from the
transport code under test.
"""

import numpy as np
import pytest
from scipy.linalg import solve_banded

from ekflow.cases.edl1d import layer_thickness, run_edl_1d
from ekflow.femcore import integrate

ZVEC = np.array([1.0, -1.0])


def pb_oracle(lam, delta_phi, n=4001, tol=1e-10):
    """Return (y, phi, c) for the two-species Poisson-Boltzmann wall problem."""
    y = np.linspace(0.0, 1.0, n)
    h = y[1] - y[0]
    w = np.full(n, h)
    w[0] = w[-1] = h / 2.0

    def closure(phi):
        e = np.exp(-ZVEC[None, :] * phi[:, None])
        return e / (w @ e)

    phi = delta_phi * y
    for _ in range(60):
        c = closure(phi)
        resid = np.empty(n)
        resid[1:-1] = (-2.0 * lam**2 * (phi[:-2] - 2.0 * phi[1:-1] + phi[2:]) / h**2
                       - c[1:-1] @ ZVEC)
        resid[0] = phi[0]
        resid[-1] = phi[-1] - delta_phi
        if np.linalg.norm(resid, np.inf) < tol:
            break

        # Banded part: FD Laplacian rows plus the local d(rho)/d(phi) diagonal,
        # identity rows at the ends.
        band = np.zeros((3, n))
        band[0, 2:] = -2.0 * lam**2 / h**2
        band[1, 1:-1] = 4.0 * lam**2 / h**2 + (c[1:-1] * ZVEC**2).sum(axis=1)
        band[2, :-2] = -2.0 * lam**2 / h**2
        band[1, 0] = band[1, -1] = 1.0
        band[0, 1] = band[2, -2] = 0.0

        # Rank-one corrections J = B - U V^T from the normalisation integrals.
        U = c * ZVEC[None, :] ** 2
        U[0] = U[-1] = 0.0
        V = w[:, None] * c

        rhs = np.column_stack([resid, U])
        sol = solve_banded((1, 1), band, rhs)
        y0, Y = sol[:, 0], sol[:, 1:]
        S = np.eye(2) - V.T @ Y
        delta = y0 + Y @ np.linalg.solve(S, V.T @ y0)
        phi = phi - delta
    else:  # pragma: no cover
        raise AssertionError("oracle Newton did not converge")
    return y, phi, closure(phi)


def interp_rel_l2(y_to, y_from, f_from, f_to):
    ref = np.interp(y_to, y_from, f_from)
    return np.linalg.norm(f_to - ref) / np.linalg.norm(ref)


@pytest.fixture(scope="module")
def fem_005():
    return run_edl_1d(0.05, 1.0)


@pytest.fixture(scope="module")
def fem_0025():
    return run_edl_1d(0.025, 1.0)


@pytest.fixture(scope="module")
def oracle_005():
    return pb_oracle(0.05, 1.0)


@pytest.fixture(scope="module")
def oracle_0025():
    return pb_oracle(0.025, 1.0)


def test_oracle_grid_independent(oracle_005):
    y4, phi4, c4 = oracle_005
    y2, phi2, c2 = pb_oracle(0.05, 1.0, n=2001)
    assert np.max(np.abs(np.interp(y2, y4, phi4) - phi2)) < 2e-6
    for s in range(2):
        assert np.max(np.abs(np.interp(y2, y4, c4[:, s]) - c2[:, s])) < 1e-5


def test_oracle_mass_and_ends(oracle_005):
    y, phi, c = oracle_005
    assert phi[0] == pytest.approx(0.0, abs=1e-12)
    assert phi[-1] == pytest.approx(1.0, abs=1e-12)
    for s in range(2):
        assert np.trapezoid(c[:, s], y) == pytest.approx(1.0, abs=1e-10)


def test_matches_oracle_at_reference_bias(fem_005, oracle_005):
    yo, phio, co = oracle_005
    out = fem_005
    assert interp_rel_l2(out["y"], yo, phio, out["phi"]) < 0.01
    assert interp_rel_l2(out["y"], yo, co[:, 0], out["c_plus"]) < 0.01
    assert interp_rel_l2(out["y"], yo, co[:, 1], out["c_minus"]) < 0.01


def test_zero_bias_stays_uniform():
    out = run_edl_1d(0.05, 0.0)
    assert np.max(np.abs(out["phi"])) < 1e-10
    assert np.max(np.abs(out["c_plus"] - 1.0)) < 1e-10
    assert np.max(np.abs(out["c_minus"] - 1.0)) < 1e-10
    assert out["diagnostics"]["pseudo_steps"] <= 3


def test_thickness_halves_with_debye_length(fem_005, fem_0025,
                                            oracle_005, oracle_0025):
    th_oracle = {}
    th_fem = {}
    for lam, (yo, _, co), out in ((0.05, oracle_005, fem_005),
                                  (0.025, oracle_0025, fem_0025)):
        th_oracle[lam] = layer_thickness(yo, co[:, 0])
        th_fem[lam] = layer_thickness(out["y"], out["c_plus"])
    ratio_oracle = th_oracle[0.05] / th_oracle[0.025]
    assert 1.9 < ratio_oracle < 2.1
    # The profile grid quantises the crossing to the fine cell size (1/128).
    for lam in (0.05, 0.025):
        assert abs(th_fem[lam] - th_oracle[lam]) < 2.0 / 128.0
    ratio_fem = th_fem[0.05] / th_fem[0.025]
    assert 1.7 < ratio_fem < 2.3


def test_counterion_mirror_symmetry(fem_005):
    out = fem_005
    y = out["y"]
    # Mesh and data are symmetric under y -> 1 - y with species swap.
    cm_mirror = np.interp(1.0 - y, y, out["c_minus"])
    assert np.max(np.abs(out["c_plus"] - cm_mirror)) < 1e-6


def test_species_mass_conserved(fem_005):
    # Zero-flux walls keep the weak form mass-neutral; the residue left by
    # the Newton increment tolerance (1e-8) is the only drift source.
    mesh = fem_005["mesh"]
    state = fem_005["state"]
    for s in range(2):
        assert integrate(mesh, state.c[:, s]) == pytest.approx(1.0, abs=1e-7)
