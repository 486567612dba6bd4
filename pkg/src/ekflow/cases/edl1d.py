"""Developed double-layer benchmark.

Transport-only equilibration between two charged plates: potential held at
each wall, both species flux-free there, laterally periodic.  The data are
x-invariant so the steady solution is one-dimensional and can be checked
against a Poisson-Boltzmann profile; the mesh is a normal banded quadtree
(square cells cannot make a literal one-element-wide column) and profiles
are extracted by averaging nodes at equal height.
"""

import numpy as np

from .. import linalg
from ..mesh import RefineRule, build_uniform, refine
from ..physics import FieldState, NondimGroups, Species
from ..stepper import NewtonConfig, StepContext, equilibrate_pnp


def build_plate_mesh(level_fine, level_coarse, band=0.3):
    """Unit plate gap, periodic in x, fine bands hugging both walls."""
    if not 0.0 < band <= 0.5:
        raise ValueError("band must lie in (0, 0.5]")
    base = build_uniform((1, 1), level_coarse, periodic=(True, False))

    def near_walls(centroids, extents):
        y = centroids[:, 1]
        fine = (y < band) | (y > 1.0 - band)
        return np.where(fine, level_fine, level_coarse)

    return refine(base, RefineRule(near_walls, max_level=level_fine))


def plate_context(mesh, groups, delta_phi, newton=None):
    """Dirichlet potential at the walls, zero species flux (natural)."""
    bot = np.unique(mesh.node_eq[mesh.boundary_nodes("y_min")])
    top = np.unique(mesh.node_eq[mesh.boundary_nodes("y_max")])

    def pnp_bc(t):
        return [(bot, 0, 0.0), (top, 0, float(delta_phi))]

    if newton is None:
        # Transport alone has no saddle block, so the diagonal
        # preconditioner converges fine and skips the ILU factor build.
        newton = NewtonConfig(solver=linalg.SolverConfig(
            method="bicgstab", preconditioner="block_jacobi"))
    return StepContext(mesh=mesh, groups=groups, pnp_bc=pnp_bc,
                       newton=newton, pnp_only=True)


def initial_state(mesh, delta_phi):
    """Uniform unit concentrations, linear potential ramp, fluid at rest."""
    n = mesh.n_eq
    rep = np.zeros(n, dtype=np.int64)
    rep[mesh.node_eq] = np.arange(len(mesh.node_eq))
    y = mesh.coords[rep, 1]
    return FieldState(v=np.zeros((n, mesh.dim)), p=np.zeros(n),
                      phi=float(delta_phi) * y, c=np.ones((n, 2)))


def y_profile(mesh, nodal):
    """Average a nodal field over x at each distinct height."""
    vals = np.asarray(nodal, dtype=float)[mesh.node_eq]
    ys = mesh.coords[:, 1]
    yu, inv = np.unique(ys, return_inverse=True)
    counts = np.bincount(inv)
    return yu, np.bincount(inv, weights=vals) / counts


def run_edl_1d(Lambda, delta_phi, level_fine=7, level_coarse=5, band=0.3,
               dt0=1e-2, steady_tol=1e-7, newton=None, progress=None):
    """Equilibrate the double layer; returns profiles and the full state."""
    groups = NondimGroups(Sc=1.0, kappa=1.0, Lambda=float(Lambda),
                          species=(Species(z=1.0), Species(z=-1.0)))
    mesh = build_plate_mesh(level_fine, level_coarse, band)
    ctx = plate_context(mesh, groups, delta_phi, newton=newton)
    state = initial_state(mesh, delta_phi)
    diag = equilibrate_pnp(ctx, state, dt0, steady_tol=steady_tol)
    if progress is not None:
        progress(diag)

    y, phi = y_profile(mesh, state.phi)
    _, c_plus = y_profile(mesh, state.c[:, 0])
    _, c_minus = y_profile(mesh, state.c[:, 1])
    return {
        "y": y,
        "phi": phi,
        "c_plus": c_plus,
        "c_minus": c_minus,
        "mesh": mesh,
        "state": state,
        "groups": groups,
        "diagnostics": diag,
    }


def layer_thickness(y, c, bulk=None, frac=0.99, wall="min"):
    """Distance from a wall to the first point within frac of bulk.

    bulk defaults to the mid-gap value of the profile, which is where the
    plateau actually sits (a closed system shifts it off the initial value).
    """
    y = np.asarray(y, dtype=float)
    c = np.asarray(c, dtype=float)
    if bulk is None:
        bulk = float(c[len(c) // 2])
    if wall == "max":
        y = y[::-1]
        c = c[::-1]
        dist = y[0] - y
    else:
        dist = y - y[0]
    inside = np.abs(c - bulk) <= (1.0 - frac) * abs(bulk)
    hits = np.flatnonzero(inside)
    if len(hits) == 0:
        return float(dist[-1])
    return float(dist[hits[0]])
