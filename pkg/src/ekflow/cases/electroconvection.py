"""Electroconvection in a channel over an ion-selective bottom wall.

An 8x1 periodic channel holds a binary electrolyte between a reservoir top
(fixed potential and concentrations) and a cation-selective bottom wall
(fixed potential, fixed cation concentration, zero anion flux).  The
workflow develops the double layer with the flow frozen, perturbs the
concentrations by a seeded 1%, then integrates the coupled system while
recording the top-boundary current, x-averaged wall-normal profiles, and
field snapshots.  The bottom band is refined to resolve the double layer.
"""

import os

import numpy as np

from .. import io, linalg
from ..femcore import point_eval
from ..mesh import RefineRule, build_uniform, refine
from ..physics import FieldState, NondimGroups, Species, boundary_flux
from ..stepper import NewtonConfig, StepContext, equilibrate_pnp, \
    perturb_concentrations
from .driver import OutputSchedule, time_loop
from .edl1d import y_profile

__all__ = ["build_channel_mesh", "channel_groups", "channel_context",
           "initial_state", "count_vortices", "run_electroconvection"]


def build_channel_mesh(level_fine=9, level_coarse=6, band=0.1):
    """8x1 channel, periodic in x, refined below y = band."""
    mesh = build_uniform((8, 1), level_coarse, periodic=(True, False))
    rule = RefineRule.band(1, 0.0, band, level_fine, level_coarse)
    return refine(mesh, rule)


def channel_groups(Lambda=0.01, kappa=0.5, Sc=1000.0):
    return NondimGroups(Sc=Sc, kappa=kappa, Lambda=Lambda,
                        species=(Species(z=1.0, D=1.0), Species(z=-1.0, D=1.0)))


def channel_context(mesh, groups, delta_phi, newton=None, ns_solver=None,
                    pnp_only=False):
    """No-slip walls; reservoir top; cation-selective bottom.

    Transport components are (phi, c+, c-): the bottom wall pins phi and c+
    only, leaving the anion row natural (zero flux).
    """
    bot = np.unique(mesh.node_eq[mesh.boundary_nodes("y_min")])
    top = np.unique(mesh.node_eq[mesh.boundary_nodes("y_max")])
    walls = np.union1d(bot, top)
    interior = np.setdiff1d(np.arange(mesh.n_eq), walls)
    pin = interior[:1]

    def ns_bc(t):
        return [(walls, 0, 0.0), (walls, 1, 0.0), (pin, 2, 0.0)]

    def pnp_bc(t):
        return [
            (bot, 0, 0.0), (top, 0, float(delta_phi)),
            (bot, 1, 2.0), (top, 1, 1.0),
            (top, 2, 1.0),
        ]

    if newton is None:
        newton = NewtonConfig(solver=linalg.SolverConfig(
            method="bicgstab", preconditioner="ilu0"))
    if ns_solver is None:
        ns_solver = linalg.SolverConfig(method="bicgstab", preconditioner="ilu0")
    return StepContext(mesh=mesh, groups=groups, ns_bc=ns_bc, pnp_bc=pnp_bc,
                       newton=newton, ns_solver=ns_solver, pnp_only=pnp_only)


def initial_state(mesh, delta_phi):
    """Linear potential ramp; cations interpolate their wall values."""
    rep = np.zeros(mesh.n_eq, dtype=np.int64)
    rep[mesh.node_eq] = np.arange(len(mesh.node_eq))
    y = mesh.coords[rep, 1]
    n = mesh.n_eq
    c = np.empty((n, 2))
    c[:, 0] = 2.0 - y
    c[:, 1] = 1.0
    return FieldState(v=np.zeros((n, mesh.dim)), p=np.zeros(n),
                      phi=delta_phi * y, c=c)


def count_vortices(mesh, state: FieldState, height=0.5, samples=256):
    """Sign changes of the vertical velocity along the mid-height line.

    Counter-rotating cells alternate up- and downwelling, so each vortex
    contributes one sign change; periodicity makes the count even.  Samples
    below 1e-3 of the line maximum are treated as zero so a quiescent field
    counts zero vortices.
    """
    width = float(mesh.coords[:, 0].max())
    xs = (np.arange(samples) + 0.5) * (width / samples)
    pts = np.column_stack([xs, np.full(samples, height)])
    vy = point_eval(mesh, state.v, pts)[:, 1]
    vmax = float(np.max(np.abs(vy)))
    if vmax == 0.0:
        return 0
    s = np.sign(np.where(np.abs(vy) > 1e-3 * vmax, vy, 0.0))
    s = s[s != 0.0]
    if len(s) == 0:
        return 0
    closed = np.append(s, s[0])  # periodic in x
    return int(np.sum(closed[1:] != closed[:-1]))


def _charge_profiles(mesh, state):
    y, phi = y_profile(mesh, state.phi)
    _, cp = y_profile(mesh, state.c[:, 0])
    _, cm = y_profile(mesh, state.c[:, 1])
    return y, phi, cp, cm


def run_electroconvection(delta_phi=20.0, level_fine=9, level_coarse=6,
                          dt=1e-2, t_end=10.0, seed=0, amplitude=0.01,
                          Lambda=0.01, kappa=0.5, Sc=1000.0, band=0.1,
                          out_dir=None, out_every=50, avg_start=None,
                          newton=None, ns_solver=None, progress=None,
                          manifest=None):
    """Full workflow; returns traces, averaged profiles, and the final state."""
    mesh = build_channel_mesh(level_fine, level_coarse, band)
    groups = channel_groups(Lambda, kappa, Sc)
    state = initial_state(mesh, delta_phi)

    eq_ctx = channel_context(mesh, groups, delta_phi, newton=newton,
                             pnp_only=True)
    eq_diag = equilibrate_pnp(eq_ctx, state, dt)
    perturb_concentrations(state, amplitude, seed, mesh)

    ctx = channel_context(mesh, groups, delta_phi, newton=newton,
                          ns_solver=ns_solver)
    if avg_start is None:
        avg_start = 0.5 * t_end

    current_rows = []
    bottom_anion = []
    prof_sum = None
    prof_count = 0
    vtk_paths = []

    def record_current(t):
        js, net = boundary_flux(mesh, state, groups, "y_max")
        current_rows.append((t, float(js[0]), float(js[1]), net))
        jb, _ = boundary_flux(mesh, state, groups, "y_min")
        bottom_anion.append((t, float(jb[1])))

    def on_output(k, t, st):
        nonlocal prof_sum, prof_count
        if t >= avg_start:
            y, phi, cp, cm = _charge_profiles(mesh, st)
            if prof_sum is None:
                prof_sum = {"y": y, "phi": np.zeros_like(phi),
                            "cp": np.zeros_like(cp), "cm": np.zeros_like(cm)}
            prof_sum["phi"] += phi
            prof_sum["cp"] += cp
            prof_sum["cm"] += cm
            prof_count += 1
        if out_dir is not None:
            path = os.path.join(out_dir, f"fields_{k:06d}.vtk")
            io.write_vtk(mesh, st, path, groups)
            vtk_paths.append(path)
            if manifest is not None:
                manifest.add_output(path)

    record_current(0.0)
    schedule = OutputSchedule(
        every=out_every, on_output=on_output,
        checkpoint_path=(os.path.join(out_dir, "checkpoint.npz")
                         if out_dir is not None else None))

    def step_progress(diag):
        record_current(diag["t"])
        if progress is not None:
            progress(diag)

    time_loop(ctx, state, dt, t_end, schedule=schedule, manifest=manifest,
              progress=step_progress)

    if prof_sum is None:  # averaging window never reached (short run)
        y, phi, cp, cm = _charge_profiles(mesh, state)
        prof = {"y": y, "phi": phi, "cp": cp, "cm": cm}
    else:
        prof = {"y": prof_sum["y"], "phi": prof_sum["phi"] / prof_count,
                "cp": prof_sum["cp"] / prof_count,
                "cm": prof_sum["cm"] / prof_count}
    dphi_dy = np.gradient(prof["phi"], prof["y"])
    concentration = 0.5 * (prof["cp"] + prof["cm"])
    rho = prof["cp"] - prof["cm"]

    result = {
        "mesh": mesh, "state": state, "groups": groups,
        "current": np.array(current_rows),
        "bottom_anion_flux": np.array(bottom_anion),
        "profiles": {"y": prof["y"], "dphi_dy": dphi_dy,
                     "concentration": concentration, "charge_density": rho,
                     "c_plus": prof["cp"], "c_minus": prof["cm"]},
        "vortex_count": count_vortices(mesh, state),
        "equilibration": eq_diag,
    }
    if out_dir is not None:
        cur_path = os.path.join(out_dir, "current.csv")
        io.write_csv(cur_path, ("t", "j_plus", "j_minus", "net"), current_rows)
        prof_path = os.path.join(out_dir, "profiles.csv")
        io.write_csv(prof_path,
                     ("y", "dphi_dy", "concentration", "charge_density"),
                     np.column_stack([prof["y"], dphi_dy, concentration, rho]))
        result["outputs"] = [cur_path, prof_path] + vtk_paths
        if manifest is not None:
            manifest.add_output(cur_path)
            manifest.add_output(prof_path)
    return result
