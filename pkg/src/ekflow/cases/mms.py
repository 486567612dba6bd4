"""Manufactured-solution convergence study.

The closed-form fields below are divergence-free in velocity; forcing
functions for momentum, potential, and both species are derived
symbolically once and cached, then evaluated pointwise during assembly.
"""

import functools

import numpy as np
import sympy as sym

from .. import linalg
from ..femcore import l2_error, make_conforming
from ..mesh import build_uniform
from ..physics import FieldState, Forcing, NondimGroups, Species
from ..stepper import NewtonConfig, StepContext, TimeScheme, advance_step

_X, _Y, _T = sym.symbols("x y t")

_FIELDS = {
    "u": sym.cos(2 * _T) * sym.sin(2 * sym.pi * _X) * sym.cos(2 * sym.pi * _Y),
    "v": -sym.cos(2 * _T) * sym.cos(2 * sym.pi * _X) * sym.sin(2 * sym.pi * _Y),
    "p": sym.cos(2 * _T) * sym.sin(2 * sym.pi * _X) * sym.cos(2 * sym.pi * _Y),
    "phi": -sym.cos(2 * _T) * sym.cos(2 * sym.pi * _X) * sym.sin(2 * sym.pi * _Y),
    "c_plus": sym.cos(2 * _T) * sym.cos(2 * sym.pi * _X) * sym.sin(2 * sym.pi * _Y),
    "c_minus": sym.cos(2 * _T) * sym.sin(2 * sym.pi * _X) * sym.cos(2 * sym.pi * _Y),
}


def _wrap(expr):
    fn = sym.lambdify((_X, _Y, _T), expr, "numpy")
    memo = {}

    def call(pts, t):
        # Assembly asks for the same (points, time) several times per step
        # (block iterations, Newton iterations); cache the last evaluation.
        key = (float(t), len(pts), pts.ctypes.data,
               float(pts[0, 0]), float(pts[-1, 1]))
        if memo.get("key") == key:
            return memo["val"]
        out = fn(pts[:, 0], pts[:, 1], t)
        val = np.broadcast_to(np.asarray(out, dtype=float), (len(pts),)).copy()
        memo["key"], memo["val"] = key, val
        return val

    return call


@functools.lru_cache(maxsize=None)
def _derive(Sc, kappa, Lambda, species_key):
    """Forcing expressions from substituting the fields into the equations."""
    u, v, p, phi = (_FIELDS[k] for k in ("u", "v", "p", "phi"))
    cs = [_FIELDS["c_plus"], _FIELDS["c_minus"]]
    zD = list(species_key)
    rho_e = sum(z * c for (z, _), c in zip(zD, cs))

    def lap(f):
        return f.diff(_X, 2) + f.diff(_Y, 2)

    def mat(f):
        return f.diff(_T) + u * f.diff(_X) + v * f.diff(_Y)

    fu = (1 / Sc) * mat(u) + p.diff(_X) - lap(u) \
        + kappa / (2 * Lambda**2) * rho_e * phi.diff(_X)
    fv = (1 / Sc) * mat(v) + p.diff(_Y) - lap(v) \
        + kappa / (2 * Lambda**2) * rho_e * phi.diff(_Y)
    fphi = -2 * Lambda**2 * lap(phi) - rho_e
    fspecies = []
    for (z, D), c in zip(zD, cs):
        flux_x = D * (c.diff(_X) + z * c * phi.diff(_X))
        flux_y = D * (c.diff(_Y) + z * c * phi.diff(_Y))
        fspecies.append(mat(c) - flux_x.diff(_X) - flux_y.diff(_Y))

    return {
        "fu": _wrap(sym.simplify(fu)),
        "fv": _wrap(sym.simplify(fv)),
        "fphi": _wrap(sym.simplify(fphi)),
        "fs": [_wrap(sym.simplify(f)) for f in fspecies],
    }


class MmsProblem:
    """Exact fields, forcing, and boundary wiring on the unit square."""

    def __init__(self, groups: NondimGroups = None):
        if groups is None:
            groups = NondimGroups(Sc=1.0, kappa=1.0, Lambda=1.0)
        self.groups = groups
        self.exact = {name: _wrap(expr) for name, expr in _FIELDS.items()}
        key = tuple((sp.z, sp.D) for sp in groups.species)
        d = _derive(groups.Sc, groups.kappa, groups.Lambda, key)
        fu, fv = d["fu"], d["fv"]
        self.forcing = Forcing(
            momentum=lambda pts, t: np.stack([fu(pts, t), fv(pts, t)], axis=1),
            poisson=d["fphi"],
            species=list(d["fs"]))

    def exact_velocity(self, pts, t):
        return np.stack([self.exact["u"](pts, t), self.exact["v"](pts, t)], axis=1)

    def initial_state(self, mesh):
        pts = mesh.coords[_eq_rep_nodes(mesh)]
        st = FieldState(
            v=make_conforming(mesh, self.exact_velocity(pts, 0.0)),
            p=make_conforming(mesh, self.exact["p"](pts, 0.0)),
            phi=make_conforming(mesh, self.exact["phi"](pts, 0.0)),
            c=make_conforming(mesh, np.stack(
                [self.exact["c_plus"](pts, 0.0),
                 self.exact["c_minus"](pts, 0.0)], axis=1)))
        return st

    def contexts(self, mesh, newton=None, block=None, ns_solver=None):
        wall_nodes = np.unique(np.concatenate(
            [mesh.boundary_nodes(tag) for tag in
             ("x_min", "x_max", "y_min", "y_max")]))
        wall = mesh.node_eq[wall_nodes]
        wall, keep = np.unique(wall, return_index=True)
        pts = mesh.coords[wall_nodes[keep]]
        interior = np.setdiff1d(np.arange(mesh.n_eq), wall)
        pin = interior[:1] if len(interior) else wall[:1]
        pin_node = np.flatnonzero(mesh.node_eq == pin[0])[0]
        pin_pt = mesh.coords[pin_node:pin_node + 1]

        def ns_bc(t):
            return [
                (wall, 0, self.exact["u"](pts, t)),
                (wall, 1, self.exact["v"](pts, t)),
                (pin, 2, self.exact["p"](pin_pt, t)),
            ]

        def pnp_bc(t):
            return [
                (wall, 0, self.exact["phi"](pts, t)),
                (wall, 1, self.exact["c_plus"](pts, t)),
                (wall, 2, self.exact["c_minus"](pts, t)),
            ]

        kwargs = {}
        # The discrete flow system is a saddle problem; point-block Jacobi
        # stalls on it past ~1e4 unknowns while ILU(0) stays flat.  The
        # transport systems converge either way but take 3-4x fewer
        # iterations with ILU(0), and the stepper lags the factors.
        kwargs["newton"] = newton if newton is not None else NewtonConfig(
            solver=linalg.SolverConfig(method="bicgstab", preconditioner="ilu0"))
        if block is not None:
            kwargs["block"] = block
        kwargs["ns_solver"] = ns_solver if ns_solver is not None else \
            linalg.SolverConfig(method="bicgstab", preconditioner="ilu0")
        return StepContext(mesh=mesh, groups=self.groups, ns_bc=ns_bc,
                           pnp_bc=pnp_bc, forcing=self.forcing, **kwargs)


def _eq_rep_nodes(mesh):
    """One geometric node per equation id (first occurrence)."""
    rep = np.full(mesh.n_eq, -1, dtype=np.int64)
    seen = np.full(mesh.n_eq, False)
    for node, eq in enumerate(mesh.node_eq):
        if not seen[eq]:
            seen[eq] = True
            rep[eq] = node
    return rep


def run_single(level, dt, t_end, problem=None, config=None, progress=None):
    """Integrate to t_end on a uniform level mesh; returns the L2 errors."""
    if problem is None:
        problem = MmsProblem()
    mesh = build_uniform((1, 1), level)
    ctx = problem.contexts(
        mesh,
        newton=getattr(config, "newton", None),
        block=getattr(config, "block", None),
        ns_solver=getattr(config, "solver_ns", None))
    state = problem.initial_state(mesh)
    scheme = TimeScheme(dt=dt)
    steps = max(1, int(round(t_end / dt)))
    for k in range(steps):
        diag = advance_step(ctx, state, scheme)
        if progress is not None:
            progress(diag)
    t_fin = steps * dt

    ev = l2_error(mesh, state.v, problem.exact_velocity, t=t_fin)
    errors = {
        "velocity": float(np.sqrt(np.sum(np.square(ev)))),
        "pressure": l2_error(mesh, state.p, problem.exact["p"], t=t_fin),
        "potential": l2_error(mesh, state.phi, problem.exact["phi"], t=t_fin),
        "c_plus": l2_error(mesh, state.c[:, 0], problem.exact["c_plus"], t=t_fin),
        "c_minus": l2_error(mesh, state.c[:, 1], problem.exact["c_minus"], t=t_fin),
    }
    return errors


_FIELD_COLS = ("velocity", "pressure", "potential", "c_plus", "c_minus")


def _fit_slope(hs, errs):
    return float(-np.polyfit(np.log(hs), np.log(errs), 1)[0])


def run_spatial(levels, dt, t_end, problem=None, config=None, progress=None):
    """Error table over mesh levels at fixed dt; fitted slopes per field."""
    rows = []
    for level in levels:
        errors = run_single(level, dt, t_end, problem, config)
        h = 0.5 ** level
        rows.append((level, h, *[errors[f] for f in _FIELD_COLS]))
        if progress is not None:
            progress(level, errors)
    hs = np.array([r[1] for r in rows])
    slopes = {f: _fit_slope(1.0 / hs, [r[2 + i] for r in rows])
              for i, f in enumerate(_FIELD_COLS)}
    return rows, slopes


def run_temporal(dts, level, t_end, problem=None, config=None, progress=None):
    """Error table over dt at a fixed fine mesh, with floor-aware slopes.

    On a fixed mesh every field's error bottoms out at its spatial
    resolution floor, and which rungs sit above that floor differs per
    field; see temporal_orders for the fitting rule.
    """
    rows = []
    for dt in sorted(dts, reverse=True):
        errors = run_single(level, dt, t_end, problem, config)
        rows.append((dt, 0.5 ** level, *[errors[f] for f in _FIELD_COLS]))
        if progress is not None:
            progress(dt, errors)
    return rows, temporal_orders(rows)


def temporal_orders(rows, floor_factor=3.0, flat_ratio=0.6):
    """Per-field temporal slopes fitted only on rungs above the error floor.

    The error at the smallest step measures each field's spatial floor;
    rungs below floor_factor times it carry no usable temporal signal and
    are excluded from the fit.  Fields need two usable rungs for a slope
    (else None).  "flattened" reports whether the two smallest steps agree
    to within flat_ratio, i.e. the curve has stopped descending.
    """
    dts = np.array([r[0] for r in rows])
    if np.any(np.diff(dts) >= 0):
        raise ValueError("rows must be ordered from largest to smallest dt")
    out = {}
    for i, f in enumerate(_FIELD_COLS):
        errs = np.array([r[2 + i] for r in rows])
        floor = errs[-1]
        usable = errs > floor_factor * floor
        usable[-1] = False
        slope = None
        if np.count_nonzero(usable) >= 2:
            slope = _fit_slope(1.0 / dts[usable], errs[usable])
        out[f] = {
            "slope": slope,
            "points": int(np.count_nonzero(usable)),
            "floor": float(floor),
            "flattened": bool(errs[-1] > flat_ratio * errs[-2]),
        }
    return out


def _seeded_state(problem, mesh, t, dt):
    """Exact state at time t with history filled for a full-order BDF2 step."""
    pts = mesh.coords[_eq_rep_nodes(mesh)]

    def at(name, tt):
        return make_conforming(mesh, problem.exact[name](pts, tt))

    def vel(tt):
        return make_conforming(mesh, problem.exact_velocity(pts, tt))

    def conc(tt):
        return make_conforming(mesh, np.stack(
            [problem.exact["c_plus"](pts, tt),
             problem.exact["c_minus"](pts, tt)], axis=1))

    return FieldState(
        v=vel(t), p=at("p", t), phi=at("phi", t), c=conc(t),
        v_k=vel(t), v_km1=vel(t - dt),
        c_k=conc(t), c_km1=conc(t - dt))


def local_order_probe(level=6, dt=0.2, t0=0.2, problem=None, config=None):
    """Single-step truncation-order measurement on one mesh.

    Any end-state error against the exact fields is dominated by the
    spatial floor at desk resolutions, so instead compare discrete end
    states against each other: one step of size s versus two steps of s/2,
    both landing on the same time and mesh.  The spatial error cancels in
    the difference, leaving the one-step temporal error ~ C s^3; halving s
    should shrink that difference by ~8.  Returns {field: ratio}.

    t0 must be an integer multiple of dt/4 so every path starts on its own
    step grid with at least one step of history behind it.
    """
    if problem is None:
        problem = MmsProblem()
    mesh = build_uniform((1, 1), level)

    def end_state(h, n_steps):
        k0 = int(round(t0 / h))
        if abs(k0 * h - t0) > 1e-12 or k0 < 1:
            raise ValueError("t0 must be a positive multiple of dt/4")
        ctx = problem.contexts(
            mesh,
            newton=getattr(config, "newton", None),
            block=getattr(config, "block", None),
            ns_solver=getattr(config, "solver_ns", None))
        state = _seeded_state(problem, mesh, t0, h)
        scheme = TimeScheme(dt=h, k=k0)
        for _ in range(n_steps):
            advance_step(ctx, state, scheme)
        return state

    def norms(a, b):
        def zero(pts, t):
            return np.zeros(len(pts))

        dv = l2_error(mesh, a.v - b.v, lambda pts, t: np.zeros((len(pts), 2)),
                      t=0.0)
        return {
            "velocity": float(np.sqrt(np.sum(np.square(dv)))),
            "pressure": l2_error(mesh, a.p - b.p, zero, t=0.0),
            "potential": l2_error(mesh, a.phi - b.phi, zero, t=0.0),
            "c_plus": l2_error(mesh, a.c[:, 0] - b.c[:, 0], zero, t=0.0),
            "c_minus": l2_error(mesh, a.c[:, 1] - b.c[:, 1], zero, t=0.0),
        }

    d_coarse = norms(end_state(dt, 1), end_state(dt / 2, 2))
    d_fine = norms(end_state(dt / 2, 1), end_state(dt / 4, 2))
    return {f: d_coarse[f] / d_fine[f] for f in _FIELD_COLS}


def convergence_rows(rows):
    """Append a pairwise-order column per field (0 on the first row).

    The refinement ratio comes from column 1 (h) when it varies, else from
    column 0 (dt for the temporal study).
    """
    out = []
    for i, r in enumerate(rows):
        orders = []
        for j in range(len(_FIELD_COLS)):
            if i == 0:
                orders.append(0.0)
                continue
            prev = rows[i - 1]
            ratio = prev[1] / r[1] if prev[1] != r[1] else prev[0] / r[0]
            orders.append(float(np.log(prev[2 + j] / r[2 + j]) / np.log(ratio)))
        out.append((*r, *orders))
    return out
