"""Time integration: BDF2 with BDF1 startup, the flow/transport block
iteration, the Newton driver for the transport block, and the pseudo-time
equilibration used to develop double layers before coupled runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import linalg
from .femcore import (
    ElementBatch,
    assemble_blocks,
    deinterleave,
    make_conforming,
    reassemble_rhs,
)
from .physics import (
    FieldState,
    Forcing,
    NondimGroups,
    _taus_for_batch,
    ns_kernel,
    pnp_jacobian,
    pnp_residual,
)

__all__ = [
    "TimeScheme",
    "NewtonConfig",
    "BlockConfig",
    "StepContext",
    "StepFailure",
    "bdf_coefficients",
    "extrapolate_velocity",
    "newton_solve",
    "advance_step",
    "equilibrate_pnp",
    "perturb_concentrations",
]


def bdf_coefficients(order: int) -> Tuple[float, float, float]:
    """Backward-difference weights: (b0 u^{k+1} + b1 u^k + b2 u^{k-1})/dt."""
    if order == 1:
        return (1.0, -1.0, 0.0)
    if order == 2:
        return (1.5, -2.0, 0.5)
    raise ValueError(f"unsupported BDF order {order}")


def extrapolate_velocity(v_k, v_km1):
    """Second-order extrapolated advecting velocity 2 v^k - v^{k-1}."""
    return 2.0 * np.asarray(v_k) - np.asarray(v_km1)


@dataclass
class TimeScheme:
    """Step size and BDF bookkeeping; step 1 runs BDF1, later steps BDF2."""

    dt: float
    k: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def order(self):
        return 1 if self.k == 0 else 2

    @property
    def beta(self):
        return bdf_coefficients(self.order)


@dataclass
class NewtonConfig:
    tol: float = 1e-8
    max_iters: int = 20
    solver: linalg.SolverConfig = field(default_factory=lambda: linalg.SolverConfig(
        method="bicgstab", preconditioner="block_jacobi", rtol=1e-8))

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("Newton tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class BlockConfig:
    max_iters: int = 2
    criterion: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("at least one block iteration required")


class StepFailure(RuntimeError):
    """A solve inside a time step failed; carries partial diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def newton_solve(system_builder: Callable, u0: np.ndarray, config: NewtonConfig):
    """Damped-free Newton iteration: solve A dU = -F until ||dU|| <= tol.

    system_builder(u) returns anything linalg.solve accepts, assembled so
    that the right-hand side is already -F(u).  Returns (u, iterations,
    status, delta_history).
    """
    u = np.asarray(u0, dtype=float).copy()
    history = []
    for it in range(1, config.max_iters + 1):
        system = system_builder(u)
        res = linalg.solve(system, config.solver)
        if res.status not in ("converged",):
            raise StepFailure(
                f"inner linear solve failed ({res.status}, residual {res.final_residual:.3e})",
                {"newton_iteration": it})
        u = u + res.x
        dn = float(np.linalg.norm(res.x))
        history.append(dn)
        if dn <= config.tol:
            return u, it, "converged", history
    return u, config.max_iters, "nonconverged", history


def _apply_nodal_bc(mesh, arrays, bc_list):
    """Write Dirichlet values into full nodal arrays (comp -> target array)."""
    for eq_ids, comp, values in bc_list:
        arrays[comp][np.asarray(eq_ids, dtype=np.int64)] = values


@dataclass
class StepContext:
    """Everything advance_step needs besides the state itself.

    ns_bc(t) and pnp_bc(t) return assemble-style Dirichlet triples
    (eq_ids, comp, values); NS components are (v_1..v_dim, p), transport
    components are (phi, c^1..c^S).  pnp_only suppresses the flow solve for
    pure transport problems.
    """

    mesh: object
    groups: NondimGroups
    ns_bc: Callable[[float], list] = lambda t: []
    pnp_bc: Callable[[float], list] = lambda t: []
    forcing: Optional[Forcing] = None
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    block: BlockConfig = field(default_factory=BlockConfig)
    ns_solver: linalg.SolverConfig = field(default_factory=lambda: linalg.SolverConfig(
        method="bicgstab", preconditioner="block_jacobi",
        atol=1e-10, rtol=1e-8, max_iters=2000))
    pnp_only: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        dim = self.mesh.dim
        nc_ns = dim + 1
        nc_pnp = 1 + self.groups.n_species
        if self.ns_solver.preconditioner == "block_jacobi":
            self.ns_solver.block_size = nc_ns
        if self.newton.solver.preconditioner == "block_jacobi":
            self.newton.solver.block_size = nc_pnp

    def batch(self) -> ElementBatch:
        """Quadrature batch for the context mesh, built once and reused."""
        b = self._cache.get("batch")
        if b is None or b.mesh is not self.mesh:
            b = ElementBatch(self.mesh)
            self._cache["batch"] = b
        return b

    def reset_solver_cache(self):
        """Drop lagged preconditioner factors (the mesh batch is kept).

        Called at checkpoint boundaries: a restarted run starts with no
        factors, so the uninterrupted run must drop its own at the same
        points for the two paths to replay identical arithmetic.
        """
        for key in [k for k in self._cache if k.endswith("_pc")]:
            del self._cache[key]


def _lagged_solve(ctx: StepContext, key: str, system, config, x0=None):
    """Krylov solve that reuses an expensive preconditioner across systems.

    Cheap preconditioners are rebuilt per solve as usual.  An ILU(0)
    factorization is kept under `key` and reused while it stays effective;
    once the iteration count degrades past 4x the count measured right
    after the build (plus slack), or the solve fails, the factors are
    rebuilt from the current matrix and the solve repeated.  Convergence
    always tests the true residual of the current system, so a stale
    factorization costs iterations, never accuracy.
    """
    if config.preconditioner != "ilu0":
        return linalg.solve(system, config, x0=x0)
    cached = ctx._cache.get(key)
    if cached is not None:
        M, baseline = cached
        res = linalg.solve(system, config, x0=x0, preconditioner=M)
        if res.converged and res.iterations <= 4 * baseline + 10:
            return res
    M = linalg.make_preconditioner(system.A, config)
    res = linalg.solve(system, config, x0=x0, preconditioner=M)
    ctx._cache[key] = (M, max(res.iterations, 1))
    return res


def _solve_ns(ctx: StepContext, state: FieldState, taus, dt, beta, t, diagnostics,
              reuse=None):
    """Assemble and solve the flow system; returns it for within-step reuse.

    The matrix depends only on the frozen advecting velocity and taus, so a
    re-solve after a transport update passes the previous system back via
    `reuse` and only the load vector is rebuilt.
    """
    mesh = ctx.mesh
    dim = mesh.dim
    nc = dim + 1
    batch = ctx.batch()
    if reuse is None:
        Ke, Fe = ns_kernel(batch, state, taus, ctx.groups, dt, beta, ctx.forcing, t)
        if not (np.all(np.isfinite(Ke)) and np.all(np.isfinite(Fe))):
            raise StepFailure("non-finite flow assembly", diagnostics)
        system = assemble_blocks(mesh, nc, Ke, Fe, dirichlet=ctx.ns_bc(t))
    else:
        _, Fe = ns_kernel(batch, state, taus, ctx.groups, dt, beta, ctx.forcing, t,
                          rhs_only=True)
        if not np.all(np.isfinite(Fe)):
            raise StepFailure("non-finite flow assembly", diagnostics)
        system = reassemble_rhs(reuse, Fe)
    x0_full = np.empty((mesh.n_eq, nc))
    x0_full[:, :dim] = state.v
    x0_full[:, dim] = state.p
    res = _lagged_solve(ctx, "ns_pc", system, ctx.ns_solver,
                        x0=system.reduce(x0_full.ravel()))
    if res.status != "converged":
        raise StepFailure(
            f"flow solve failed ({res.status}, residual {res.final_residual:.3e})",
            diagnostics)
    full = deinterleave(system.expand(res.x), nc)
    state.v = np.ascontiguousarray(full[:, :dim])
    state.p = np.ascontiguousarray(full[:, dim])
    diagnostics.setdefault("ns_iterations", []).append(res.iterations)
    return system


def _solve_pnp(ctx: StepContext, state: FieldState, taus, dt, beta, t, diagnostics):
    mesh = ctx.mesh
    S = ctx.groups.n_species
    nc = 1 + S
    batch = ctx.batch()

    # Impose boundary values on the state, then iterate on increments with
    # homogeneous Dirichlet rows.
    bc = ctx.pnp_bc(t)
    arrays = {0: state.phi}
    for s in range(S):
        arrays[1 + s] = state.c[:, s]
    _apply_nodal_bc(mesh, arrays, bc)
    state.phi = make_conforming(mesh, state.phi)
    state.c = make_conforming(mesh, state.c)
    bc_zero = [(eq_ids, comp, 0.0) for eq_ids, comp, _ in bc]

    def residual_elements(u):
        fields = deinterleave(u, nc)
        state.phi = np.ascontiguousarray(fields[:, 0])
        state.c = np.ascontiguousarray(fields[:, 1:])
        Fe = pnp_residual(batch, state, taus, ctx.groups, dt, beta, ctx.forcing, t)
        if not np.all(np.isfinite(Fe)):
            raise StepFailure("non-finite transport assembly", diagnostics)
        return Fe

    def build(Fe):
        Ke = pnp_jacobian(batch, state, taus, ctx.groups, dt, beta, ctx.forcing, t)
        if not np.all(np.isfinite(Ke)):
            raise StepFailure("non-finite transport assembly", diagnostics)
        return assemble_blocks(mesh, nc, Ke, -Fe, dirichlet=bc_zero)

    u0 = np.empty((mesh.n_eq, nc))
    u0[:, 0] = state.phi
    u0[:, 1:] = state.c
    u0 = u0.ravel()

    # newton_solve works on the full interleaved vector; the inner solve is
    # reduced, so expand increments back to full before updating.
    u = u0.copy()
    status = "nonconverged"
    iters = 0
    system = None
    final_residual_known = False
    for it in range(1, ctx.newton.max_iters + 1):
        Fe = residual_elements(u)
        if system is not None:
            # A residual already below the linear solver's absolute
            # tolerance makes the solve return a zero increment; declare
            # that outcome without rebuilding the Jacobian.
            probe = reassemble_rhs(system, -Fe)
            bn = float(np.linalg.norm(probe.b))
            if bn <= ctx.newton.solver.atol:
                diagnostics.setdefault("newton_increments", []).append(0.0)
                diagnostics["pnp_final_residual"] = bn
                final_residual_known = True
                dn = 0.0
                iters = it
                status = "converged"
                break
        system = build(Fe)
        res = _lagged_solve(ctx, "pnp_pc", system, ctx.newton.solver)
        if res.status != "converged":
            raise StepFailure(
                f"transport linear solve failed ({res.status}, "
                f"residual {res.final_residual:.3e})", diagnostics)
        delta = system.expand(res.x)
        u = u + delta
        dn = float(np.linalg.norm(res.x))
        diagnostics.setdefault("newton_increments", []).append(dn)
        iters = it
        if dn <= ctx.newton.tol:
            status = "converged"
            break
    if not final_residual_known:
        # Exit came through the increment test; measure the residual at the
        # accepted iterate so conservation claims have an assembled number.
        Fe = residual_elements(u)
        diagnostics["pnp_final_residual"] = float(
            np.linalg.norm(reassemble_rhs(system, -Fe).b))
    fields = deinterleave(u, nc)
    state.phi = np.ascontiguousarray(fields[:, 0])
    state.c = np.ascontiguousarray(fields[:, 1:])
    diagnostics.setdefault("newton_iterations", []).append(iters)
    if status != "converged":
        raise StepFailure(
            f"Newton stalled after {iters} iterations (last |dU| = {dn:.3e})",
            diagnostics)


def advance_step(ctx: StepContext, state: FieldState, scheme: TimeScheme):
    """One time step of the block-iterated coupled system.

    Per block iteration: (1) linear flow solve using the newest charge
    density and potential, (2) transport Newton solve using the frozen
    extrapolated velocity.  Levels rotate only after the step completes.
    Returns a diagnostics dict.
    """
    beta = bdf_coefficients(scheme.order)
    t_new = (scheme.k + 1) * scheme.dt
    diagnostics = {"step": scheme.k + 1, "t": t_new, "blocks": 0}

    state.extrapolate(scheme.order)
    taus = _taus_for_batch(ctx.batch(), state, scheme.dt, ctx.groups)

    # Transport initial guess: previous step's values.
    state.c = state.c_k.copy()

    prev = None
    ns_system = None
    for blk in range(1, ctx.block.max_iters + 1):
        diagnostics["blocks"] = blk
        if not ctx.pnp_only:
            ns_system = _solve_ns(ctx, state, taus, scheme.dt, beta, t_new,
                                  diagnostics, reuse=ns_system)
        # Transport advects with the frozen extrapolated velocity, so its
        # data does not change after the first block iteration: re-solving
        # would start Newton at its own converged root and return the same
        # fields.  The flow re-solve still picks up the updated charge.
        if blk == 1:
            _solve_pnp(ctx, state, taus, scheme.dt, beta, t_new, diagnostics)
        cur = np.concatenate([state.v.ravel(), state.phi, state.c.ravel()])
        if prev is not None:
            denom = max(float(np.linalg.norm(cur)), 1e-30)
            change = float(np.linalg.norm(cur - prev)) / denom
            diagnostics["block_change"] = change
            if change < ctx.block.criterion:
                break
        prev = cur

    for a in (state.v, state.p, state.phi, state.c):
        if not np.all(np.isfinite(a)):
            raise StepFailure("non-finite state after step", diagnostics)
    state.rotate()
    scheme.k += 1
    return diagnostics


def equilibrate_pnp(ctx: StepContext, state: FieldState, dt0: float,
                    steady_tol: float = 1e-7, max_steps: int = 2000):
    """Develop the transport fields to steady state with the flow frozen.

    Pseudo-time BDF1 stepping of the transport block only; the step grows
    twofold after each successful solve (capped at 100 dt0) and halves on
    failure.  Steadiness criterion: ||c^{k+1} - c^k|| / dt < steady_tol.
    """
    beta = bdf_coefficients(1)
    state.vtilde = np.zeros_like(state.v)
    dt = dt0
    diagnostics = {"pseudo_steps": 0}
    for step in range(1, max_steps + 1):
        taus = _taus_for_batch(ctx.batch(), state, dt, ctx.groups)
        saved_phi, saved_c = state.phi.copy(), state.c.copy()
        try:
            _solve_pnp(ctx, state, taus, dt, beta, 0.0, diagnostics)
        except StepFailure:
            state.phi, state.c = saved_phi, saved_c
            dt *= 0.5
            if dt < dt0 / 1024.0:
                raise
            continue
        change = float(np.linalg.norm(state.c - state.c_k)) / dt
        state.rotate()
        diagnostics["pseudo_steps"] = step
        diagnostics["rate"] = change
        if change < steady_tol:
            return diagnostics
        dt = min(2.0 * dt, 100.0 * dt0)
    raise StepFailure(
        f"transport equilibration did not reach steady state in {max_steps} steps "
        f"(rate {diagnostics.get('rate', float('nan')):.3e})", diagnostics)


def perturb_concentrations(state: FieldState, amplitude: float, seed: int,
                           mesh=None):
    """Multiply concentrations by (1 + amplitude * xi), xi ~ U[-1, 1] i.i.d.

    Deterministic for a fixed seed.  With a mesh given, hanging entries are
    re-interpolated afterwards so the field stays conforming.
    """
    if not 0.0 <= amplitude < 1.0:
        raise ValueError("amplitude must be in [0, 1)")
    rng = np.random.default_rng(seed)
    xi = rng.uniform(-1.0, 1.0, size=state.c.shape)
    state.c = state.c * (1.0 + amplitude * xi)
    if mesh is not None:
        state.c = make_conforming(mesh, state.c)
    state.c_k = state.c.copy()
    state.c_km1 = state.c.copy()
    return state
