"""Non-dimensional groups and stabilized element kernels.

The governing system couples incompressible flow, electric potential, and
ion transport in non-dimensional form:

    (1/Sc) (dv/dt + v.grad v) + grad p - lap v
        + kappa/(2 Lambda^2) (sum_s z^s c^s) grad phi = f_m
    div v = 0
    -2 Lambda^2 lap phi = sum_s z^s c^s + f_phi
    dc^s/dt + v.grad c^s = div(D^s (grad c^s + z^s c^s grad phi)) + f_s

Time discretization is BDF2 (BDF1 on the startup step) with the advecting
velocity extrapolated, vtilde = 2 v^k - v^{k-1}, so the flow block is linear
per step and the transport block's Newton solve sees a frozen velocity.

Fine scales are closed residual-based: v_f = -tau_m R_m, p_f = -tau_sol
R_sol, c_f^s = -tau_c R_c^s, with elementwise-constant taus.  For
multilinear elements every same-field second derivative vanishes inside an
element, so the strong residuals below carry no Laplacian terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "FARADAY",
    "GAS_CONSTANT",
    "VACUUM_PERMITTIVITY",
    "C_I",
    "Species",
    "NondimGroups",
    "DimensionalInputs",
    "FieldState",
    "TauSet",
    "Forcing",
    "compute_taus",
    "ns_kernel",
    "pnp_residual",
    "pnp_jacobian",
    "pnp_kernels",
    "boundary_flux",
    "divergence_norm",
]

FARADAY = 96485.33          # C/mol
GAS_CONSTANT = 8.314        # J/(K mol)
VACUUM_PERMITTIVITY = 8.854e-12  # F/m

# Stabilization constant; the companion constant quoted alongside it for the
# transport tau has no home in any implemented formula and is not used.
C_I = 6.0

# Sign of the residual stabilization in the solenoidality row:
# (q, div v) + _PSPG_SIGN * (grad q, tau_m R_m) = 0.  The plus sign gives the
# positive pressure-pressure stabilization block that equal-order elements
# need; with the minus the system is severely ill-conditioned and pressure
# convergence is lost (verified on the manufactured-solution study).
_PSPG_SIGN = +1.0


@dataclass(frozen=True)
class Species:
    """One ion species: valence and non-dimensional diffusivity."""

    z: float
    D: float = 1.0

    def __post_init__(self):
        if self.D <= 0:
            raise ValueError("species diffusivity must be positive")


@dataclass(frozen=True)
class NondimGroups:
    """Dimensionless parameter set for the coupled system.

    Sc: momentum-to-mass diffusivity ratio.
    kappa: electrohydrodynamic coupling constant.
    Lambda: Debye length over channel length.
    """

    Sc: float
    kappa: float
    Lambda: float
    species: Tuple[Species, ...] = (Species(1.0), Species(-1.0))

    def __post_init__(self):
        if self.Sc <= 0 or self.Lambda <= 0:
            raise ValueError("Sc and Lambda must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if not self.species:
            raise ValueError("at least one species required")

    @property
    def n_species(self):
        return len(self.species)

    @property
    def valences(self):
        return np.array([s.z for s in self.species])

    @property
    def diffusivities(self):
        return np.array([s.D for s in self.species])


@dataclass(frozen=True)
class DimensionalInputs:
    """Dimensional material and geometry inputs (SI units).

    Characteristic scales: length L_ch, velocity D_bar/L_ch, time
    L_ch^2/D_bar, pressure eta*D_bar/L_ch^2, potential RT/F, concentration
    the bulk ionic strength.
    """

    eta: float              # Pa s
    rho: float              # kg/m^3
    diffusivities: Tuple[float, ...]  # m^2/s per species
    eps_r: float            # relative permittivity
    T: float                # K
    L_ch: float             # m
    c_init: Tuple[float, ...]  # mol/m^3 per species
    valences: Tuple[float, ...]

    def __post_init__(self):
        if min(self.eta, self.rho, self.eps_r, self.T, self.L_ch) <= 0:
            raise ValueError("material inputs must be positive")
        if len(self.diffusivities) != len(self.c_init) or len(self.c_init) != len(self.valences):
            raise ValueError("per-species input lengths differ")
        if min(self.diffusivities) <= 0 or min(self.c_init) < 0:
            raise ValueError("diffusivities must be positive, concentrations non-negative")

    @property
    def ionic_strength(self):
        """I_b = 1/2 sum z^2 c over the initial bulk state (mol/m^3)."""
        z = np.asarray(self.valences)
        c = np.asarray(self.c_init)
        return 0.5 * float(np.sum(z * z * c))

    @property
    def permittivity(self):
        return self.eps_r * VACUUM_PERMITTIVITY

    @property
    def debye_length(self):
        ib = self.ionic_strength
        if ib <= 0:
            raise ValueError("zero ionic strength: screening length undefined")
        return float(np.sqrt(0.5 * self.permittivity * GAS_CONSTANT * self.T
                             / (FARADAY**2 * ib)))

    @property
    def thermal_voltage(self):
        return GAS_CONSTANT * self.T / FARADAY

    def nondimensionalize(self) -> NondimGroups:
        d_bar = float(np.mean(self.diffusivities))
        sc = self.eta / (self.rho * d_bar)
        kappa = (self.permittivity / (self.eta * d_bar)) * self.thermal_voltage**2
        lam = self.debye_length / self.L_ch
        species = tuple(Species(z=float(z), D=float(d / d_bar))
                        for z, d in zip(self.valences, self.diffusivities))
        return NondimGroups(Sc=sc, kappa=kappa, Lambda=lam, species=species)


@dataclass
class FieldState:
    """Nodal unknowns at the current step plus the two BDF history levels.

    All arrays are indexed by merged equation id; hanging entries must be
    kept consistent with their interpolation constraints by the caller.
    v, v_k, v_km1: (n_eq, dim); p, phi: (n_eq,); c, c_k, c_km1: (n_eq, N);
    vtilde: extrapolated advecting velocity for the current step.
    """

    v: np.ndarray
    p: np.ndarray
    phi: np.ndarray
    c: np.ndarray
    v_k: np.ndarray = None
    v_km1: np.ndarray = None
    c_k: np.ndarray = None
    c_km1: np.ndarray = None
    vtilde: np.ndarray = None

    def __post_init__(self):
        if self.v_k is None:
            self.v_k = self.v.copy()
        if self.v_km1 is None:
            self.v_km1 = self.v_k.copy()
        if self.c_k is None:
            self.c_k = self.c.copy()
        if self.c_km1 is None:
            self.c_km1 = self.c_k.copy()
        if self.vtilde is None:
            self.vtilde = self.v_k.copy()
        self.validate()

    def validate(self):
        n, dim = self.v.shape
        if self.p.shape != (n,) or self.phi.shape != (n,):
            raise ValueError("scalar field length mismatch")
        if self.c.ndim != 2 or self.c.shape[0] != n:
            raise ValueError("species array shape mismatch")
        for a in (self.v, self.p, self.phi, self.c, self.v_k, self.v_km1,
                  self.c_k, self.c_km1, self.vtilde):
            if not np.all(np.isfinite(a)):
                raise FloatingPointError("non-finite field state")

    def rotate(self):
        """Shift time levels after an accepted step: k -> k-1, k+1 -> k."""
        self.v_km1, self.v_k = self.v_k, self.v.copy()
        self.c_km1, self.c_k = self.c_k, self.c.copy()

    def extrapolate(self, order=2):
        """Set the advecting velocity: 2 v^k - v^{k-1} (or v^k on startup)."""
        if order == 1:
            self.vtilde = self.v_k.copy()
        else:
            self.vtilde = 2.0 * self.v_k - self.v_km1
        return self.vtilde


@dataclass
class TauSet:
    """Elementwise stabilization parameters."""

    tau_m: np.ndarray
    tau_sol: np.ndarray
    tau_c: np.ndarray  # shared by all species: the formula has no species term


def compute_taus(dt, groups: NondimGroups, dim, h=None, vsq=0.0, g=None) -> TauSet:
    """Stabilization parameters from the element metric G_ij = (2/h)^2 I.

    tau_m   = (4/dt^2 + v_i G_ij v_j + C_I (1/Re)^2 G_ij G_ij)^{-1/2}
    tau_sol = 1 / (tr(G) tau_m)
    tau_c   = (4/dt^2 + v_i G_ij v_j + C_I G_ij G_ij)^{-1/2}

    The momentum equation is parameterized by Sc, so the effective 1/Re in
    tau_m is Sc.  vsq is |advecting velocity|^2 per element; g may be passed
    directly (test hook, g=0 collapses tau_m to dt/2).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if g is None:
        if h is None:
            raise ValueError("need h or g")
        g = (2.0 / np.asarray(h, dtype=float)) ** 2
    g = np.asarray(g, dtype=float)
    vsq = np.asarray(vsq, dtype=float)
    base = 4.0 / dt**2 + g * vsq
    tau_m = 1.0 / np.sqrt(base + C_I * groups.Sc**2 * dim * g * g)
    tau_c = 1.0 / np.sqrt(base + C_I * dim * g * g)
    trg = dim * g
    tau_sol = np.where(trg > 0, 1.0 / np.where(trg > 0, trg, 1.0) / tau_m, 0.0)
    return TauSet(tau_m=np.broadcast_to(tau_m, np.shape(g)).copy(),
                  tau_sol=np.broadcast_to(tau_sol, np.shape(g)).copy(),
                  tau_c=np.broadcast_to(tau_c, np.shape(g)).copy())


@dataclass
class Forcing:
    """Manufactured-solution source terms; each callable takes (pts, t).

    momentum -> (P, dim); poisson -> (P,); species[s] -> (P,).
    The species sources also enter the strong transport residuals used by
    the fine-scale closures.
    """

    momentum: Optional[Callable] = None
    poisson: Optional[Callable] = None
    species: Optional[Sequence[Callable]] = None


def _taus_for_batch(batch, state, dt, groups):
    """Elementwise taus from the element-mean advecting velocity."""
    vt_corner = batch.gather(state.vtilde)          # (C, m, dim)
    vbar = vt_corner.mean(axis=1)                   # (C, dim)
    vsq = np.sum(vbar * vbar, axis=1)
    return compute_taus(dt, groups, batch.mesh.dim, h=batch.h, vsq=vsq)


def ns_kernel(batch, state: FieldState, taus: TauSet, groups: NondimGroups,
              dt, beta, forcing: Optional[Forcing] = None, t=None,
              rhs_only=False):
    """Element matrix/vector for the linear flow solve at t^{k+1}.

    Unknowns per node: (v_1..v_dim, p).  The advecting velocity is the
    extrapolated vtilde; charge density and potential come from the latest
    transport iterate and sit in the right-hand side.  The strong momentum
    residual entering the fine-scale terms is

        R_m = (1/Sc)(BDF(v)/dt + vtilde.grad v) + grad p
              + kappa/(2 Lambda^2) rho_e grad phi - f_m.

    Within one time step the matrix depends only on vtilde and the taus, so
    callers re-solving after a transport update can pass rhs_only=True and
    get (None, Fe) at a fraction of the cost.
    """
    mesh = batch.mesh
    dim = mesh.dim
    nc = dim + 1
    ref = batch.ref
    N = ref.N                       # (nq, m)
    dN = ref.dN                     # (nq, m, dim)
    m = N.shape[1]
    C = len(batch.detJ)
    b0, b1, b2 = beta
    inv_sc = 1.0 / groups.Sc

    gs = batch.gscale               # (C,)
    w = batch.detJ                  # (C,)

    vt = batch.at_qp(batch.gather(state.vtilde))        # (C, nq, dim)
    adv = np.einsum("cqd,qbd->cqb", vt, dN) * gs[:, None, None]  # vtilde.grad N_b

    # Known part of the momentum residual at quadrature points.
    rho_e = state.c @ groups.valences                   # (n_eq,)
    rq = batch.at_qp(batch.gather(rho_e))               # (C, nq)
    gphi = batch.grad_at_qp(batch.gather(state.phi))    # (C, nq, dim)
    v_hist = (b1 * batch.at_qp(batch.gather(state.v_k))
              + b2 * batch.at_qp(batch.gather(state.v_km1))) / dt
    r_known = inv_sc * v_hist + (groups.kappa / (2.0 * groups.Lambda**2)) \
        * rq[:, :, None] * gphi
    if forcing is not None and forcing.momentum is not None:
        f = forcing.momentum(batch.xq.reshape(-1, dim), t).reshape(C, -1, dim)
        r_known = r_known - f

    tau_m = taus.tau_m
    tau_sol = taus.tau_sol

    if rhs_only:
        Fe = np.zeros((C, m * nc))
        ii = np.arange(m)
        test_gal = N[None, :, :] + inv_sc * tau_m[:, None, None] * adv
        Fv = -np.einsum("cqa,cqi,c->cai", test_gal, r_known, w, optimize=True)
        Fp = -_PSPG_SIGN * np.einsum("qai,cqi,c->ca", dN, r_known,
                                     gs * tau_m * w, optimize=True)
        for i in range(dim):
            Fe[:, ii * nc + i] = Fv[:, :, i]
        Fe[:, ii * nc + dim] = Fp
        return None, Fe

    # Reference-space building blocks (physical gradients scale by gs).
    mass = np.einsum("qa,qb->ab", N, N)                     # (m, m)
    stiff = np.einsum("qad,qbd->ab", dN, dN)                # (m, m)
    conv = np.einsum("qa,cqb->cab", N, adv)                 # (C, m, m)
    supg_w = np.einsum("cqa,qb->cab", adv, N)               # (vtilde.grad N_a) N_b
    supg_ww = np.einsum("cqa,cqb->cab", adv, adv)
    grad_pair = np.einsum("qai,qbj->abij", dN, dN)          # for grad-div / Kpp

    Ke = np.zeros((C, m * nc, m * nc))
    Fe = np.zeros((C, m * nc))
    ii = np.arange(m)

    # Velocity-velocity: identical diagonal block for every component.
    kvv_iso = (inv_sc * b0 / dt) * mass[None, :, :] * w[:, None, None] \
        + inv_sc * conv * w[:, None, None] \
        + stiff[None, :, :] * (gs**2 * w)[:, None, None] \
        + inv_sc * tau_m[:, None, None] * (
            inv_sc * b0 / dt * supg_w + inv_sc * supg_ww) * w[:, None, None]
    # Grad-div: tau_sol (dN_a/dx_i, dN_b/dx_j).
    kvv_gd = np.einsum("abij,c->cabij", grad_pair, tau_sol * gs**2 * w)

    # Velocity row, pressure column: (N_a, dN_b/dx_i) + cross-stress part.
    kvp = (np.einsum("qa,qbi->abi", N, dN)[None, :, :, :]
           + inv_sc * tau_m[:, None, None, None] * np.einsum("cqa,qbi->cabi", adv, dN)) \
        * (gs * w)[:, None, None, None]

    # Solenoidality row: (N_a, dN_b/dx_j) + sign * tau_m grad N_a . R_m.
    kpv_div = np.einsum("qa,qbj->abj", N, dN)[None, :, :, :] * (gs * w)[:, None, None, None]
    kpv_vms = _PSPG_SIGN * tau_m[:, None, None, None] * inv_sc * (
        b0 / dt * np.einsum("qaj,qb->abj", dN, N)[None, :, :, :] * (gs * w)[:, None, None, None]
        + np.einsum("qaj,cqb->cabj", dN, adv) * (gs * w)[:, None, None, None])
    kpp = _PSPG_SIGN * np.einsum("abii,c->cab", grad_pair, tau_m * gs**2 * w)

    for i in range(dim):
        Ke[:, ii[:, None] * nc + i, ii[None, :] * nc + i] += kvv_iso
        for j in range(dim):
            Ke[:, ii[:, None] * nc + i, ii[None, :] * nc + j] += kvv_gd[:, :, :, i, j]
        Ke[:, ii[:, None] * nc + i, ii[None, :] * nc + dim] += kvp[:, :, :, i]
        Ke[:, ii[:, None] * nc + dim, ii[None, :] * nc + i] += \
            kpv_div[:, :, :, i] + kpv_vms[:, :, :, i]
    Ke[:, ii[:, None] * nc + dim, ii[None, :] * nc + dim] += kpp

    # Right-hand side: move known residual parts across.
    test_gal = N[None, :, :] + inv_sc * tau_m[:, None, None] * adv  # (C, nq, a)
    Fv = -np.einsum("cqa,cqi,c->cai", test_gal, r_known, w, optimize=True)
    Fp = -_PSPG_SIGN * np.einsum("qai,cqi,c->ca", dN, r_known,
                                 gs * tau_m * w, optimize=True)
    for i in range(dim):
        Fe[:, ii * nc + i] = Fv[:, :, i]
    Fe[:, ii * nc + dim] = Fp
    return Ke, Fe


def _pnp_qp_fields(batch, state, groups, dt, beta, forcing, t):
    """Shared quadrature-point data for the transport residual and Jacobian."""
    dim = batch.mesh.dim
    N = batch.ref.N
    dN = batch.ref.dN
    C = len(batch.detJ)
    b0, b1, b2 = beta

    vt = batch.at_qp(batch.gather(state.vtilde))
    adv = np.einsum("cqd,qbd->cqb", vt, dN) * batch.gscale[:, None, None]

    phi_c = batch.gather(state.phi)
    gphi = batch.grad_at_qp(phi_c)
    c_corner = batch.gather(state.c)                    # (C, m, S)
    c_q = batch.at_qp(c_corner)                         # (C, nq, S)
    gc = batch.grad_at_qp(c_corner)                     # (C, nq, dim, S)
    c_hist = (b1 * batch.at_qp(batch.gather(state.c_k))
              + b2 * batch.at_qp(batch.gather(state.c_km1))) / dt

    S = len(groups.species)
    fs = np.zeros((C, N.shape[0], S))
    fphi = np.zeros((C, N.shape[0]))
    if forcing is not None:
        pts = batch.xq.reshape(-1, dim)
        if forcing.species is not None:
            for s, fn in enumerate(forcing.species):
                fs[:, :, s] = fn(pts, t).reshape(C, -1)
        if forcing.poisson is not None:
            fphi = forcing.poisson(pts, t).reshape(C, -1)

    # Strong transport residual per species (Laplacian terms vanish for
    # multilinear elements): R_c = BDF(c)/dt + vtilde.grad c
    #                              - D z grad c . grad phi - f_s.
    zvec = groups.valences
    dvec = groups.diffusivities
    adv_c = np.einsum("cqd,cqds->cqs", vt, gc)
    gc_gphi = np.einsum("cqds,cqd->cqs", gc, gphi)
    r_c = (b0 / dt) * c_q + c_hist + adv_c - dvec[None, None, :] * zvec[None, None, :] * gc_gphi - fs
    return dict(adv=adv, adv_c=adv_c, gphi=gphi, c_q=c_q, gc=gc, c_hist=c_hist,
                fs=fs, fphi=fphi, r_c=r_c, zvec=zvec, dvec=dvec, b0=b0)


def pnp_residual(batch, state: FieldState, taus: TauSet, groups: NondimGroups,
                 dt, beta, forcing: Optional[Forcing] = None, t=None):
    """Nonlinear element residual for (phi, c^1..c^S) at the current iterate.

    Rows per node: potential first, then species.  The potential row is

        2 Lambda^2 (grad q, grad phi) - (q, sum z c) + (q, sum z tau_c R_c)
            - (q, f_phi)

    and each species row carries BDF2 time, advection, diffusion, migration,
    and the two fine-scale closures (grad q . vtilde, tau_c R_c) and
    -(grad q . grad phi, D z tau_c R_c).
    """
    q = _pnp_qp_fields(batch, state, groups, dt, beta, forcing, t)
    N = batch.ref.N
    dN = batch.ref.dN
    m = N.shape[1]
    S = len(groups.species)
    nc = 1 + S
    C = len(batch.detJ)
    w = batch.detJ
    gs = batch.gscale
    lam2 = 2.0 * groups.Lambda**2
    tau_c = taus.tau_c
    gphi = q["gphi"]
    adv = q["adv"]
    adv_c = q["adv_c"]
    Fe = np.zeros((C, m * nc))
    ii = np.arange(m)

    # Potential row.
    f_phi = lam2 * np.einsum("qad,cqd,c->ca", dN, gphi, gs * w, optimize=True)
    charge = np.einsum("cqs,s->cq", q["c_q"], q["zvec"])
    vms_charge = np.einsum("cqs,s->cq", q["r_c"], q["zvec"]) * tau_c[:, None]
    f_phi += np.einsum("qa,cq,c->ca", N, -charge + vms_charge - q["fphi"], w,
                       optimize=True)
    Fe[:, ii * nc] = f_phi

    # Species rows.
    for s, sp in enumerate(groups.species):
        gal = (q["b0"] / dt) * q["c_q"][:, :, s] + q["c_hist"][:, :, s] \
            + adv_c[:, :, s] - q["fs"][:, :, s]
        row = np.einsum("qa,cq,c->ca", N, gal, w, optimize=True)
        # Diffusion D (grad N_a, grad c) and migration D z (grad N_a, c grad phi).
        row += sp.D * np.einsum("qad,cqd,c->ca", dN, q["gc"][:, :, :, s], gs * w,
                                optimize=True)
        row += sp.D * sp.z * np.einsum("qad,cq,cqd,c->ca", dN, q["c_q"][:, :, s],
                                       gphi, gs * w, optimize=True)
        # Fine-scale closures.
        row += np.einsum("cqa,cq,c->ca", adv, q["r_c"][:, :, s], tau_c * w,
                         optimize=True)
        row -= sp.D * sp.z * np.einsum("qad,cqd,cq,c->ca", dN, gphi,
                                       q["r_c"][:, :, s], gs * tau_c * w,
                                       optimize=True)
        Fe[:, ii * nc + 1 + s] = row
    return Fe


def pnp_jacobian(batch, state: FieldState, taus: TauSet, groups: NondimGroups,
                 dt, beta, forcing: Optional[Forcing] = None, t=None):
    """Exact derivative of pnp_residual w.r.t. nodal (phi, c^1..c^S).

    taus are frozen (they depend only on the advecting velocity, which the
    transport solve does not own).  Species couple to each other only
    through the potential.
    """
    q = _pnp_qp_fields(batch, state, groups, dt, beta, forcing, t)
    N = batch.ref.N
    dN = batch.ref.dN
    m = N.shape[1]
    S = len(groups.species)
    nc = 1 + S
    C = len(batch.detJ)
    w = batch.detJ
    gs = batch.gscale
    lam2 = 2.0 * groups.Lambda**2
    tau_c = taus.tau_c
    gphi = q["gphi"]
    adv = q["adv"]
    Ke = np.zeros((C, m * nc, m * nc))
    ii = np.arange(m)

    stiff = np.einsum("qad,qbd->ab", dN, dN)
    mass = np.einsum("qa,qb->ab", N, N)
    dNdNT = np.einsum("qad,qbd->qab", dN, dN)           # per-point stiffness

    # dR_c/dc_b = b0 N_b/dt + vtilde.grad N_b - D z grad N_b . grad phi,
    # dR_c/dphi_b = -D z grad c . grad N_b; both (C, nq, m, S).
    # gN_gphi doubles as the test-side grad N_a . grad phi below.
    gN_gphi = np.einsum("qbd,cqd->cqb", dN, gphi) * gs[:, None, None]
    dRc_dc = ((q["b0"] / dt) * N[None, :, :] + adv)[:, :, :, None] \
        - (q["dvec"] * q["zvec"])[None, None, None, :] * gN_gphi[:, :, :, None]
    gNb_gc = np.einsum("qbd,cqds->cqbs", dN, q["gc"]) * gs[:, None, None, None]
    dRc_dphi = -(q["dvec"] * q["zvec"])[None, None, None, :] * gNb_gc

    # Potential row blocks.
    kphiphi = lam2 * np.einsum("ab,c->cab", stiff, gs**2 * w)
    z_dRdphi = np.einsum("cqbs,s->cqb", dRc_dphi, q["zvec"])
    kphiphi += np.einsum("qa,cqb,c->cab", N, z_dRdphi, tau_c * w, optimize=True)
    Ke[:, (ii * nc)[:, None], (ii * nc)[None, :]] = kphiphi
    for s, sp in enumerate(groups.species):
        kphic = -sp.z * np.einsum("ab,c->cab", mass, w)
        kphic += sp.z * np.einsum("qa,cqb,c->cab", N, dRc_dc[:, :, :, s],
                                  tau_c * w, optimize=True)
        Ke[:, (ii * nc)[:, None], (ii * nc + 1 + s)[None, :]] = kphic

    # Species rows.
    for s, sp in enumerate(groups.species):
        dz = sp.D * sp.z
        # c-block.
        kcc = (q["b0"] / dt) * np.einsum("qa,qb,c->cab", N, N, w, optimize=True)
        kcc += np.einsum("qa,cqb,c->cab", N, adv, w, optimize=True)
        kcc += sp.D * np.einsum("ab,c->cab", stiff, gs**2 * w)
        kcc += dz * np.einsum("cqa,qb,c->cab", gN_gphi, N, w, optimize=True)
        kcc += np.einsum("cqa,cqb,c->cab", adv, dRc_dc[:, :, :, s],
                         tau_c * w, optimize=True)
        kcc -= dz * np.einsum("cqa,cqb,c->cab", gN_gphi, dRc_dc[:, :, :, s],
                              tau_c * w, optimize=True)
        Ke[:, (ii * nc + 1 + s)[:, None], (ii * nc + 1 + s)[None, :]] = kcc
        # phi-block: migration, its fine-scale twin (product rule), and the
        # advective closure.
        kcphi = dz * np.einsum("qab,cq,c->cab", dNdNT, q["c_q"][:, :, s],
                               gs**2 * w, optimize=True)
        kcphi += np.einsum("cqa,cqb,c->cab", adv, dRc_dphi[:, :, :, s],
                           tau_c * w, optimize=True)
        kcphi -= dz * np.einsum("qab,cq,c->cab", dNdNT, q["r_c"][:, :, s],
                                gs**2 * tau_c * w, optimize=True)
        kcphi -= dz * np.einsum("cqa,cqb,c->cab", gN_gphi, dRc_dphi[:, :, :, s],
                                tau_c * w, optimize=True)
        Ke[:, (ii * nc + 1 + s)[:, None], (ii * nc)[None, :]] = kcphi
    return Ke


def pnp_kernels(state, taus, groups, dt, beta, forcing=None, t=None):
    """(residual, jacobian) closures with the batch as the only argument."""

    def res(batch):
        return pnp_residual(batch, state, taus, groups, dt, beta, forcing, t)

    def jac(batch):
        return pnp_jacobian(batch, state, taus, groups, dt, beta, forcing, t)

    return res, jac


def boundary_flux(mesh, state: FieldState, groups: NondimGroups, tag):
    """Boundary-averaged species fluxes and their net difference.

    j^s = -(1/L) sum_faces int n.(grad c^s + z^s c^s grad phi) dGamma over
    the tagged wall; returns (per-species array, net j^0 - j^1 - ...).
    """
    from .femcore import shape_eval

    cells, face = mesh.boundary_faces(tag)
    if len(cells) == 0:
        raise ValueError(f"no boundary faces tagged {tag!r}")
    dim = mesh.dim
    axis, side = face // 2, face % 2
    normal = np.zeros(dim)
    normal[axis] = -1.0 if side == 0 else 1.0

    # Face quadrature: tensor Gauss points on the face, fixed on the wall.
    g1 = 1.0 / np.sqrt(3.0)
    if dim == 2:
        line = np.array([-g1, g1])
        pts = np.zeros((2, 2))
        pts[:, 1 - axis] = line
    else:
        line = np.array([-g1, g1])
        a, b = [d for d in range(3) if d != axis]
        pa, pb = np.meshgrid(line, line, indexing="ij")
        pts = np.zeros((4, 3))
        pts[:, a] = pa.ravel()
        pts[:, b] = pb.ravel()
    pts[:, axis] = -1.0 if side == 0 else 1.0
    Nf, dNf = shape_eval(dim, pts)

    h = mesh.cell_h[cells]
    facew = (h / 2.0) ** (dim - 1)
    conn = mesh.conn_eq[cells]
    gsc = 2.0 / h

    c_corner = state.c[conn]                      # (F, m, S)
    phi_corner = state.phi[conn]                  # (F, m)
    gc = np.einsum("qmd,fms->fqds", dNf, c_corner) * gsc[:, None, None, None]
    gphi = np.einsum("qmd,fm->fqd", dNf, phi_corner) * gsc[:, None, None]
    c_qp = np.einsum("qm,fms->fqs", Nf, c_corner)

    z = groups.valences
    flux_density = np.einsum("fqds,d->fqs", gc, normal) \
        + z[None, None, :] * c_qp * np.einsum("fqd,d->fq", gphi, normal)[:, :, None]
    total = np.einsum("fqs,f->s", flux_density, facew)
    length = float(np.sum((2.0 ** (dim - 1)) * facew))  # sum of face measures
    js = -total / length
    net = js[0] - np.sum(js[1:])
    return js, float(net)


def divergence_norm(mesh, v):
    """L2 norm of the velocity divergence over the assembled cells."""
    from .femcore import ElementBatch

    batch = ElementBatch(mesh)
    gv = batch.grad_at_qp(batch.gather(v))        # (C, nq, dim, field)
    div = np.einsum("cqii->cq", gv)
    return float(np.sqrt(np.einsum("cq,c->", div**2, batch.detJ)))
