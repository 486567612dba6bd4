"""Config parsing, VTK/CSV emission, checkpoints, and the run manifest."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__, linalg
from .physics import FieldState, NondimGroups, Species
from .stepper import BlockConfig, NewtonConfig

__all__ = [
    "CaseConfig",
    "ConfigError",
    "RunManifest",
    "parse_config",
    "write_vtk",
    "write_mesh_vtk",
    "write_csv",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
]


class ConfigError(ValueError):
    """Config syntax or validation error with file/line context."""


# ----------------------------------------------------------------------
# config format: "key = value" lines, "#" comments, and ksp-style option
# blocks "name = { ... }" for the linear solvers.

_CASES = ("run", "mms", "edl1d", "electroconvection", "carve")

_SOLVER_KEYS = {
    "ksp_type": str,
    "ksp_atol": float,
    "ksp_rtol": float,
    "ksp_max_it": int,
    "pc_type": str,
    "pc_block_size": int,
    "ksp_restart": int,
}

# scalar keys: name -> (type, default); None default means case-dependent
_SCALARS = {
    "case": (str, None),
    "dt": (float, None),
    "t_end": (float, None),
    "seed": (int, 0),
    "out_every": (int, 50),
    "Sc": (float, 1.0),
    "kappa": (float, 0.5),
    "Lambda": (float, 1.0),
    "delta_phi": (float, 0.0),
    "level_fine": (int, None),
    "level_coarse": (int, None),
    "band": (float, 0.1),
    "perturb_amplitude": (float, 0.01),
    "equilibrate_tol": (float, 1e-7),
    "newton_tol": (float, 1e-8),
    "newton_max_it": (int, 20),
    "block_max_it": (int, 2),
    "block_tol": (float, 1e-6),
    "t_begin_stats": (float, None),
}

_LISTS = {
    "roots": int,
    "levels": int,
    "dts": float,
    "valences": float,
    "diffusivities": float,
    "spheres": float,  # flattened (cx, cy, cz, r) groups
    "periodic": str,   # axis letters
}

_CASE_DEFAULTS = {
    "mms": {"roots": [1, 1], "dt": 0.0157, "t_end": float(np.pi),
            "levels": [4, 5, 6, 7], "dts": [0.1, 0.05, 0.025, 0.0125],
            "level_fine": 7, "level_coarse": 7, "Sc": 1.0, "kappa": 1.0,
            "Lambda": 1.0},
    "edl1d": {"roots": [1, 1], "dt": 0.01, "t_end": 1.0, "Lambda": 0.05,
              "delta_phi": 1.0, "level_fine": 7, "level_coarse": 5,
              "band": 0.3, "periodic": ["x"]},
    "electroconvection": {"roots": [8, 1], "dt": 0.01, "t_end": 20.0,
                          "delta_phi": 20.0, "level_fine": 9, "level_coarse": 6,
                          "Sc": 1000.0, "kappa": 0.5, "Lambda": 0.01,
                          "periodic": ["x"]},
    "carve": {"roots": [1, 1, 1], "dt": 0.01, "t_end": 0.0, "level_fine": 4,
              "level_coarse": 4, "spheres": [0.5, 0.5, 0.5, 0.3]},
    "run": {"roots": [1, 1], "dt": 0.01, "t_end": 1.0,
            "level_fine": 5, "level_coarse": 5},
}

_BC_VARS = ("v", "phi", "c_plus", "c_minus")
_BC_KINDS = ("dirichlet", "flux", "noslip")


@dataclass
class CaseConfig:
    """Validated, defaults-filled configuration for one case run."""

    case: str
    roots: Tuple[int, ...]
    dt: float
    t_end: float
    seed: int
    out_every: int
    groups: NondimGroups
    delta_phi: float
    level_fine: int
    level_coarse: int
    band: float
    periodic: Tuple[bool, ...]
    bc: Dict[str, Dict[str, tuple]]
    solver_ns: linalg.SolverConfig
    solver_pnp: linalg.SolverConfig
    newton: NewtonConfig
    block: BlockConfig
    levels: Tuple[int, ...]
    dts: Tuple[float, ...]
    spheres: Tuple[Tuple[float, ...], ...]
    perturb_amplitude: float
    equilibrate_tol: float
    t_begin_stats: float
    resolved: Dict[str, str]  # every key with its final value, defaults included


def _tokenize(path):
    """(lineno, key, value-or-block) triples; blocks are dicts of inner keys."""
    out = []
    with open(path) as fh:
        lines = fh.readlines()
    i = 0
    while i < len(lines):
        raw = lines[i]
        lineno = i + 1
        text = raw.split("#", 1)[0].strip()
        i += 1
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
        key, val = (s.strip() for s in text.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if val == "{":
            block = {}
            while True:
                if i >= len(lines):
                    raise ConfigError(f"{path}:{lineno}: unterminated block {key!r}")
                inner = lines[i].split("#", 1)[0].strip()
                inner_no = i + 1
                i += 1
                if inner == "}":
                    break
                if not inner:
                    continue
                if "=" not in inner:
                    raise ConfigError(
                        f"{path}:{inner_no}: expected 'key = value' inside block")
                bk, bv = (s.strip() for s in inner.split("=", 1))
                block[bk] = (inner_no, bv)
            out.append((lineno, key, block))
        else:
            out.append((lineno, key, val))
    return out


def _convert(path, lineno, key, val, typ):
    try:
        if typ is bool:
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
            raise ValueError(val)
        return typ(val)
    except ValueError:
        raise ConfigError(
            f"{path}:{lineno}: key {key!r} expects {typ.__name__}, got {val!r}") from None


def _parse_bc_value(path, lineno, key, val):
    parts = val.split()
    if not parts or parts[0] not in _BC_KINDS:
        raise ConfigError(
            f"{path}:{lineno}: {key!r} must start with one of {_BC_KINDS}")
    kind = parts[0]
    vals = tuple(_convert(path, lineno, key, p, float) for p in parts[1:])
    if kind == "flux" and vals not in ((), (0.0,)):
        raise ConfigError(f"{path}:{lineno}: only zero-flux walls are supported")
    if kind == "noslip" and vals:
        raise ConfigError(f"{path}:{lineno}: 'noslip' takes no values")
    return (kind, vals)


def _solver_from_block(path, block, defaults):
    cfg = dict(defaults)
    for bk, (lineno, bv) in block.items():
        if bk not in _SOLVER_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown solver option {bk!r}")
        cfg[bk] = _convert(path, lineno, bk, bv, _SOLVER_KEYS[bk])
    return linalg.SolverConfig(
        method=cfg.get("ksp_type", "bicgstab"),
        preconditioner=cfg.get("pc_type", "block_jacobi"),
        block_size=cfg.get("pc_block_size", 1),
        restart=cfg.get("ksp_restart", 50),
        atol=cfg.get("ksp_atol", 1e-10),
        rtol=cfg.get("ksp_rtol", 1e-8),
        max_iters=cfg.get("ksp_max_it", 2000))


def parse_config(path):
    """Parse and validate a case config; unknown keys and BC gaps are errors."""
    entries = _tokenize(path)
    values = {}
    bc_entries = {}
    blocks = {}
    for lineno, key, val in entries:
        if isinstance(val, dict):
            if key not in ("solver_ns", "solver_pnp"):
                raise ConfigError(f"{path}:{lineno}: unknown option block {key!r}")
            if key in blocks:
                raise ConfigError(f"{path}:{lineno}: duplicate block {key!r}")
            blocks[key] = val
            continue
        if key in values or key in bc_entries:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        if key.startswith("bc_"):
            bc_entries[key] = (lineno, val)
        elif key in _SCALARS:
            values[key] = _convert(path, lineno, key, val, _SCALARS[key][0])
        elif key in _LISTS:
            typ = _LISTS[key]
            values[key] = [_convert(path, lineno, key, p, typ) for p in val.split()]
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")

    case = values.get("case")
    if case is None:
        raise ConfigError(f"{path}: missing required key 'case'")
    if case not in _CASES:
        raise ConfigError(f"{path}: unknown case {case!r}; expected one of {_CASES}")

    merged = dict(_CASE_DEFAULTS[case])
    merged.update(values)
    for key, (typ, default) in _SCALARS.items():
        if key not in merged and default is not None:
            merged[key] = default
    merged.setdefault("levels", [])
    merged.setdefault("dts", [])
    merged.setdefault("spheres", [])
    merged.setdefault("periodic", [])
    merged.setdefault("valences", [1.0, -1.0])
    merged.setdefault("diffusivities", [1.0] * len(merged["valences"]))
    merged.setdefault("t_begin_stats", 0.8 * float(merged["t_end"]))
    for key in ("dt", "t_end", "level_fine", "level_coarse"):
        if merged.get(key) is None:
            raise ConfigError(f"{path}: case {case!r} requires key {key!r}")

    roots = tuple(int(r) for r in merged["roots"])
    dim = len(roots)
    if dim not in (2, 3) or any(r < 1 for r in roots):
        raise ConfigError(f"{path}: roots must be 2 or 3 positive integers")

    axes = "xyz"[:dim]
    for ax in merged["periodic"]:
        if ax not in axes:
            raise ConfigError(f"{path}: periodic axis {ax!r} not in {axes!r}")
    periodic = tuple(ax in merged["periodic"] for ax in axes)

    if len(merged["diffusivities"]) != len(merged["valences"]):
        raise ConfigError(f"{path}: valences and diffusivities lengths differ")
    species = tuple(Species(z=z, D=d) for z, d in
                    zip(merged["valences"], merged["diffusivities"]))
    groups = NondimGroups(Sc=float(merged["Sc"]), kappa=float(merged["kappa"]),
                          Lambda=float(merged["Lambda"]), species=species)

    # Boundary conditions: bc_<var>_<face> = kind [values...]
    faces = [f"{ax}_{side}" for ax in axes for side in ("min", "max")]
    bc = {v: {} for v in _BC_VARS}
    for key, (lineno, val) in bc_entries.items():
        parts = key.split("_")
        # variable names themselves contain underscores (c_plus)
        matched = None
        for var in _BC_VARS:
            for f in faces:
                if key == f"bc_{var}_{f}":
                    matched = (var, f)
        if matched is None:
            raise ConfigError(f"{path}:{lineno}: malformed BC key {key!r}; "
                              f"expected bc_<var>_<face> with var in {_BC_VARS}")
        var, f = matched
        ax = axes.index(f[0])
        if periodic[ax]:
            raise ConfigError(f"{path}:{lineno}: face {f} is periodic; "
                              f"no BC allowed for {var}")
        bc[var][f] = _parse_bc_value(path, lineno, key, val)

    if case == "electroconvection" and not bc_entries:
        dphi = float(merged["delta_phi"])
        bc = {
            "v": {"y_min": ("noslip", ()), "y_max": ("noslip", ())},
            "phi": {"y_min": ("dirichlet", (0.0,)),
                    "y_max": ("dirichlet", (dphi,))},
            "c_plus": {"y_min": ("dirichlet", (2.0,)),
                       "y_max": ("dirichlet", (1.0,))},
            "c_minus": {"y_min": ("flux", (0.0,)),
                        "y_max": ("dirichlet", (1.0,))},
        }

    # Coverage: cases with explicit BCs must pin every variable on every
    # non-periodic face.
    if any(bc[v] for v in _BC_VARS):
        for var in _BC_VARS:
            for f in faces:
                ax = axes.index(f[0])
                if periodic[ax]:
                    continue
                if f not in bc[var]:
                    raise ConfigError(
                        f"{path}: no boundary condition for variable {var!r} "
                        f"on face {f!r}")

    ns_defaults = {"pc_block_size": dim + 1}
    pnp_defaults = {"pc_block_size": 1 + len(species)}
    solver_ns = _solver_from_block(path, blocks.get("solver_ns", {}), ns_defaults)
    solver_pnp = _solver_from_block(path, blocks.get("solver_pnp", {}), pnp_defaults)
    newton = NewtonConfig(tol=float(merged["newton_tol"]),
                          max_iters=int(merged["newton_max_it"]),
                          solver=solver_pnp)
    block = BlockConfig(max_iters=int(merged["block_max_it"]),
                        criterion=float(merged["block_tol"]))

    spheres_flat = [float(s) for s in merged["spheres"]]
    if len(spheres_flat) % (dim + 1):
        raise ConfigError(f"{path}: spheres need {dim + 1} numbers each "
                          f"(center, radius)")
    spheres = tuple(tuple(spheres_flat[i:i + dim + 1])
                    for i in range(0, len(spheres_flat), dim + 1))

    resolved = {k: str(merged[k]) for k in sorted(merged)}
    for var in _BC_VARS:
        for f, spec in sorted(bc[var].items()):
            resolved[f"bc_{var}_{f}"] = f"{spec[0]} {' '.join(map(str, spec[1]))}".strip()

    return CaseConfig(
        case=case, roots=roots, dt=float(merged["dt"]),
        t_end=float(merged["t_end"]), seed=int(merged["seed"]),
        out_every=int(merged["out_every"]), groups=groups,
        delta_phi=float(merged["delta_phi"]),
        level_fine=int(merged["level_fine"]),
        level_coarse=int(merged["level_coarse"]), band=float(merged["band"]),
        periodic=periodic, bc=bc, solver_ns=solver_ns, solver_pnp=solver_pnp,
        newton=newton, block=block,
        levels=tuple(int(l) for l in merged["levels"]),
        dts=tuple(float(d) for d in merged["dts"]),
        spheres=spheres,
        perturb_amplitude=float(merged["perturb_amplitude"]),
        equilibrate_tol=float(merged["equilibrate_tol"]),
        t_begin_stats=float(merged["t_begin_stats"]),
        resolved=resolved)


def config_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ----------------------------------------------------------------------
# VTK emission (legacy ASCII)

# tensor-product corner order -> VTK winding
_QUAD_ORDER = (0, 1, 3, 2)
_HEX_ORDER = (0, 1, 3, 2, 4, 5, 7, 6)


def _vtk_header(fh, title, mesh):
    fh.write("# vtk DataFile Version 3.0\n")
    fh.write(f"{title}\n")
    fh.write("ASCII\n")
    fh.write("DATASET UNSTRUCTURED_GRID\n")
    pts = mesh.coords
    n = len(pts)
    fh.write(f"POINTS {n} double\n")
    xyz = np.zeros((n, 3))
    xyz[:, :mesh.dim] = pts
    np.savetxt(fh, xyz, fmt="%.17g")


def _vtk_cells(fh, mesh, order, ctype):
    conn = mesh.conn[mesh.cells][:, list(order)]
    C, m = conn.shape
    fh.write(f"CELLS {C} {C * (m + 1)}\n")
    block = np.column_stack([np.full(C, m, dtype=np.int64), conn])
    np.savetxt(fh, block, fmt="%d")
    fh.write(f"CELL_TYPES {C}\n")
    fh.write("\n".join([str(ctype)] * C) + "\n")


def write_vtk(mesh, state: FieldState, path, groups: Optional[NondimGroups] = None):
    """Field snapshot: points, quad/hex cells, six named point-data arrays."""
    z = groups.valences if groups is not None else \
        np.array([1.0] + [-1.0] * (state.c.shape[1] - 1))[: state.c.shape[1]]
    order, ctype = (_QUAD_ORDER, 9) if mesh.dim == 2 else (_HEX_ORDER, 12)
    node_of = mesh.node_eq
    with open(path, "w") as fh:
        _vtk_header(fh, "ekflow snapshot", mesh)
        _vtk_cells(fh, mesh, order, ctype)
        n = mesh.n_nodes
        fh.write(f"POINT_DATA {n}\n")
        vel = np.zeros((n, 3))
        vel[:, :mesh.dim] = state.v[node_of]
        fh.write("VECTORS velocity double\n")
        np.savetxt(fh, vel, fmt="%.17g")
        scalars = [
            ("pressure", state.p[node_of]),
            ("potential", state.phi[node_of]),
            ("c_plus", state.c[node_of, 0]),
            ("c_minus", state.c[node_of, 1] if state.c.shape[1] > 1
             else np.zeros(n)),
            ("charge_density", (state.c @ z)[node_of]),
        ]
        for name, arr in scalars:
            fh.write(f"SCALARS {name} double 1\n")
            fh.write("LOOKUP_TABLE default\n")
            np.savetxt(fh, arr, fmt="%.17g")
    return path


def write_mesh_vtk(mesh, path):
    """Mesh-only dump with axis-aligned cell types and the level as cell data."""
    order = tuple(range(1 << mesh.dim))
    ctype = 8 if mesh.dim == 2 else 11
    with open(path, "w") as fh:
        _vtk_header(fh, "ekflow mesh", mesh)
        _vtk_cells(fh, mesh, order, ctype)
        C = mesh.n_cells
        fh.write(f"CELL_DATA {C}\n")
        fh.write("SCALARS level int 1\n")
        fh.write("LOOKUP_TABLE default\n")
        lv = mesh.levels[mesh.cells]
        fh.write("\n".join(str(int(l)) for l in lv) + "\n")
    return path


def read_vtk_points(path):
    """Point block of a legacy ASCII VTK file (for round-trip checks)."""
    with open(path) as fh:
        lines = fh.readlines()
    for i, line in enumerate(lines):
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            data = " ".join(lines[i + 1:i + 1 + n]).split()
            return np.array(data, dtype=float).reshape(n, 3)
    raise ValueError(f"{path}: no POINTS block")


def read_vtk_point_data(path, name):
    """Named scalar point-data array from a legacy ASCII VTK file."""
    with open(path) as fh:
        lines = fh.readlines()
    n = None
    for i, line in enumerate(lines):
        if line.startswith("POINT_DATA"):
            n = int(line.split()[1])
        if n is not None and line.startswith(f"SCALARS {name} "):
            data = " ".join(lines[i + 2:i + 2 + n]).split()
            return np.array(data, dtype=float)
    raise ValueError(f"{path}: no scalar array {name!r}")


# ----------------------------------------------------------------------
# CSV


def write_csv(path, header: Sequence[str], rows):
    """Header + rows at full double precision; rejects non-finite values."""
    rows = [list(r) for r in rows]
    for r in rows:
        for v in r:
            if not np.isfinite(v):
                raise FloatingPointError(f"non-finite value in CSV row for {path}")
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(f"{v:.17g}" for v in r) + "\n")
    return path


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: FieldState, k: int, rng=None, extra=None):
    """Binary dump of every time level plus step index and RNG state."""
    payload = {
        "v": state.v, "p": state.p, "phi": state.phi, "c": state.c,
        "v_k": state.v_k, "v_km1": state.v_km1,
        "c_k": state.c_k, "c_km1": state.c_km1, "vtilde": state.vtilde,
        "k": np.int64(k),
    }
    if rng is not None:
        payload["rng_state"] = np.frombuffer(
            json.dumps(rng.bit_generator.state).encode(), dtype=np.uint8)
    if extra:
        for key, val in extra.items():
            payload["x_" + key] = np.asarray(val)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Returns (state, k, rng-or-None, extra dict)."""
    with np.load(path) as data:
        state = FieldState(v=data["v"].copy(), p=data["p"].copy(),
                           phi=data["phi"].copy(), c=data["c"].copy(),
                           v_k=data["v_k"].copy(), v_km1=data["v_km1"].copy(),
                           c_k=data["c_k"].copy(), c_km1=data["c_km1"].copy(),
                           vtilde=data["vtilde"].copy())
        k = int(data["k"])
        rng = None
        if "rng_state" in data:
            rng = np.random.default_rng()
            rng.bit_generator.state = json.loads(data["rng_state"].tobytes().decode())
        extra = {key[2:]: data[key].copy() for key in data.files
                 if key.startswith("x_")}
    return state, k, rng, extra


# ----------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    config_hash: str
    code_version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float = 0.0
    steps: int = 0
    solver_iterations: List[dict] = field(default_factory=list)
    failure_notes: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)

    def record_step(self, diagnostics):
        self.steps = diagnostics.get("step", self.steps + 1)
        self.solver_iterations.append(
            {k: diagnostics[k] for k in ("step", "ns_iterations",
                                         "newton_iterations")
             if k in diagnostics})

    def add_output(self, path):
        name = os.path.basename(str(path))
        if name not in self.outputs:
            self.outputs.append(name)

    def write(self, path):
        """Atomic write at run end."""
        self.finished = time.time()
        tmp = str(path) + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
        return path
