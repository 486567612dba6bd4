"""Quadtree/octree meshes on block-structured rectangular domains.

The domain is a grid of congruent unit root cells (for example 8x1 unit
squares for a channel). Each root refines independently as a 2:1-balanced
quadtree (2-D) or octree (3-D) of square/cube leaves. Refinement levels are
quoted relative to a virtual root spanning the largest domain dimension W
(required to be a power of two), so a leaf at quoted level l has physical size
h = W / 2**l and refines at unit level l - log2(W) inside its root.

Leaf anchors live on an integer lattice with 2**MAX_UNIT_LEVEL points per unit
root per direction, which keeps node coordinates exact, hashable, and cheap to
deduplicate. Meshes are immutable: every operation returns a new TreeMesh with
node enumeration, hanging-node constraints, and periodic identifications
rebuilt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

MAX_UNIT_LEVEL = 20
SCALE = 1 << MAX_UNIT_LEVEL

ACTIVE = 0
INACTIVE = 1
INTERCEPTED = 2

STATUS_NAMES = {ACTIVE: "Active", INACTIVE: "Inactive", INTERCEPTED: "Intercepted"}

_AXES = "xyz"


def _corner_offsets(dim):
    """Unit corner offsets in reference order (x fastest), shape (2**dim, dim)."""
    m = 1 << dim
    offs = np.zeros((m, dim), dtype=np.int64)
    for c in range(m):
        for d in range(dim):
            offs[c, d] = (c >> d) & 1
    return offs


def _neighbor_dirs(dim):
    """Face directions, plus edge directions in 3-D (2:1 balance stencil)."""
    dirs = []
    for d in range(dim):
        for s in (-1, 1):
            v = [0] * dim
            v[d] = s
            dirs.append(tuple(v))
    if dim == 3:
        for d0 in range(3):
            for d1 in range(d0 + 1, 3):
                for s0 in (-1, 1):
                    for s1 in (-1, 1):
                        v = [0, 0, 0]
                        v[d0] = s0
                        v[d1] = s1
                        dirs.append(tuple(v))
    return dirs


def _morton(in_root, dim):
    """Interleave MAX_UNIT_LEVEL bits per direction into one sort key."""
    code = np.zeros(in_root.shape[0], dtype=np.int64)
    for b in range(MAX_UNIT_LEVEL):
        for d in range(dim):
            code |= ((in_root[:, d] >> b) & 1) << (dim * b + d)
    return code


def _sort_leaves(anchors, levels, roots):
    dim = len(roots)
    root_idx = anchors >> MAX_UNIT_LEVEL
    flat_root = np.ravel_multi_index(tuple(root_idx[:, d] for d in range(dim)), roots)
    code = _morton(anchors & (SCALE - 1), dim)
    order = np.lexsort((code, flat_root))
    return anchors[order], levels[order]


def _split(anchors, levels, mask):
    """Replace masked leaves by their 2**dim children."""
    dim = anchors.shape[1]
    keep_a, keep_l = anchors[~mask], levels[~mask]
    parents_a, parents_l = anchors[mask], levels[mask]
    offs = _corner_offsets(dim)
    half = (SCALE >> (parents_l + 1)).astype(np.int64)
    child_a = (parents_a[:, None, :] + offs[None, :, :] * half[:, None, None]).reshape(-1, dim)
    child_l = np.repeat(parents_l + 1, 1 << dim)
    return np.concatenate([keep_a, child_a]), np.concatenate([keep_l, child_l])


class GeometryClassifier:
    """In/out predicate for carving the active domain out of the root grid.

    The predicate is a pure vectorized function mapping points (M, dim) to a
    boolean in-domain mask. Element classification uses corner nodes only.
    """

    def __init__(self, in_domain: Callable[[np.ndarray], np.ndarray], name: str = "custom"):
        self.in_domain = in_domain
        self.name = name

    @staticmethod
    def all_in():
        return GeometryClassifier(lambda pts: np.ones(len(pts), dtype=bool), name="all_in")

    @staticmethod
    def carved_spheres(centers, radii):
        """Domain = root grid minus a union of spheres/circles."""
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        radii = np.atleast_1d(np.asarray(radii, dtype=float))

        def in_domain(pts):
            inside_any = np.zeros(len(pts), dtype=bool)
            for c, r in zip(centers, radii):
                d2 = np.sum((pts - c[None, : pts.shape[1]]) ** 2, axis=1)
                inside_any |= d2 < r * r
            return ~inside_any

        return GeometryClassifier(in_domain, name="carved_spheres")

    @staticmethod
    def half_space(normal, offset):
        """Domain = points with normal . x <= offset."""
        normal = np.asarray(normal, dtype=float)

        def in_domain(pts):
            return pts @ normal[: pts.shape[1]] <= offset

        return GeometryClassifier(in_domain, name="half_space")


@dataclass(frozen=True)
class RefineRule:
    """Deterministic refinement target.

    predicate maps (centroids (E, dim), extents (E,)) to integer target levels
    in the quoted (virtual-root) convention; targets are clipped to max_level.
    """

    predicate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    max_level: int

    def targets(self, centroids, extents):
        t = np.asarray(self.predicate(centroids, extents))
        t = np.broadcast_to(t, (len(centroids),)).astype(np.int64)
        return np.minimum(t, self.max_level)

    @staticmethod
    def uniform(level):
        return RefineRule(lambda c, e: np.full(len(c), level, dtype=np.int64), max_level=level)

    @staticmethod
    def band(axis, lo, hi, fine_level, coarse_level):
        """fine_level where lo <= axis-coordinate of centroid < hi, else coarse."""

        def predicate(centroids, extents):
            x = centroids[:, axis]
            return np.where((x >= lo) & (x < hi), fine_level, coarse_level)

        return RefineRule(predicate, max_level=fine_level)


class TreeMesh:
    """Immutable forest of 2:1-balanced quad/octree leaves with enumerated nodes.

    Leaves are stored as integer anchors (global lattice, SCALE points per unit
    root) plus unit levels; quoted levels add log2(W) for the W-wide virtual
    root. Node data covers Active and Intercepted leaves only; Inactive leaves
    carry no degrees of freedom. Hanging nodes carry linear interpolation
    constraints (edge midpoint: 1/2 + 1/2; 3-D face center: 4 x 1/4) expressed
    on merged (periodic) equation indices and resolved so that every master is
    a free node.
    """

    def __init__(self, roots, anchors, unit_levels, periodic=(), geometry=None,
                 _balance=True):
        self.roots = tuple(int(r) for r in roots)
        self.dim = len(self.roots)
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        w = max(self.roots)
        if w & (w - 1):
            raise ValueError(f"largest root-grid dimension must be a power of two, got {w}")
        self.level_offset = w.bit_length() - 1
        self.periodic = tuple(bool(p) for p in periodic) if periodic else (False,) * self.dim
        if len(self.periodic) != self.dim:
            raise ValueError("periodic must have one flag per dimension")
        self.geometry = geometry

        anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, self.dim)
        unit_levels = np.asarray(unit_levels, dtype=np.int64).reshape(-1)
        if _balance:
            anchors, unit_levels = _balance_leaves(anchors, unit_levels, self.roots)
        self.anchors, self.unit_levels = _sort_leaves(anchors, unit_levels, self.roots)
        self._classify()
        self._enumerate()

    # ------------------------------------------------------------------
    # construction internals

    def _classify(self):
        dim, m = self.dim, 1 << self.dim
        sizes = (SCALE >> self.unit_levels).astype(np.int64)
        offs = _corner_offsets(dim)
        corners = self.anchors[:, None, :] + offs[None, :, :] * sizes[:, None, None]
        pts = corners.reshape(-1, dim) / SCALE
        if self.geometry is None:
            inside = np.ones(len(pts), dtype=bool)
        else:
            inside = np.asarray(self.geometry.in_domain(pts), dtype=bool)
        n_in = inside.reshape(-1, m).sum(axis=1)
        status = np.full(len(self.anchors), INTERCEPTED, dtype=np.int8)
        status[n_in == m] = ACTIVE
        status[n_in == 0] = INACTIVE
        if not np.any(status != INACTIVE):
            raise ValueError("geometry classifies every element Inactive; no active domain left")
        self.status = status
        self._corner_keys = corners  # (E, m, dim) integer corner coordinates

    def _enumerate(self):
        dim, m = self.dim, 1 << self.dim
        self.cells = np.flatnonzero(self.status != INACTIVE)
        viol = _scan_violations(self.anchors, self.unit_levels, self.roots)
        if viol:
            raise ValueError(f"mesh is not 2:1 balanced ({len(viol)} violating leaves)")

        keys = self._corner_keys[self.cells].reshape(-1, dim)
        self.node_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
        self.conn = inverse.reshape(-1, m).astype(np.int64)
        self.coords = self.node_keys.astype(np.float64) / SCALE
        n_nodes = len(self.node_keys)

        key_index = {tuple(k): i for i, k in enumerate(self.node_keys.tolist())}

        # periodic merge: nodes on a max face map to their min-face partner
        rep = np.arange(n_nodes, dtype=np.int64)
        for d in range(dim):
            if not self.periodic[d]:
                continue
            span = self.roots[d] * SCALE
            on_max = np.flatnonzero(self.node_keys[:, d] == span)
            for i in on_max.tolist():
                partner = list(self.node_keys[i])
                partner[d] = 0
                j = key_index.get(tuple(partner))
                if j is None:
                    raise ValueError(
                        f"periodic faces along {_AXES[d]} have mismatched refinement patterns")
                rep[i] = j
        for _ in range(dim):
            rep = rep[rep]
        reps = np.unique(rep)
        self.node_eq = np.searchsorted(reps, rep).astype(np.int64)
        self.n_eq = len(reps)
        self.conn_eq = self.node_eq[self.conn]

        self._find_constraints(key_index)
        self._build_reduction()

        if self.geometry is None:
            self.node_in_domain = np.ones(n_nodes, dtype=bool)
        else:
            self.node_in_domain = np.asarray(self.geometry.in_domain(self.coords), dtype=bool)
        icells = self.status[self.cells] == INTERCEPTED
        touched = np.zeros(n_nodes, dtype=bool)
        touched[self.conn[icells].ravel()] = True
        self.carved_nodes = np.flatnonzero(touched & self.node_in_domain)

    def _find_constraints(self, key_index):
        dim = self.dim
        sizes = (SCALE >> self.unit_levels[self.cells]).astype(np.int64)
        corners = self._corner_keys[self.cells]
        raw = {}

        def add(node_key, master_keys, w):
            nid = key_index.get(node_key)
            if nid is None:
                return
            masters = tuple(key_index[k] for k in master_keys)
            prev = raw.get(nid)
            if prev is not None and prev != (masters, w):
                raise ValueError("conflicting hanging-node constraints (mesh unbalanced?)")
            raw[nid] = (masters, w)

        edge_pairs = _edge_corner_pairs(dim)
        face_quads = _face_corner_quads(dim) if dim == 3 else []
        for e in range(len(corners)):
            cs = corners[e]
            for (a, b) in edge_pairs:
                mid = tuple(((cs[a] + cs[b]) // 2).tolist())
                if mid not in key_index:
                    continue
                if mid == tuple(cs[a].tolist()) or mid == tuple(cs[b].tolist()):
                    continue
                add(mid, (tuple(cs[a].tolist()), tuple(cs[b].tolist())), (0.5, 0.5))
            for quad in face_quads:
                ctr = tuple((sum(cs[i] for i in quad) // 4).tolist())
                if ctr in key_index:
                    add(ctr, tuple(tuple(cs[i].tolist()) for i in quad),
                        (0.25, 0.25, 0.25, 0.25))

        # express on merged equation ids, then resolve chained masters
        eq_raw = {}
        for nid, (masters, w) in raw.items():
            he = int(self.node_eq[nid])
            entry = {}
            for mk, wk in zip(masters, w):
                me = int(self.node_eq[mk])
                entry[me] = entry.get(me, 0.0) + wk
            prev = eq_raw.get(he)
            if prev is not None and prev != entry:
                raise ValueError("periodic images of a hanging node disagree on its constraint")
            eq_raw[he] = entry

        resolved = {}
        for he in sorted(eq_raw):
            entry = dict(eq_raw[he])
            for _ in range(MAX_UNIT_LEVEL + 2):
                chained = [e for e in entry if e in eq_raw]
                if not chained:
                    break
                for e in chained:
                    w = entry.pop(e)
                    for me, wm in eq_raw[e].items():
                        entry[me] = entry.get(me, 0.0) + w * wm
            else:
                raise ValueError("hanging-node constraint chain did not terminate")
            resolved[he] = sorted(entry.items())
        self.constraints = resolved

    def _build_reduction(self):
        hanging = np.array(sorted(self.constraints), dtype=np.int64)
        is_free = np.ones(self.n_eq, dtype=bool)
        is_free[hanging] = False
        self.free_eq = np.flatnonzero(is_free)
        self.red_of_eq = np.full(self.n_eq, -1, dtype=np.int64)
        self.red_of_eq[self.free_eq] = np.arange(len(self.free_eq))
        rows, cols, vals = [], [], []
        rows.append(self.free_eq)
        cols.append(self.red_of_eq[self.free_eq])
        vals.append(np.ones(len(self.free_eq)))
        for he in hanging.tolist():
            for me, w in self.constraints[he]:
                if self.red_of_eq[me] < 0:
                    raise ValueError("constraint master is itself constrained after resolution")
                rows.append([he])
                cols.append([self.red_of_eq[me]])
                vals.append([w])
        self.T = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows).astype(np.int64),
                                    np.concatenate(cols).astype(np.int64))),
            shape=(self.n_eq, len(self.free_eq)))
        self._t_block_cache = {}

    # ------------------------------------------------------------------
    # derived views

    @property
    def n_elements(self):
        return len(self.anchors)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_nodes(self):
        return len(self.node_keys)

    @property
    def n_free(self):
        return len(self.free_eq)

    @property
    def levels(self):
        """Quoted levels (virtual-root convention) per leaf."""
        return self.unit_levels + self.level_offset

    @property
    def cell_h(self):
        """Physical element size per assembled cell."""
        return np.ldexp(1.0, -self.unit_levels[self.cells].astype(np.int64))

    @property
    def domain_size(self):
        return np.array(self.roots, dtype=float)

    def cell_centroids(self):
        sizes = (SCALE >> self.unit_levels[self.cells]).astype(np.int64)
        return (self.anchors[self.cells] + sizes[:, None] * 0.5) / SCALE

    def t_block(self, ncomp):
        """Constraint condensation operator for ncomp interleaved fields."""
        tb = self._t_block_cache.get(ncomp)
        if tb is None:
            tb = sp.kron(self.T, sp.eye(ncomp, format="csr"), format="csr") if ncomp > 1 else self.T
            self._t_block_cache[ncomp] = tb
        return tb

    def _parse_face_tag(self, tag):
        parts = tag.split("_")
        if len(parts) != 2 or parts[0] not in _AXES[:self.dim] \
                or parts[1] not in ("min", "max"):
            raise ValueError(f"unknown face tag {tag!r}; expected e.g. 'x_min'")
        return _AXES.index(parts[0]), parts[1]

    def boundary_nodes(self, tag):
        """Geometric node ids on a domain face, e.g. 'y_min'."""
        d, side = self._parse_face_tag(tag)
        target = 0 if side == "min" else self.roots[d] * SCALE
        return np.flatnonzero(self.node_keys[:, d] == target)

    def boundary_faces(self, tag):
        """(cell index, face id) pairs of assembled cells on a domain face."""
        d, side = self._parse_face_tag(tag)
        sizes = (SCALE >> self.unit_levels[self.cells]).astype(np.int64)
        a = self.anchors[self.cells]
        if side == "min":
            mask = a[:, d] == 0
            face = 2 * d
        else:
            mask = a[:, d] + sizes == self.roots[d] * SCALE
            face = 2 * d + 1
        return np.flatnonzero(mask), face

    def locate(self, points):
        """Assembled cell index containing each point (-1 if uncovered)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        lat = np.clip((points * SCALE).astype(np.int64), 0,
                      np.array(self.roots, dtype=np.int64) * SCALE - 1)
        if not hasattr(self, "_cell_lookup"):
            lookup = {}
            for ci, ei in enumerate(self.cells.tolist()):
                lookup[(tuple(self.anchors[ei].tolist()), int(self.unit_levels[ei]))] = ci
            self._cell_lookup = lookup
            self._cell_levels_desc = sorted(set(self.unit_levels[self.cells].tolist()),
                                            reverse=True)
        lookup = self._cell_lookup
        out = np.full(len(points), -1, dtype=np.int64)
        for i, q in enumerate(lat.tolist()):
            for lev in self._cell_levels_desc:
                mask = ~((SCALE >> lev) - 1)
                key = (tuple(int(c) & mask for c in q), lev)
                ci = lookup.get(key)
                if ci is not None:
                    out[i] = ci
                    break
        return out

    def same_leaves(self, other):
        return (self.anchors.shape == other.anchors.shape
                and np.array_equal(self.anchors, other.anchors)
                and np.array_equal(self.unit_levels, other.unit_levels))


def _edge_corner_pairs(dim):
    """Corner index pairs forming element edges (reference order)."""
    m = 1 << dim
    pairs = []
    for a in range(m):
        for d in range(dim):
            b = a | (1 << d)
            if b != a:
                pairs.append((a, b))
    return pairs


def _face_corner_quads(dim):
    """Corner index quadruples forming element faces (3-D only)."""
    quads = []
    for d in range(3):
        for side in (0, 1):
            quad = [c for c in range(8) if (c >> d) & 1 == side]
            quads.append(tuple(quad))
    return quads


def _scan_violations(anchors, levels, roots):
    """Leaves that are >= 2 levels coarser than a face/edge neighbor."""
    dim = len(roots)
    leafset = {(tuple(a), int(l)) for a, l in zip(anchors.tolist(), levels.tolist())}
    present_levels = sorted(set(levels.tolist()), reverse=True)
    bounds = [r * SCALE for r in roots]
    dirs = _neighbor_dirs(dim)
    marked = set()
    for a, l in zip(anchors.tolist(), levels.tolist()):
        s = SCALE >> l
        for dv in dirs:
            q = []
            ok = True
            for d in range(dim):
                if dv[d] > 0:
                    c = a[d] + s
                elif dv[d] < 0:
                    c = a[d] - 1
                else:
                    c = a[d]
                if c < 0 or c >= bounds[d]:
                    ok = False
                    break
                q.append(c)
            if not ok:
                continue
            # only a neighbor at least two levels coarser needs splitting; the
            # covering leaf of q is unique, so a key match at any level is it
            for lev in present_levels:
                if lev > l - 2:
                    continue
                mask = ~((SCALE >> lev) - 1)
                key = (tuple(c & mask for c in q), lev)
                if key in leafset:
                    marked.add(key)
                    break
    return marked


def _balance_leaves(anchors, levels, roots):
    """Split coarse leaves until no face/edge pair differs by more than one level."""
    for _ in range(MAX_UNIT_LEVEL + 2):
        marked = _scan_violations(anchors, levels, roots)
        if not marked:
            return anchors, levels
        mask = np.zeros(len(anchors), dtype=bool)
        index = {(tuple(a), int(l)): i
                 for i, (a, l) in enumerate(zip(anchors.tolist(), levels.tolist()))}
        for key in marked:
            mask[index[key]] = True
        anchors, levels = _split(anchors, levels, mask)
    raise RuntimeError("2:1 balancing did not terminate")


def build_uniform(roots, level, periodic=(), geometry=None):
    """Uniformly refined mesh: every root carries leaves at the quoted level.

    Parameters
    ----------
    roots : tuple of int
        Root-cell grid, e.g. (8, 1); its largest entry W (a power of two)
        defines the virtual root, so leaves have size h = W / 2**level.
    level : int
        Quoted refinement level, >= log2(W).
    periodic : tuple of bool, optional
        Per-dimension periodicity flags (node pairs merged at enumeration).
    geometry : GeometryClassifier, optional
        Carving predicate; defaults to the full root grid.
    """
    roots = tuple(int(r) for r in roots)
    dim = len(roots)
    w = max(roots)
    if w & (w - 1):
        raise ValueError(f"largest root-grid dimension must be a power of two, got {w}")
    offset = w.bit_length() - 1
    lu = int(level) - offset
    if lu < 0:
        raise ValueError(
            f"level {level} is below the root level {offset} of a {roots} grid")
    if lu > MAX_UNIT_LEVEL:
        raise ValueError(
            f"level {level} exceeds the configured maximum "
            f"{MAX_UNIT_LEVEL + offset} for a {roots} grid")
    n = 1 << lu
    axes = [np.arange(r * n, dtype=np.int64) << (MAX_UNIT_LEVEL - lu) for r in roots]
    grids = np.meshgrid(*axes, indexing="ij")
    anchors = np.stack([g.ravel() for g in grids], axis=1)
    levels = np.full(len(anchors), lu, dtype=np.int64)
    return TreeMesh(roots, anchors, levels, periodic=periodic, geometry=geometry,
                    _balance=False)


def refine(mesh, rule):
    """Refine until every leaf meets the rule's target level, then re-balance.

    No coarsening: leaves already finer than their target are kept.
    """
    anchors, levels = mesh.anchors.copy(), mesh.unit_levels.copy()
    offset = mesh.level_offset
    for _ in range(MAX_UNIT_LEVEL + 2):
        sizes = (SCALE >> levels).astype(np.int64)
        centroids = (anchors + sizes[:, None] * 0.5) / SCALE
        extents = np.ldexp(1.0, -levels)
        targets = rule.targets(centroids, extents) - offset
        need = (targets > levels) & (levels < MAX_UNIT_LEVEL)
        if not np.any(need):
            break
        anchors, levels = _split(anchors, levels, need)
    else:
        raise RuntimeError("refinement did not reach its targets")
    return TreeMesh(mesh.roots, anchors, levels, periodic=mesh.periodic,
                    geometry=mesh.geometry)


def balance_2to1(mesh):
    """Re-establish the 2:1 face (and 3-D edge) balance by refinement only."""
    return TreeMesh(mesh.roots, mesh.anchors, mesh.unit_levels,
                    periodic=mesh.periodic, geometry=mesh.geometry)


def classify(mesh, geometry):
    """Re-classify leaves against a geometry (Active/Inactive/Intercepted)."""
    return TreeMesh(mesh.roots, mesh.anchors, mesh.unit_levels,
                    periodic=mesh.periodic, geometry=geometry, _balance=False)


def enumerate_nodes(mesh):
    """Rebuild node enumeration (id maps, constraints, periodic merges).

    Enumeration runs automatically during construction; this re-runs it and
    returns a fresh mesh, raising on unbalanced input.
    """
    return TreeMesh(mesh.roots, mesh.anchors, mesh.unit_levels,
                    periodic=mesh.periodic, geometry=mesh.geometry, _balance=False)
