"""Multilinear cG(1) finite-element core on tree meshes.

Reference element: the 2**dim-node square/cube on [-1, 1]**dim with tensor
2-point Gauss quadrature (exact for the bilinear mass/stiffness products; the
nonlinear migration product is under-integrated consistently). All physical
elements are axis-aligned squares/cubes of size h, so the Jacobian is the
diagonal (h/2) I, physical gradients scale reference gradients by 2/h, and the
element metric is G_ij = (2/h)**2 delta_ij.

Assembly scatters batched per-element blocks into a COO matrix, sums it to
CSR, condenses hanging-node constraints with the mesh's reduction operator T
(A_red = T^T A T), and replaces Dirichlet rows by identity rows with the
boundary value on the right-hand side (no column elimination; the sparsity
graph keeps explicit zeros, so it stays symmetric).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import SCALE, _corner_offsets


class ReferenceElement:
    """Shape values/gradients of the multilinear element on [-1, 1]**dim."""

    def __init__(self, dim):
        self.dim = dim
        self.n_nodes = 1 << dim
        self.nodes = _corner_offsets(dim) * 2.0 - 1.0
        g = 1.0 / np.sqrt(3.0)
        pts_1d = np.array([-g, g])
        grids = np.meshgrid(*([pts_1d] * dim), indexing="ij")
        # quadrature points ordered with x fastest, matching corner order
        self.qp = np.stack([a.ravel(order="F") for a in grids], axis=1)
        self.qw = np.ones(len(self.qp))
        self.N = self.shape_values(self.qp)
        self.dN = self.shape_gradients(self.qp)

    def shape_values(self, pts):
        """N_a(xi) for points (P, dim) -> (P, n_nodes)."""
        pts = np.atleast_2d(pts)
        vals = np.ones((len(pts), self.n_nodes))
        for d in range(self.dim):
            vals *= (1.0 + pts[:, d, None] * self.nodes[None, :, d]) * 0.5
        return vals

    def shape_gradients(self, pts):
        """dN_a/dxi_e for points (P, dim) -> (P, n_nodes, dim)."""
        pts = np.atleast_2d(pts)
        grads = np.ones((len(pts), self.n_nodes, self.dim))
        for e in range(self.dim):
            for d in range(self.dim):
                if d == e:
                    grads[:, :, e] *= 0.5 * self.nodes[None, :, d]
                else:
                    grads[:, :, e] *= (1.0 + pts[:, d, None] * self.nodes[None, :, d]) * 0.5
        return grads


_REFS = {}


def get_reference(dim):
    ref = _REFS.get(dim)
    if ref is None:
        ref = _REFS[dim] = ReferenceElement(dim)
    return ref


def shape_eval(dim, pts):
    """Shape values and reference gradients at arbitrary reference points."""
    ref = get_reference(dim)
    return ref.shape_values(pts), ref.shape_gradients(pts)


class ElementBatch:
    """Per-cell quadrature context handed to element kernels.

    Attributes
    ----------
    ref : ReferenceElement
    conn_eq : (C, m) equation ids per cell corner
    h : (C,) physical element sizes
    detJ : (C,) Jacobian determinants (h/2)**dim
    gscale : (C,) physical-gradient factors 2/h
    xq : (C, nq, dim) physical quadrature point coordinates
    """

    def __init__(self, mesh):
        self.mesh = mesh
        self.ref = get_reference(mesh.dim)
        self.conn_eq = mesh.conn_eq
        self.h = mesh.cell_h
        self.detJ = (self.h * 0.5) ** mesh.dim
        self.gscale = 2.0 / self.h
        corner0 = mesh.anchors[mesh.cells] / SCALE
        self.xq = corner0[:, None, :] + (self.ref.qp[None, :, :] + 1.0) * 0.5 \
            * self.h[:, None, None]

    def gather(self, nodal):
        """Nodal field (n_eq,) or (n_eq, k) -> per-cell corner values (C, m[, k])."""
        return np.asarray(nodal)[self.conn_eq]

    def at_qp(self, corner_vals):
        """Interpolate corner values (C, m[, k]) to quadrature points (C, nq[, k])."""
        if corner_vals.ndim == 2:
            return np.einsum("qm,cm->cq", self.ref.N, corner_vals)
        return np.einsum("qm,cmk->cqk", self.ref.N, corner_vals)

    def grad_at_qp(self, corner_vals):
        """Physical gradients at quadrature points: (C, nq, dim[, k])."""
        if corner_vals.ndim == 2:
            g = np.einsum("qmd,cm->cqd", self.ref.dN, corner_vals)
            return g * self.gscale[:, None, None]
        g = np.einsum("qmd,cmk->cqdk", self.ref.dN, corner_vals)
        return g * self.gscale[:, None, None, None]


@dataclass
class SparseSystem:
    """One condensed linear solve: A x = b plus constraint bookkeeping.

    A and b live in the reduced (hanging-free) space with ncomp interleaved
    fields per equation index. dirichlet_rows/values record the identity rows
    substituted into A.
    """

    A: sp.csr_matrix
    b: np.ndarray
    mesh: object
    ncomp: int
    dirichlet_rows: np.ndarray
    dirichlet_values: np.ndarray

    @property
    def n(self):
        return self.A.shape[0]

    def reduce(self, full):
        """Full interleaved vector (n_eq*ncomp,) -> reduced (free dofs only)."""
        mesh = self.mesh
        idx = (mesh.free_eq[:, None] * self.ncomp
               + np.arange(self.ncomp)[None, :]).ravel()
        return np.asarray(full).ravel()[idx]

    def expand(self, reduced):
        """Reduced solution -> full interleaved vector with hanging nodes filled."""
        return self.mesh.t_block(self.ncomp) @ reduced


def interleave(fields):
    """Stack per-field nodal vectors [(n_eq,), ...] into one interleaved vector."""
    arr = np.stack([np.asarray(f, dtype=float) for f in fields], axis=1)
    return arr.ravel()


def make_conforming(mesh, nodal):
    """Re-interpolate hanging entries of a nodal field from their masters.

    Accepts (n_eq,) or (n_eq, k); returns the same shape.
    """
    arr = np.asarray(nodal, dtype=float)
    out = mesh.T @ arr[mesh.free_eq]
    return np.ascontiguousarray(out)


def deinterleave(vec, ncomp):
    """Interleaved vector (n*ncomp,) -> (n, ncomp) view."""
    return np.asarray(vec).reshape(-1, ncomp)


def assemble(mesh, ncomp, kernel, dirichlet=None):
    """Assemble a condensed SparseSystem from a batched element kernel.

    Parameters
    ----------
    kernel : callable(ElementBatch) -> (Ke, Fe)
        Ke (C, m*ncomp, m*ncomp), Fe (C, m*ncomp); element dof = a*ncomp + c.
    dirichlet : list of (eq_ids, comp, values), optional
        Rows to replace by identity; values scalar or per-node array. Entries
        on hanging (constrained) nodes are ignored: the interpolation
        constraint takes precedence.
    """
    batch = ElementBatch(mesh)
    Ke, Fe = kernel(batch)
    if not (np.all(np.isfinite(Ke)) and np.all(np.isfinite(Fe))):
        bad = np.flatnonzero(~np.all(np.isfinite(Ke.reshape(len(Ke), -1)), axis=1)
                             | ~np.all(np.isfinite(Fe), axis=1))
        raise FloatingPointError(
            f"element kernel produced non-finite entries in cells {bad[:5].tolist()}")
    return assemble_blocks(mesh, ncomp, Ke, Fe, dirichlet)


def assemble_blocks(mesh, ncomp, Ke, Fe, dirichlet=None):
    """Scatter precomputed element blocks, condense constraints, apply Dirichlet."""
    m = 1 << mesh.dim
    md = m * ncomp
    C = len(mesh.cells)
    dof_el = (mesh.conn_eq[:, :, None] * ncomp
              + np.arange(ncomp)[None, None, :]).reshape(C, md)
    rows = np.broadcast_to(dof_el[:, :, None], (C, md, md)).ravel()
    cols = np.broadcast_to(dof_el[:, None, :], (C, md, md)).ravel()
    n_full = mesh.n_eq * ncomp
    A_full = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n_full, n_full)).tocsr()
    b_full = np.bincount(dof_el.ravel(), weights=Fe.ravel(), minlength=n_full)

    tb = mesh.t_block(ncomp)
    A = (tb.T @ A_full @ tb).tocsr()
    b = tb.T @ b_full

    dir_rows, dir_vals = _dirichlet_dofs(mesh, ncomp, dirichlet)
    if len(dir_rows):
        A = A + sp.diags(np.zeros(A.shape[0]), format="csr")  # ensure stored diagonal
        A.sort_indices()
        on_dir = np.zeros(A.shape[0], dtype=bool)
        on_dir[dir_rows] = True
        A.data[np.repeat(on_dir, np.diff(A.indptr))] = 0.0
        indptr, indices = A.indptr, A.indices
        for r in dir_rows.tolist():
            lo, hi = indptr[r], indptr[r + 1]
            pos = lo + np.searchsorted(indices[lo:hi], r)
            A.data[pos] = 1.0
        b[dir_rows] = dir_vals
    return SparseSystem(A=A, b=b, mesh=mesh, ncomp=ncomp,
                        dirichlet_rows=dir_rows, dirichlet_values=dir_vals)


def reassemble_rhs(system: SparseSystem, Fe):
    """New SparseSystem sharing `system`'s matrix with a rebuilt load vector.

    For re-solves where the operator is unchanged but the sources moved
    (the matrix depends on frozen step data, the load on the latest
    coupled iterate).  Dirichlet rows keep their recorded values, which is
    exact because every solve in such a family targets the same time level.
    """
    mesh, ncomp = system.mesh, system.ncomp
    m = 1 << mesh.dim
    C = len(mesh.cells)
    if not np.all(np.isfinite(Fe)):
        raise FloatingPointError("element load produced non-finite entries")
    dof_el = (mesh.conn_eq[:, :, None] * ncomp
              + np.arange(ncomp)[None, None, :]).reshape(C, m * ncomp)
    b_full = np.bincount(dof_el.ravel(), weights=np.asarray(Fe).ravel(),
                         minlength=mesh.n_eq * ncomp)
    b = mesh.t_block(ncomp).T @ b_full
    b[system.dirichlet_rows] = system.dirichlet_values
    return SparseSystem(A=system.A, b=b, mesh=mesh, ncomp=ncomp,
                        dirichlet_rows=system.dirichlet_rows,
                        dirichlet_values=system.dirichlet_values)


def _dirichlet_dofs(mesh, ncomp, dirichlet):
    """Resolve (eq_ids, comp, values) triples to unique reduced rows/values."""
    if not dirichlet:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    rows, vals = [], []
    for eq_ids, comp, values in dirichlet:
        eq_ids = np.asarray(eq_ids, dtype=np.int64)
        values = np.broadcast_to(np.asarray(values, dtype=float), eq_ids.shape)
        red = mesh.red_of_eq[eq_ids]
        free = red >= 0
        rows.append(red[free] * ncomp + comp)
        vals.append(values[free])
    rows = np.concatenate(rows)
    vals = np.concatenate(vals)
    order = np.argsort(rows, kind="stable")
    rows, vals = rows[order], vals[order]
    keep = np.ones(len(rows), dtype=bool)
    keep[1:] = rows[1:] != rows[:-1]  # first entry wins on duplicates
    return rows[keep], vals[keep]


def l2_error(mesh, nodal, exact, t=None):
    """Quadrature L2 norm of (u_h - exact) over the assembled cells.

    nodal: (n_eq,) or (n_eq, k); exact: callable(x (P, dim)[, t]) matching the
    field shape. Returns a scalar for one field, an array of k for stacked.
    """
    batch = ElementBatch(mesh)
    vals = np.asarray(nodal)
    stacked = vals.ndim == 2
    uh = batch.at_qp(batch.gather(vals))
    pts = batch.xq.reshape(-1, mesh.dim)
    ue = exact(pts) if t is None else exact(pts, t)
    ue = np.asarray(ue, dtype=float)
    if stacked:
        ue = ue.reshape(uh.shape[0], uh.shape[1], -1)
        diff2 = (uh - ue) ** 2
        return np.sqrt(np.einsum("cqk,c->k", diff2, batch.detJ))
    ue = ue.reshape(uh.shape)
    return float(np.sqrt(np.einsum("cq,c->", (uh - ue) ** 2, batch.detJ)))


def integrate(mesh, nodal):
    """Integral of a nodal field over the assembled cells."""
    batch = ElementBatch(mesh)
    uq = batch.at_qp(batch.gather(np.asarray(nodal)))
    return float(np.einsum("cq,c->", uq, batch.detJ))


def point_eval(mesh, nodal, points):
    """Interpolate a nodal field at physical points ((P,) or (P, k))."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cells = mesh.locate(points)
    if np.any(cells < 0):
        raise ValueError("point outside the mesh")
    ref = get_reference(mesh.dim)
    h = mesh.cell_h[cells]
    corner0 = mesh.anchors[mesh.cells[cells]] / SCALE
    xi = (points - corner0) / h[:, None] * 2.0 - 1.0
    N = ref.shape_values(np.clip(xi, -1.0, 1.0))
    vals = np.asarray(nodal)[mesh.conn_eq[cells]]
    if vals.ndim == 3:
        return np.einsum("pm,pmk->pk", N, vals)
    return np.einsum("pm,pm->p", N, vals)
