"""Assembly of the bilinear forms and right-hand sides.

All matrices come back as scipy CSR with duplicate triplets summed; exact
zeros that arise from orthogonality are kept as structural entries (they
count in the sparsity studies, matching how FEM software reports nnz).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
from scipy import sparse

from .geometry import CUT, GeometryError
from .quadrature import map_to_triangle, segment_rule, triangle_rule
from .spaces import DGSpace, RTSpace

CHUNK = 512


class AssemblyError(Exception):
    pass


@dataclass(frozen=True)
class GPConfig:
    """Ghost penalty configuration.

    variant: "normal_jump" (summed normal-derivative jumps, each term scaled
    by h_F^(2l+1)) or "direct" (difference of polynomial extensions over the
    facet patch).  `degree` is the stabilized polynomial degree; the whole
    facet term is additionally scaled by h_F^scale_exponent.
    """

    variant: str = "normal_jump"
    degree: int = 0
    scale_exponent: float = 0.0

    def __post_init__(self):
        if self.variant not in ("normal_jump", "direct"):
            raise AssemblyError(f"unknown GP variant {self.variant!r}")


class _Triplets:
    def __init__(self):
        self.rows = []
        self.cols = []
        self.vals = []

    def add_block(self, rows, cols, block):
        n = block.shape[-2]
        m = block.shape[-1]
        if block.ndim == 2:
            rows = np.repeat(np.asarray(rows), m)
            cols = np.tile(np.asarray(cols), n)
            self.rows.append(rows)
            self.cols.append(cols)
            self.vals.append(np.asarray(block).ravel())
        else:
            r = np.repeat(rows, m, axis=1)
            c = np.tile(cols, (1, n))
            self.rows.append(r.ravel())
            self.cols.append(c.ravel())
            self.vals.append(np.asarray(block).reshape(len(block), -1).ravel())

    def tocsr(self, shape):
        if not self.rows:
            return sparse.csr_matrix(shape)
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        A = sparse.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
        A.sum_duplicates()
        return A


def _volume_batches(cutdata, elems, measure):
    """Yield (elem_ids, pts, wts) batches for the requested measure."""
    elems = np.asarray(elems)
    if measure == "active":
        for i in range(0, len(elems), CHUNK):
            chunk = elems[i : i + CHUNK]
            pts, wts = cutdata.full_batch(chunk)
            yield chunk, pts, wts
        return
    if measure != "omega":
        raise AssemblyError(f"unknown measure {measure!r}")
    is_cut = np.zeros(cutdata.mesh.num_elements, dtype=bool)
    is_cut[cutdata.classes.cut] = True
    uncut = elems[~is_cut[elems]]
    for i in range(0, len(uncut), CHUNK):
        chunk = uncut[i : i + CHUNK]
        pts, wts = cutdata.full_batch(chunk)
        yield chunk, pts, wts
    cut_here = set(int(e) for e in elems[is_cut[elems]])
    for ids, pts, wts in cutdata.cut_groups():
        keep = np.array([int(e) in cut_here for e in ids], dtype=bool)
        if not keep.any():
            continue
        yield ids[keep], pts[keep], wts[keep]


def assemble_mass(space, cutdata, measure="omega"):
    """(u, v) over Omega or the active mesh for an RT (vector) space."""
    trip = _Triplets()
    for elems, pts, wts in _volume_batches(cutdata, space.elems, measure):
        loc = space.local_ids(elems)
        tab = space.tabulate(loc, pts)
        block = np.einsum("nqid,nqjd,nq->nij", tab, tab, wts)
        block = 0.5 * (block + np.transpose(block, (0, 2, 1)))
        dofs = space.element_dofs(loc)
        trip.add_block(dofs, dofs, block)
    return trip.tocsr((space.ndof, space.ndof))


def assemble_scalar_mass(dg, cutdata, measure="omega", elems=None):
    """(p, q) over Omega or the active mesh for a DG space."""
    trip = _Triplets()
    base = dg.elems if elems is None else np.asarray(elems)
    for elems_, pts, wts in _volume_batches(cutdata, base, measure):
        loc = dg.local_ids(elems_)
        tab = dg.tabulate(loc, pts)
        block = np.einsum("nqi,nqj,nq->nij", tab, tab, wts)
        block = 0.5 * (block + np.transpose(block, (0, 2, 1)))
        dofs = dg.element_dofs(loc)
        trip.add_block(dofs, dofs, block)
    return trip.tocsr((dg.ndof, dg.ndof))


def assemble_div_constraint(space, qspace, cutdata, measure="active"):
    """b(v, q) = (div v, q) over the requested measure; rows are q-dofs."""
    trip = _Triplets()
    for elems, pts, wts in _volume_batches(cutdata, space.elems, measure):
        loc = space.local_ids(elems)
        qloc = qspace.local_ids(elems)
        divs = space.tabulate_div(loc, pts)
        qtab = qspace.tabulate(qloc, pts)
        block = np.einsum("nq,nqi,nqj->nij", wts, qtab, divs)
        trip.add_block(qspace.element_dofs(qloc), space.element_dofs(loc), block)
    return trip.tocsr((qspace.ndof, space.ndof))


# -- ghost penalties -----------------------------------------------------------


def _component_degree(space):
    return space.k + 1 if isinstance(space, RTSpace) else space.degree


def _tabulate_any(space, loc, pts, dx, dy):
    tab = space.tabulate(loc, pts, dx, dy)
    if tab.ndim == 3:  # scalar space: add a component axis
        tab = tab[..., None]
    return tab


def _directional_jump_tables(space, locL, locR, pts, nu, ell):
    """(nq, nloc, ncomp) tables of (nu . grad)^ell on both sides."""
    shape = None
    tabL = tabR = 0.0
    for i in range(ell + 1):
        c = comb(ell, i) * nu[0] ** i * nu[1] ** (ell - i)
        if c == 0.0 and ell > 0:
            continue
        tabL = tabL + c * _tabulate_any(space, [locL], pts[None], i, ell - i)[0]
        tabR = tabR + c * _tabulate_any(space, [locR], pts[None], i, ell - i)[0]
        shape = True
    assert shape is not None
    return tabL, tabR


def _facet_union_dofs(space, locL, locR):
    dofsL = space.element_dofs([locL])[0]
    dofsR = space.element_dofs([locR])[0]
    union, inv = np.unique(np.concatenate([dofsL, dofsR]), return_inverse=True)
    idxL = inv[: len(dofsL)]
    idxR = inv[len(dofsL) :]
    return union, idxL, idxR


def assemble_gp(space, facets, config: GPConfig, gamma=1.0):
    """Ghost penalty sum over `facets` for a scalar or vector space."""
    trip = _Triplets()
    mesh = space.mesh
    facets = np.asarray(facets, dtype=np.int64)
    qdeg = 2 * _component_degree(space) + 2
    tq, tw = segment_rule(qdeg)
    ref_pts, ref_wts = triangle_rule(qdeg)
    for fid in facets:
        lo, hi = mesh.facet_elems[fid]
        if hi < 0:
            raise AssemblyError(f"GP facet {fid} is a boundary facet")
        locL = space.loc_of_elem[int(lo)]
        locR = space.loc_of_elem[int(hi)]
        union, idxL, idxR = _facet_union_dofs(space, locL, locR)
        nun = len(union)
        hF = mesh.facet_lengths[fid]
        scale = gamma * hF ** config.scale_exponent
        local = np.zeros((nun, nun))
        if config.variant == "normal_jump":
            a = mesh.vertices[mesh.facets[fid, 0]]
            b = mesh.vertices[mesh.facets[fid, 1]]
            pts = a[None, :] + tq[:, None] * (b - a)[None, :]
            wts = tw * hF
            nu = mesh.facet_normals[fid]
            for ell in range(config.degree + 1):
                tabL, tabR = _directional_jump_tables(space, locL, locR, pts, nu, ell)
                jumps = np.zeros((len(pts), nun, tabL.shape[-1]))
                np.add.at(jumps, (slice(None), idxL), tabL)
                np.add.at(jumps, (slice(None), idxR), -tabR)
                local += hF ** (2 * ell + 1) * np.einsum("qic,qjc,q->ij", jumps, jumps, wts)
        else:
            vertsL = mesh.element_vertices([lo])[0]
            vertsR = mesh.element_vertices([hi])[0]
            ptsL, wtsL = map_to_triangle(vertsL, ref_pts, ref_wts)
            ptsR, wtsR = map_to_triangle(vertsR, ref_pts, ref_wts)
            pts = np.vstack([ptsL, ptsR])
            wts = np.concatenate([wtsL, wtsR])
            tabL = _tabulate_any(space, [locL], pts[None], 0, 0)[0]
            tabR = _tabulate_any(space, [locR], pts[None], 0, 0)[0]
            diffs = np.zeros((len(pts), nun, tabL.shape[-1]))
            np.add.at(diffs, (slice(None), idxL), tabL)
            np.add.at(diffs, (slice(None), idxR), -tabR)
            local = np.einsum("qic,qjc,q->ij", diffs, diffs, wts)
        local = 0.5 * (local + local.T)  # exact symmetry despite BLAS ordering
        trip.add_block(union, union, scale * local)
    return trip.tocsr((space.ndof, space.ndof))


def assemble_gp_pairing(rt, qspace, facets, config: GPConfig, div_operator, gamma=1.0):
    """j_h(div v, q): ghost penalty applied between divergences and scalars."""
    J = assemble_gp(qspace, facets, config, gamma=gamma)
    return (J @ div_operator).tocsr()


# -- right-hand sides -----------------------------------------------------------


def assemble_boundary_rhs(space, cutdata, p_D):
    """Entries int_Gamma (v . n) p_D ds."""
    rhs = np.zeros(space.ndof)
    for e in cutdata.classes.cut:
        e = int(e)
        pts, wts, normals = cutdata.interface(e)
        loc = space.loc_of_elem[e]
        tab = space.tabulate([loc], pts[None])[0]
        vdotn = np.einsum("qld,qd->ql", tab, normals)
        pd = np.asarray(p_D(pts))
        vals = np.einsum("q,ql,q->l", wts, vdotn, pd)
        np.add.at(rhs, space.element_dofs([loc])[0], vals)
    return rhs


def assemble_force_rhs(space, cutdata, g):
    """Entries int_Omega g . v dx."""
    rhs = np.zeros(space.ndof)
    for elems, pts, wts in _volume_batches(cutdata, space.elems, "omega"):
        loc = space.local_ids(elems)
        tab = space.tabulate(loc, pts)
        gv = np.asarray(g(pts.reshape(-1, 2))).reshape(pts.shape)
        vals = np.einsum("nq,nqld,nqd->nl", wts, tab, gv)
        np.add.at(rhs, space.element_dofs(loc).ravel(), vals.ravel())
    return rhs


def assemble_scalar_rhs(dg, cutdata, f, measure="omega", elems=None):
    """Entries int f q over Omega or the active mesh."""
    rhs = np.zeros(dg.ndof)
    base = dg.elems if elems is None else np.asarray(elems)
    for elems_, pts, wts in _volume_batches(cutdata, base, measure):
        loc = dg.local_ids(elems_)
        tab = dg.tabulate(loc, pts)
        fv = np.asarray(f(pts.reshape(-1, 2))).reshape(pts.shape[:2])
        vals = np.einsum("nq,nql,nq->nl", wts, tab, fv)
        np.add.at(rhs, dg.element_dofs(loc).ravel(), vals.ravel())
    return rhs


# -- stabilized source extension -------------------------------------------------


@dataclass
class ExtendedSource:
    coeffs: np.ndarray
    space: DGSpace
    kf: int
    gamma_f: float

    def evaluate(self, loc_ids, pts):
        return self.space.evaluate(self.coeffs, loc_ids, pts)


@dataclass
class ExactSource:
    """Source used directly as a field on the active mesh (f_h = f)."""

    f: object

    def evaluate(self, loc_ids, pts):
        return np.asarray(self.f(pts.reshape(-1, 2))).reshape(pts.shape[:2])


def compute_extended_source(f, kf, gamma_f, patches, cutdata, gp: GPConfig | None = None):
    """Solve the patchwise stabilized projection defining f_h on the active mesh.

    On every patch: (f_h, q)_Omega + gamma_f * j(f_h, q) = (f, q)_Omega for
    all q in P_kf(patch); trivial uncut patches reduce to the plain
    elementwise L2 projection.
    """
    if gamma_f <= 0:
        raise AssemblyError("gamma_f must be positive")
    mesh = cutdata.mesh
    classes = cutdata.classes
    dg = DGSpace(mesh, classes.active, kf)
    gp = gp or GPConfig(degree=kf)
    gp = GPConfig(variant=gp.variant, degree=kf, scale_exponent=gp.scale_exponent)
    coeffs = np.zeros(dg.ndof)
    is_cut = np.zeros(mesh.num_elements, dtype=bool)
    is_cut[classes.cut] = True

    # trivial uncut singletons in one vectorized pass
    trivial = np.array(
        [p.elements[0] for p in patches.patches if len(p.elements) == 1 and not is_cut[p.elements[0]]],
        dtype=np.int64,
    )
    if len(trivial):
        loc = dg.local_ids(trivial)
        pts, wts = cutdata.full_batch(trivial)
        tab = dg.tabulate(loc, pts)
        fv = np.asarray(f(pts.reshape(-1, 2))).reshape(pts.shape[:2])
        vals = np.einsum("nq,nql,nq->nl", wts, tab, fv)
        coeffs[dg.element_dofs(loc).ravel()] = vals.ravel()

    for patch in patches.patches:
        if len(patch.elements) == 1 and not is_cut[patch.elements[0]]:
            continue
        elems = np.array(patch.elements, dtype=np.int64)
        loc = dg.local_ids(elems)
        dofs = dg.element_dofs(loc)
        ndl = dofs.size
        pos = {int(d): i for i, d in enumerate(dofs.ravel())}
        A = np.zeros((ndl, ndl))
        b = np.zeros(ndl)
        for i, e in enumerate(elems):
            sl = slice(i * dg.nb, (i + 1) * dg.nb)
            if is_cut[e]:
                pts, wts = cutdata.volume(e)
                tab = dg.tabulate([loc[i]], pts[None])[0]
                A[sl, sl] += np.einsum("q,qi,qj->ij", wts, tab, tab)
                b[sl.start : sl.stop] += np.einsum("q,qi,q->i", wts, tab, np.asarray(f(pts)))
            else:
                A[sl, sl] += np.eye(dg.nb)  # orthonormal basis: full mass is I
                pts, wts = cutdata.full_batch([e])
                tab = dg.tabulate([loc[i]], pts)[0]
                fv = np.asarray(f(pts.reshape(-1, 2)))
                b[sl.start : sl.stop] += np.einsum("q,qi,q->i", wts[0], tab, fv)
        if patch.facets:
            J = assemble_gp(dg, np.array(patch.facets), gp)
            Jl = J[dofs.ravel()][:, dofs.ravel()].toarray()
            A += gamma_f * Jl
        try:
            x = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise AssemblyError(f"unstable patch with root {patch.root}") from exc
        if not np.all(np.isfinite(x)):
            raise AssemblyError(f"unstable patch with root {patch.root}")
        coeffs[dofs.ravel()] = x
    return ExtendedSource(coeffs, dg, kf, gamma_f)


def pair_source_active(source, qspace, cutdata):
    """Vector of (f_h, q)_activemesh entries for the conservation equation."""
    rhs = np.zeros(qspace.ndof)
    if isinstance(source, ExtendedSource) and source.space.degree == qspace.degree:
        return source.coeffs.copy()  # both orthonormal on the same elements
    for i in range(0, len(qspace.elems), CHUNK):
        elems = qspace.elems[i : i + CHUNK]
        loc = qspace.local_ids(elems)
        pts, wts = cutdata.full_batch(elems)
        tab = qspace.tabulate(loc, pts)
        if isinstance(source, ExtendedSource):
            fv = source.evaluate(source.space.local_ids(elems), pts)
        else:
            fv = source.evaluate(None, pts)
        vals = np.einsum("nq,nql,nq->nl", wts, tab, fv)
        rhs[qspace.element_dofs(loc).ravel()] = vals.ravel()
    return rhs


# -- Neumann multiplier stabilization ---------------------------------------------


def assemble_neumann_gp(dg_cut, domain, cutdata, gamma_F, gamma_T, facets, gp: GPConfig):
    """Facet GP scaled by h^-1 plus the volume normal-derivative term."""
    mesh = dg_cut.mesh
    cfg = GPConfig(variant=gp.variant, degree=dg_cut.degree, scale_exponent=-1.0)
    J = assemble_gp(dg_cut, facets, cfg, gamma=gamma_F) if len(facets) else sparse.csr_matrix(
        (dg_cut.ndof, dg_cut.ndof)
    )
    trip = _Triplets()
    for e in dg_cut.elems:
        e = int(e)
        loc = dg_cut.local_ids([e])
        pts, wts = cutdata.full_batch([e])
        grad = dg_cut.tabulate_grad(loc, pts)[0]
        if domain.kind == "levelset":
            nh = domain.unit_normals(pts[0])
        else:
            nh = domain.nearest_edge_normal(pts[0])
        gn = np.einsum("qld,qd->ql", grad, nh)
        hT = mesh.element_diameters[e]
        block = gamma_T * hT * np.einsum("q,qi,qj->ij", wts[0], gn, gn)
        dofs = dg_cut.element_dofs(loc)[0]
        trip.add_block(dofs, dofs, block)
    JT = trip.tocsr((dg_cut.ndof, dg_cut.ndof))
    return (J + JT).tocsr()


def cut_facet_set(mesh, domain, candidate_facets, mode="cut_by_gamma", classes=None):
    """F_h^Gamma: facets cut by the boundary (default) or all facets interior
    to the cut-element submesh (the broader definition, selectable)."""
    from .geometry import facet_is_cut

    out = []
    if mode == "cut_by_gamma":
        for f in candidate_facets:
            if facet_is_cut(mesh, domain, int(f)):
                out.append(int(f))
    elif mode == "cut_submesh":
        if classes is None:
            raise AssemblyError("cut_submesh mode needs the classification")
        cut = set(int(e) for e in classes.cut)
        for f in candidate_facets:
            lo, hi = mesh.facet_elems[f]
            if hi >= 0 and int(lo) in cut and int(hi) in cut:
                out.append(int(f))
    else:
        raise AssemblyError(f"unknown facet-set mode {mode!r}")
    return np.array(out, dtype=np.int64)


# -- hybridization coupling --------------------------------------------------------


def assemble_normal_coupling(broken_rt, facet_space):
    """c(v, q_F) = -(jump(v . n), q_F) over interior active facets.

    With facet moments as RT dofs and the matching orthonormal facet basis the
    entries are exactly -1 (left trace) and +1 (right trace).
    """
    if not broken_rt.broken:
        raise AssemblyError("normal coupling expects the broken RT space")
    mesh = broken_rt.mesh
    trip = _Triplets()
    for fid in facet_space.facets:
        lo, hi = mesh.facet_elems[fid]
        rows = facet_space.facet_dofs(fid)
        for elem, sign in ((int(lo), -1.0), (int(hi), 1.0)):
            loc = broken_rt.loc_of_elem[elem]
            edge = int(np.flatnonzero(mesh.elem_facets[elem] == fid)[0])
            cols = broken_rt.element_dofs([loc])[0][broken_rt.local_facet_slice(edge)]
            trip.add_block(rows, cols, sign * np.eye(len(rows)))
    return trip.tocsr((facet_space.ndof, broken_rt.ndof))
