"""Raviart-Thomas, discontinuous and facet polynomial spaces on active meshes.

Element bases are constructed per physical element by duality: the local
shape functions are dual to globally defined degrees of freedom, i.e. normal
moments against an orthonormal Legendre basis on each facet (using the
facet's global orientation) plus interior moments against vector monomials.
Because both elements adjacent to a facet use the same facet functionals,
normal continuity of the unbroken space is exact up to roundoff.

Scalar spaces use per-element L2-orthonormal modal bases (monomials with a
Cholesky Gram factor), which makes full-element mass matrices identities.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import legvander
from scipy import sparse

from .quadrature import segment_rule, triangle_rule

__all__ = [
    "DGSpace",
    "FacetSpace",
    "RTSpace",
    "div_map",
    "interpolate_rt",
    "project_l2",
]


def monomial_exponents(degree):
    """Exponent pairs (a, b), a+b <= degree, ordered by total degree."""
    out = [(a, d - a) for d in range(degree + 1) for a in range(d, -1, -1)]
    return np.array(out, dtype=np.int64)


def _falling(n, k):
    out = np.ones_like(n, dtype=float)
    for i in range(k):
        out = out * np.maximum(n - i, 0)
    return out


def eval_scaled_monomials(exps, xi, dx=0, dy=0):
    """Evaluate d^dx/dxi d^dy/deta of monomials xi^a eta^b at xi (..., 2)."""
    a = exps[:, 0]
    b = exps[:, 1]
    coef = _falling(a, dx) * _falling(b, dy)
    pa = np.maximum(a - dx, 0)
    pb = np.maximum(b - dy, 0)
    vals = (xi[..., 0:1] ** pa) * (xi[..., 1:2] ** pb) * coef
    return vals


def _scaled_coords(centroids, scales, pts):
    return (pts - centroids[:, None, :]) / scales[:, None, None]


def _legendre_orthonormal(npoly, t):
    """Orthonormal-on-[0,1] Legendre values at t, up to a 1/sqrt(len) factor.

    Rows are evaluation points, columns the k+1 polynomials; the caller
    divides by sqrt(facet length) to get L2(F)-orthonormal traces.
    """
    V = legvander(2.0 * np.asarray(t) - 1.0, npoly - 1)
    return V * np.sqrt(2.0 * np.arange(npoly) + 1.0)


class SpaceError(Exception):
    pass


# ---------------------------------------------------------------------------
# scalar modal space
# ---------------------------------------------------------------------------


class DGSpace:
    """Discontinuous piecewise polynomials of degree m on a set of elements."""

    def __init__(self, mesh, elems, degree):
        self.mesh = mesh
        self.degree = int(degree)
        self.elems = np.array(sorted(int(e) for e in elems), dtype=np.int64)
        self.loc_of_elem = {int(e): i for i, e in enumerate(self.elems)}
        self.exps = monomial_exponents(self.degree)
        self.nb = len(self.exps)
        self.ndof = self.nb * len(self.elems)
        self.centroids = mesh.vertices[mesh.elements[self.elems]].mean(axis=1)
        self.scales = mesh.element_diameters[self.elems].astype(float)

        ref_pts, ref_wts = triangle_rule(2 * self.degree + 2)
        verts = mesh.element_vertices(self.elems)
        v0 = verts[:, 0]
        B = np.stack([verts[:, 1] - v0, verts[:, 2] - v0], axis=-1)
        pts = np.einsum("qj,nij->nqi", ref_pts, B) + v0[:, None, :]
        area2 = np.abs(B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0])
        wts = ref_wts[None, :] * area2[:, None]
        xi = _scaled_coords(self.centroids, self.scales, pts)
        M = eval_scaled_monomials(self.exps, xi)
        G = np.einsum("nqi,nqj,nq->nij", M, M, wts)
        L = np.linalg.cholesky(G)
        self.coeff = np.transpose(np.linalg.inv(L), (0, 2, 1))

    def local_ids(self, elems):
        return np.array([self.loc_of_elem[int(e)] for e in np.atleast_1d(elems)], dtype=np.int64)

    def element_dofs(self, loc_ids):
        loc_ids = np.atleast_1d(loc_ids)
        return loc_ids[:, None] * self.nb + np.arange(self.nb)[None, :]

    def tabulate(self, loc_ids, pts, dx=0, dy=0):
        """Basis values/derivatives: (n, nq, nb) for points (n, nq, 2)."""
        loc_ids = np.atleast_1d(loc_ids)
        xi = _scaled_coords(self.centroids[loc_ids], self.scales[loc_ids], pts)
        M = eval_scaled_monomials(self.exps, xi, dx, dy)
        vals = np.einsum("nqi,nij->nqj", M, self.coeff[loc_ids])
        if dx or dy:
            vals = vals / self.scales[loc_ids][:, None, None] ** (dx + dy)
        return vals

    def tabulate_grad(self, loc_ids, pts):
        gx = self.tabulate(loc_ids, pts, dx=1)
        gy = self.tabulate(loc_ids, pts, dy=1)
        return np.stack([gx, gy], axis=-1)

    def evaluate(self, coeffs, loc_ids, pts):
        tab = self.tabulate(loc_ids, pts)
        c = coeffs[self.element_dofs(np.atleast_1d(loc_ids))]
        return np.einsum("nqj,nj->nq", tab, c)


# ---------------------------------------------------------------------------
# facet space
# ---------------------------------------------------------------------------


class FacetSpace:
    """P_k on the interior facets of the active mesh (orthonormal Legendre)."""

    def __init__(self, mesh, facets, degree):
        self.mesh = mesh
        self.degree = int(degree)
        self.facets = np.array(sorted(int(f) for f in facets), dtype=np.int64)
        self.loc_of_facet = {int(f): i for i, f in enumerate(self.facets)}
        self.nb = self.degree + 1
        self.ndof = self.nb * len(self.facets)

    def facet_dofs(self, facet):
        return self.loc_of_facet[int(facet)] * self.nb + np.arange(self.nb)

    def tabulate(self, facet, t):
        """Basis values at parameters t in [0, 1] along the sorted-vertex facet."""
        length = self.mesh.facet_lengths[int(facet)]
        return _legendre_orthonormal(self.nb, t) / np.sqrt(length)


# ---------------------------------------------------------------------------
# Raviart-Thomas space
# ---------------------------------------------------------------------------


class RTSpace:
    """RT_k on the active mesh, optionally with broken normal continuity.

    Local dimension is (k+1)(k+3); the local dof order is (edge0 moments,
    edge1, edge2, interior moments), where edge j is the facet opposite the
    pair (v_j, v_{j+1}) of the CCW element.
    """

    def __init__(self, mesh, classes, degree, broken=False):
        self.mesh = mesh
        self.classes = classes
        self.k = int(degree)
        self.broken = bool(broken)
        k = self.k
        self.elems = np.asarray(classes.active, dtype=np.int64)
        self.loc_of_elem = {int(e): i for i, e in enumerate(self.elems)}
        facets = np.unique(mesh.elem_facets[self.elems].ravel())
        self.facets = facets
        self.facet_loc = {int(f): i for i, f in enumerate(facets)}
        both_active = [
            int(f)
            for f in facets
            if mesh.facet_elems[f, 1] >= 0
            and classes.is_active[mesh.facet_elems[f, 0]]
            and classes.is_active[mesh.facet_elems[f, 1]]
        ]
        self.interior_facets = np.array(both_active, dtype=np.int64)

        self.nfd = k + 1
        self.nid = k * (k + 1)
        self.nloc = (k + 1) * (k + 3)
        if broken:
            self.ndof = self.nloc * len(self.elems)
        else:
            self.ndof = self.nfd * len(facets) + self.nid * len(self.elems)
            self._interior_offset = self.nfd * len(facets)

        self.centroids = mesh.vertices[mesh.elements[self.elems]].mean(axis=1)
        self.scales = mesh.element_diameters[self.elems].astype(float)
        self._build_spanning_tables()
        self._build_dual_basis()

    # -- spanning set [P_k]^2 + (x - c) Ptilde_k ------------------------------

    def _build_spanning_tables(self):
        k = self.k
        exps_k1 = monomial_exponents(k + 1)
        index = {(int(a), int(b)): i for i, (a, b) in enumerate(exps_k1)}
        comp_coef = []
        comp_idx = []
        div_coef = []
        div_idx = []
        exps_k = monomial_exponents(k)
        index_k = {(int(a), int(b)): i for i, (a, b) in enumerate(exps_k)}
        zero = index[(0, 0)]
        for a, b in exps_k:
            a, b = int(a), int(b)
            comp_coef.append((1.0, 0.0))
            comp_idx.append((index[(a, b)], zero))
            div_coef.append(float(a))
            div_idx.append(index_k[(a - 1, b)] if a >= 1 else 0)
        for a, b in exps_k:
            a, b = int(a), int(b)
            comp_coef.append((0.0, 1.0))
            comp_idx.append((zero, index[(a, b)]))
            div_coef.append(float(b))
            div_idx.append(index_k[(a, b - 1)] if b >= 1 else 0)
        for a, b in exps_k:
            a, b = int(a), int(b)
            if a + b != k:
                continue
            comp_coef.append((1.0, 1.0))  # times the element scale, applied later
            comp_idx.append((index[(a + 1, b)], index[(a, b + 1)]))
            div_coef.append(float(a + b + 2))
            div_idx.append(index_k[(a, b)])
        self._exps = exps_k1
        self._exps_div = exps_k
        self._comp_coef = np.array(comp_coef)  # (N, 2)
        self._comp_idx = np.array(comp_idx, dtype=np.int64)  # (N, 2)
        self._div_coef = np.array(div_coef)
        self._div_idx = np.array(div_idx, dtype=np.int64)
        self._x_part = np.zeros(self.nloc)
        self._x_part[2 * len(exps_k):] = 1.0  # marks spanning funs carrying (x - c)
        assert len(comp_coef) == self.nloc

    def _spanning_values(self, loc_ids, pts, dx=0, dy=0):
        """Spanning-set component values (n, nq, N, 2) at physical points."""
        loc_ids = np.atleast_1d(loc_ids)
        scales = self.scales[loc_ids]
        xi = _scaled_coords(self.centroids[loc_ids], scales, pts)
        M = eval_scaled_monomials(self._exps, xi, dx, dy)
        vx = M[..., self._comp_idx[:, 0]] * self._comp_coef[:, 0]
        vy = M[..., self._comp_idx[:, 1]] * self._comp_coef[:, 1]
        vals = np.stack([vx, vy], axis=-1)
        # the (x - c)-type spanning functions carry one factor of the scale
        sc = np.ones((len(loc_ids), 1, self.nloc, 1))
        sc[:, :, self._x_part > 0, :] = scales[:, None, None, None]
        if dx or dy:
            sc = sc / scales[:, None, None, None] ** (dx + dy)
        return vals * sc

    def _spanning_div(self, loc_ids, pts, dx=0, dy=0):
        loc_ids = np.atleast_1d(loc_ids)
        scales = self.scales[loc_ids]
        xi = _scaled_coords(self.centroids[loc_ids], scales, pts)
        M = eval_scaled_monomials(self._exps_div, xi, dx, dy)
        divs = M[..., self._div_idx] * self._div_coef
        # [P_k]^2 spanning functions pick up 1/h from the chain rule, the
        # (x - c)-type ones do not (their own h factor cancels it)
        hpow = np.where(self._x_part > 0, 0.0, 1.0) + (dx + dy)
        return divs * scales[:, None, None] ** -hpow[None, None, :]

    # -- dual basis -------------------------------------------------------------

    def _build_dual_basis(self):
        k = self.k
        mesh = self.mesh
        nE = len(self.elems)
        N = self.nloc
        tq, tw = segment_rule(2 * k + 2)
        leg = _legendre_orthonormal(k + 1, tq)  # (nq1, k+1)

        tris = mesh.elements[self.elems]
        fids = mesh.elem_facets[self.elems]  # (nE, 3)
        fverts = mesh.facets[fids]  # (nE, 3, 2) sorted vertex ids
        pa = mesh.vertices[fverts[:, :, 0]]
        pb = mesh.vertices[fverts[:, :, 1]]
        lens = mesh.facet_lengths[fids]
        nus = mesh.facet_normals[fids]  # (nE, 3, 2) oriented normals
        fpts = pa[:, :, None, :] + tq[None, None, :, None] * (pb - pa)[:, :, None, :]

        V = np.empty((nE, N, N))
        for j in range(3):
            vals = self._spanning_values(np.arange(nE), fpts[:, j])  # (nE, nq1, N, 2)
            vdotn = np.einsum("nqmd,nd->nqm", vals, nus[:, j])
            # rows j*(k+1)+i: sqrt(|F|)-normalized Legendre moments
            mom = np.einsum("q,qi,nqm->nim", tw, leg, vdotn) * np.sqrt(lens[:, j])[:, None, None]
            V[:, j * (k + 1) : (j + 1) * (k + 1), :] = mom
        if k > 0:
            ref_pts, ref_wts = triangle_rule(2 * k + 2)
            verts = mesh.element_vertices(self.elems)
            v0 = verts[:, 0]
            B = np.stack([verts[:, 1] - v0, verts[:, 2] - v0], axis=-1)
            pts = np.einsum("qj,nij->nqi", ref_pts, B) + v0[:, None, :]
            area2 = np.abs(B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0])
            wts = ref_wts[None, :] * area2[:, None]
            vals = self._spanning_values(np.arange(nE), pts)
            xi = _scaled_coords(self.centroids, self.scales, pts)
            Mlow = eval_scaled_monomials(monomial_exponents(k - 1), xi)
            nlow = Mlow.shape[-1]
            row = 3 * (k + 1)
            for comp in range(2):
                mom = np.einsum("nq,nqi,nqm->nim", wts, Mlow, vals[..., comp])
                V[:, row + comp * nlow : row + (comp + 1) * nlow, :] = mom

        # orthonormalize the spanning set before inverting for conditioning
        ref_pts, ref_wts = triangle_rule(2 * (k + 1) + 2)
        verts = mesh.element_vertices(self.elems)
        v0 = verts[:, 0]
        B = np.stack([verts[:, 1] - v0, verts[:, 2] - v0], axis=-1)
        pts = np.einsum("qj,nij->nqi", ref_pts, B) + v0[:, None, :]
        area2 = np.abs(B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0])
        wts = ref_wts[None, :] * area2[:, None]
        vals = self._spanning_values(np.arange(nE), pts)
        G = np.einsum("nqmd,nqld,nq->nml", vals, vals, wts)
        L = np.linalg.cholesky(G)
        S = np.transpose(np.linalg.inv(L), (0, 2, 1))
        A = V @ S
        self.coeff = S @ np.linalg.inv(A)  # (nE, N, N), shape l = sum_i coeff[i, l] span_i

    # -- dof maps ----------------------------------------------------------------

    def element_dofs(self, loc_ids):
        loc_ids = np.atleast_1d(loc_ids)
        n = len(loc_ids)
        k = self.k
        out = np.empty((n, self.nloc), dtype=np.int64)
        if self.broken:
            base = loc_ids[:, None] * self.nloc
            return base + np.arange(self.nloc)[None, :]
        fids = self.mesh.elem_facets[self.elems[loc_ids]]
        floc = np.vectorize(self.facet_loc.__getitem__, otypes=[np.int64])(fids)
        for j in range(3):
            out[:, j * (k + 1) : (j + 1) * (k + 1)] = floc[:, j : j + 1] * self.nfd + np.arange(k + 1)
        out[:, 3 * (k + 1) :] = (
            self._interior_offset + loc_ids[:, None] * self.nid + np.arange(self.nid)[None, :]
        )
        return out

    def facet_dofs(self, facet):
        """Global dofs of one facet (unbroken layout only)."""
        if self.broken:
            raise SpaceError("facet_dofs is only defined for the unbroken space")
        return self.facet_loc[int(facet)] * self.nfd + np.arange(self.nfd)

    def local_facet_slice(self, local_edge):
        return slice(local_edge * self.nfd, (local_edge + 1) * self.nfd)

    def local_ids(self, elems):
        return np.array([self.loc_of_elem[int(e)] for e in np.atleast_1d(elems)], dtype=np.int64)

    # -- evaluation ---------------------------------------------------------------

    def tabulate(self, loc_ids, pts, dx=0, dy=0):
        """Shape-function (component) values (n, nq, nloc, 2)."""
        loc_ids = np.atleast_1d(loc_ids)
        span = self._spanning_values(loc_ids, pts, dx, dy)
        return np.einsum("nqmd,nml->nqld", span, self.coeff[loc_ids])

    def tabulate_div(self, loc_ids, pts, dx=0, dy=0):
        loc_ids = np.atleast_1d(loc_ids)
        span = self._spanning_div(loc_ids, pts, dx, dy)
        return np.einsum("nqm,nml->nql", span, self.coeff[loc_ids])

    def evaluate(self, coeffs, loc_ids, pts):
        tab = self.tabulate(loc_ids, pts)
        c = coeffs[self.element_dofs(np.atleast_1d(loc_ids))]
        return np.einsum("nqld,nl->nqd", tab, c)

    def evaluate_div(self, coeffs, loc_ids, pts):
        tab = self.tabulate_div(loc_ids, pts)
        c = coeffs[self.element_dofs(np.atleast_1d(loc_ids))]
        return np.einsum("nql,nl->nq", tab, c)


# ---------------------------------------------------------------------------
# interpolation / projection / divergence
# ---------------------------------------------------------------------------


def interpolate_rt(u, space, quad_degree=None):
    """Canonical RT interpolation: facet normal moments + interior moments."""
    k = space.k
    mesh = space.mesh
    deg = quad_degree if quad_degree is not None else 2 * k + 2
    tq, tw = segment_rule(deg)
    leg = _legendre_orthonormal(k + 1, tq)
    coeffs = np.zeros(space.ndof)

    def facet_moments(fid):
        a = mesh.vertices[mesh.facets[fid, 0]]
        b = mesh.vertices[mesh.facets[fid, 1]]
        pts = a[None, :] + tq[:, None] * (b - a)[None, :]
        uvals = np.asarray(u(pts))
        vdotn = uvals @ mesh.facet_normals[fid]
        return np.sqrt(mesh.facet_lengths[fid]) * np.einsum("q,qi,q->i", tw, leg, vdotn)

    if space.broken:
        for loc, e in enumerate(space.elems):
            dofs = space.element_dofs([loc])[0]
            for j in range(3):
                coeffs[dofs[space.local_facet_slice(j)]] = facet_moments(mesh.elem_facets[e, j])
    else:
        for fid in space.facets:
            coeffs[space.facet_dofs(fid)] = facet_moments(fid)

    if k > 0:
        ref_pts, ref_wts = triangle_rule(deg)
        verts = mesh.element_vertices(space.elems)
        v0 = verts[:, 0]
        B = np.stack([verts[:, 1] - v0, verts[:, 2] - v0], axis=-1)
        pts = np.einsum("qj,nij->nqi", ref_pts, B) + v0[:, None, :]
        area2 = np.abs(B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0])
        wts = ref_wts[None, :] * area2[:, None]
        uvals = np.asarray(u(pts.reshape(-1, 2))).reshape(len(space.elems), -1, 2)
        xi = _scaled_coords(space.centroids, space.scales, pts)
        Mlow = eval_scaled_monomials(monomial_exponents(k - 1), xi)
        nlow = Mlow.shape[-1]
        dofs = space.element_dofs(np.arange(len(space.elems)))
        base = 3 * (k + 1)
        for comp in range(2):
            mom = np.einsum("nq,nqi,nq->ni", wts, Mlow, uvals[..., comp])
            cols = dofs[:, base + comp * nlow : base + (comp + 1) * nlow]
            np.put(coeffs, cols.ravel(), mom.ravel())
    return coeffs


def div_map(space, dg):
    """Sparse operator D with div(u_c) = sum_j (D c)_j psi_j elementwise."""
    if dg.degree < space.k:
        raise SpaceError("divergence target space must have degree >= k")
    loc = np.arange(len(space.elems))
    ref_pts, ref_wts = triangle_rule(2 * dg.degree + 2)
    verts = space.mesh.element_vertices(space.elems)
    v0 = verts[:, 0]
    B = np.stack([verts[:, 1] - v0, verts[:, 2] - v0], axis=-1)
    pts = np.einsum("qj,nij->nqi", ref_pts, B) + v0[:, None, :]
    area2 = np.abs(B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0])
    wts = ref_wts[None, :] * area2[:, None]
    divs = space.tabulate_div(loc, pts)
    psi = dg.tabulate(dg.local_ids(space.elems), pts)
    blocks = np.einsum("nq,nqj,nql->njl", wts, psi, divs)
    rows = np.repeat(dg.element_dofs(dg.local_ids(space.elems)), space.nloc, axis=1)
    cols = np.tile(space.element_dofs(loc), (1, dg.nb))
    D = sparse.coo_matrix(
        (blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(dg.ndof, space.ndof)
    ).tocsr()
    D.sum_duplicates()
    return D


def project_l2(f, dg, cutdata=None, measure="active"):
    """Elementwise L2 projection onto `dg` w.r.t. Omega or the active mesh."""
    coeffs = np.zeros(dg.ndof)
    loc = np.arange(len(dg.elems))
    if measure == "active" or cutdata is None:
        pts, wts = cutdata.full_batch(dg.elems) if cutdata is not None else _full_rule(dg)
        fv = np.asarray(f(pts.reshape(-1, 2))).reshape(len(dg.elems), -1)
        tab = dg.tabulate(loc, pts)
        coeffs = np.einsum("nq,nqj,nq->nj", wts, tab, fv).ravel()
        return coeffs
    if measure != "omega":
        raise SpaceError(f"unknown measure {measure!r}")
    for i, e in enumerate(dg.elems):
        pts, wts = cutdata.volume(e)
        if len(wts) == 0 or wts.sum() <= 0:
            raise SpaceError(f"element {e} has empty cut measure: singular local Gram")
        tab = dg.tabulate([i], pts[None, :, :])[0]
        G = np.einsum("q,qi,qj->ij", wts, tab, tab)
        b = np.einsum("q,qi,q->i", wts, tab, np.asarray(f(pts)))
        try:
            coeffs[dg.element_dofs([i])[0]] = np.linalg.solve(G, b)
        except np.linalg.LinAlgError as exc:
            raise SpaceError(f"singular local Gram on element {e}") from exc
    return coeffs


def _full_rule(dg):
    ref_pts, ref_wts = triangle_rule(2 * dg.degree + 2)
    verts = dg.mesh.element_vertices(dg.elems)
    v0 = verts[:, 0]
    B = np.stack([verts[:, 1] - v0, verts[:, 2] - v0], axis=-1)
    pts = np.einsum("qj,nij->nqi", ref_pts, B) + v0[:, None, :]
    area2 = np.abs(B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0])
    return pts, ref_wts[None, :] * area2[:, None]
