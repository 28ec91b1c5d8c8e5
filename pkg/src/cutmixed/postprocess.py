"""Superconvergent scalar reconstructions from the flux.

Both schemes solve local Neumann problems for p* in P_{k+1} using
grad p = u, differing in how the undetermined constants are fixed:

  * elementwise: per element over the full element, the constant fixed by
    the mean of the uncorrected scalar (interior elements) or by the mean of
    the Dirichlet data on the local piece of the boundary (cut elements);
  * patchwise: per patch over the physical part only, with an h^-2 scaled
    ghost penalty of degree k+1 on the patch facets and the constant fixed
    on the uncut part of the patch.  Works without stabilization of u and
    without boundary data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import GPConfig, assemble_gp
from .geometry import GeometryError
from .spaces import DGSpace, monomial_exponents, eval_scaled_monomials


class PostProcessError(Exception):
    pass


@dataclass
class PostProcessedScalar:
    coeffs: np.ndarray
    space: DGSpace
    scheme: str


def _bordered_solve(S, c, rhs, b):
    n = len(c)
    K = np.zeros((n + 1, n + 1))
    K[:n, :n] = S
    K[:n, n] = c
    K[n, :n] = c
    r = np.concatenate([rhs, [b]])
    try:
        x = np.linalg.solve(K, r)
    except np.linalg.LinAlgError as exc:
        raise PostProcessError("singular local post-processing system") from exc
    return x[:n]


def pp_element(disc, u_coeffs, p_coeffs, p_D):
    """Element-local reconstruction; requires u_h accurate on full elements."""
    star = DGSpace(disc.mesh, disc.classes.active, disc.k + 1)
    is_cut = np.zeros(disc.mesh.num_elements, dtype=bool)
    is_cut[disc.classes.cut] = True
    out = np.zeros(star.ndof)
    loc_all = np.arange(len(star.elems))
    for i, e in enumerate(map(int, star.elems)):
        pts, wts = disc.cutdata.full_batch([e])
        grad = star.tabulate_grad([i], pts)[0]
        S = np.einsum("q,qid,qjd->ij", wts[0], grad, grad)
        uh = disc.rt.evaluate(u_coeffs, [disc.rt.loc_of_elem[e]], pts)[0]
        rhs = np.einsum("q,qd,qid->i", wts[0], uh, grad)
        tab = star.tabulate([i], pts)[0]
        if is_cut[e]:
            ipts, iwts, _ = disc.cutdata.interface(e)
            if iwts.sum() < 1e-14:
                raise GeometryError(f"element {e}: degenerate boundary constraint")
            itab = star.tabulate([i], ipts[None])[0]
            c = np.einsum("q,qi->i", iwts, itab)
            b = float(np.dot(iwts, np.asarray(p_D(ipts))))
        else:
            c = np.einsum("q,qi->i", wts[0], tab)
            qtab = disc.q.tabulate([i], pts)[0]
            pbar = qtab @ p_coeffs[disc.q.element_dofs([i])[0]]
            b = float(np.dot(wts[0], pbar))
        out[star.element_dofs([i])[0]] = _bordered_solve(S, c, rhs, b)
    del loc_all
    return PostProcessedScalar(out, star, "element")


def pp_patch(disc, u_coeffs, p_coeffs, gp_variant=None, constraint="interior", single_poly=False):
    """Patchwise reconstruction over the physical domain with patch GP.

    `constraint="interior"` matches means of the uncorrected scalar on the
    uncut patch part (the default); `constraint="omega"` is the alternative
    mean condition over the whole physical patch part, kept as an option.
    `single_poly` switches to one polynomial per patch without GP.
    """
    star = DGSpace(disc.mesh, disc.classes.active, disc.k + 1)
    variant = gp_variant or disc.gp_variant
    gp = GPConfig(variant=variant, degree=disc.k + 1, scale_exponent=-2.0)
    is_cut = np.zeros(disc.mesh.num_elements, dtype=bool)
    is_cut[disc.classes.cut] = True
    out = np.zeros(star.ndof)

    for patch in disc.patches.patches:
        elems = np.array(patch.elements, dtype=np.int64)
        if single_poly and len(elems) > 1:
            _pp_single_poly(disc, star, patch, u_coeffs, p_coeffs, constraint, out, is_cut)
            continue
        loc = star.local_ids(elems)
        dofs = star.element_dofs(loc)
        nb = star.nb
        n = dofs.size
        S = np.zeros((n, n))
        rhs = np.zeros(n)
        c = np.zeros(n)
        b = 0.0
        for j, e in enumerate(map(int, elems)):
            sl = slice(j * nb, (j + 1) * nb)
            pts, wts = disc.cutdata.volume(e)
            grad = star.tabulate_grad([loc[j]], pts[None])[0]
            S[sl, sl] += np.einsum("q,qid,qjd->ij", wts, grad, grad)
            uh = disc.rt.evaluate(u_coeffs, [disc.rt.loc_of_elem[e]], pts[None])[0]
            rhs[sl.start : sl.stop] += np.einsum("q,qd,qid->i", wts, uh, grad)
            fpts, fwts = disc.cutdata.full_batch([e])
            fpts, fwts = fpts[0], fwts[0]
            if constraint == "omega":
                # (p*, 1)_{omega cap Omega} = (pbar, 1)_omega
                tab = star.tabulate([loc[j]], pts[None])[0]
                c[sl.start : sl.stop] += np.einsum("q,qi->i", wts, tab)
                qtab = disc.q.tabulate(disc.q.local_ids([e]), fpts[None])[0]
                pbar = qtab @ p_coeffs[disc.q.element_dofs(disc.q.local_ids([e]))[0]]
                b += float(np.dot(fwts, pbar))
            elif not is_cut[e]:
                # (p*, 1) = (pbar, 1) over the uncut patch part
                tab = star.tabulate([loc[j]], fpts[None])[0]
                c[sl.start : sl.stop] += np.einsum("q,qi->i", fwts, tab)
                qtab = disc.q.tabulate(disc.q.local_ids([e]), fpts[None])[0]
                pbar = qtab @ p_coeffs[disc.q.element_dofs(disc.q.local_ids([e]))[0]]
                b += float(np.dot(fwts, pbar))
        if patch.facets and not single_poly:
            J = assemble_gp(star, np.array(patch.facets), gp)
            S += J[dofs.ravel()][:, dofs.ravel()].toarray()
        if not np.any(c):
            raise PostProcessError(f"patch with root {patch.root} has no constraint support")
        try:
            out[dofs.ravel()] = _bordered_solve(S, c, rhs, b)
        except PostProcessError as exc:
            raise PostProcessError(f"unstable PP patch with root {patch.root}") from exc
    return PostProcessedScalar(out, star, "patch")


def _pp_single_poly(disc, star, patch, u_coeffs, p_coeffs, constraint, out, is_cut):
    """Remark variant: one P_{k+1} polynomial on the whole patch, no GP."""
    elems = np.array(patch.elements, dtype=np.int64)
    exps = monomial_exponents(disc.k + 1)
    center = disc.mesh.vertices[disc.mesh.elements[elems]].mean(axis=(0, 1))
    scale = float(disc.mesh.element_diameters[elems].max())
    nb = len(exps)
    S = np.zeros((nb, nb))
    rhs = np.zeros(nb)
    c = np.zeros(nb)
    b = 0.0

    def tab_at(pts, dx=0, dy=0):
        xi = (pts - center) / scale
        return eval_scaled_monomials(exps, xi, dx, dy) / scale ** (dx + dy)

    for e in map(int, elems):
        pts, wts = disc.cutdata.volume(e)
        gx = tab_at(pts, dx=1)
        gy = tab_at(pts, dy=1)
        grad = np.stack([gx, gy], axis=-1)
        S += np.einsum("q,qid,qjd->ij", wts, grad, grad)
        uh = disc.rt.evaluate(u_coeffs, [disc.rt.loc_of_elem[e]], pts[None])[0]
        rhs += np.einsum("q,qd,qid->i", wts, uh, grad)
        if not is_cut[e]:
            fpts, fwts = disc.cutdata.full_batch([e])
            c += np.einsum("q,qi->i", fwts[0], tab_at(fpts[0]))
            qtab = disc.q.tabulate(disc.q.local_ids([e]), fpts)[0]
            pbar = qtab @ p_coeffs[disc.q.element_dofs(disc.q.local_ids([e]))[0]]
            b += float(np.dot(fwts[0], pbar))
    x = _bordered_solve(S, c, rhs, b)
    # exact per-element projection of the patch polynomial into the modal space
    for e in map(int, elems):
        loc = star.local_ids([e])
        pts, wts = disc.cutdata.full_batch([e])
        vals = tab_at(pts[0]) @ x
        tab = star.tabulate(loc, pts)[0]
        out[star.element_dofs(loc)[0]] = np.einsum("q,qi,q->i", wts[0], tab, vals)
