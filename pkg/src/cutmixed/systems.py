"""The five discrete formulations: restricted, main, Frachon-type,
hybridized and Neumann, plus the Table-3 variant operators.

Sign conventions follow div u = -f in Omega; the conservation equation of
the main method enforces div u_h = -f_h pointwise on the active mesh
whenever f_h lives in the divergence space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import linalg
from .assembly import (
    ExactSource,
    ExtendedSource,
    GPConfig,
    assemble_boundary_rhs,
    assemble_div_constraint,
    assemble_force_rhs,
    assemble_gp,
    assemble_mass,
    assemble_neumann_gp,
    assemble_normal_coupling,
    assemble_scalar_rhs,
    compute_extended_source,
    cut_facet_set,
    pair_source_active,
)
from .geometry import CutData, classify
from .patches import build_patches
from .spaces import DGSpace, FacetSpace, RTSpace, div_map


class SolveError(Exception):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass
class MixedSolution:
    u: np.ndarray
    p: np.ndarray
    p_facet: np.ndarray | None = None
    lam: np.ndarray | None = None
    report: dict = field(default_factory=dict)


class Discretization:
    """Shared context: geometry, spaces and cached operators for one (mesh, k)."""

    def __init__(
        self,
        mesh,
        domain,
        k,
        quad_degree=None,
        err_degree=None,
        gp_variant="normal_jump",
        max_hops=4,
        max_size=6,
    ):
        self.mesh = mesh
        self.domain = domain
        self.k = int(k)
        self.gp_variant = gp_variant
        self.quad_degree = quad_degree if quad_degree is not None else 2 * self.k + 2
        self.err_degree = err_degree if err_degree is not None else 2 * self.k + 6
        self._patch_bounds = (max_hops, max_size)
        self.classes = classify(mesh, domain)
        self.cutdata = CutData(mesh, domain, self.classes, self.quad_degree)
        self.rt = RTSpace(mesh, self.classes, self.k)
        self.q = DGSpace(mesh, self.classes.active, self.k)
        self._cache = {}
        self._patches = None
        self._errdata = None
        self._rt_broken = None

    # -- lazy pieces -------------------------------------------------------------

    @property
    def patches(self):
        if self._patches is None:
            hops, size = self._patch_bounds
            self._patches = build_patches(self.mesh, self.classes, hops, size)
        return self._patches

    @patches.setter
    def patches(self, value):
        self._patches = value

    @property
    def errdata(self):
        if self._errdata is None:
            self._errdata = CutData(self.mesh, self.domain, self.classes, self.err_degree)
        return self._errdata

    @property
    def rt_broken(self):
        if self._rt_broken is None:
            self._rt_broken = RTSpace(self.mesh, self.classes, self.k, broken=True)
        return self._rt_broken

    def _cached(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    def mass(self, measure="omega"):
        return self._cached(("mass", measure), lambda: assemble_mass(self.rt, self.cutdata, measure))

    def div_constraint(self, measure="active"):
        return self._cached(
            ("div", measure), lambda: assemble_div_constraint(self.rt, self.q, self.cutdata, measure)
        )

    def div_operator(self):
        return self._cached("divmap", lambda: div_map(self.rt, self.q))

    def gp_u(self):
        cfg = GPConfig(variant=self.gp_variant, degree=self.k)
        return self._cached(
            ("gp_u",), lambda: assemble_gp(self.rt, self.patches.gp_facets, cfg)
        )

    def gp_q(self, degree=None, scale_exponent=0.0):
        degree = self.k if degree is None else degree
        cfg = GPConfig(variant=self.gp_variant, degree=degree, scale_exponent=scale_exponent)

        def build():
            dg = self.q if degree == self.q.degree else DGSpace(self.mesh, self.classes.active, degree)
            return assemble_gp(dg, self.patches.gp_facets, cfg)

        return self._cached(("gp_q", degree, scale_exponent), build)

    def boundary_rhs(self, p_D):
        return assemble_boundary_rhs(self.rt, self.cutdata, p_D)

    def force_rhs(self, g):
        return assemble_force_rhs(self.rt, self.cutdata, g)

    def extended_source(self, f, kf=None, gamma_f=1.0):
        kf = self.k if kf is None else int(kf)
        gp = GPConfig(variant=self.gp_variant, degree=kf)
        return compute_extended_source(f, kf, gamma_f, self.patches, self.cutdata, gp)

    @staticmethod
    def exact_source(f):
        return ExactSource(f)

    def project_extension_by_zero(self, q_fn):
        """E_h^0 q: L2(active) projection of the extension of q by zero."""
        coeffs = np.zeros(self.q.ndof)
        loc = np.arange(len(self.q.elems))
        for i, e in enumerate(self.q.elems):
            pts, wts = self.cutdata.volume(e)
            tab = self.q.tabulate([loc[i]], pts[None])[0]
            coeffs[self.q.element_dofs([i])[0]] = np.einsum(
                "q,qi,q->i", wts, tab, np.asarray(q_fn(pts))
            )
        return coeffs


# -- generic saddle solve ------------------------------------------------------


def _solve_blocks(K, rhs, tol, variant):
    x, rep = linalg.factor_solve(K, rhs)
    if rep.residual > tol:
        raise SolveError(
            f"{variant}: relative residual {rep.residual:.3e} above {tol:.1e}",
            residual=rep.residual,
        )
    return x, {
        "ndof": rep.dim,
        "nnz": rep.nnz,
        "residual": rep.residual,
        "variant": variant,
    }


def solve_restricted(disc, f, p_D, tol=1e-10):
    """Naive restricted mixed method: all integrals over Omega only.

    Solvable, but its stability constant depends on the cut configuration;
    expect failures (large residuals) near degenerate cuts.
    """
    A = disc.mass("omega")
    B = disc.div_constraint("omega")
    rhs = np.concatenate(
        [disc.boundary_rhs(p_D), -assemble_scalar_rhs(disc.q, disc.cutdata, f, "omega")]
    )
    K = sparse.bmat([[A, B.T], [B, None]], format="csc")
    x, report = _solve_blocks(K, rhs, tol, "restricted")
    nu = disc.rt.ndof
    return MixedSolution(u=x[:nu], p=x[nu:], report=report)


def solve_main(disc, gamma_u, source, p_D, g=None, tol=1e-10):
    """Active-mesh divergence constraint with optional ghost penalty on u."""
    A = disc.mass("omega")
    if gamma_u != 0.0:
        A = (A + gamma_u * disc.gp_u()).tocsr()
    B = disc.div_constraint("active")
    rhs_u = disc.boundary_rhs(p_D)
    if g is not None:
        rhs_u = rhs_u + disc.force_rhs(g)
    rhs = np.concatenate([rhs_u, -pair_source_active(source, disc.q, disc.cutdata)])
    K = sparse.bmat([[A, B.T], [B, None]], format="csc")
    x, report = _solve_blocks(K, rhs, tol, "main")
    nu = disc.rt.ndof
    return MixedSolution(u=x[:nu], p=x[nu:], report=report)


def solve_frachon(disc, gamma_u, gamma_div, f, p_D, tol=1e-10):
    """Divergence-stabilized variant: b*(u, q) = (div u, q)_Omega + gp."""
    if gamma_div <= 0:
        raise SolveError("gamma_div must be positive")
    A = disc.mass("omega")
    if gamma_u != 0.0:
        A = (A + gamma_u * disc.gp_u()).tocsr()
    Bstar = (disc.div_constraint("omega") + gamma_div * (disc.gp_q() @ disc.div_operator())).tocsr()
    rhs = np.concatenate(
        [disc.boundary_rhs(p_D), -assemble_scalar_rhs(disc.q, disc.cutdata, f, "omega")]
    )
    K = sparse.bmat([[A, Bstar.T], [Bstar, None]], format="csc")
    x, report = _solve_blocks(K, rhs, tol, "frachon")
    nu = disc.rt.ndof
    return MixedSolution(u=x[:nu], p=x[nu:], report=report)


def solve_neumann(
    disc,
    gamma_u,
    gamma_F,
    gamma_T,
    g_N,
    source,
    facet_mode="cut_by_gamma",
    tol=1e-10,
):
    """Lagrange-multiplier Neumann conditions with a mean-zero constraint on p."""
    if gamma_u <= 0:
        raise SolveError("the Neumann formulation requires gamma_u > 0")
    mesh = disc.mesh
    A = (disc.mass("omega") + gamma_u * disc.gp_u()).tocsr()
    B = disc.div_constraint("active")
    lam_space = DGSpace(mesh, disc.classes.cut, disc.k)
    facets = cut_facet_set(mesh, disc.domain, disc.rt.interior_facets, facet_mode, disc.classes)
    gp = GPConfig(variant=disc.gp_variant, degree=disc.k)
    Jg = assemble_neumann_gp(lam_space, disc.domain, disc.cutdata, gamma_F, gamma_T, facets, gp)

    # flux-multiplier pairing on Gamma
    rows, cols, vals = [], [], []
    rhs_l = np.zeros(lam_space.ndof)
    for e in disc.classes.cut:
        e = int(e)
        pts, wts, normals = disc.cutdata.interface(e)
        uloc = disc.rt.loc_of_elem[e]
        lloc = lam_space.local_ids([e])
        tab_u = disc.rt.tabulate([uloc], pts[None])[0]
        vdotn = np.einsum("qld,qd->ql", tab_u, normals)
        tab_l = lam_space.tabulate(lloc, pts[None])[0]
        block = np.einsum("q,qi,qj->ij", wts, tab_l, vdotn)
        rdofs = lam_space.element_dofs(lloc)[0]
        cdofs = disc.rt.element_dofs([uloc])[0]
        rows.append(np.repeat(rdofs, len(cdofs)))
        cols.append(np.tile(cdofs, len(rdofs)))
        vals.append(block.ravel())
        rhs_l[rdofs] += np.einsum("q,qi,q->i", wts, tab_l, np.asarray(g_N(pts)))
    C = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(lam_space.ndof, disc.rt.ndof),
    ).tocsr()

    # mean-zero constraint on the active mesh (realizes Q_h / R)
    m = assemble_scalar_rhs(disc.q, disc.cutdata, lambda p: np.ones(len(p)), "active")
    mcol = sparse.csr_matrix(m[:, None])

    K = sparse.bmat(
        [
            [A, B.T, C.T, None],
            [B, None, None, mcol],
            [C, None, -Jg, None],
            [None, mcol.T, None, None],
        ],
        format="csc",
    )
    rhs = np.concatenate(
        [np.zeros(disc.rt.ndof), -pair_source_active(source, disc.q, disc.cutdata), rhs_l, [0.0]]
    )
    x, report = _solve_blocks(K, rhs, tol, "neumann")
    nu = disc.rt.ndof
    nq = disc.q.ndof
    nl = lam_space.ndof
    return MixedSolution(
        u=x[:nu], p=x[nu : nu + nq], lam=x[nu + nq : nu + nq + nl], report=report
    )


# -- hybridization -------------------------------------------------------------


class SingularLocalBlockError(SolveError):
    pass


def solve_hybrid(disc, source, p_D, eps_reg=0.0, tol=1e-8):
    """Hybridized main method (gamma_u = 0) via static condensation.

    Per-element (u, p) unknowns are eliminated against the facet multiplier
    space; the condensed facet system is symmetric positive definite and is
    solved by Cholesky (densely below the threshold) with a sparse-LU
    fallback.  A small regularization eps_reg adds (eps u, v) on full cut
    elements when tiny cuts make local blocks numerically singular.
    """
    if eps_reg < 0:
        raise SolveError("eps_reg must be nonnegative")
    mesh = disc.mesh
    rt = disc.rt_broken
    q = disc.q
    lam = FacetSpace(mesh, rt.interior_facets, disc.k)
    is_cut = np.zeros(mesh.num_elements, dtype=bool)
    is_cut[disc.classes.cut] = True

    bdry = assemble_boundary_rhs(rt, disc.cutdata, p_D)
    fpair = pair_source_active(source, q, disc.cutdata)

    nloc = rt.nloc + q.nb
    S = sparse.lil_matrix((lam.ndof, lam.ndof))
    g = np.zeros(lam.ndof)
    stash = []
    for i, e in enumerate(map(int, rt.elems)):
        udofs = rt.element_dofs([i])[0]
        qdofs = q.element_dofs([i])[0]
        pts, wts = disc.cutdata.volume(e)
        tab = rt.tabulate([i], pts[None])[0]
        A = np.einsum("qid,qjd,q->ij", tab, tab, wts)
        if eps_reg > 0 and is_cut[e]:
            fpts, fwts = disc.cutdata.full_batch([e])
            ftab = rt.tabulate([i], fpts)[0]
            A = A + eps_reg * np.einsum("qid,qjd,q->ij", ftab, ftab, fwts[0])
        fpts, fwts = disc.cutdata.full_batch([e])
        dtab = rt.tabulate_div([i], fpts)[0]
        qtab = q.tabulate([i], fpts)[0]
        Bloc = np.einsum("q,qi,qj->ij", fwts[0], qtab, dtab)
        K = np.zeros((nloc, nloc))
        K[: rt.nloc, : rt.nloc] = A
        K[rt.nloc :, : rt.nloc] = Bloc
        K[: rt.nloc, rt.nloc :] = Bloc.T
        r = np.concatenate([bdry[udofs], -fpair[qdofs]])

        lam_rows = []
        Cloc_rows = []
        for edge in range(3):
            fid = int(mesh.elem_facets[e, edge])
            if fid not in lam.loc_of_facet:
                continue
            lo, _hi = mesh.facet_elems[fid]
            sign = -1.0 if int(lo) == e else 1.0
            for t in range(lam.nb):
                lam_rows.append(lam.facet_dofs(fid)[t])
                row = np.zeros(nloc)
                row[edge * rt.nfd + t] = sign
                Cloc_rows.append(row)
        Cloc = np.array(Cloc_rows).reshape(len(Cloc_rows), nloc)
        try:
            lufac = scipy_lu_factor(K)
            Z = _refined_lu_solve(lufac, K, np.column_stack([r, Cloc.T]))
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularLocalBlockError(
                f"singular local block on element {e}; retry with eps_reg=1e-10"
            ) from exc
        if not np.all(np.isfinite(Z)):
            raise SingularLocalBlockError(
                f"non-finite local solve on element {e}; retry with eps_reg=1e-10"
            )
        zr = Z[:, 0]
        ZC = Z[:, 1:]
        lam_rows = np.array(lam_rows, dtype=np.int64)
        S[np.ix_(lam_rows, lam_rows)] += Cloc @ ZC
        g[lam_rows] += Cloc @ zr
        stash.append((e, udofs, qdofs, lufac, K, r, Cloc, lam_rows))

    S = S.tocsc()
    if lam.ndof <= linalg.DENSE_THRESHOLD:
        from scipy.linalg import cho_factor, cho_solve

        try:
            lam_x = cho_solve(cho_factor(S.toarray()), g)
        except np.linalg.LinAlgError as exc:
            raise SolveError(f"condensed facet system not SPD: {exc}") from exc
    else:
        lam_x, _ = linalg.factor_solve(S, g)

    u_broken = np.zeros(rt.ndof)
    p = np.zeros(q.ndof)
    for e, udofs, qdofs, K, r, Cloc, lam_rows in stash:
        z = np.linalg.solve(K, r - Cloc.T @ lam_x[lam_rows])
        u_broken[udofs] = z[: rt.nloc]
        p[qdofs] = z[rt.nloc :]

    u, jump = _merge_broken(disc, u_broken)

    # residual of the equivalent one-field formulation
    A = disc.mass("omega")
    if eps_reg > 0:
        A = A + eps_reg * _cut_mass(disc)
    B = disc.div_constraint("active")
    r1 = A @ u + B.T @ p - assemble_boundary_rhs(disc.rt, disc.cutdata, p_D)
    r2 = B @ u + fpair
    scale = max(np.linalg.norm(np.concatenate([bdry, fpair])), 1.0)
    residual = float(np.linalg.norm(np.concatenate([r1, r2])) / scale)
    if residual > tol:
        raise SolveError(f"hybrid: recovered solution residual {residual:.3e}", residual)
    report = {
        "ndof": rt.ndof + q.ndof + lam.ndof,
        "nnz": linalg.structural_nnz(S),
        "residual": residual,
        "variant": "hybrid",
        "normal_jump": jump,
    }
    return MixedSolution(u=u, p=p, p_facet=lam_x, report=report)


def _cut_mass(disc):
    rows, cols, vals = [], [], []
    for e in disc.classes.cut:
        loc = disc.rt.loc_of_elem[int(e)]
        pts, wts = disc.cutdata.full_batch([int(e)])
        tab = disc.rt.tabulate([loc], pts)[0]
        block = np.einsum("qid,qjd,q->ij", tab, tab, wts[0])
        dofs = disc.rt.element_dofs([loc])[0]
        rows.append(np.repeat(dofs, len(dofs)))
        cols.append(np.tile(dofs, len(dofs)))
        vals.append(block.ravel())
    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(disc.rt.ndof, disc.rt.ndof),
    ).tocsr()


def _merge_broken(disc, u_broken):
    """Average duplicated facet dofs into the unbroken layout."""
    rb = disc.rt_broken
    rt = disc.rt
    u = np.zeros(rt.ndof)
    counts = np.zeros(rt.ndof)
    jump = 0.0
    for i in range(len(rt.elems)):
        db = rb.element_dofs([i])[0]
        du = rt.element_dofs([i])[0]
        u[du] += u_broken[db]
        counts[du] += 1.0
    u /= np.maximum(counts, 1.0)
    for i in range(len(rt.elems)):
        db = rb.element_dofs([i])[0]
        du = rt.element_dofs([i])[0]
        jump = max(jump, np.max(np.abs(u_broken[db] - u[du])))
    return u, float(jump)


# -- Table 3 variants -----------------------------------------------------------


def build_variant_matrices(disc, gamma_u=1.0, gamma_div=1.0, gamma_p=1.0):
    """Assemble the five stabilization variants as full saddle matrices."""
    A = disc.mass("omega")
    Ju = disc.gp_u()
    Bh = disc.div_constraint("active")
    Bo = disc.div_constraint("omega")
    Jq = disc.gp_q()
    Jd = (Jq @ disc.div_operator()).tocsr()
    Ast = (A + gamma_u * Ju).tocsr()
    Bst = (Bo + gamma_div * Jd).tocsr()
    Jp = (gamma_p * Jq).tocsr()
    return {
        "V1": sparse.bmat([[A, Bh.T], [Bh, None]], format="csr"),
        "V2": sparse.bmat([[Ast, Bh.T], [Bh, None]], format="csr"),
        "V3": sparse.bmat([[Ast, Bst.T], [Bst, None]], format="csr"),
        "V4": sparse.bmat([[Ast, Bh.T], [Bh, -Jp]], format="csr"),
        "V5": sparse.bmat([[Ast, Bst.T], [Bst, -Jp]], format="csr"),
    }
