"""Experiment drivers: convergence studies, sparsity and conditioning sweeps.

All drivers emit plain CSV with the column layout

    L,k,gammastab,postprocessver,ul2error,ul2error_bar,udiverror,pl2error,p_inner_l2error,psl2error

(the f-study appends an F column, the condition sweep uses shift,gammastab,cond).
postprocessver is 0 = none, 1 = elementwise, 2 = patchwise; psl2error is 0.0
when no post-processing ran.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .geometry import CutData, LevelSetDomain, classify, ring_domain, rotated_square_domain
from .mesh import build_rectangle, build_structured, refine_uniform
from .patches import Patch, PatchDecomposition
from .postprocess import pp_element, pp_patch
from .systems import Discretization, build_variant_matrices, solve_main, solve_neumann

CSV_HEADER = [
    "L",
    "k",
    "gammastab",
    "postprocessver",
    "ul2error",
    "ul2error_bar",
    "udiverror",
    "pl2error",
    "p_inner_l2error",
    "psl2error",
]

PP_CODES = {"none": 0, "element": 1, "patch": 2}


# -- manufactured solution ------------------------------------------------------


def exact_p(pts):
    pts = np.atleast_2d(pts)
    return np.sin(pts[:, 0])


def exact_u(pts):
    pts = np.atleast_2d(pts)
    return np.column_stack([np.cos(pts[:, 0]), np.zeros(len(pts))])


def exact_f(pts):
    pts = np.atleast_2d(pts)
    return np.sin(pts[:, 0])


def exact_gn(domain):
    def g(pts):
        n = domain.unit_normals(pts)
        return np.cos(np.atleast_2d(pts)[:, 0]) * n[:, 0]

    return g


# -- error norms ------------------------------------------------------------------


def _region_batches(disc, region):
    data = disc.errdata
    if region == "active":
        yield from _full_all(data, disc.classes.active)
    elif region == "interior":
        yield from _full_all(data, disc.classes.interior)
    elif region == "omega":
        yield from _full_all(data, disc.classes.interior)
        for ids, pts, wts in data.cut_groups():
            yield ids, pts, wts
    else:
        raise ValueError(f"unknown region {region!r}")


def _full_all(data, elems, chunk=512):
    elems = np.asarray(elems)
    for i in range(0, len(elems), chunk):
        sel = elems[i : i + chunk]
        pts, wts = data.full_batch(sel)
        yield sel, pts, wts


def error_u(disc, u_coeffs, region="omega"):
    total = 0.0
    for elems, pts, wts in _region_batches(disc, region):
        loc = disc.rt.local_ids(elems)
        uh = disc.rt.evaluate(u_coeffs, loc, pts)
        ue = exact_u(pts.reshape(-1, 2)).reshape(pts.shape)
        total += np.einsum("nq,nqd->", wts, (uh - ue) ** 2)
    return math.sqrt(total)


def error_div(disc, u_coeffs, f=exact_f, region="omega"):
    """|| div u_h + f || over the region (the conservation defect)."""
    total = 0.0
    for elems, pts, wts in _region_batches(disc, region):
        loc = disc.rt.local_ids(elems)
        dh = disc.rt.evaluate_div(u_coeffs, loc, pts)
        fe = np.asarray(f(pts.reshape(-1, 2))).reshape(pts.shape[:2])
        total += np.einsum("nq,nq->", wts, (dh + fe) ** 2)
    return math.sqrt(total)


def error_scalar(disc, coeffs, space, region="omega", exact=exact_p, shift=0.0):
    total = 0.0
    for elems, pts, wts in _region_batches(disc, region):
        loc = space.local_ids(elems)
        ph = space.evaluate(coeffs, loc, pts)
        pe = np.asarray(exact(pts.reshape(-1, 2))).reshape(pts.shape[:2])
        total += np.einsum("nq,nq->", wts, (ph - pe - shift) ** 2)
    return math.sqrt(total)


def mean_shift(disc, coeffs, space, exact=exact_p):
    """Mean of (p_h - p) over Omega, for gauge-fixed (Neumann) errors."""
    num = 0.0
    den = 0.0
    for elems, pts, wts in _region_batches(disc, "omega"):
        loc = space.local_ids(elems)
        ph = space.evaluate(coeffs, loc, pts)
        pe = np.asarray(exact(pts.reshape(-1, 2))).reshape(pts.shape[:2])
        num += np.einsum("nq,nq->", wts, ph - pe)
        den += wts.sum()
    return num / den


def compute_eoc(errors):
    """rate_L = log2(e_{L-1} / e_L); nan marks undefined rates."""
    rates = []
    for e0, e1 in zip(errors, errors[1:]):
        if e0 > 0 and e1 > 0:
            rates.append(math.log2(e0 / e1))
        else:
            rates.append(float("nan"))
    return rates


# -- experiment configuration ------------------------------------------------------


@dataclass
class ExperimentConfig:
    ks: tuple = (0, 1)
    gammas: tuple = (0.0, 1.0)
    pp: str = "patch"
    levels: int = 4
    geometry: str = "ring"
    base_n: int = 10
    base_depth: int = 3
    depth_rule: str = "level"  # depth = base_depth (+ level)
    kf: int | None = None
    exact_f: bool = False
    gamma_f: float = 1.0
    gp_variant: str = "normal_jump"
    out: str | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("EOC experiments need at least 2 levels")

    def depth(self, level):
        # growing the subdivision depth with the level keeps the piecewise
        # linear geometry error of order (h/2^depth)^2 below the field errors
        if self.depth_rule == "fixed":
            return self.base_depth
        return self.base_depth + level


def mesh_hierarchy(base_n, levels):
    meshes = [build_structured(base_n)]
    for _ in range(levels - 1):
        meshes.append(refine_uniform(meshes[-1]))
    return meshes


def make_domain(cfg, level):
    if cfg.geometry == "ring":
        return ring_domain(subdivision_depth=cfg.depth(level))
    if cfg.geometry == "polygon":
        return rotated_square_domain()
    raise ValueError(f"unknown geometry {cfg.geometry!r}")


def make_discretization(cfg, mesh, level, k):
    return Discretization(mesh, make_domain(cfg, level), k, gp_variant=cfg.gp_variant)


# -- drivers -------------------------------------------------------------------------


def _source_for(disc, cfg, k):
    if cfg.exact_f:
        return disc.exact_source(exact_f)
    kf = cfg.kf if cfg.kf is not None else k
    return disc.extended_source(exact_f, kf=kf, gamma_f=cfg.gamma_f)


def _postprocess(disc, cfg, sol):
    if cfg.pp == "none":
        return None
    if cfg.pp == "element":
        return pp_element(disc, sol.u, sol.p, exact_p)
    if cfg.pp == "patch":
        return pp_patch(disc, sol.u, sol.p)
    raise ValueError(f"unknown pp variant {cfg.pp!r}")


def _record(disc, cfg, sol, star, L, k, gamma, gauge_free=False, extra=None):
    shift_bar = mean_shift(disc, sol.p, disc.q) if gauge_free else 0.0
    rec = {
        "L": L,
        "k": k,
        "gammastab": _fmt_gamma(gamma),
        "postprocessver": PP_CODES[cfg.pp],
        "ul2error": error_u(disc, sol.u, "omega"),
        "ul2error_bar": error_u(disc, sol.u, "active"),
        "udiverror": error_div(disc, sol.u),
        "pl2error": error_scalar(disc, sol.p, disc.q, "omega", shift=shift_bar),
        "p_inner_l2error": error_scalar(disc, sol.p, disc.q, "interior", shift=shift_bar),
        "psl2error": 0.0,
    }
    if star is not None:
        shift = mean_shift(disc, star.coeffs, star.space) if gauge_free else 0.0
        rec["psl2error"] = error_scalar(disc, star.coeffs, star.space, "omega", shift=shift)
    if extra:
        rec.update(extra)
    return rec


def _fmt_gamma(g):
    return int(g) if float(g) == int(g) else g


def run_dirichlet_convergence(cfg):
    meshes = mesh_hierarchy(cfg.base_n, cfg.levels)
    records = []
    for k in cfg.ks:
        for L, mesh in enumerate(meshes):
            disc = make_discretization(cfg, mesh, L, k)
            source = _source_for(disc, cfg, k)
            for gamma in cfg.gammas:
                sol = solve_main(disc, gamma, source, exact_p)
                star = _postprocess(disc, cfg, sol)
                records.append(_record(disc, cfg, sol, star, L, k, gamma))
    return records


def run_f_study(cfg):
    """k = 2 study of the source approximation modes.

    F encodes the mode like the reference data: 0 = exact (f_h = f),
    1 = k-2, 2 = k-1, 3 = k, 4 = k+1.
    """
    k = cfg.ks[0] if cfg.ks else 2
    meshes = mesh_hierarchy(cfg.base_n, cfg.levels)
    records = []
    modes = [("exact", 0), (k - 2, 1), (k - 1, 2), (k, 3), (k + 1, 4)]
    for L, mesh in enumerate(meshes):
        disc = make_discretization(cfg, mesh, L, k)
        for mode, code in modes:
            if mode == "exact":
                source = disc.exact_source(exact_f)
            else:
                source = disc.extended_source(exact_f, kf=mode, gamma_f=cfg.gamma_f)
            for gamma in cfg.gammas:
                sol = solve_main(disc, gamma, source, exact_p)
                star = _postprocess(disc, cfg, sol)
                records.append(_record(disc, cfg, sol, star, L, k, gamma, extra={"F": code}))
    return records


def run_neumann_convergence(cfg, gamma_F=0.01, gamma_T=0.01):
    meshes = mesh_hierarchy(cfg.base_n, cfg.levels)
    records = []
    for k in cfg.ks:
        for L, mesh in enumerate(meshes):
            disc = make_discretization(cfg, mesh, L, k)
            source = _source_for(disc, cfg, k)
            g_N = exact_gn(disc.domain)
            for gamma in cfg.gammas:
                sol = solve_neumann(disc, gamma, gamma_F, gamma_T, g_N, source)
                star = _postprocess(disc, cfg, sol)
                records.append(_record(disc, cfg, sol, star, L, k, gamma, gauge_free=True))
    return records


def run_equivalence_check(cfg, level=1, k=1, gamma_u=1.0, gamma=1.0):
    """Coefficient-level comparison of the main and div-stabilized methods."""
    from .systems import solve_frachon

    meshes = mesh_hierarchy(cfg.base_n, level + 1)
    disc = make_discretization(cfg, meshes[level], level, k)
    source = disc.extended_source(exact_f, kf=k, gamma_f=gamma)
    sol_m = solve_main(disc, gamma_u, source, exact_p)
    sol_f = solve_frachon(disc, gamma_u, gamma, exact_f, exact_p)
    du = np.abs(sol_m.u - sol_f.u).max() / max(np.abs(sol_m.u).max(), 1e-300)

    cut = set(int(e) for e in disc.classes.cut)
    near = set(cut)
    for e in cut:
        near.update(disc.mesh.element_neighbors(e))
    far_dofs, cut_dofs = [], []
    for i, e in enumerate(map(int, disc.q.elems)):
        dofs = disc.q.element_dofs([i])[0]
        if e in near:
            if e in cut:
                cut_dofs.extend(dofs)
        else:
            far_dofs.extend(dofs)
    dp = np.abs(sol_m.p - sol_f.p)
    scale = max(np.abs(sol_m.p).max(), 1e-300)
    return {
        "u_rel_diff": float(du),
        "p_far_rel_diff": float(dp[far_dofs].max() / scale) if far_dofs else 0.0,
        "p_cut_rel_diff": float(dp[cut_dofs].max() / scale) if cut_dofs else 0.0,
        "ndof": sol_m.report["ndof"],
    }


def run_condition_sweep(shift_max=0.1, num=201, k=1, base_n=10, depth=2, gammas=(0.0, 1.0)):
    """Condition numbers of the main system while the geometry slides."""
    from scipy import sparse

    mesh = build_structured(base_n)
    rows = []
    for shift in np.linspace(0.0, shift_max, num):
        try:
            domain = ring_domain(shift=float(shift), subdivision_depth=depth)
            disc = Discretization(mesh, domain, k)
            A = disc.mass("omega")
            B = disc.div_constraint("active")
            J = disc.gp_u()
            for gamma in gammas:
                Ag = A if gamma == 0.0 else (A + gamma * J).tocsr()
                K = sparse.bmat([[Ag, B.T], [B, None]], format="csr")
                try:
                    cond = linalg.condition_number(K)
                except linalg.FactorizationError:
                    cond = linalg.COND_INF
                rows.append({"shift": float(shift), "gammastab": _fmt_gamma(gamma), "cond": cond})
        except Exception:
            for gamma in gammas:
                rows.append(
                    {"shift": float(shift), "gammastab": _fmt_gamma(gamma), "cond": linalg.COND_INF}
                )
    return rows


# -- sparsity study (Fig. 6 unit cell) ------------------------------------------------


def build_strip_fixture(k, ncells=5, gp_variant="normal_jump"):
    """Periodic boundary strip: one square period, two stacked squares.

    The bottom square's triangles are interior, the top square's are cut by
    the horizontal boundary y = 4/3; each cell's patch is {root adjacent to
    the mid facet, the two cut triangles} with the two sketch facets.
    """
    mesh = build_rectangle(0.0, 0.0, ncells, 2, 1.0, 1.0)

    def phi(p):
        p = np.atleast_2d(p)
        return p[:, 1] - 4.0 / 3.0

    def grad(p):
        p = np.atleast_2d(p)
        return np.tile([0.0, 1.0], (len(p), 1))

    domain = LevelSetDomain(phi, grad, 0)
    disc = Discretization(mesh, domain, k, gp_variant=gp_variant)

    patches = []
    for c in range(ncells):
        b2 = 2 * c + 1
        t3 = 2 * ncells + 2 * c
        t4 = 2 * ncells + 2 * c + 1
        members = [b2, t3, t4]
        facets = set()
        for e in members:
            for f in mesh.elem_facets[e]:
                lo, hi = mesh.facet_elems[f]
                if hi >= 0 and int(lo) in members and int(hi) in members:
                    facets.add(int(f))
        patches.append(Patch(members, b2, facets))
        patches.append(Patch([2 * c], 2 * c))
    disc.patches = PatchDecomposition(mesh, disc.classes, patches)
    return disc


def _strip_ownership(disc, cell_x0=2.0):
    """Row weights marking dofs owned by the unit cell starting at x0."""
    mesh = disc.mesh
    rt = disc.rt
    q = disc.q
    w = np.zeros(rt.ndof + q.ndof)
    mids = 0.5 * (mesh.vertices[mesh.facets[:, 0]] + mesh.vertices[mesh.facets[:, 1]])
    for fid in rt.facets:
        x = mids[fid][0]
        # the left vertical facets belong to this cell, the right ones do not
        if cell_x0 - 1e-12 <= x < cell_x0 + 1.0 - 1e-12:
            w[rt.facet_dofs(fid)] = 1.0
    centroids = mesh.vertices[mesh.elements].mean(axis=1)
    for i, e in enumerate(map(int, rt.elems)):
        if cell_x0 < centroids[e][0] < cell_x0 + 1.0:
            dofs = rt.element_dofs([i])[0][3 * rt.nfd :]
            w[dofs] = 1.0
            w[rt.ndof + q.element_dofs(q.local_ids([e]))[0]] = 1.0
    return w


def closed_form_v1_nnz(k):
    """Structural couplings of the plain mixed operator on the unit cell."""
    nfd = k + 1
    nid = k * (k + 1)
    npq = (k + 1) * (k + 2) // 2
    A = 5 * nfd * (5 * nfd + 2 * nid) + 2 * nfd * (3 * nfd + nid) + 4 * nid * (3 * nfd + nid)
    BT = 5 * nfd * 2 * npq + 2 * nfd * npq + 4 * nid * npq
    B = 4 * npq * (nfd * 3 + nid)
    return A + BT + B


def strip_ndof(k):
    return 7 * (k + 1) + 4 * k * (k + 1), 2 * (k + 1) * (k + 2)


def run_sparsity_study(ks=(0, 1, 2, 3), gp_variant="normal_jump"):
    rows = []
    for k in ks:
        disc = build_strip_fixture(k, gp_variant=gp_variant)
        w = _strip_ownership(disc)
        ndof_u, ndof_q = int(w[: disc.rt.ndof].sum()), int(w[disc.rt.ndof :].sum())
        variants = build_variant_matrices(disc)
        row = {"k": k, "ndof_sigma": ndof_u, "ndof_q": ndof_q, "ndof": ndof_u + ndof_q}
        for name, K in variants.items():
            row[name] = linalg.count_nnz(K, w) / (ndof_u + ndof_q)
        row["V1_closed_form"] = closed_form_v1_nnz(k) / (ndof_u + ndof_q)
        rows.append(row)
    return rows


# -- CSV ----------------------------------------------------------------------------


def write_csv(path, records, header=None):
    if header is None:
        header = list(CSV_HEADER)
        if records and "F" in records[0]:
            header = header + ["F"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for rec in records:
            writer.writerow({key: rec.get(key, "") for key in header})


def write_cond_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["shift", "gammastab", "cond"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
