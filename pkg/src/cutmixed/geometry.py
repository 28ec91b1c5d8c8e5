"""Unfitted domain descriptions, element classification and cut quadrature.

Two geometry pathways are supported:

  * level sets: the domain is {phi < 0}; classification and clipping use the
    piecewise-linear interpolant of phi on a uniform red subdivision of each
    element (``subdivision_depth`` levels), so the geometry error is
    O((h / 2^depth)^2).  Interface normals use the exact gradient of phi.
  * convex polygons: triangle/polygon intersections are computed exactly by
    half-plane clipping, so there is no geometry error for straight cuts.
"""

from __future__ import annotations

import numpy as np

from .quadrature import map_to_segment, map_to_triangle, map_to_triangles, segment_rule, triangle_rule

SIGN_TOL = 1e-12

INTERIOR, CUT, EXTERIOR = 0, 1, 2


class GeometryError(Exception):
    pass


class DegenerateCutError(GeometryError):
    pass


class LevelSetDomain:
    """Domain {phi < 0} with boundary {phi = 0}.

    `phi` and `grad_phi` must accept (n, 2) arrays.  `grad_phi` has to be
    nonzero in a band around the boundary (it is only evaluated there).
    """

    kind = "levelset"

    def __init__(self, phi, grad_phi, subdivision_depth=0):
        if subdivision_depth < 0:
            raise GeometryError("subdivision_depth must be >= 0")
        self.phi = phi
        self.grad_phi = grad_phi
        self.subdivision_depth = int(subdivision_depth)

    def with_depth(self, depth):
        return LevelSetDomain(self.phi, self.grad_phi, depth)

    def unit_normals(self, pts):
        g = np.asarray(self.grad_phi(np.asarray(pts, dtype=float)))
        norms = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(norms < 1e-14):
            raise GeometryError("vanishing level set gradient near the interface")
        return g / norms


class ConvexPolygonDomain:
    """Open convex polygon domain given by CCW vertices inside (-1, 1)^2."""

    kind = "polygon"
    subdivision_depth = 0

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise GeometryError("polygon needs >= 3 vertices of shape (m, 2)")
        cross = np.cross(np.roll(v, -1, axis=0) - v, np.roll(v, -2, axis=0) - np.roll(v, -1, axis=0))
        if not np.all(cross > 0):
            raise GeometryError("polygon must be strictly convex and CCW")
        if np.any(np.abs(v) >= 1.0):
            raise GeometryError("polygon must be contained in (-1, 1)^2")
        self.vertices = v
        edges = np.roll(v, -1, axis=0) - v
        lens = np.linalg.norm(edges, axis=1)
        # outward normals of a CCW polygon
        self.edge_normals = np.column_stack([edges[:, 1], -edges[:, 0]]) / lens[:, None]
        self.edge_lengths = lens

    def nearest_edge_normal(self, pts):
        """Outward normal of the polygon edge nearest to each point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        ee = (e * e).sum(axis=1)
        d = pts[:, None, :] - v[None, :, :]
        t = np.clip((d * e[None, :, :]).sum(axis=2) / ee[None, :], 0.0, 1.0)
        proj = v[None, :, :] + t[:, :, None] * e[None, :, :]
        dist = np.linalg.norm(pts[:, None, :] - proj, axis=2)
        return self.edge_normals[np.argmin(dist, axis=1)]


def ring_domain(r1=0.25, r2=0.75, shift=0.0, subdivision_depth=3):
    """Annulus r1 < |x - s| < r2 with center shifted by (shift, shift)."""
    rbar = 0.5 * (r1 + r2)
    half = 0.5 * (r2 - r1)

    def phi(p):
        p = np.atleast_2d(p)
        r = np.hypot(p[:, 0] - shift, p[:, 1] - shift)
        return np.abs(r - rbar) - half

    def grad(p):
        p = np.atleast_2d(p)
        d = p - np.array([shift, shift])
        r = np.maximum(np.hypot(d[:, 0], d[:, 1]), 1e-300)
        return np.sign(r - rbar)[:, None] * d / r[:, None]

    return LevelSetDomain(phi, grad, subdivision_depth)


def rotated_square_domain(radius=0.8, angle=0.3):
    """Square with corners at distance `radius` from the origin, rotated."""
    corners = []
    for t in (0.25, 0.75, 1.25, 1.75):
        a = np.pi * t + angle
        corners.append((radius * np.cos(a), radius * np.sin(a)))
    return ConvexPolygonDomain(corners)


# -- classification ----------------------------------------------------------


class Classification:
    def __init__(self, tags):
        self.tags = np.asarray(tags, dtype=np.int8)
        self.interior = np.flatnonzero(self.tags == INTERIOR)
        self.cut = np.flatnonzero(self.tags == CUT)
        self.exterior = np.flatnonzero(self.tags == EXTERIOR)
        self.active = np.flatnonzero(self.tags != EXTERIOR)
        self.is_active = self.tags != EXTERIOR

    def __getitem__(self, elem):
        return int(self.tags[elem])


def _lattice_coords(depth):
    """Barycentric lattice (i + j <= m, m = 2^depth) as (n, 2) simplex coords."""
    m = 1 << depth
    ij = [(i, j) for j in range(m + 1) for i in range(m + 1 - j)]
    arr = np.array(ij, dtype=float) / m
    return arr, np.array(ij, dtype=np.int64), m


def _perturb(vals):
    out = np.array(vals, dtype=float, copy=True)
    out[np.abs(out) <= SIGN_TOL] = -SIGN_TOL
    return out


def _levelset_lattice_values(mesh, domain, elems, depth):
    ref, _, _ = _lattice_coords(depth)
    verts = mesh.element_vertices(elems)
    v0 = verts[:, 0]
    B = np.stack([verts[:, 1] - v0, verts[:, 2] - v0], axis=-1)
    pts = np.einsum("qj,nij->nqi", ref, B) + v0[:, None, :]
    flat = pts.reshape(-1, 2)
    vals = np.asarray(domain.phi(flat)).reshape(len(elems), -1)
    return vals


MEASURE_TOL = 1e-13


def classify(mesh, domain):
    """Tag every element Interior / Cut / Exterior.

    Mixed-sign elements whose inside or outside part has negligible measure
    (below MEASURE_TOL relative to the element) are demoted to Exterior or
    Interior so that every Cut element carries usable quadrature.
    """
    if domain.kind == "levelset":
        elems = np.arange(mesh.num_elements)
        corner_vals = _levelset_lattice_values(mesh, domain, elems, 0)
        if np.any(np.all(np.abs(corner_vals) <= SIGN_TOL, axis=1)):
            bad = int(np.flatnonzero(np.all(np.abs(corner_vals) <= SIGN_TOL, axis=1))[0])
            raise DegenerateCutError(f"level set vanishes on element {bad}: degenerate cut")
        vals = _perturb(_levelset_lattice_values(mesh, domain, elems, domain.subdivision_depth))
        neg = vals < 0.0
        tags = np.full(mesh.num_elements, CUT, dtype=np.int8)
        tags[np.all(neg, axis=1)] = INTERIOR
        tags[np.all(~neg, axis=1)] = EXTERIOR
        for e in np.flatnonzero(tags == CUT):
            tri = mesh.element_vertices([int(e)])[0]
            tris, segs = _levelset_cells(tri, domain, domain.subdivision_depth)
            inside = sum(polygon_area(t) for t in tris)
            area = mesh.element_areas[e]
            length = sum(np.linalg.norm(np.asarray(b) - np.asarray(a)) for a, b in segs)
            if inside <= MEASURE_TOL * area:
                tags[e] = EXTERIOR
            elif area - inside <= MEASURE_TOL * area and length <= MEASURE_TOL * np.sqrt(area):
                tags[e] = INTERIOR
        return Classification(tags)

    tags = np.empty(mesh.num_elements, dtype=np.int8)
    for e in range(mesh.num_elements):
        tri = mesh.element_vertices([e])[0]
        poly = clip_polygon_convex(tri, domain)
        area = polygon_area(poly)
        tri_area = mesh.element_areas[e]
        if area <= 1e-14 * tri_area:
            tags[e] = EXTERIOR
        elif _interface_segments(tri, domain):
            tags[e] = CUT
        else:
            tags[e] = INTERIOR
    return Classification(tags)


# -- polygon utilities -------------------------------------------------------


def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_halfplane(poly, point, normal, eps=1e-14):
    """Keep the part of `poly` with (x - point) . normal <= eps."""
    if len(poly) == 0:
        return []
    out = []
    n = len(poly)
    d = [np.dot(np.asarray(q) - point, normal) for q in poly]
    for i in range(n):
        j = (i + 1) % n
        di, dj = d[i], d[j]
        if di <= eps:
            out.append(poly[i])
        if (di < -eps and dj > eps) or (di > eps and dj < -eps):
            t = di / (di - dj)
            pi, pj = np.asarray(poly[i]), np.asarray(poly[j])
            out.append(tuple(pi + t * (pj - pi)))
    return out


def clip_polygon_convex(tri, domain):
    """Exact triangle / convex-polygon intersection (list of CCW points)."""
    poly = [tuple(p) for p in np.asarray(tri)]
    for v, n in zip(domain.vertices, domain.edge_normals):
        poly = clip_halfplane(poly, v, n)
        if not poly:
            return []
    return poly


def _interface_segments(tri, domain, eps=1e-13):
    """Portions of the polygon boundary inside triangle `tri`.

    Returns a list of (a, b, outward_normal) with nonzero length.
    """
    tri = np.asarray(tri, dtype=float)
    edges = [(tri[i], tri[(i + 1) % 3]) for i in range(3)]
    normals = []
    for a, b in edges:
        t = b - a
        n = np.array([t[1], -t[0]])
        n /= np.linalg.norm(n)
        c = tri.mean(axis=0)
        if np.dot(c - a, n) > 0:
            n = -n
        normals.append((a, n))
    segs = []
    verts = domain.vertices
    for i in range(len(verts)):
        a = verts[i]
        b = verts[(i + 1) % len(verts)]
        t0, t1 = 0.0, 1.0
        ok = True
        for p, n in normals:
            da = np.dot(a - p, n)
            db = np.dot(b - p, n)
            # keep {d <= 0} along the parametrized edge
            if abs(da - db) < 1e-300:
                if da > eps:
                    ok = False
                    break
                continue
            t_star = da / (da - db)
            if da > db:
                t0 = max(t0, t_star)
            else:
                t1 = min(t1, t_star)
            if t0 >= t1 - 1e-12:
                ok = False
                break
        if ok and t1 - t0 > 1e-12:
            pa = a + t0 * (b - a)
            pb = a + t1 * (b - a)
            if np.linalg.norm(pb - pa) > eps:
                segs.append((pa, pb, domain.edge_normals[i]))
    return segs


def fan_triangulate(poly):
    p = [np.asarray(q, dtype=float) for q in poly]
    return [(p[0], p[i], p[i + 1]) for i in range(1, len(p) - 1)]


# -- level set clipping on one (sub)triangle ----------------------------------


def _clip_child(verts, vals):
    """Split one triangle by the linear interpolant of `vals`.

    Returns (inside_polygon, interface_segment or None).  `vals` must not
    contain exact zeros (callers perturb first).
    """
    verts = [np.asarray(v, dtype=float) for v in verts]
    neg = [v < 0 for v in vals]
    if all(neg):
        return list(verts), None
    if not any(neg):
        return [], None
    poly = []
    crossings = []
    for i in range(3):
        j = (i + 1) % 3
        if neg[i]:
            poly.append(verts[i])
        if neg[i] != neg[j]:
            t = vals[i] / (vals[i] - vals[j])
            q = verts[i] + t * (verts[j] - verts[i])
            poly.append(q)
            crossings.append(q)
    seg = tuple(crossings) if len(crossings) == 2 else None
    return poly, seg


def _children_of(verts):
    v0, v1, v2 = verts
    m01 = 0.5 * (v0 + v1)
    m12 = 0.5 * (v1 + v2)
    m20 = 0.5 * (v2 + v0)
    return [(v0, m01, m20), (m01, v1, m12), (m20, m12, v2), (m01, m12, m20)]


def _levelset_cells(verts, domain, depth):
    """Leaf descriptions on one element: (inside_tris, interface_segments).

    Children whose perturbed corner values share a sign are resolved against
    the full-depth lattice of their own vertices, so the result matches the
    depth-`depth` PL interpolant of phi.
    """
    inside = []
    segs = []

    def recurse(tri, level):
        tri = [np.asarray(t, dtype=float) for t in tri]
        vals = _perturb(domain.phi(np.array(tri)))
        if level == depth:
            poly, seg = _clip_child(tri, vals)
            if len(poly) >= 3:
                inside.extend(fan_triangulate(poly))
            if seg is not None:
                segs.append(seg)
            return
        # sample the remaining sub-lattice to decide whether to descend
        sub = _lattice_coords(depth - level)[0]
        v0 = tri[0]
        B = np.column_stack([tri[1] - v0, tri[2] - v0])
        pts = sub @ B.T + v0
        sv = _perturb(domain.phi(pts))
        if np.all(sv < 0):
            inside.append(tuple(tri))
            return
        if np.all(sv > 0):
            return
        for child in _children_of(tri):
            recurse(child, level + 1)

    recurse(list(verts), 0)
    return inside, segs


# -- per element rules ---------------------------------------------------------


def full_volume_rule(mesh, elem, order):
    ref_pts, ref_wts = triangle_rule(order)
    return map_to_triangle(mesh.element_vertices([elem])[0], ref_pts, ref_wts)


def cut_volume_rule(mesh, domain, elem, order, tag=None):
    """Quadrature for T \\cap Omega.  Interior elements get the full rule."""
    if tag is None:
        tag = _single_tag(mesh, domain, elem)
    if tag == EXTERIOR:
        raise GeometryError(f"element {elem} is exterior: no volume rule")
    if tag == INTERIOR:
        return full_volume_rule(mesh, elem, order)
    tri = mesh.element_vertices([elem])[0]
    ref_pts, ref_wts = triangle_rule(order)
    if domain.kind == "levelset":
        tris, _ = _levelset_cells(tri, domain, domain.subdivision_depth)
    else:
        poly = clip_polygon_convex(tri, domain)
        tris = fan_triangulate(poly) if len(poly) >= 3 else []
    tris = [t for t in tris if polygon_area(t) > 1e-16 * mesh.element_areas[elem]]
    if not tris:
        raise GeometryError(f"cut element {elem} has empty intersection: inconsistent classification")
    pts, wts = map_to_triangles(np.array(tris), ref_pts, ref_wts)
    return pts.reshape(-1, 2), wts.ravel()


def interface_rule(mesh, domain, elem, order):
    """Quadrature for T \\cap Gamma with unit outward normals per point."""
    tri = mesh.element_vertices([elem])[0]
    ref_pts, ref_wts = segment_rule(order)
    pts_all, wts_all, nrm_all = [], [], []
    if domain.kind == "levelset":
        _, segs = _levelset_cells(tri, domain, domain.subdivision_depth)
        for a, b in segs:
            if np.linalg.norm(np.asarray(b) - np.asarray(a)) < 1e-300:
                continue
            pts, wts = map_to_segment(a, b, ref_pts, ref_wts)
            pts_all.append(pts)
            wts_all.append(wts)
            nrm_all.append(domain.unit_normals(pts))
    else:
        for a, b, n in _interface_segments(tri, domain):
            pts, wts = map_to_segment(a, b, ref_pts, ref_wts)
            pts_all.append(pts)
            wts_all.append(wts)
            nrm_all.append(np.tile(n, (len(pts), 1)))
    if not pts_all:
        raise DegenerateCutError(f"element {elem} has zero-length interface: degenerate cut")
    return np.vstack(pts_all), np.concatenate(wts_all), np.vstack(nrm_all)


def _single_tag(mesh, domain, elem):
    if domain.kind == "levelset":
        vals = _perturb(_levelset_lattice_values(mesh, domain, [elem], domain.subdivision_depth)[0])
        if np.all(vals < 0):
            return INTERIOR
        if np.all(vals > 0):
            return EXTERIOR
        tri = mesh.element_vertices([elem])[0]
        tris, segs = _levelset_cells(tri, domain, domain.subdivision_depth)
        inside = sum(polygon_area(t) for t in tris)
        area = mesh.element_areas[elem]
        length = sum(np.linalg.norm(np.asarray(b) - np.asarray(a)) for a, b in segs)
        if inside <= MEASURE_TOL * area:
            return EXTERIOR
        if area - inside <= MEASURE_TOL * area and length <= MEASURE_TOL * np.sqrt(area):
            return INTERIOR
        return CUT
    tri = mesh.element_vertices([elem])[0]
    poly = clip_polygon_convex(tri, domain)
    if polygon_area(poly) <= 1e-14 * mesh.element_areas[elem]:
        return EXTERIOR
    return CUT if _interface_segments(tri, domain) else INTERIOR


def facet_is_cut(mesh, domain, facet, samples=33):
    """Whether the boundary crosses the (full) facet."""
    a = mesh.vertices[mesh.facets[facet, 0]]
    b = mesh.vertices[mesh.facets[facet, 1]]
    if domain.kind == "levelset":
        t = np.linspace(0.0, 1.0, samples)
        vals = _perturb(domain.phi(a[None, :] + t[:, None] * (b - a)[None, :]))
        return bool(np.any(vals < 0) and np.any(vals > 0))
    mids = np.array([a, b, 0.5 * (a + b)])
    inside = []
    for p in mids:
        d = [(np.dot(p - v, n)) for v, n in zip(domain.vertices, domain.edge_normals)]
        inside.append(max(d) < 0)
    return inside[0] != inside[1] or inside[0] != inside[2]


def cut_facet_rule(mesh, domain, facet, order, samples=33):
    """Quadrature for the part of a facet inside Omega."""
    a = mesh.vertices[mesh.facets[facet, 0]]
    b = mesh.vertices[mesh.facets[facet, 1]]
    ref_pts, ref_wts = segment_rule(order)
    if domain.kind == "levelset":
        t = np.linspace(0.0, 1.0, samples)
        vals = _perturb(domain.phi(a[None, :] + t[:, None] * (b - a)[None, :]))
        pts_all, wts_all = [], []
        i = 0
        while i < samples - 1:
            if vals[i] < 0 or vals[i + 1] < 0:
                t0 = t[i] if vals[i] < 0 else t[i] + (t[i + 1] - t[i]) * vals[i] / (vals[i] - vals[i + 1])
                j = i
                while j < samples - 1 and (vals[j] < 0 or vals[j + 1] < 0):
                    j += 1
                t1 = t[j] if vals[j] < 0 else t[j - 1] + (t[j] - t[j - 1]) * vals[j - 1] / (vals[j - 1] - vals[j])
                pa = a + t0 * (b - a)
                pb = a + t1 * (b - a)
                pts, wts = map_to_segment(pa, pb, ref_pts, ref_wts)
                pts_all.append(pts)
                wts_all.append(wts)
                i = j + 1
            else:
                i += 1
        if not pts_all:
            return np.zeros((0, 2)), np.zeros(0)
        return np.vstack(pts_all), np.concatenate(wts_all)
    t0, t1 = 0.0, 1.0
    for v, n in zip(domain.vertices, domain.edge_normals):
        da = np.dot(a - v, n)
        db = np.dot(b - v, n)
        if abs(da - db) < 1e-300:
            if da > 0:
                return np.zeros((0, 2)), np.zeros(0)
            continue
        ts = da / (da - db)
        if da > db:
            t0 = max(t0, ts)
        else:
            t1 = min(t1, ts)
    if t0 >= t1:
        return np.zeros((0, 2)), np.zeros(0)
    return map_to_segment(a + t0 * (b - a), a + t1 * (b - a), ref_pts, ref_wts)


# -- bulk container ------------------------------------------------------------


class CutData:
    """Per-element quadrature for one (mesh, domain, classification, order).

    Volume rules integrate over T cap Omega (full rule on interior elements),
    full rules over T, interface rules over T cap Gamma with outward normals.
    """

    def __init__(self, mesh, domain, classes, order):
        self.mesh = mesh
        self.domain = domain
        self.classes = classes
        self.order = order
        self.ref_pts, self.ref_wts = triangle_rule(order)
        self._vol = {}
        self._iface = {}
        for e in classes.cut:
            e = int(e)
            self._vol[e] = cut_volume_rule(mesh, domain, e, order, tag=CUT)
            self._iface[e] = interface_rule(mesh, domain, e, order)

    def volume(self, elem):
        elem = int(elem)
        rule = self._vol.get(elem)
        if rule is not None:
            return rule
        tag = self.classes[elem]
        if tag == EXTERIOR:
            raise GeometryError(f"element {elem} is exterior")
        return full_volume_rule(self.mesh, elem, self.order)

    def full(self, elem):
        return full_volume_rule(self.mesh, int(elem), self.order)

    def interface(self, elem):
        elem = int(elem)
        if elem not in self._iface:
            raise GeometryError(f"element {elem} carries no interface rule")
        return self._iface[elem]

    def full_batch(self, elems):
        """Mapped full rules for many elements: pts (n, nq, 2), wts (n, nq)."""
        verts = self.mesh.element_vertices(elems)
        return map_to_triangles(verts, self.ref_pts, self.ref_wts)

    def cut_groups(self):
        """Cut-element volume rules grouped by point count for batching."""
        groups = {}
        for e, (pts, wts) in self._vol.items():
            groups.setdefault(len(wts), []).append(e)
        out = []
        for npts, elems in sorted(groups.items()):
            elems = sorted(elems)
            pts = np.stack([self._vol[e][0] for e in elems])
            wts = np.stack([self._vol[e][1] for e in elems])
            out.append((np.array(elems), pts, wts))
        return out
