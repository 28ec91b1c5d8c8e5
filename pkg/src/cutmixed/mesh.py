"""Background triangulations of a box with full facet/adjacency topology.

Conventions fixed here and relied on everywhere else:
  * elements are CCW triples of vertex indices,
  * facets are stored once as sorted vertex pairs, ordered by first
    appearance while scanning elements in ascending order,
  * the oriented facet normal points from the lower-id adjacent element to
    the higher-id one (outward for boundary facets).
"""

from __future__ import annotations

import numpy as np


class MeshError(Exception):
    pass


class BackgroundMesh:
    """Simplicial triangulation with facet topology.

    Parameters
    ----------
    vertices : (V, 2) float array
    elements : (E, 3) int array, CCW
    level : refinement level tag (0 for a freshly built mesh)
    """

    def __init__(self, vertices, elements, level=0):
        self.vertices = np.asarray(vertices, dtype=float)
        self.elements = np.asarray(elements, dtype=np.int64)
        self.level = level
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be (V, 2)")
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex coordinates")
        areas = self.signed_areas()
        if np.any(areas <= 0.0):
            raise MeshError("elements must be CCW with positive area")
        self.element_areas = areas
        self._build_topology()
        p = self.vertices[self.elements]
        e01 = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        e12 = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
        e20 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
        self.element_diameters = np.maximum(np.maximum(e01, e12), e20)

    # -- construction helpers -------------------------------------------------

    def signed_areas(self):
        p = self.vertices[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def _build_topology(self):
        facet_index = {}
        facets = []
        adj = []
        nelem = len(self.elements)
        elem_facets = np.empty((nelem, 3), dtype=np.int64)
        for e in range(nelem):
            tri = self.elements[e]
            for j in range(3):
                a, b = tri[j], tri[(j + 1) % 3]
                key = (a, b) if a < b else (b, a)
                fid = facet_index.get(key)
                if fid is None:
                    fid = len(facets)
                    facet_index[key] = fid
                    facets.append(key)
                    adj.append([e])
                else:
                    if len(adj[fid]) == 2:
                        raise MeshError(f"facet {key} shared by >2 elements")
                    adj[fid].append(e)
                elem_facets[e, j] = fid
        self.facets = np.array(facets, dtype=np.int64)
        self.elem_facets = elem_facets
        nf = len(facets)
        self.facet_elems = np.full((nf, 2), -1, dtype=np.int64)
        self.facet_normals = np.empty((nf, 2))
        self.facet_lengths = np.empty(nf)
        mids = 0.5 * (self.vertices[self.facets[:, 0]] + self.vertices[self.facets[:, 1]])
        tang = self.vertices[self.facets[:, 1]] - self.vertices[self.facets[:, 0]]
        self.facet_lengths[:] = np.linalg.norm(tang, axis=1)
        geo_n = np.column_stack([tang[:, 1], -tang[:, 0]]) / self.facet_lengths[:, None]
        centroids = self.vertices[self.elements].mean(axis=1)
        for fid in range(nf):
            elems = sorted(adj[fid])
            self.facet_elems[fid, : len(elems)] = elems
            lo = elems[0]
            side = np.dot(centroids[lo] - mids[fid], geo_n[fid])
            # normal points away from the lower-id element
            self.facet_normals[fid] = geo_n[fid] if side < 0 else -geo_n[fid]
        self.interior_facets = np.flatnonzero(self.facet_elems[:, 1] >= 0)
        self.boundary_facets = np.flatnonzero(self.facet_elems[:, 1] < 0)

    # -- queries ---------------------------------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_elements(self):
        return len(self.elements)

    @property
    def num_facets(self):
        return len(self.facets)

    @property
    def h(self):
        return float(self.element_diameters.max())

    def element_vertices(self, elems=None):
        if elems is None:
            return self.vertices[self.elements]
        return self.vertices[self.elements[np.asarray(elems)]]

    def facet_patch(self, facet):
        """Return the (left, right) element pair of an interior facet.

        Left is the element the oriented facet normal points out of (the
        lower element id); raises for boundary facets.
        """
        lo, hi = self.facet_elems[facet]
        if hi < 0:
            raise MeshError(f"facet {facet} is a boundary facet: no patch")
        return int(lo), int(hi)

    def element_neighbors(self, elem):
        """Element ids sharing a facet with `elem` (interior facets only)."""
        out = []
        for fid in self.elem_facets[elem]:
            lo, hi = self.facet_elems[fid]
            if hi < 0:
                continue
            out.append(int(hi) if lo == elem else int(lo))
        return out

    def dump_text(self, path):
        """Plain text dump: 'v x y' vertex lines then 't i j k' element lines."""
        with open(path, "w") as fh:
            for x, y in self.vertices:
                fh.write(f"v {x!r} {y!r}\n")
            for i, j, k in self.elements:
                fh.write(f"t {i} {j} {k}\n")


def build_rectangle(x0, y0, nx, ny, dx, dy):
    """Criss triangulation of [x0, x0+nx*dx] x [y0, y0+ny*dy].

    Each cell is split along the diagonal from its lower-left to upper-right
    corner; elements are numbered cell by cell, columns fastest in x.
    """
    xs = x0 + dx * np.arange(nx + 1)
    ys = y0 + dy * np.arange(ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    elements = []
    for j in range(ny):
        for i in range(nx):
            a = vid(i, j)
            b = vid(i + 1, j)
            c = vid(i + 1, j + 1)
            d = vid(i, j + 1)
            elements.append((a, b, c))
            elements.append((a, c, d))
    return BackgroundMesh(vertices, np.array(elements, dtype=np.int64))


def build_structured(n):
    """Structured criss mesh of the box [-1, 1]^2 with n cells per axis."""
    if n < 1:
        raise MeshError("n must be >= 1")
    return build_rectangle(-1.0, -1.0, n, n, 2.0 / n, 2.0 / n)


def refine_uniform(mesh):
    """Red refinement: each triangle split into 4 congruent children."""
    verts = list(map(tuple, mesh.vertices))
    mid_index = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        m = mid_index.get(key)
        if m is None:
            m = len(verts)
            mid_index[key] = m
            pa = mesh.vertices[a]
            pb = mesh.vertices[b]
            verts.append(((pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0))
        return m

    elements = []
    for v0, v1, v2 in mesh.elements:
        m01 = midpoint(v0, v1)
        m12 = midpoint(v1, v2)
        m20 = midpoint(v2, v0)
        elements.extend([(v0, m01, m20), (m01, v1, m12), (m20, m12, v2), (m01, m12, m20)])
    return BackgroundMesh(np.array(verts), np.array(elements, dtype=np.int64), level=mesh.level + 1)
