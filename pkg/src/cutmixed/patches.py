"""Aggregation of cut elements into patches with interior root elements.

Every cut element must end up in a patch containing an uncut (interior) root
element; stabilization terms then act on the patch-interior facets, which is
what transfers control from the root to the cut elements.
"""

from __future__ import annotations

import numpy as np

from .geometry import CUT, EXTERIOR, INTERIOR


class PatchError(Exception):
    pass


class IsolatedCutRegionError(PatchError):
    pass


class Patch:
    __slots__ = ("elements", "root", "facets")

    def __init__(self, elements, root, facets=()):
        self.elements = tuple(sorted(int(e) for e in elements))
        self.root = int(root)
        self.facets = tuple(sorted(int(f) for f in facets))

    def __repr__(self):
        return f"Patch(root={self.root}, elements={self.elements})"


class PatchDecomposition:
    def __init__(self, mesh, classes, patches):
        self.mesh = mesh
        self.classes = classes
        self.patches = patches
        self.element_to_patch = {}
        for pid, patch in enumerate(patches):
            for e in patch.elements:
                if e in self.element_to_patch:
                    raise PatchError(f"element {e} assigned to two patches")
                self.element_to_patch[e] = pid
        gp = set()
        for patch in patches:
            gp.update(patch.facets)
        self.gp_facets = np.array(sorted(gp), dtype=np.int64)

    def patch_of(self, elem):
        elem = int(elem)
        pid = self.element_to_patch.get(elem)
        if pid is None:
            raise PatchError(f"element {elem} is not active / not in any patch")
        return pid

    def nontrivial(self):
        return [p for p in self.patches if len(p.elements) > 1]

    def validate(self):
        """Disjoint cover of the active mesh + root/facet sanity checks."""
        covered = sorted(self.element_to_patch)
        assert covered == [int(e) for e in self.classes.active], "patches must cover the active mesh"
        for patch in self.patches:
            assert self.classes[patch.root] == INTERIOR
            for f in patch.facets:
                lo, hi = self.mesh.facet_elems[f]
                assert hi >= 0 and lo in patch.elements and hi in patch.elements
                assert self.classes[lo] != EXTERIOR and self.classes[hi] != EXTERIOR
        return True


def _patch_interior_facets(mesh, elements):
    elems = set(int(e) for e in elements)
    facets = set()
    for e in elems:
        for f in mesh.elem_facets[e]:
            lo, hi = mesh.facet_elems[f]
            if hi >= 0 and int(lo) in elems and int(hi) in elems:
                facets.add(int(f))
    return facets


def build_patches(mesh, classes, max_hops=4, max_size=6):
    """Greedy aggregation by facet-BFS, cut elements in ascending id.

    Each unassigned cut element searches breadth first through unassigned
    active elements for the nearest attachment point: an unassigned interior
    element (becoming a new root) or any member of an existing patch.  The
    unassigned path joins that patch, so patches stay facet-connected and
    every element keeps a bounded facet distance to its root.  Candidates at
    equal distance are ranked by distance-to-root, then resulting patch size,
    then element id.  Leftover interior elements become trivial singletons.
    """
    assigned = {}
    root_group = {}
    hops = {}

    def neighbors(e):
        out = []
        for f in mesh.elem_facets[e]:
            lo, hi = mesh.facet_elems[f]
            if hi < 0:
                continue
            other = int(hi) if int(lo) == e else int(lo)
            if classes.is_active[other]:
                out.append(other)
        return sorted(out)

    for e in map(int, classes.cut):
        if e in assigned:
            continue
        prev = {e: None}
        frontier = [e]
        found = None
        for dist in range(1, max_hops + 1):
            nxt = []
            candidates = []
            for cur in frontier:
                for nb in neighbors(cur):
                    if nb in prev:
                        continue
                    prev[nb] = cur
                    if nb in assigned:
                        candidates.append(nb)
                    elif classes[nb] == INTERIOR:
                        candidates.append(nb)
                    else:
                        nxt.append(nb)
            ranked = []
            for nb in candidates:
                path = _walk(prev, prev[nb])  # [adjacent-to-nb, ..., e]
                if nb not in assigned:  # fresh interior root
                    root_dist = len(path)
                    size = len(path) + 1
                    if root_dist <= max_hops and size <= max_size:
                        ranked.append((root_dist, size, nb, nb, path))
                else:
                    root = assigned[nb]
                    root_dist = len(path) + hops[nb]
                    size = len(root_group[root]) + len(path)
                    if root_dist <= max_hops and size <= max_size:
                        ranked.append((root_dist, size, nb, root, path))
            if ranked:
                ranked.sort()
                _, _, via, root, path = ranked[0]
                found = (via, root, path)
                break
            frontier = sorted(nxt)
        if not found:
            raise IsolatedCutRegionError(
                f"cut element {e} has no reachable interior root within {max_hops} hops"
            )
        via, root, path = found
        if root not in root_group:
            root_group[root] = [root]
            assigned[root] = root
            hops[root] = 0
        base = hops[via] if via != root else 0
        for i, p in enumerate(path):
            if p not in assigned:
                root_group[root].append(p)
                assigned[p] = root
                hops[p] = base + i + 1
            elif assigned[p] != root:
                raise PatchError("path crossed a foreign patch")

    patches = []
    emitted_roots = set()
    for e in map(int, classes.active):
        if e in assigned:
            root = assigned[e]
            if root not in emitted_roots:
                emitted_roots.add(root)
                members = root_group[root]
                patches.append(Patch(members, root, _patch_interior_facets(mesh, members)))
        else:
            patches.append(Patch([e], e))
    return PatchDecomposition(mesh, classes, patches)


def _walk(prev, node):
    """Path from `node` back to the BFS origin (origin last)."""
    path = []
    while node is not None:
        path.append(node)
        node = prev[node]
    return path
