"""Quadrature rules on the reference triangle and on segments.

The reference triangle is {(x, y) : x >= 0, y >= 0, x + y <= 1}.  Triangle
rules are built from a collapsed Gauss-Jacobi x Gauss-Legendre product, so a
rule of degree d integrates all bivariate polynomials of total degree <= d
exactly.  Reference weights sum to 1/2 (the reference area).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi


@lru_cache(maxsize=None)
def segment_rule(degree: int):
    """Gauss-Legendre nodes/weights on [0, 1], exact for degree `degree`."""
    n = max(1, (degree + 2) // 2)
    x, w = leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


@lru_cache(maxsize=None)
def triangle_rule(degree: int):
    """Nodes (n, 2) and weights (n,) on the reference triangle."""
    n = max(1, (degree + 2) // 2)
    # x-direction carries the (1 - x) Jacobian of the collapsed map.
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    xg, wg = leggauss(n)
    x = (xj + 1.0) / 2.0
    t = (xg + 1.0) / 2.0
    # weight(1-x) on [0,1]: jacobi weights carry (1-x)^1 on [-1,1] -> scale 1/4
    wx = wj / 4.0
    wt = wg / 2.0
    X, T = np.meshgrid(x, t, indexing="ij")
    WX, WT = np.meshgrid(wx, wt, indexing="ij")
    pts = np.column_stack([X.ravel(), (T * (1.0 - X)).ravel()])
    wts = (WX * WT).ravel()
    return pts, wts


def map_to_triangle(verts, ref_pts, ref_wts):
    """Map a reference rule to the physical triangle `verts` (3, 2)."""
    v0, v1, v2 = np.asarray(verts, dtype=float)
    B = np.column_stack([v1 - v0, v2 - v0])
    pts = ref_pts @ B.T + v0
    area2 = abs(B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0])
    return pts, ref_wts * area2


def map_to_triangles(verts, ref_pts, ref_wts):
    """Batched version: `verts` (n, 3, 2) -> pts (n, nq, 2), wts (n, nq)."""
    verts = np.asarray(verts, dtype=float)
    v0 = verts[:, 0]
    B = np.stack([verts[:, 1] - v0, verts[:, 2] - v0], axis=-1)
    pts = np.einsum("qj,nij->nqi", ref_pts, B) + v0[:, None, :]
    area2 = np.abs(B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0])
    wts = ref_wts[None, :] * area2[:, None]
    return pts, wts


def map_to_segment(a, b, ref_pts, ref_wts):
    """Map a [0,1] rule to the segment a-b; weights carry the length."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pts = a[None, :] + ref_pts[:, None] * (b - a)[None, :]
    return pts, ref_wts * np.linalg.norm(b - a)
