"""Piecewise-linear bottom over two triangles per quadrilateral.

Every quad is split along its c00-c11 diagonal into tri1 = (c00, c01, c11)
and tri2 = (c00, c10, c11).  The bottom is linear on each triangle and is
interpolated under refinement by edge-midpoint / corner averaging of the
nodal values, which keeps the surface continuous across conforming and
hanging edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import tri_area, tri_gradient

_T1 = (0, 3, 2)  # tri1 corner ids (tensor order), counterclockwise
_T2 = (0, 1, 3)

# triangle adjacent to each face S,E,N,W (0 -> tri1, 1 -> tri2)
FACE_TRIANGLE = (1, 1, 0, 0)


@dataclass
class SubcellGeometry:
    """Two-triangle bottom data for one quad (or arrays over many quads)."""

    alpha: np.ndarray        # |tri1| / |quad|
    b1: np.ndarray           # bottom average over tri1
    b2: np.ndarray           # bottom average over tri2
    grad1: np.ndarray        # (..., 2) bottom gradient on tri1
    grad2: np.ndarray        # (..., 2)
    b_quad: np.ndarray       # quad-average bottom = alpha*b1 + (1-alpha)*b2


def build_subcells(corners: np.ndarray, b: np.ndarray) -> SubcellGeometry:
    """Linear fits of the bottom on both triangles of the quad(s).

    ``corners``: (..., 4, 2) tensor-ordered coordinates; ``b``: (..., 4)
    nodal bottom values.  Rejects quads with a degenerate triangle.
    """
    corners = np.asarray(corners, dtype=float)
    b = np.asarray(b, dtype=float)
    p = [corners[..., i, :] for i in range(4)]
    a1 = tri_area(p[_T1[0]], p[_T1[1]], p[_T1[2]])
    a2 = tri_area(p[_T2[0]], p[_T2[1]], p[_T2[2]])
    if np.any(a1 <= 0) or np.any(a2 <= 0):
        raise ValueError("quad with non-positive triangle area")
    alpha = a1 / (a1 + a2)
    b1 = (b[..., _T1[0]] + b[..., _T1[1]] + b[..., _T1[2]]) / 3.0
    b2 = (b[..., _T2[0]] + b[..., _T2[1]] + b[..., _T2[2]]) / 3.0
    g1 = tri_gradient(p[_T1[0]], p[_T1[1]], p[_T1[2]],
                      b[..., _T1[0]], b[..., _T1[1]], b[..., _T1[2]])
    g2 = tri_gradient(p[_T2[0]], p[_T2[1]], p[_T2[2]],
                      b[..., _T2[0]], b[..., _T2[1]], b[..., _T2[2]])
    return SubcellGeometry(alpha, b1, b2, g1, g2,
                           alpha * b1 + (1.0 - alpha) * b2)


def allocate_subcell_heights(h_quad, geom: SubcellGeometry):
    """Split the quad-average water height between the two triangles.

    The pair (h1, h2) is defined by two constraints rather than a raw
    formula: alpha*h1 + (1-alpha)*h2 == h_quad (mass partition) and
    h1 + b1 == h2 + b2 (equal free surface across the diagonal).  Negative
    results are clamped to zero with the partner adjusted to keep the mass
    partition exact; callers treat clamped subcells as dry.
    """
    h_quad = np.asarray(h_quad, dtype=float)
    db = geom.b2 - geom.b1
    h1 = h_quad + (1.0 - geom.alpha) * db
    h2 = h_quad - geom.alpha * db
    neg1 = h1 < 0.0
    neg2 = h2 < 0.0
    if np.any(neg1) or np.any(neg2):
        h1 = np.where(neg1, 0.0, h1)
        h2 = np.where(neg1, h_quad / (1.0 - geom.alpha), h2)
        h2b = np.where(neg2, 0.0, h2)
        h1 = np.where(neg2 & ~neg1, h_quad / geom.alpha, h1)
        h2 = h2b
        h1 = np.maximum(h1, 0.0)
        h2 = np.maximum(h2, 0.0)
    return h1, h2


def interpolate_refined_nodes(b: np.ndarray) -> np.ndarray:
    """Bottom values at the five nodes a refinement introduces.

    Input: (..., 4) parent corner values (tensor order c00,c10,c01,c11 =
    nodes 1,2,3,4).  Output: (..., 5) values (b5..b9) at the left, right,
    bottom, top edge midpoints and the centre:
    b5=(b1+b3)/2, b6=(b2+b4)/2, b7=(b1+b2)/2, b8=(b3+b4)/2, b9=mean.
    """
    b = np.asarray(b, dtype=float)
    b5 = 0.5 * (b[..., 0] + b[..., 2])
    b6 = 0.5 * (b[..., 1] + b[..., 3])
    b7 = 0.5 * (b[..., 0] + b[..., 1])
    b8 = 0.5 * (b[..., 2] + b[..., 3])
    b9 = 0.25 * (b[..., 0] + b[..., 1] + b[..., 2] + b[..., 3])
    return np.stack([b5, b6, b7, b8, b9], axis=-1)


def child_corner_values(b: np.ndarray) -> np.ndarray:
    """Corner values (tensor order) of the 4 children, shape (..., 4, 4).

    Children are ordered by Morton index: (00), (10), (01), (11).
    """
    b = np.asarray(b, dtype=float)
    b5, b6, b7, b8, b9 = np.moveaxis(interpolate_refined_nodes(b), -1, 0)
    b1, b2, b3, b4 = (b[..., i] for i in range(4))
    return np.stack([
        np.stack([b1, b7, b5, b9], axis=-1),
        np.stack([b7, b2, b9, b6], axis=-1),
        np.stack([b5, b9, b3, b8], axis=-1),
        np.stack([b9, b6, b8, b4], axis=-1),
    ], axis=-2)


def point_bottom(corners: np.ndarray, b: np.ndarray, x: np.ndarray):
    """Bottom value and gradient at point(s) ``x`` inside the quad.

    Points on the diagonal get identical values from either triangle
    (continuity of the piecewise-linear interpolant).  Points outside the
    quad are rejected.
    """
    corners = np.asarray(corners, dtype=float)
    b = np.asarray(b, dtype=float)
    x = np.asarray(x, dtype=float)
    geom = build_subcells(corners, b)
    p0 = corners[..., 0, :]
    p3 = corners[..., 3, :]
    d = p3 - p0
    r = x - p0
    cross = d[..., 0] * r[..., 1] - d[..., 1] * r[..., 0]
    # tri1 = (c00, c01, c11) lies on the positive-cross side of the diagonal
    use1 = cross >= 0.0
    _assert_inside(corners, x)
    cen1 = (corners[..., 0, :] + corners[..., 2, :] + corners[..., 3, :]) / 3.0
    cen2 = (corners[..., 0, :] + corners[..., 1, :] + corners[..., 3, :]) / 3.0
    grad = np.where(use1[..., None], geom.grad1, geom.grad2)
    base = np.where(use1, geom.b1, geom.b2)
    cen = np.where(use1[..., None], cen1, cen2)
    val = base + np.sum(grad * (x - cen), axis=-1)
    return val, grad


def _assert_inside(corners, x, tol=1e-10):
    from .geometry import _WIND
    c = corners[..., _WIND, :]
    nxt = np.roll(c, -1, axis=-2)
    e = nxt - c
    r = x[..., None, :] - c
    cross = e[..., 0] * r[..., 1] - e[..., 1] * r[..., 0]
    scale = np.sum(np.abs(e), axis=-1) + 1.0
    if np.any(cross < -tol * scale):
        raise ValueError("point outside quad in point_bottom")
