"""Quadrilateral geometry helpers.

Cell corners are stored in tensor order (c00, c10, c01, c11), i.e. the
winding order around the quad is c00 -> c10 -> c11 -> c01.  All routines
accept arrays of shape (..., 4, 2) and broadcast over leading axes.
"""

from __future__ import annotations

import numpy as np

# winding order of the tensor-ordered corners
_WIND = (0, 1, 3, 2)

# face index -> (corner start, corner end) in tensor order, traversed so that
# the outward normal of a counterclockwise quad is the -90 degree rotation of
# the edge tangent.  Faces: 0=S, 1=E, 2=N, 3=W.
FACE_CORNERS = ((0, 1), (1, 3), (3, 2), (2, 0))

# face traversed in the +axis direction (S,N: +x; E,W: +y), used when mapping
# along-edge indices between neighbouring trees
FACE_CORNERS_AXIS = ((0, 1), (1, 3), (2, 3), (0, 2))

FACE_OPPOSITE = (2, 3, 0, 1)


def winding_to_tensor(quad: np.ndarray) -> np.ndarray:
    """Reorder corner data from winding order (n0,n1,n2,n3) to tensor order."""
    q = np.asarray(quad)
    return q[..., (0, 1, 3, 2), :] if q.ndim >= 2 else q[..., (0, 1, 3, 2)]


def quad_area(corners: np.ndarray) -> np.ndarray:
    """Signed shoelace area; positive for counterclockwise winding."""
    c = np.asarray(corners)
    x = c[..., _WIND, 0]
    y = c[..., _WIND, 1]
    xn = np.roll(x, -1, axis=-1)
    yn = np.roll(y, -1, axis=-1)
    return 0.5 * np.sum(x * yn - xn * y, axis=-1)


def quad_centroid(corners: np.ndarray) -> np.ndarray:
    """Exact area centroid of the quad (triangle-decomposed, not corner mean)."""
    c = np.asarray(corners)
    p0, p1, p2, p3 = c[..., 0, :], c[..., 1, :], c[..., 2, :], c[..., 3, :]
    # split along the c00-c11 diagonal: tri1 = (c00, c11, c01), tri2 = (c00, c10, c11)
    a1 = tri_area(p0, p3, p2)
    a2 = tri_area(p0, p1, p3)
    cen1 = (p0 + p2 + p3) / 3.0
    cen2 = (p0 + p1 + p3) / 3.0
    area = a1 + a2
    return (cen1 * a1[..., None] + cen2 * a2[..., None]) / area[..., None]


def quad_perimeter(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners)
    x = c[..., _WIND, :]
    d = np.roll(x, -1, axis=-2) - x
    return np.sum(np.hypot(d[..., 0], d[..., 1]), axis=-1)


def tri_area(p0, p1, p2) -> np.ndarray:
    """Signed area of triangle(s)."""
    return 0.5 * ((p1[..., 0] - p0[..., 0]) * (p2[..., 1] - p0[..., 1])
                  - (p2[..., 0] - p0[..., 0]) * (p1[..., 1] - p0[..., 1]))


def tri_gradient(p0, p1, p2, v0, v1, v2):
    """Gradient of the linear interpolant through three nodal values.

    Returns an array of shape (..., 2).  The interpolant reproduces the
    nodal values exactly; degenerate (zero-area) triangles raise.
    """
    a2 = 2.0 * tri_area(p0, p1, p2)
    if np.any(np.abs(a2) < 1e-300):
        raise ValueError("degenerate triangle in bottom subcell")
    gx = (v0 * (p1[..., 1] - p2[..., 1]) + v1 * (p2[..., 1] - p0[..., 1])
          + v2 * (p0[..., 1] - p1[..., 1])) / a2
    gy = (v0 * (p2[..., 0] - p1[..., 0]) + v1 * (p0[..., 0] - p2[..., 0])
          + v2 * (p1[..., 0] - p0[..., 0])) / a2
    return np.stack([gx, gy], axis=-1)


def bilinear_point(corners: np.ndarray, s, t) -> np.ndarray:
    """Evaluate the bilinear map of the quad at parameters (s, t) in [0,1]^2.

    Child cells of the quadtree are the images of dyadic parameter boxes, so
    evaluating shared parameter points gives bitwise identical node
    coordinates on both sides of an edge.
    """
    c = np.asarray(corners, dtype=float)
    s = np.asarray(s, dtype=float)[..., None]
    t = np.asarray(t, dtype=float)[..., None]
    return ((1 - s) * (1 - t) * c[..., 0, :] + s * (1 - t) * c[..., 1, :]
            + (1 - s) * t * c[..., 2, :] + s * t * c[..., 3, :])
