"""Runtime bundle of per-leaf geometry, bottom subcells and interface data.

Rebuilt wholesale after every adaptation event; everything in it is a
deterministic function of the forest, so two runs with the same history
produce bitwise identical bundles.
"""

from __future__ import annotations

import numpy as np

from .basemesh import TAG_WALL
from .forest import Forest, InterfaceSet, leaf_interfaces
from .reconstruction import ReconTopology, build_topology
from .topography import FACE_TRIANGLE, build_subcells


class MeshData:
    """Geometry + topology caches for one forest configuration."""

    def __init__(self, forest: Forest):
        self.forest = forest
        self.corners = forest.corners()
        self.area = forest.areas(self.corners)
        self.centroid = forest.centroids(self.corners)
        self.d_cell = forest.char_length(self.corners)
        self.sub = build_subcells(self.corners, forest.corner_b)
        self.b_quad = self.sub.b_quad
        self.ifaces: InterfaceSet = leaf_interfaces(forest, self.corners)
        self._interface_bottom()
        self.topo: ReconTopology = build_topology(self.ifaces, self.centroid,
                                                  len(forest))
        n = self.ifaces.normal
        self.tangent = np.stack([-n[:, 1], n[:, 0]], axis=-1)
        self.level_l = forest.level[self.ifaces.left].astype(np.int64)
        lr = np.where(self.ifaces.interior, self.ifaces.right, self.ifaces.left)
        self.level_r = forest.level[lr].astype(np.int64)
        self.rec_level = np.maximum(self.level_l, self.level_r)
        self.hanging = self.ifaces.kind == 1

    def _interface_bottom(self):
        """Bottom value and gradient at the Gauss points, per side.

        Each face lies on one triangle of its cell, so the side gradient is
        constant along the record; values at the two Gauss points coincide
        across the interface because the nodal averaging rules keep the
        piecewise-linear bottom continuous over conforming and hanging
        edges.  Wall ghosts mirror the gradient, other boundaries copy it.
        """
        ifs = self.ifaces
        m = len(ifs)
        tri_pick = np.asarray(FACE_TRIANGLE)

        def side_data(recs, cells, faces):
            use2 = tri_pick[faces] == 1
            g = np.where(use2[:, None], self.sub.grad2[cells],
                         self.sub.grad1[cells])
            bval = np.where(use2, self.sub.b2[cells], self.sub.b1[cells])
            c = self.corners[cells]
            cen1 = (c[:, 0] + c[:, 2] + c[:, 3]) / 3.0
            cen2 = (c[:, 0] + c[:, 1] + c[:, 3]) / 3.0
            cen = np.where(use2[:, None], cen2, cen1)
            bgp = bval[:, None] + np.sum(
                g[:, None, :] * (ifs.gp[recs] - cen[:, None, :]), axis=-1)
            return bgp, g

        allrec = np.arange(m)
        b_l, gb_l = side_data(allrec, ifs.left, ifs.face_l)
        self.b_gp = b_l
        self.gb_l = gb_l
        gb_r = gb_l.copy()
        interior = ifs.interior
        if np.any(interior):
            ii = np.flatnonzero(interior)
            b_r, g_r = side_data(ii, ifs.right[ii], ifs.face_r[ii])
            gb_r[ii] = g_r
            err = np.max(np.abs(b_r - b_l[ii])) if len(ii) else 0.0
            scale = 1.0 + np.max(np.abs(self.b_gp))
            if err > 1e-9 * scale:
                raise AssertionError(
                    f"bottom discontinuous across an interface ({err:g})")
        wall = ~interior & (ifs.btag == TAG_WALL)
        if np.any(wall):
            wi = np.flatnonzero(wall)
            nrm = ifs.normal[wi]
            gn = np.sum(gb_r[wi] * nrm, axis=-1)
            gb_r[wi] -= 2.0 * gn[:, None] * nrm
        self.gb_r = gb_r
