"""Forest of quadtrees over a base quadrilateral mesh.

Leaves are stored in struct-of-arrays form, always sorted in canonical
Z-curve order (tree id, then depth-first Morton key), so adaptation and
traversal are deterministic regardless of construction history.  Cell
corner bottom values travel with the leaves: refinement derives child
values by the edge-midpoint / corner averaging rules and coarsening
restores the stored parent corners bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basemesh import BaseMesh, TAG_INTERIOR
from .geometry import FACE_CORNERS, FACE_OPPOSITE, bilinear_point, quad_area, quad_centroid, quad_perimeter
from .topography import child_corner_values

_KMAX = 18          # deepest representable level
_GAUSS_OFF = 0.5 / np.sqrt(3.0)   # 2-point Gauss offsets about the edge midpoint

KIND_CONFORMING = 0
KIND_HANGING = 1


class BalanceError(ValueError):
    pass


def _spread_bits(v: np.ndarray) -> np.ndarray:
    x = v.astype(np.uint64)
    x = (x | (x << np.uint64(16))) & np.uint64(0x0000FFFF0000FFFF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x00FF00FF00FF00FF)
    x = (x | (x << np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    x = (x | (x << np.uint64(2))) & np.uint64(0x3333333333333333)
    x = (x | (x << np.uint64(1))) & np.uint64(0x5555555555555555)
    return x


def morton_encode(ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Interleaved-bit Morton index; x occupies the even bits."""
    m = _spread_bits(np.asarray(ix)) | (_spread_bits(np.asarray(iy)) << np.uint64(1))
    return m.astype(np.int64)


def _zkey(level: np.ndarray, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    shift = (2 * (_KMAX - level.astype(np.int64))).astype(np.uint64)
    return (morton_encode(ix, iy).astype(np.uint64) << shift).astype(np.int64)


def _ckey(tree, level, ix, iy):
    return ((np.asarray(tree, dtype=np.int64) << 41)
            | (np.asarray(level, dtype=np.int64) << 36)
            | (np.asarray(ix, dtype=np.int64) << 18)
            | np.asarray(iy, dtype=np.int64))


@dataclass
class RefineResult:
    forest: "Forest"
    src: np.ndarray        # (Nnew,) source leaf index in the old forest
    slot: np.ndarray       # (Nnew,) child slot 0..3, or -1 for kept leaves
    n_dropped: int = 0     # marks ignored because the leaf was at l_max


@dataclass
class CoarsenResult:
    forest: "Forest"
    src: np.ndarray        # (Nnew,) old index for kept leaves, -1 for parents
    children: np.ndarray   # (Nnew, 4) old child indices for parents, -1 rows otherwise


class Forest:
    """Adaptive quadtree forest; leaves in canonical Z order."""

    def __init__(self, base: BaseMesh, l_max: int,
                 tree=None, level=None, ix=None, iy=None, corner_b=None):
        if l_max < 0 or l_max > _KMAX - 1:
            raise ValueError(f"l_max must be in [0, {_KMAX - 1}]")
        self.base = base
        self.l_max = int(l_max)
        if tree is None:
            nq = base.nquads
            tree = np.arange(nq, dtype=np.int64)
            level = np.zeros(nq, dtype=np.int8)
            ix = np.zeros(nq, dtype=np.int64)
            iy = np.zeros(nq, dtype=np.int64)
            if corner_b is None:
                if base.nodal_b is not None:
                    corner_b = base.nodal_b[base.quads]
                else:
                    corner_b = np.zeros((nq, 4))
        self.tree = np.asarray(tree, dtype=np.int64)
        self.level = np.asarray(level, dtype=np.int8)
        self.ix = np.asarray(ix, dtype=np.int64)
        self.iy = np.asarray(iy, dtype=np.int64)
        self.corner_b = np.asarray(corner_b, dtype=float)
        self._canonicalize()
        self._index()

    # -- bookkeeping ------------------------------------------------------

    def _canonicalize(self):
        order = np.lexsort((_zkey(self.level, self.ix, self.iy), self.tree))
        if not np.array_equal(order, np.arange(len(order))):
            self.tree = self.tree[order]
            self.level = self.level[order]
            self.ix = self.ix[order]
            self.iy = self.iy[order]
            self.corner_b = self.corner_b[order]
        self._last_order = order

    def _index(self):
        ck = _ckey(self.tree, self.level, self.ix, self.iy)
        self._ck_order = np.argsort(ck, kind="stable")
        self._ck_sorted = ck[self._ck_order]

    def find(self, tree, level, ix, iy) -> np.ndarray:
        """Leaf indices for the given cells, -1 where absent."""
        probe = _ckey(tree, level, ix, iy)
        if len(self._ck_sorted) == 0:
            return np.full(np.shape(probe), -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self._ck_sorted, probe),
                         len(self._ck_sorted) - 1)
        hit = self._ck_sorted[pos] == probe
        return np.where(hit, self._ck_order[pos], -1)

    def __len__(self) -> int:
        return len(self.tree)

    @property
    def morton(self) -> np.ndarray:
        return morton_encode(self.ix, self.iy)

    def zcurve_order(self) -> np.ndarray:
        """Permutation sorting leaves by (tree, depth-first Morton key)."""
        return np.lexsort((_zkey(self.level, self.ix, self.iy), self.tree))

    # -- geometry ----------------------------------------------------------

    def corners(self) -> np.ndarray:
        """(N, 4, 2) tensor-ordered corner coordinates.

        Corners are evaluated through the base quad's bilinear map at dyadic
        parameters, which agrees exactly with recursive midpoint subdivision
        and gives bitwise identical shared nodes between neighbours.
        """
        base_c = self.base.nodes[self.base.quads[self.tree]]  # (N,4,2)
        inv = np.ldexp(1.0, -self.level.astype(np.int64))
        s0 = self.ix * inv
        t0 = self.iy * inv
        out = np.empty((len(self), 4, 2))
        for slot, (dx, dy) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
            out[:, slot, :] = bilinear_point(base_c, s0 + dx * inv, t0 + dy * inv)
        return out

    def areas(self, corners=None) -> np.ndarray:
        return quad_area(self.corners() if corners is None else corners)

    def centroids(self, corners=None) -> np.ndarray:
        return quad_centroid(self.corners() if corners is None else corners)

    def char_length(self, corners=None) -> np.ndarray:
        """Inradius-like scale: 4*area/perimeter (side length for squares)."""
        c = self.corners() if corners is None else corners
        return 4.0 * quad_area(c) / quad_perimeter(c)

    # -- neighbour probes ---------------------------------------------------

    def _neighbor_coords(self, idx, face):
        """Same-level neighbour coordinates across ``face`` for leaves ``idx``.

        Returns (tree, ix, iy, nbr_face, interior) where ``interior`` is False
        for physical boundary faces.  Cross-tree neighbours are transformed
        through the base-mesh adjacency (orientation flips included).
        """
        t = self.tree[idx]
        lv = self.level[idx].astype(np.int64)
        ix = self.ix[idx].copy()
        iy = self.iy[idx].copy()
        n = np.int64(1) << lv
        face = np.broadcast_to(np.asarray(face), ix.shape).astype(np.int64)

        dx = np.choose(face, [0, 1, 0, -1])
        dy = np.choose(face, [-1, 0, 1, 0])
        nx = ix + dx
        ny = iy + dy
        inside = (nx >= 0) & (nx < n) & (ny >= 0) & (ny < n)

        ntree = t.copy()
        nface = np.choose(face, FACE_OPPOSITE)
        interior = np.ones(len(ix), dtype=bool)

        out = ~inside
        if np.any(out):
            bt = t[out]
            bf = face[out]
            nb = self.base.neighbor[bt, bf]
            has = nb >= 0
            interior[out] = has
            bf2 = self.base.neighbor_face[bt, bf].astype(np.int64)
            flip = self.base.neighbor_flip[bt, bf]
            along = np.where((bf == 0) | (bf == 2), ix[out], iy[out])
            along = np.where(flip, n[out] - 1 - along, along)
            edge_hi = n[out] - 1
            cx = np.select([bf2 == 0, bf2 == 1, bf2 == 2, bf2 == 3],
                           [along, edge_hi, along, np.zeros_like(along)])
            cy = np.select([bf2 == 0, bf2 == 1, bf2 == 2, bf2 == 3],
                           [np.zeros_like(along), along, edge_hi, along])
            ntree_o = np.where(has, nb, t[out])
            ntree[out] = ntree_o
            nx[out] = np.where(has, cx, nx[out])
            ny[out] = np.where(has, cy, ny[out])
            nface[out] = np.where(has, bf2, nface[out])
        return ntree, nx, ny, nface, interior

    def neighbor_leaf_up(self, idx, face):
        """Find the leaf covering the same-or-coarser neighbour cell.

        Returns (leaf index or -1, level difference own-minus-found >= 0,
        interior mask, transformed same-level coords).  A -1 with
        interior=True means the neighbour region is covered by finer leaves.
        """
        ntree, nx, ny, nface, interior = self._neighbor_coords(idx, face)
        lv = self.level[idx].astype(np.int64)
        m = len(nx)
        found = np.full(m, -1, dtype=np.int64)
        ddepth = np.zeros(m, dtype=np.int64)
        pend = interior.copy()
        cl = lv.copy()
        cx, cy = nx.copy(), ny.copy()
        k = 0
        while np.any(pend):
            sub = np.flatnonzero(pend)
            hit = self.find(ntree[sub], cl[sub], cx[sub], cy[sub])
            got = hit >= 0
            found[sub[got]] = hit[got]
            ddepth[sub[got]] = k
            pend[sub[got]] = False
            missed = sub[~got]
            pend[missed[cl[missed] == 0]] = False
            live = pend
            cl = np.where(live, cl - 1, cl)
            cx = np.where(live, cx >> 1, cx)
            cy = np.where(live, cy >> 1, cy)
            k += 1
            if k > _KMAX + 1:
                break
        return found, ddepth, interior, (ntree, nx, ny, nface)

    # -- adaptation ---------------------------------------------------------

    def refine(self, marks: np.ndarray) -> RefineResult:
        """Replace marked leaves by their four children.

        Marks on leaves already at l_max are silently dropped (counted).
        """
        marks = np.asarray(marks, dtype=bool)
        if marks.shape != (len(self),):
            raise ValueError("marks must cover every leaf")
        droppable = marks & (self.level >= self.l_max)
        eff = marks & ~droppable
        keep = ~eff
        kidx = np.flatnonzero(keep)
        midx = np.flatnonzero(eff)

        slots = np.array([(0, 0), (1, 0), (0, 1), (1, 1)], dtype=np.int64)
        nk, nm = len(kidx), len(midx)
        tree = np.concatenate([self.tree[kidx], np.repeat(self.tree[midx], 4)])
        level = np.concatenate([self.level[kidx],
                                np.repeat(self.level[midx] + 1, 4)])
        ix = np.concatenate([self.ix[kidx],
                             (np.repeat(self.ix[midx], 4) << 1) + np.tile(slots[:, 0], nm)])
        iy = np.concatenate([self.iy[kidx],
                             (np.repeat(self.iy[midx], 4) << 1) + np.tile(slots[:, 1], nm)])
        cb_children = child_corner_values(self.corner_b[midx])  # (nm,4,4)
        corner_b = np.concatenate([self.corner_b[kidx],
                                   cb_children.reshape(nm * 4, 4)])
        src = np.concatenate([kidx, np.repeat(midx, 4)])
        slot = np.concatenate([np.full(nk, -1, dtype=np.int8),
                               np.tile(np.arange(4, dtype=np.int8), nm)])
        nf = Forest(self.base, self.l_max, tree, level, ix, iy, corner_b)
        order = nf._last_order
        return RefineResult(nf, src[order], slot[order], int(droppable.sum()))

    def coarsen(self, marks: np.ndarray) -> CoarsenResult:
        """Merge families whose four sibling leaves are all marked.

        Partially marked families are left unchanged.
        """
        marks = np.asarray(marks, dtype=bool)
        if marks.shape != (len(self),):
            raise ValueError("marks must cover every leaf")
        cand = marks & (self.level > 0)
        ci = np.flatnonzero(cand)
        pk = _ckey(self.tree[ci], self.level[ci] - 1,
                   self.ix[ci] >> 1, self.iy[ci] >> 1)
        uniq, inv, counts = np.unique(pk, return_inverse=True, return_counts=True)
        fam = counts[inv] == 4
        fi = ci[fam]
        if len(fi) == 0:
            return CoarsenResult(self, np.arange(len(self)),
                                 np.full((len(self), 4), -1, dtype=np.int64))
        # group the 4 siblings per family, ordered by child slot
        slot = ((self.iy[fi] & 1) << 1) | (self.ix[fi] & 1)
        fkey = pk[fam]
        order = np.lexsort((slot, fkey))
        fi_s = fi[order]
        groups = fi_s.reshape(-1, 4)   # columns are slots 0..3

        keep = np.ones(len(self), dtype=bool)
        keep[fi] = False
        kidx = np.flatnonzero(keep)

        g0 = groups[:, 0]
        tree = np.concatenate([self.tree[kidx], self.tree[g0]])
        level = np.concatenate([self.level[kidx], self.level[g0] - 1])
        ix = np.concatenate([self.ix[kidx], self.ix[g0] >> 1])
        iy = np.concatenate([self.iy[kidx], self.iy[g0] >> 1])
        # parent corners are the children's outer corners (original values)
        pb = np.stack([self.corner_b[groups[:, 0], 0],
                       self.corner_b[groups[:, 1], 1],
                       self.corner_b[groups[:, 2], 2],
                       self.corner_b[groups[:, 3], 3]], axis=-1)
        corner_b = np.concatenate([self.corner_b[kidx], pb])
        src = np.concatenate([kidx, np.full(len(groups), -1, dtype=np.int64)])
        children = np.concatenate([np.full((len(kidx), 4), -1, dtype=np.int64),
                                   groups])
        nf = Forest(self.base, self.l_max, tree, level, ix, iy, corner_b)
        order = nf._last_order
        return CoarsenResult(nf, src[order], children[order])

    def balance_marks(self, marks: np.ndarray) -> np.ndarray:
        """Close a refinement mark set under the 2:1 face-balance rule.

        Returns marks over the current leaves whose one-shot refinement
        yields a balanced forest (assuming the forest is balanced now).
        Marks on cells at l_max are dropped up front.
        """
        marks = np.asarray(marks, dtype=bool) & (self.level < self.l_max)
        nbr_cache = [self.neighbor_leaf_up(np.arange(len(self)), f)
                     for f in range(4)]
        while True:
            eff = self.level.astype(np.int64) + marks
            add = np.zeros(len(self), dtype=bool)
            for nbr, _dd, interior, _ in nbr_cache:
                ok = np.flatnonzero(interior & (nbr >= 0))
                j = nbr[ok]
                viol = eff[ok] - eff[j] > 1
                add[j[viol]] = True
            add &= ~marks & (self.level < self.l_max)
            if not np.any(add):
                return marks
            marks = marks | add

    def is_balanced(self) -> bool:
        for face in range(4):
            nbr, ddepth, interior, _ = self.neighbor_leaf_up(np.arange(len(self)), face)
            if np.any(interior & (nbr >= 0) & (ddepth > 1)):
                return False
            # finer-side coverage is checked from the coarse side implicitly
        return True

    def enforce_balance(self) -> tuple["Forest", int]:
        """Refine until face-adjacent leaves differ by at most one level.

        Returns (forest, violations) where violations counts constraints
        that could not be satisfied because of the l_max cap (zero whenever
        the triggering marks respected the cap).
        """
        f = self
        violations = 0
        while True:
            nbr_mark = np.zeros(len(f), dtype=bool)
            for face in range(4):
                nbr, ddepth, interior, _ = f.neighbor_leaf_up(np.arange(len(f)), face)
                too_coarse = interior & (nbr >= 0) & (ddepth > 1)
                if np.any(too_coarse):
                    nbr_mark[nbr[too_coarse]] = True
            if not np.any(nbr_mark):
                return f, violations
            capped = nbr_mark & (f.level >= f.l_max)
            violations += int(capped.sum())
            nbr_mark &= ~capped
            if not np.any(nbr_mark):
                return f, violations
            f = f.refine(nbr_mark).forest


# -- interface enumeration ---------------------------------------------------


class InterfaceSet:
    """All leaf-edge interfaces of a balanced forest, struct-of-arrays.

    Conforming interfaces appear once; hanging edges appear once per fine
    neighbour (the fine side owns the record, the coarse cell is ``right``).
    Boundary edges carry their base-mesh tag in ``btag``.
    """

    def __init__(self, left, right, kind, btag, face_l, face_r,
                 p0, p1, normal, length, gp):
        self.left = left
        self.right = right
        self.kind = kind
        self.btag = btag
        self.face_l = face_l
        self.face_r = face_r
        self.p0 = p0
        self.p1 = p1
        self.normal = normal
        self.length = length
        self.gp = gp            # (M, 2, 2) two Gauss points per record

    def __len__(self):
        return len(self.left)

    @property
    def interior(self) -> np.ndarray:
        return self.right >= 0


def leaf_interfaces(forest: Forest, corners: np.ndarray | None = None) -> InterfaceSet:
    """Enumerate every leaf edge of a 2:1 balanced forest exactly once.

    Raises BalanceError when the forest violates the 2:1 constraint.
    """
    if corners is None:
        corners = forest.corners()
    n = len(forest)
    all_idx = np.arange(n)
    recs_left, recs_right, recs_kind, recs_btag = [], [], [], []
    recs_face_l, recs_face_r = [], []

    for face in range(4):
        ntree, nx, ny, nface, interior = forest._neighbor_coords(all_idx, face)
        lv = forest.level[all_idx].astype(np.int64)

        # physical boundary
        bnd = ~interior
        if np.any(bnd):
            bi = np.flatnonzero(bnd)
            tag = forest.base.face_tags[forest.tree[bi], face]
            if np.any(tag == TAG_INTERIOR):
                raise BalanceError("interior-tagged edge on a physical boundary")
            recs_left.append(bi)
            recs_right.append(np.full(len(bi), -1, dtype=np.int64))
            recs_kind.append(np.full(len(bi), KIND_CONFORMING, dtype=np.int8))
            recs_btag.append(tag.astype(np.int8))
            recs_face_l.append(np.full(len(bi), face, dtype=np.int8))
            recs_face_r.append(nface[bi].astype(np.int8))

        ii = np.flatnonzero(interior)
        same = forest.find(ntree[ii], lv[ii], nx[ii], ny[ii])
        got_same = same >= 0
        si = ii[got_same]
        peer = same[got_same]
        pick = si < peer           # emit each conforming pair exactly once
        recs_left.append(si[pick])
        recs_right.append(peer[pick])
        recs_kind.append(np.full(pick.sum(), KIND_CONFORMING, dtype=np.int8))
        recs_btag.append(np.zeros(pick.sum(), dtype=np.int8))
        recs_face_l.append(np.full(pick.sum(), face, dtype=np.int8))
        recs_face_r.append(nface[si[pick]].astype(np.int8))

        rest = ii[~got_same]
        if len(rest) == 0:
            continue
        can_up = lv[rest] > 0
        par = np.full(len(rest), -1, dtype=np.int64)
        if np.any(can_up):
            ri = rest[can_up]
            par_hit = forest.find(ntree[ri], lv[ri] - 1, nx[ri] >> 1, ny[ri] >> 1)
            par[can_up] = par_hit
        got_par = par >= 0
        hi = rest[got_par]
        recs_left.append(hi)                      # fine side owns the record
        recs_right.append(par[got_par])
        recs_kind.append(np.full(len(hi), KIND_HANGING, dtype=np.int8))
        recs_btag.append(np.zeros(len(hi), dtype=np.int8))
        recs_face_l.append(np.full(len(hi), face, dtype=np.int8))
        recs_face_r.append(nface[hi].astype(np.int8))

        # remaining neighbours must be exactly one level finer
        fin = rest[~got_par]
        if len(fin):
            f2 = nface[fin]
            cx0 = nx[fin] << 1
            cy0 = ny[fin] << 1
            hi_off = (np.int64(1) << (lv[fin] + 1)) - 1
            # the two children of the would-be neighbour that touch our face
            cax = np.select([f2 == 0, f2 == 1, f2 == 2, f2 == 3],
                            [cx0, cx0 + 1, cx0, cx0])
            cay = np.select([f2 == 0, f2 == 1, f2 == 2, f2 == 3],
                            [cy0, cy0, cy0 + 1, cy0])
            cbx = np.select([f2 == 0, f2 == 1, f2 == 2, f2 == 3],
                            [cx0 + 1, cx0 + 1, cx0 + 1, cx0])
            cby = np.select([f2 == 0, f2 == 1, f2 == 2, f2 == 3],
                            [cy0, cy0 + 1, cy0 + 1, cy0 + 1])
            ca = forest.find(ntree[fin], lv[fin] + 1, cax, cay)
            cb = forest.find(ntree[fin], lv[fin] + 1, cbx, cby)
            if np.any((ca < 0) | (cb < 0)):
                raise BalanceError("forest is not 2:1 balanced")

    left = np.concatenate(recs_left)
    right = np.concatenate(recs_right)
    kind = np.concatenate(recs_kind)
    btag = np.concatenate(recs_btag)
    face_l = np.concatenate(recs_face_l)
    face_r = np.concatenate(recs_face_r)

    # deterministic record order: by owning cell, then face
    order = np.lexsort((face_l, left))
    left, right, kind, btag = left[order], right[order], kind[order], btag[order]
    face_l, face_r = face_l[order], face_r[order]

    fc = np.array(FACE_CORNERS)
    p0 = corners[left, fc[face_l, 0], :]
    p1 = corners[left, fc[face_l, 1], :]
    ev = p1 - p0
    length = np.hypot(ev[:, 0], ev[:, 1])
    normal = np.stack([ev[:, 1], -ev[:, 0]], axis=-1) / length[:, None]
    gp = np.stack([p0 + (0.5 - _GAUSS_OFF) * ev, p0 + (0.5 + _GAUSS_OFF) * ev], axis=1)
    return InterfaceSet(left, right, kind, btag, face_l, face_r,
                        p0, p1, normal, length, gp)


# -- ordering / partitioning --------------------------------------------------


def zcurve_order(forest: Forest) -> np.ndarray:
    return forest.zcurve_order()


def partition_weighted(order: np.ndarray, weights: np.ndarray, parts: int) -> np.ndarray:
    """Greedy contiguous split of the ordered leaves into ``parts`` chunks.

    Leaf i goes to part floor(prefix_weight / ideal), which keeps every part
    below ideal + max single weight.  Parts may come out empty when there
    are more parts than leaves.
    """
    if parts < 1:
        raise ValueError("parts must be >= 1")
    order = np.asarray(order)
    weights = np.asarray(weights, dtype=float)
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    w = weights[order]
    total = w.sum()
    ideal = total / parts
    before = np.concatenate([[0.0], np.cumsum(w)[:-1]])
    part = np.minimum((before / ideal).astype(np.int64), parts - 1)
    out = np.empty(len(order), dtype=np.int64)
    out[order] = part
    return out


def snapshot_csv(forest: Forest, path) -> None:
    """Forest snapshot: tree_id, level, morton, centroid, area per leaf."""
    corners = forest.corners()
    cen = forest.centroids(corners)
    area = forest.areas(corners)
    mor = forest.morton
    with open(path, "w") as fh:
        fh.write("tree_id,level,morton,x_centroid,y_centroid,area\n")
        for i in range(len(forest)):
            fh.write(f"{forest.tree[i]},{forest.level[i]},{mor[i]},"
                     f"{cen[i, 0]:.17g},{cen[i, 1]:.17g},{area[i]:.17g}\n")
