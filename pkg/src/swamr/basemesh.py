"""Base quadrilateral mesh: plain-text IO, rectangular builder, adjacency.

File format (whitespace separated, '#' comments allowed)::

    <node count>
    x y [b]          # one line per node, optional bottom elevation column
    <quad count>
    i0 i1 i2 i3 t0 t1 t2 t3   # node indices in winding order + 4 edge tags

Edge tags are ``wall``, ``outflow``, ``inlet`` for boundary edges and
``none`` (or ``-``) for interior edges.  Edge k of a quad joins winding
nodes (k, k+1 mod 4).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import FACE_CORNERS_AXIS, quad_area, winding_to_tensor

TAG_INTERIOR = 0
TAG_WALL = 1
TAG_OUTFLOW = 2
TAG_INLET = 3

TAG_NAMES = {TAG_INTERIOR: "none", TAG_WALL: "wall",
             TAG_OUTFLOW: "outflow", TAG_INLET: "inlet"}
TAG_CODES = {"none": TAG_INTERIOR, "-": TAG_INTERIOR, "wall": TAG_WALL,
             "outflow": TAG_OUTFLOW, "inlet": TAG_INLET}

# winding edge k <-> tensor face: S,E,N,W = winding edges 0,1,2,3
_WINDING_FACE = (0, 1, 2, 3)


class MeshError(ValueError):
    pass


@dataclass
class BaseMesh:
    """Immutable base mesh: nodes, tensor-ordered quads, face tags, adjacency."""

    nodes: np.ndarray                 # (nn, 2)
    quads: np.ndarray                 # (nq, 4) node ids, tensor order
    face_tags: np.ndarray             # (nq, 4) tag codes per face S,E,N,W
    nodal_b: np.ndarray | None = None  # (nn,) optional bottom elevations
    neighbor: np.ndarray = field(init=False)       # (nq, 4) quad id or -1
    neighbor_face: np.ndarray = field(init=False)  # (nq, 4)
    neighbor_flip: np.ndarray = field(init=False)  # (nq, 4) bool

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.quads = np.asarray(self.quads, dtype=np.int64)
        self.face_tags = np.asarray(self.face_tags, dtype=np.int8)
        if self.nodal_b is not None:
            self.nodal_b = np.asarray(self.nodal_b, dtype=float)
        self._validate_and_link()

    @property
    def nquads(self) -> int:
        return len(self.quads)

    def corner_coords(self, q: int | np.ndarray) -> np.ndarray:
        return self.nodes[self.quads[q]]

    def _validate_and_link(self):
        areas = quad_area(self.nodes[self.quads])
        if np.any(areas <= 0):
            bad = int(np.argmin(areas))
            raise MeshError(f"quad {bad} has non-positive area {areas[bad]:g}")

        nq = self.nquads
        self.neighbor = np.full((nq, 4), -1, dtype=np.int64)
        self.neighbor_face = np.zeros((nq, 4), dtype=np.int8)
        self.neighbor_flip = np.zeros((nq, 4), dtype=bool)

        edges: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for q in range(nq):
            for f in range(4):
                a, b = FACE_CORNERS_AXIS[f]
                na, nb = int(self.quads[q, a]), int(self.quads[q, b])
                key = (na, nb) if na < nb else (nb, na)
                edges.setdefault(key, []).append((q, f))

        for key, owners in edges.items():
            if len(owners) > 2:
                raise MeshError(f"edge {key} shared by {len(owners)} quads")
            if len(owners) == 1:
                q, f = owners[0]
                if self.face_tags[q, f] == TAG_INTERIOR:
                    raise MeshError(
                        f"boundary edge {key} of quad {q} lacks a boundary tag")
                continue
            (qa, fa), (qb, fb) = owners
            a0 = int(self.quads[qa, FACE_CORNERS_AXIS[fa][0]])
            b0 = int(self.quads[qb, FACE_CORNERS_AXIS[fb][0]])
            flip = a0 != b0
            self.neighbor[qa, fa] = qb
            self.neighbor_face[qa, fa] = fb
            self.neighbor_flip[qa, fa] = flip
            self.neighbor[qb, fb] = qa
            self.neighbor_face[qb, fb] = fa
            self.neighbor_flip[qb, fb] = flip


def load_mesh(path) -> BaseMesh:
    tokens = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0]
            tokens.extend(line.split())
    if not tokens:
        raise MeshError("empty mesh file")
    nn = int(tokens[0])

    # node lines are 2 or 3 columns wide; pick the width that makes the
    # trailing quad block come out exactly right
    width = None
    for w in (2, 3):
        idx = 1 + w * nn
        if idx >= len(tokens):
            continue
        try:
            nq = int(tokens[idx])
        except ValueError:
            continue
        if len(tokens) == idx + 1 + 8 * nq:
            width = w
            break
    if width is None:
        raise MeshError("malformed mesh file (bad token count)")

    block = np.asarray(tokens[1:1 + width * nn], dtype=float).reshape(nn, width)
    nodes = block[:, :2].copy()
    nodal_b = block[:, 2].copy() if width == 3 else None

    pos = 1 + width * nn
    nq = int(tokens[pos])
    pos += 1
    quads = np.empty((nq, 4), dtype=np.int64)
    tags = np.empty((nq, 4), dtype=np.int8)
    for q in range(nq):
        row = tokens[pos:pos + 8]
        pos += 8
        quads[q] = [int(v) for v in row[:4]]
        for k in range(4):
            try:
                tags[q, _WINDING_FACE[k]] = TAG_CODES[row[4 + k]]
            except KeyError:
                raise MeshError(f"unknown edge tag {row[4 + k]!r}") from None
    quads = winding_to_tensor(quads[:, :, None])[:, :, 0]
    return BaseMesh(nodes, quads, tags, nodal_b)


def save_mesh(mesh: BaseMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{len(mesh.nodes)}\n")
        for i, (x, y) in enumerate(mesh.nodes):
            if mesh.nodal_b is not None:
                fh.write(f"{x:.17g} {y:.17g} {mesh.nodal_b[i]:.17g}\n")
            else:
                fh.write(f"{x:.17g} {y:.17g}\n")
        fh.write(f"{mesh.nquads}\n")
        for q in range(mesh.nquads):
            c = mesh.quads[q]
            winding = (c[0], c[1], c[3], c[2])
            tags = " ".join(TAG_NAMES[int(mesh.face_tags[q, _WINDING_FACE[k]])]
                            for k in range(4))
            fh.write(" ".join(str(int(n)) for n in winding) + " " + tags + "\n")


def rect_mesh(x0: float, y0: float, x1: float, y1: float, nx: int, ny: int,
              tags: dict[str, str] | None = None,
              bottom=None,
              holes=None,
              hole_tag: str = "wall") -> BaseMesh:
    """Structured rectangular base mesh.

    ``tags`` maps sides 'south','east','north','west' to tag names (default
    wall); ``bottom`` is an optional callable B(x, y) sampled at the nodes;
    ``holes`` is an optional set of (i, j) cell indices to omit, whose rim
    edges are tagged ``hole_tag``.
    """
    tags = tags or {}
    side_codes = {s: TAG_CODES[tags.get(s, "wall")]
                  for s in ("south", "east", "north", "west")}
    hole_code = TAG_CODES[hole_tag]
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i * (ny + 1) + j

    holes = holes or set()
    quads, face_tags, cell_of = [], [], {}
    for i in range(nx):
        for j in range(ny):
            if (i, j) in holes:
                continue
            cell_of[(i, j)] = len(quads)
            quads.append([nid(i, j), nid(i + 1, j), nid(i, j + 1), nid(i + 1, j + 1)])
            t = [TAG_INTERIOR] * 4
            for f, (di, dj, side) in enumerate(((0, -1, "south"), (1, 0, "east"),
                                                (0, 1, "north"), (-1, 0, "west"))):
                ii, jj = i + di, j + dj
                if not (0 <= ii < nx and 0 <= jj < ny):
                    t[f] = side_codes[side]
                elif (ii, jj) in holes:
                    t[f] = hole_code
            face_tags.append(t)

    nodal_b = None
    if bottom is not None:
        nodal_b = np.asarray(bottom(nodes[:, 0], nodes[:, 1]), dtype=float)
    return BaseMesh(nodes, np.asarray(quads), np.asarray(face_tags), nodal_b)
