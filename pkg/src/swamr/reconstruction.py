"""Limited linear reconstruction of flow variables.

The water surface eta = h + B is reconstructed instead of the depth (the
surface-gradient method), together with the momentum components and the
scalar concentration.  Gradients come from an unweighted least-squares fit
over the face neighbours (both fine neighbours of a hanging face enter as
separate equations; boundary cells use mirrored ghost states), limited by
the Venkatakrishnan function with eps^2 = (K * cell diameter)^3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basemesh import TAG_INLET, TAG_OUTFLOW, TAG_WALL

_DET_TINY = 1e-28


@dataclass
class ReconTopology:
    """Static least-squares stencil data for one forest configuration.

    One equation per (interface record, receiving cell); boundary records
    contribute a ghost equation to their interior cell.  Equations are
    sorted by receiving cell so per-cell reductions can use ``reduceat``.
    """

    eq_cell: np.ndarray      # (E,) receiving cell
    eq_nbr: np.ndarray       # (E,) neighbour cell, -1 for ghost equations
    eq_rec: np.ndarray       # (E,) interface record index
    eq_dx: np.ndarray        # (E,2) displacement to neighbour/ghost centroid
    eq_tag: np.ndarray       # (E,) boundary tag (0 interior)
    eq_normal: np.ndarray    # (E,2) outward record normal as seen by eq_cell
    inv: np.ndarray          # (N,2,2) inverse normal matrices
    rank_ok: np.ndarray      # (N,) False where the stencil was degenerate
    seg_start: np.ndarray    # (N,) start offset of each cell's equations
    gp_rel: np.ndarray       # (E,2,2) record Gauss points minus cell centroid


def build_topology(ifaces, centroids: np.ndarray, n_cells: int) -> ReconTopology:
    interior = ifaces.interior
    li = ifaces.left
    ri = ifaces.right
    rec_ids = np.arange(len(li))

    # left-cell equations (all records), right-cell equations (interior only)
    ii = np.flatnonzero(interior)
    eq_cell = np.concatenate([li, ri[ii]])
    eq_nbr = np.concatenate([ri, li[ii]])
    eq_rec = np.concatenate([rec_ids, rec_ids[ii]])
    eq_tag = np.concatenate([ifaces.btag, np.zeros(len(ii), dtype=np.int8)])
    eq_normal = np.concatenate([ifaces.normal, -ifaces.normal[ii]])

    # ghost centroids: mirror the cell centroid across the boundary edge
    nbr_cen = np.empty((len(eq_cell), 2))
    ghost = eq_nbr < 0
    nbr_cen[~ghost] = centroids[eq_nbr[~ghost]]
    if np.any(ghost):
        gi = np.flatnonzero(ghost)
        recs = eq_rec[gi]
        cen = centroids[eq_cell[gi]]
        p0 = ifaces.p0[recs]
        e = ifaces.p1[recs] - p0
        ee = np.sum(e * e, axis=-1)
        d = cen - p0
        dpar = (np.sum(d * e, axis=-1) / ee)[:, None] * e
        nbr_cen[gi] = cen - 2.0 * (d - dpar)
    eq_dx = nbr_cen - centroids[eq_cell]

    order = np.argsort(eq_cell, kind="stable")
    eq_cell = eq_cell[order]
    eq_nbr = eq_nbr[order]
    eq_rec = eq_rec[order]
    eq_dx = eq_dx[order]
    eq_tag = eq_tag[order]
    eq_normal = eq_normal[order]

    sxx = np.bincount(eq_cell, weights=eq_dx[:, 0] ** 2, minlength=n_cells)
    sxy = np.bincount(eq_cell, weights=eq_dx[:, 0] * eq_dx[:, 1], minlength=n_cells)
    syy = np.bincount(eq_cell, weights=eq_dx[:, 1] ** 2, minlength=n_cells)
    det = sxx * syy - sxy * sxy
    scale = (sxx + syy) ** 2 + _DET_TINY
    rank_ok = det > 1e-12 * scale
    det_safe = np.where(rank_ok, det, 1.0)
    inv = np.empty((n_cells, 2, 2))
    inv[:, 0, 0] = syy / det_safe
    inv[:, 0, 1] = -sxy / det_safe
    inv[:, 1, 0] = -sxy / det_safe
    inv[:, 1, 1] = sxx / det_safe
    inv[~rank_ok] = 0.0

    seg_start = np.searchsorted(eq_cell, np.arange(n_cells))
    gp_rel = ifaces.gp[eq_rec] - centroids[eq_cell][:, None, :]
    return ReconTopology(eq_cell, eq_nbr, eq_rec, eq_dx, eq_tag, eq_normal,
                         inv, rank_ok, seg_start, gp_rel)


def ghost_values(topo: ReconTopology, vals: np.ndarray, inlet_eta=0.0):
    """Neighbour values per equation for (eta, qx, qy, z), ghosts filled in.

    ``vals`` has shape (N, 4).  Wall ghosts mirror the normal momentum,
    outflow ghosts copy, inlet ghosts prescribe the surface elevation
    (``inlet_eta`` may be a scalar or a per-equation array).
    """
    e = len(topo.eq_cell)
    out = np.empty((e, 4))
    interior = topo.eq_nbr >= 0
    out[interior] = vals[topo.eq_nbr[interior]]
    gi = np.flatnonzero(~interior)
    if len(gi) == 0:
        return out
    own = vals[topo.eq_cell[gi]]
    out[gi] = own
    n = topo.eq_normal[gi]
    qdotn = own[:, 1] * n[:, 0] + own[:, 2] * n[:, 1]
    wall = topo.eq_tag[gi] == TAG_WALL
    out[gi[wall], 1] = own[wall, 1] - 2.0 * qdotn[wall] * n[wall, 0]
    out[gi[wall], 2] = own[wall, 2] - 2.0 * qdotn[wall] * n[wall, 1]
    inlet = topo.eq_tag[gi] == TAG_INLET
    eta_in = np.broadcast_to(np.asarray(inlet_eta, dtype=float), (e,))
    out[gi[inlet], 0] = eta_in[gi[inlet]]
    return out


def least_squares_gradient(topo: ReconTopology, vals: np.ndarray,
                           nbr_vals: np.ndarray) -> np.ndarray:
    """Unlimited least-squares gradients, shape (N, nvar, 2).

    Exact for linear fields; rank-deficient stencils yield zero gradients
    (flagged in ``topo.rank_ok``).
    """
    n = len(topo.inv)
    nvar = vals.shape[1]
    grads = np.empty((n, nvar, 2))
    dq = nbr_vals - vals[topo.eq_cell]
    for k in range(nvar):
        bx = np.bincount(topo.eq_cell, weights=topo.eq_dx[:, 0] * dq[:, k],
                         minlength=n)
        by = np.bincount(topo.eq_cell, weights=topo.eq_dx[:, 1] * dq[:, k],
                         minlength=n)
        grads[:, k, 0] = topo.inv[:, 0, 0] * bx + topo.inv[:, 0, 1] * by
        grads[:, k, 1] = topo.inv[:, 1, 0] * bx + topo.inv[:, 1, 1] * by
    return grads


def limited_gradients(topo: ReconTopology, vals: np.ndarray,
                      nbr_vals: np.ndarray, eps2: np.ndarray,
                      eq_sel: np.ndarray | None = None):
    """Least-squares gradients with Venkatakrishnan limiting, per cell.

    ``eq_sel`` optionally restricts the work to a subset of equations (all
    equations of the cells being advanced in the current stage); only the
    cells owning selected equations get meaningful output rows.

    Returns (cells, grads, phi): the unique cell ids covered, their limited
    gradients (n, nvar, 2) and the limiter factors (n, nvar).
    """
    n = len(topo.inv)
    nvar = vals.shape[1]
    if eq_sel is None:
        eq_sel = slice(None)
    cell = topo.eq_cell[eq_sel]
    dx = topo.eq_dx[eq_sel]
    gp_rel = topo.gp_rel[eq_sel]
    nv = nbr_vals if nbr_vals.shape[0] == len(cell) else nbr_vals[eq_sel]
    dq = nv - vals[cell]

    first = np.flatnonzero(np.r_[True, cell[1:] != cell[:-1]])
    ucells = cell[first]
    grads = np.empty((len(ucells), nvar, 2))
    phi = np.ones((len(ucells), nvar))
    inv = topo.inv[ucells]
    e2 = eps2[ucells]
    pos = np.searchsorted(ucells, cell)   # equation -> local cell row

    for k in range(nvar):
        bx = np.bincount(pos, weights=dx[:, 0] * dq[:, k], minlength=len(ucells))
        by = np.bincount(pos, weights=dx[:, 1] * dq[:, k], minlength=len(ucells))
        gx = inv[:, 0, 0] * bx + inv[:, 0, 1] * by
        gy = inv[:, 1, 0] * bx + inv[:, 1, 1] * by
        dmax = np.maximum(np.maximum.reduceat(dq[:, k], first), 0.0)
        dmin = np.minimum(np.minimum.reduceat(dq[:, k], first), 0.0)
        d2 = gx[pos, None] * gp_rel[:, :, 0] + gy[pos, None] * gp_rel[:, :, 1]
        dm = np.where(d2 > 0.0, dmax[pos, None], dmin[pos, None])
        ee = e2[pos, None]
        num = (dm * dm + ee) * d2 + 2.0 * d2 * d2 * dm
        den = d2 * (dm * dm + 2.0 * d2 * d2 + dm * d2 + ee)
        small = np.abs(d2) < 1e-14 * (np.abs(dm) + 1e-14)
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(small, 1.0, num / np.where(den == 0.0, 1.0, den))
        p = np.clip(p, 0.0, 1.0)
        pk = np.minimum.reduceat(np.min(p, axis=1), first)
        phi[:, k] = pk
        grads[:, k, 0] = gx * pk
        grads[:, k, 1] = gy * pk
    return ucells, grads, phi


def venkat_phi(topo: ReconTopology, vals: np.ndarray, nbr_vals: np.ndarray,
               grads: np.ndarray, eps2: np.ndarray) -> np.ndarray:
    """Venkatakrishnan limiter factors, shape (N, nvar), in [0, 1].

    eps2 is the per-cell relaxation (K * diameter)^3; phi -> 1 on smooth
    data and for K -> infinity.
    """
    n, nvar = vals.shape
    dq = nbr_vals - vals[topo.eq_cell]
    seg = topo.seg_start
    phi = np.ones((n, nvar))
    for k in range(nvar):
        dmax = np.maximum.reduceat(dq[:, k], seg)
        dmin = np.minimum.reduceat(dq[:, k], seg)
        dmax = np.maximum(dmax, 0.0)
        dmin = np.minimum(dmin, 0.0)
        g = grads[topo.eq_cell, k, :]
        d2 = np.sum(g[:, None, :] * topo.gp_rel, axis=-1)   # (E, 2)
        dm = np.where(d2 > 0.0, dmax[topo.eq_cell, None], dmin[topo.eq_cell, None])
        e2 = eps2[topo.eq_cell, None]
        num = (dm * dm + e2) * d2 + 2.0 * d2 * d2 * dm
        den = d2 * (dm * dm + 2.0 * d2 * d2 + dm * d2 + e2)
        small = np.abs(d2) < 1e-14 * (np.abs(dm) + 1e-14)
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(small, 1.0, num / np.where(den == 0.0, 1.0, den))
        p = np.clip(p, 0.0, 1.0)
        p_eq = np.min(p, axis=1)
        phi[:, k] = np.minimum.reduceat(p_eq, seg)
    return phi
