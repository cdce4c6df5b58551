"""Time integration: CFL step control, level-synchronized local time
stepping, flux assembly, subcell source terms, wet-dry safeguarding and the
adaptation cycle with conservative solution transfer.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .basemesh import TAG_INLET, TAG_WALL
from .flux import SideState, rotate_to_global, time_integrated_flux
from .geometry import quad_centroid
from .mesh import MeshData
from .moments import collision_time
from .reconstruction import ghost_values, limited_gradients
from .topography import allocate_subcell_heights, build_subcells

MODES = ("uniform", "amr", "stamr")


@dataclass
class RunStats:
    steps: int = 0
    stages: int = 0
    clamp_mass: float = 0.0         # mass created by negative-depth clamping
    adapt_mass_defect: float = 0.0  # |mass change| across adaptation events
    dropped_marks: int = 0
    adapt_events: int = 0
    time_recon: float = 0.0
    time_flux: float = 0.0
    time_update: float = 0.0
    time_adapt: float = 0.0


class SolverConfig:
    """Numerical run parameters; ``criterion`` picks the refinement field."""

    def __init__(self, gravity=9.812, cfl=0.4, mode="uniform", limiter_k=0.3,
                 h_dry=1e-6, criterion="none", threshold=0.03,
                 inlet_eta=None, sweep_band=None, workers=1):
        self.gravity = gravity
        self.cfl = cfl
        self.mode = mode
        self.limiter_k = limiter_k
        self.h_dry = h_dry
        self.criterion = criterion
        self.threshold = threshold
        self.inlet_eta = inlet_eta      # t -> surface elevation at inlets
        self.sweep_band = sweep_band    # (centroids, t) -> bool marks
        self.workers = workers


@dataclass
class LtsSchedule:
    """Stage plan over one global step.

    With local time stepping the global step is 2**l_eff * dt_min and level
    l advances 2**l times using sub-steps of 2**(l_eff-l)*dt_min; in
    single-rate mode every level advances once with dt_min.
    """

    l_eff: int
    dt_min: float
    stages: list = field(default_factory=list)  # advancing level lists
    single_rate: bool = False

    @property
    def dt_global(self) -> float:
        if self.single_rate:
            return self.dt_min
        return float(np.ldexp(self.dt_min, self.l_eff))

    def dt_level(self, level) -> np.ndarray:
        if self.single_rate:
            return np.full(np.shape(level), self.dt_min)
        return np.ldexp(self.dt_min, self.l_eff - np.asarray(level))

    def scaled(self, factor: float) -> "LtsSchedule":
        return LtsSchedule(self.l_eff, self.dt_min * factor, self.stages,
                           self.single_rate)


def build_schedule(levels_present, dt_min: float) -> LtsSchedule:
    """Stage sets for level-synchronized sub-stepping.

    Level l advances at stage k (1-based) iff k is a multiple of
    2**(l_eff - l); all levels meet at the stage end times and the whole
    hierarchy synchronizes at t + 2**l_eff * dt_min.
    """
    levels_present = np.asarray(levels_present)
    l_eff = int(levels_present.max()) if levels_present.size else 0
    sched = LtsSchedule(l_eff, float(dt_min))
    for k in range(1, (1 << l_eff) + 1):
        sched.stages.append([l for l in range(l_eff + 1)
                             if k % (1 << (l_eff - l)) == 0])
    return sched


def local_dt(h, qx, qy, d_cell, gravity, cfl, h_dry):
    """Per-cell CFL limit; dry cells impose no constraint (+inf)."""
    h = np.asarray(h, dtype=float)
    wet = h >= h_dry
    hs = np.maximum(h, h_dry)
    speed = np.hypot(qx, qy) / hs + np.sqrt(gravity * hs)
    out = cfl * np.asarray(d_cell) / speed
    return np.where(wet, out, np.inf)


def wet_dry_fixup(h, qx, qy, hz, area, h_dry, stats: RunStats | None = None):
    """Clamp negative depths, zero momentum and scalar on dry cells.

    Mass created by clamping is accumulated in the stats ledger.
    """
    neg = h < 0.0
    if np.any(neg) and stats is not None:
        stats.clamp_mass += float(np.sum(-h[neg] * area[neg]))
    h = np.maximum(h, 0.0)
    dry = h < h_dry
    qx = np.where(dry, 0.0, qx)
    qy = np.where(dry, 0.0, qy)
    hz = np.where(dry, 0.0, hz)
    return h, qx, qy, hz, dry


def _bincount_rows(idx, rows, n):
    out = np.empty((n, rows.shape[1]))
    for c in range(rows.shape[1]):
        out[:, c] = np.bincount(idx, weights=rows[:, c], minlength=n)
    return out


class Solver:
    """Marches one case: state arrays over the leaves of an adaptive forest."""

    def __init__(self, forest, init_fn, cfg: SolverConfig):
        if cfg.mode not in MODES:
            raise ValueError(f"unknown mode {cfg.mode!r}")
        self.cfg = cfg
        self.stats = RunStats()
        self.t = 0.0
        self.mesh = MeshData(forest)
        self._init_fn = init_fn
        self._apply_init()
        self._alloc_runtime()
        self._reconstruct_all()

    # -- setup -------------------------------------------------------------

    def _apply_init(self):
        h, qx, qy, hz = self._init_fn(self.mesh)
        area = self.mesh.area
        self.h, self.qx, self.qy, self.hz, _ = wet_dry_fixup(
            np.asarray(h, dtype=float).copy(), np.asarray(qx, dtype=float).copy(),
            np.asarray(qy, dtype=float).copy(), np.asarray(hz, dtype=float).copy(),
            area, self.cfg.h_dry)

    def _alloc_runtime(self):
        n = len(self.mesh.forest)
        m = len(self.mesh.ifaces)
        self.rvals = np.zeros((n, 4))
        self.rgrads = np.zeros((n, 4, 2))
        self.buffers = np.zeros((m, 4))
        self._eps2 = (self.cfg.limiter_k * self.mesh.d_cell) ** 3
        self._eq_level = self.mesh.forest.level[self.mesh.topo.eq_cell].astype(np.int64)

    def _rebuild(self, forest):
        self.mesh = MeshData(forest)
        self._alloc_runtime()
        self._reconstruct_all()

    def initial_adapt(self):
        """Fit the mesh to the initial data, re-sampling it analytically."""
        if self.cfg.mode == "uniform":
            forest = self.mesh.forest
            while int(forest.level.min()) < forest.l_max:
                forest = forest.refine(forest.level < forest.l_max).forest
            self.mesh = MeshData(forest)
            self._apply_init()
            self._alloc_runtime()
            self._reconstruct_all()
            return
        for _ in range(self.mesh.forest.l_max):
            beta = self.refinement_indicator()
            marks = (beta > self.cfg.threshold) & \
                (self.mesh.forest.level < self.mesh.forest.l_max)
            if not np.any(marks):
                break
            marks = self.mesh.forest.balance_marks(marks)
            forest = self.mesh.forest.refine(marks).forest
            self.mesh = MeshData(forest)
            self._apply_init()
            self._alloc_runtime()
            self._reconstruct_all()

    # -- reconstruction ----------------------------------------------------

    def _live_vals(self) -> np.ndarray:
        h_dry = self.cfg.h_dry
        wet = self.h >= h_dry
        vals = np.empty((len(self.h), 4))
        vals[:, 0] = self.h + self.mesh.b_quad
        vals[:, 1] = self.qx
        vals[:, 2] = self.qy
        vals[:, 3] = np.where(wet, self.hz / np.maximum(self.h, h_dry), 0.0)
        return vals

    def _inlet_eta_eq(self, sched: LtsSchedule | None, stage_k: int):
        if self.cfg.inlet_eta is None:
            return 0.0
        if sched is None:
            return float(self.cfg.inlet_eta(self.t))
        dt_l = sched.dt_level(self._eq_level)
        t_mid = self.t + stage_k * sched.dt_min - 0.5 * dt_l
        uniq, idx = np.unique(t_mid, return_inverse=True)
        etas = np.asarray([float(self.cfg.inlet_eta(tv)) for tv in uniq])
        return etas[idx]

    def _reconstruct_all(self):
        vals = self._live_vals()
        nbr = ghost_values(self.mesh.topo, vals, self._inlet_eta_eq(None, 0))
        cells, grads, _ = limited_gradients(self.mesh.topo, vals, nbr,
                                            self._eps2)
        self.rvals = vals
        self.rgrads[:] = 0.0
        self.rgrads[cells] = grads
        self._zero_dry_gradients()

    def _reconstruct_cells(self, adv_mask, sched, stage_k):
        eq_sel = np.flatnonzero(adv_mask[self._eq_level])
        vals = self._live_vals()
        nbr_all = ghost_values(self.mesh.topo, vals,
                               self._inlet_eta_eq(sched, stage_k))
        cells, grads, _ = limited_gradients(self.mesh.topo, vals,
                                            nbr_all[eq_sel], self._eps2, eq_sel)
        self.rvals[cells] = vals[cells]
        self.rgrads[cells] = grads
        self._zero_dry_gradients(cells)

    def _zero_dry_gradients(self, cells=None):
        if cells is None:
            self.rgrads[self.h < self.cfg.h_dry] = 0.0
        else:
            dry = self.h[cells] < self.cfg.h_dry
            self.rgrads[cells[dry]] = 0.0

    # -- flux assembly -------------------------------------------------------

    def _side_state(self, recs, cells, gb_side) -> SideState:
        """Reconstructed interface state of one side at the Gauss points."""
        mesh = self.mesh
        nrm = mesh.ifaces.normal[recs]
        tng = mesh.tangent[recs]
        gp = mesh.ifaces.gp[recs]
        rel = gp - mesh.centroid[cells][:, None, :]

        vals = self.rvals[cells]
        grads = self.rgrads[cells]
        eta = vals[:, 0, None] + np.einsum("mk,mgk->mg", grads[:, 0], rel)
        qxp = vals[:, 1, None] + np.einsum("mk,mgk->mg", grads[:, 1], rel)
        qyp = vals[:, 2, None] + np.einsum("mk,mgk->mg", grads[:, 2], rel)
        zp = vals[:, 3, None] + np.einsum("mk,mgk->mg", grads[:, 3], rel)

        h = eta - mesh.b_gp[recs]
        qn = nrm[:, None, 0] * qxp + nrm[:, None, 1] * qyp
        qt = tng[:, None, 0] * qxp + tng[:, None, 1] * qyp

        cell_wet = (self.h[cells] >= self.cfg.h_dry)[:, None]
        h = np.where(cell_wet, h, self.h[cells][:, None])
        h = np.maximum(h, 0.0)
        wet = cell_wet & (h >= self.cfg.h_dry)

        gh = grads[:, 0, :] - gb_side
        gqn = nrm[:, 0, None] * grads[:, 1, :] + nrm[:, 1, None] * grads[:, 2, :]
        gqt = tng[:, 0, None] * grads[:, 1, :] + tng[:, 1, None] * grads[:, 2, :]
        d_n = np.stack([np.sum(gh * nrm, -1), np.sum(gqn * nrm, -1),
                        np.sum(gqt * nrm, -1)])
        d_t = np.stack([np.sum(gh * tng, -1), np.sum(gqn * tng, -1),
                        np.sum(gqt * tng, -1)])
        f_n = -self.cfg.gravity * np.sum(gb_side * nrm, -1)
        f_t = -self.cfg.gravity * np.sum(gb_side * tng, -1)

        hs = np.maximum(h, self.cfg.h_dry)
        k = h.size
        m = len(recs)
        wetf = wet.reshape(k)
        ss = SideState.__new__(SideState)
        ss.h = h.reshape(k)
        ss.un = np.where(wet, qn / hs, 0.0).reshape(k)
        ss.ut = np.where(wet, qt / hs, 0.0).reshape(k)
        ss.d_n = np.where(wetf, np.broadcast_to(d_n[:, :, None], (3, m, 2)).reshape(3, k), 0.0)
        ss.d_t = np.where(wetf, np.broadcast_to(d_t[:, :, None], (3, m, 2)).reshape(3, k), 0.0)
        ss.f_n = np.repeat(f_n, 2)
        ss.f_t = np.repeat(f_t, 2)
        ss.z = np.where(wetf, zp.reshape(k), 0.0)
        ss.wet = wetf
        return ss

    def _ghost_side(self, recs, left: SideState, sched, stage_k) -> SideState:
        """Boundary ghost state per tag, derived from the interior side."""
        mesh = self.mesh
        g = self.cfg.gravity
        k = left.h.shape[0]
        gs = SideState.__new__(SideState)
        gs.h = left.h.copy()
        gs.un = left.un.copy()
        gs.ut = left.ut.copy()
        gs.d_n = np.zeros((3, k))
        gs.d_t = np.zeros((3, k))
        gs.f_n = np.repeat(-g * np.sum(mesh.gb_r[recs] * mesh.ifaces.normal[recs], -1), 2)
        gs.f_t = np.repeat(-g * np.sum(mesh.gb_r[recs] * mesh.tangent[recs], -1), 2)
        gs.z = left.z.copy()
        gs.wet = left.wet.copy()

        tag2 = np.repeat(mesh.ifaces.btag[recs], 2)
        wall = tag2 == TAG_WALL
        if np.any(wall):
            gs.un[wall] = -left.un[wall]
            gs.d_n[0, wall] = -left.d_n[0, wall]
            gs.d_n[1, wall] = left.d_n[1, wall]
            gs.d_n[2, wall] = -left.d_n[2, wall]
            gs.d_t[0, wall] = left.d_t[0, wall]
            gs.d_t[1, wall] = -left.d_t[1, wall]
            gs.d_t[2, wall] = left.d_t[2, wall]
        inlet = tag2 == TAG_INLET
        if np.any(inlet) and self.cfg.inlet_eta is not None:
            if sched is None:
                t_mid = np.full(len(recs), self.t)
            else:
                dt_l = sched.dt_level(mesh.rec_level[recs])
                t_mid = self.t + stage_k * sched.dt_min - 0.5 * dt_l
            eta2 = np.repeat(np.asarray([float(self.cfg.inlet_eta(tv))
                                         for tv in t_mid]), 2)
            b2 = mesh.b_gp[recs].reshape(k)
            h_in = np.maximum(eta2[inlet] - b2[inlet], 0.0)
            gs.h[inlet] = h_in
            gs.ut[inlet] = 0.0
            gs.wet[inlet] = h_in >= self.cfg.h_dry
        return gs

    def _record_transports(self, recs, dt_rec, sched=None, stage_k=0):
        """Time-integrated transports (mass, qx, qy, scalar) per record.

        Positive along the record normal; wall records get exactly zero
        mass and scalar transport so closed boxes conserve bitwise.
        """
        mesh = self.mesh
        interior = mesh.ifaces.interior[recs]
        left = self._side_state(recs, mesh.ifaces.left[recs], mesh.gb_l[recs])
        rcells = np.where(interior, mesh.ifaces.right[recs], mesh.ifaces.left[recs])
        right = self._side_state(recs, rcells, mesh.gb_r[recs])
        if not np.all(interior):
            gmask = ~np.repeat(interior, 2)
            bnd = np.flatnonzero(~interior)
            ghost = self._ghost_side(recs[bnd], _take_side(left, gmask),
                                     sched, stage_k)
            _put_side(right, gmask, ghost)

        # pairwise concentration clip: keeps the upwind scalar monotone
        zl_avg = np.repeat(self.rvals[mesh.ifaces.left[recs], 3], 2)
        zr_avg = np.repeat(self.rvals[rcells, 3], 2)
        zlo = np.minimum(zl_avg, zr_avg)
        zhi = np.maximum(zl_avg, zr_avg)
        left.z = np.clip(left.z, zlo, zhi)
        right.z = np.clip(right.z, zlo, zhi)

        dt2 = np.repeat(dt_rec, 2)
        tau = collision_time(np.maximum(left.h, self.cfg.h_dry),
                             np.maximum(right.h, self.cfg.h_dry), dt2)
        fq = time_integrated_flux(left, right, self.cfg.gravity, dt2, tau)

        w = 0.5 * np.repeat(mesh.ifaces.length[recs], 2)
        mass = (fq.mass * w).reshape(-1, 2).sum(axis=1)
        momn = (fq.mom_n * w).reshape(-1, 2).sum(axis=1)
        momt = (fq.mom_t * w).reshape(-1, 2).sum(axis=1)
        scal = (fq.scalar * w).reshape(-1, 2).sum(axis=1)

        wallrec = ~interior & (mesh.ifaces.btag[recs] == TAG_WALL)
        mass[wallrec] = 0.0
        scal[wallrec] = 0.0
        tx, ty = rotate_to_global(mesh.ifaces.normal[recs], momn, momt)
        return np.stack([mass, tx, ty, scal], axis=1)

    # -- update ---------------------------------------------------------------

    def _apply_updates(self, cells, net, dt_cell):
        """Continuity first (no source), then momentum with the
        time-centred subcell source, then the scalar; wet-dry fixup last."""
        mesh = self.mesh
        area = mesh.area[cells]
        h_old = self.h[cells]
        h_new = h_old - net[:, 0] / area

        sub = mesh.sub
        alpha = sub.alpha[cells]
        geom = type(sub)(alpha, sub.b1[cells], sub.b2[cells],
                         sub.grad1[cells], sub.grad2[cells], sub.b_quad[cells])
        h1o, h2o = allocate_subcell_heights(np.maximum(h_old, 0.0), geom)
        h1n, h2n = allocate_subcell_heights(np.maximum(h_new, 0.0), geom)
        coef = -dt_cell * self.cfg.gravity
        h1m = 0.5 * (h1o + h1n)
        h2m = 0.5 * (h2o + h2n)
        src_x = coef * (alpha * h1m * sub.grad1[cells, 0]
                        + (1.0 - alpha) * h2m * sub.grad2[cells, 0])
        src_y = coef * (alpha * h1m * sub.grad1[cells, 1]
                        + (1.0 - alpha) * h2m * sub.grad2[cells, 1])

        qx_new = self.qx[cells] - net[:, 1] / area + src_x
        qy_new = self.qy[cells] - net[:, 2] / area + src_y
        hz_new = self.hz[cells] - net[:, 3] / area

        h_new, qx_new, qy_new, hz_new, _ = wet_dry_fixup(
            h_new, qx_new, qy_new, hz_new, area, self.cfg.h_dry, self.stats)
        self.h[cells] = h_new
        self.qx[cells] = qx_new
        self.qy[cells] = qy_new
        self.hz[cells] = hz_new

    # -- stepping ---------------------------------------------------------------

    def compute_dt(self) -> LtsSchedule:
        """Step sizes and stage plan for the current state.

        dt_min is chosen so every level's sub-step respects its own CFL
        limit (a coarse cell may be the binding constraint).
        """
        dts = local_dt(self.h, self.qx, self.qy, self.mesh.d_cell,
                       self.cfg.gravity, self.cfg.cfl, self.cfg.h_dry)
        levels = self.mesh.forest.level.astype(np.int64)
        if self.cfg.mode == "stamr":
            l_eff = int(levels.max())
            dt_min = float(np.min(dts * np.ldexp(1.0, levels - l_eff)))
            if not math.isfinite(dt_min):
                raise RuntimeError("no wet cells: cannot choose a time step")
            return build_schedule(levels, dt_min)
        dt_min = float(dts.min())
        if not math.isfinite(dt_min):
            raise RuntimeError("no wet cells: cannot choose a time step")
        return LtsSchedule(int(levels.max()), dt_min,
                           [list(range(int(levels.max()) + 1))],
                           single_rate=True)

    def advance_global_step(self, sched: LtsSchedule):
        """March all levels to the synchronization time per the stage plan.

        Transports at level-jump interfaces are buffered on the fine side's
        sub-steps and consumed in one shot when the coarse side advances, so
        the coarse cell receives exactly the sum of the fine transports.
        """
        mesh = self.mesh
        levels = mesh.forest.level.astype(np.int64)
        rec_level = mesh.rec_level
        hang = mesh.hanging
        left = mesh.ifaces.left
        right = mesh.ifaces.right
        n = len(self.h)
        lmax_present = int(levels.max())

        for k, adv in enumerate(sched.stages, start=1):
            adv_mask = np.zeros(lmax_present + 2, dtype=bool)
            adv_mask[[l for l in adv if l <= lmax_present]] = True
            active_cells = adv_mask[levels]
            if not np.any(active_cells):
                continue
            self.stats.stages += 1
            t0 = _time.perf_counter()
            self._reconstruct_cells(adv_mask, sched, k)
            t1 = _time.perf_counter()

            active_recs = np.flatnonzero(adv_mask[rec_level])
            dt_rec = sched.dt_level(rec_level[active_recs])
            T = self._record_transports(active_recs, dt_rec, sched, k)
            t2 = _time.perf_counter()

            ah = hang[active_recs]
            if np.any(ah):
                self.buffers[active_recs[ah]] += T[ah]

            net = _bincount_rows(left[active_recs], T, n)
            eq_mask = ~ah & mesh.ifaces.interior[active_recs]
            if np.any(eq_mask):
                net -= _bincount_rows(right[active_recs[eq_mask]], T[eq_mask], n)
            hrec = np.flatnonzero(hang & adv_mask[np.minimum(mesh.level_r,
                                                             lmax_present + 1)])
            if len(hrec):
                net -= _bincount_rows(right[hrec], self.buffers[hrec], n)
                self.buffers[hrec] = 0.0

            cells = np.flatnonzero(active_cells)
            dt_cell = sched.dt_level(levels[cells])
            self._apply_updates(cells, net[cells], dt_cell)
            t3 = _time.perf_counter()
            self.stats.time_recon += t1 - t0
            self.stats.time_flux += t2 - t1
            self.stats.time_update += t3 - t2

        if np.any(self.buffers != 0.0):
            raise AssertionError("unconsumed coarse-fine flux buffers")
        self.t += sched.dt_global
        self.stats.steps += 1
        if not np.all(np.isfinite(self.h)):
            raise FloatingPointError(f"non-finite depth at t={self.t:g}")

    # -- adaptation ----------------------------------------------------------

    def refinement_indicator(self) -> np.ndarray:
        """Per-leaf indicator beta in [0, 1] for the configured criterion."""
        cfg = self.cfg
        n = len(self.h)
        if cfg.criterion == "none":
            return np.zeros(n)
        if cfg.criterion == "sweep":
            return cfg.sweep_band(self.mesh.centroid, self.t).astype(float)
        if cfg.criterion == "grad_h":
            field_v = self.h
        elif cfg.criterion == "grad_eta":
            field_v = self.h + self.mesh.b_quad
        elif cfg.criterion == "grad_hz":
            field_v = self.hz
        else:
            raise ValueError(f"unknown criterion {cfg.criterion!r}")
        vals = self._live_vals()
        vals[:, 3] = field_v
        nbr = ghost_values(self.mesh.topo, vals, self._inlet_eta_eq(None, 0))
        topo = self.mesh.topo
        dq = nbr[:, 3] - vals[topo.eq_cell, 3]
        bx = np.bincount(topo.eq_cell, weights=topo.eq_dx[:, 0] * dq, minlength=n)
        by = np.bincount(topo.eq_cell, weights=topo.eq_dx[:, 1] * dq, minlength=n)
        gx = topo.inv[:, 0, 0] * bx + topo.inv[:, 0, 1] * by
        gy = topo.inv[:, 1, 0] * bx + topo.inv[:, 1, 1] * by
        mag = np.hypot(gx, gy)
        mmax = mag.max() if n else 0.0
        if mmax <= 1e-300:
            return np.zeros(n)
        return mag / mmax

    def _coarsen_guard(self, coarsen_marks, refine_marks):
        """Drop coarsening marks that would break the 2:1 balance."""
        forest = self.mesh.forest
        ok = coarsen_marks.copy()
        idx = np.arange(len(forest))
        for face in range(4):
            nbr, dd, interior, _ = forest.neighbor_leaf_up(idx, face)
            ok &= ~(interior & (nbr < 0))          # finer neighbour exists
            same = interior & (nbr >= 0) & (dd == 0)
            nbr_safe = np.where(nbr >= 0, nbr, 0)
            ok &= ~(same & refine_marks[nbr_safe])
        return ok

    def adapt(self):
        """One adaptation cycle: mark, coarsen, refine (balanced), transfer.

        Refinement prolongs the parent's limited surface reconstruction
        (children get h = eta_child - B_child), coarsening restores the
        area-weighted surface, so a lake at rest is transferred exactly;
        momenta transfer conservatively.
        """
        t0 = _time.perf_counter()
        cfg = self.cfg
        forest = self.mesh.forest
        beta = self.refinement_indicator()
        refine_marks = (beta > cfg.threshold) & (forest.level < forest.l_max)
        coarsen_marks = (beta < cfg.threshold) & (forest.level > 0)
        coarsen_marks = self._coarsen_guard(coarsen_marks, refine_marks)

        mass0 = self.total_mass()
        smass0 = self.total_scalar()
        changed = False

        if np.any(coarsen_marks):
            res = forest.coarsen(coarsen_marks)
            if len(res.forest) != len(forest):
                self._restrict_state(res)
                refine_marks = self._map_marks(refine_marks, res)
                forest = res.forest
                changed = True
                self.mesh = MeshData(forest)
                self._alloc_runtime()
                self._reconstruct_all()

        refine_marks = forest.balance_marks(refine_marks)
        if np.any(refine_marks):
            if not changed:
                self._reconstruct_all()   # prolongation needs a fresh snapshot
            res = forest.refine(refine_marks)
            self.stats.dropped_marks += res.n_dropped
            self._prolong_state(res)
            forest = res.forest
            changed = True

        if changed:
            self._rebuild(forest)
            self.stats.adapt_mass_defect += (abs(self.total_mass() - mass0)
                                             + abs(self.total_scalar() - smass0))
            self.stats.adapt_events += 1
        self.stats.time_adapt += _time.perf_counter() - t0

    @staticmethod
    def _map_marks(marks, res):
        out = np.zeros(len(res.forest), dtype=bool)
        kept = res.src >= 0
        out[kept] = marks[res.src[kept]]
        return out

    def _restrict_state(self, res):
        """Coarsening transfer: surface mean on wet families, conservative
        mean otherwise; momenta and scalar area-average exactly."""
        nnew = len(res.forest)
        h = np.empty(nnew)
        qx = np.empty(nnew)
        qy = np.empty(nnew)
        hz = np.empty(nnew)
        kept = res.src >= 0
        h[kept] = self.h[res.src[kept]]
        qx[kept] = self.qx[res.src[kept]]
        qy[kept] = self.qy[res.src[kept]]
        hz[kept] = self.hz[res.src[kept]]
        pi = np.flatnonzero(~kept)
        if len(pi):
            ch = res.children[pi]
            a_c = self.mesh.area[ch]
            a_p = a_c.sum(axis=1)
            hc = self.h[ch]
            eta_c = hc + self.mesh.b_quad[ch]
            bq_new = _leaf_bquad(res.forest, pi)
            all_wet = np.all(hc >= self.cfg.h_dry, axis=1)
            h_surface = np.sum(a_c * eta_c, axis=1) / a_p - bq_new
            h_mean = np.sum(a_c * hc, axis=1) / a_p
            h[pi] = np.maximum(np.where(all_wet, h_surface, h_mean), 0.0)
            qx[pi] = np.sum(a_c * self.qx[ch], axis=1) / a_p
            qy[pi] = np.sum(a_c * self.qy[ch], axis=1) / a_p
            hz[pi] = np.sum(a_c * self.hz[ch], axis=1) / a_p
        self.h, self.qx, self.qy, self.hz = h, qx, qy, hz

    def _prolong_state(self, res):
        """Refinement transfer from the parent's limited reconstruction."""
        nnew = len(res.forest)
        h = np.empty(nnew)
        qx = np.empty(nnew)
        qy = np.empty(nnew)
        hz = np.empty(nnew)
        kept = res.slot < 0
        src = res.src
        h[kept] = self.h[src[kept]]
        qx[kept] = self.qx[src[kept]]
        qy[kept] = self.qy[src[kept]]
        hz[kept] = self.hz[src[kept]]
        ci = np.flatnonzero(~kept)
        if len(ci):
            parents = src[ci]
            cen_c, bq_c = _leaf_centroid_bquad(res.forest, ci)
            rel = cen_c - self.mesh.centroid[parents]
            eta_c = self.rvals[parents, 0] + np.sum(self.rgrads[parents, 0] * rel, axis=1)
            hc = eta_c - bq_c
            qxc = self.rvals[parents, 1] + np.sum(self.rgrads[parents, 1] * rel, axis=1)
            qyc = self.rvals[parents, 2] + np.sum(self.rgrads[parents, 2] * rel, axis=1)
            hp = self.h[parents]
            dry = hp < self.cfg.h_dry
            hc = np.where(dry, hp, np.maximum(hc, 0.0))
            qxc = np.where(dry, 0.0, qxc)
            qyc = np.where(dry, 0.0, qyc)
            zp = np.where(dry, 0.0, self.hz[parents] / np.maximum(hp, self.cfg.h_dry))
            h[ci] = hc
            qx[ci] = qxc
            qy[ci] = qyc
            hz[ci] = zp * hc
        self.h, self.qx, self.qy, self.hz = h, qx, qy, hz

    # -- driver -----------------------------------------------------------------

    def step(self) -> LtsSchedule:
        """One global step (adaptation first for the AMR modes)."""
        if self.cfg.mode in ("amr", "stamr") and self.cfg.criterion != "none":
            self.adapt()
        sched = self.compute_dt()
        return sched

    def run_until(self, t_end, max_steps=10 ** 9, callback=None):
        while self.t < t_end - 1e-12 and self.stats.steps < max_steps:
            sched = self.step()
            if self.t + sched.dt_global > t_end:
                sched = sched.scaled((t_end - self.t) / sched.dt_global)
            self.advance_global_step(sched)
            if callback is not None:
                callback(self)

    # -- diagnostics --------------------------------------------------------------

    def total_mass(self) -> float:
        return float(np.sum(self.h * self.mesh.area))

    def total_scalar(self) -> float:
        return float(np.sum(self.hz * self.mesh.area))

    def eta(self) -> np.ndarray:
        return self.h + self.mesh.b_quad


def _take_side(ss: SideState, mask) -> SideState:
    out = SideState.__new__(SideState)
    out.h = ss.h[mask]
    out.un = ss.un[mask]
    out.ut = ss.ut[mask]
    out.d_n = ss.d_n[:, mask]
    out.d_t = ss.d_t[:, mask]
    out.f_n = ss.f_n[mask]
    out.f_t = ss.f_t[mask]
    out.z = ss.z[mask]
    out.wet = ss.wet[mask]
    return out


def _put_side(ss: SideState, mask, sub: SideState):
    ss.h[mask] = sub.h
    ss.un[mask] = sub.un
    ss.ut[mask] = sub.ut
    ss.d_n[:, mask] = sub.d_n
    ss.d_t[:, mask] = sub.d_t
    ss.f_n[mask] = sub.f_n
    ss.f_t[mask] = sub.f_t
    ss.z[mask] = sub.z
    ss.wet[mask] = sub.wet


def _leaf_centroid_bquad(forest, idx):
    corners = forest.corners()[idx]
    cen = quad_centroid(corners)
    bq = build_subcells(corners, forest.corner_b[idx]).b_quad
    return cen, bq


def _leaf_bquad(forest, idx):
    return _leaf_centroid_bquad(forest, idx)[1]
