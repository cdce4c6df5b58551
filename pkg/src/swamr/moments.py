"""Velocity moments of the shallow-water Maxwellian and expansion solves.

The equilibrium distribution for depth h and velocity (U, V) is
g = h*(lam/pi)*exp(-lam*((u-U)^2 + (v-V)^2)) with lam = 1/(G*h).  Moments
here are normalised by depth, so <u^0> = 1 and <u^1> = U.  Half moments
split the u-integration at u = 0; the v-direction only ever needs full
moments because the interface Heaviside acts on the normal velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

TAU_C1 = 0.05
TAU_C2 = 5.0


@dataclass
class MaxwellianState:
    """Equilibrium state at a point: depth, velocities and lam = 1/(G*h)."""

    h: np.ndarray
    u: np.ndarray
    v: np.ndarray
    lam: np.ndarray

    @classmethod
    def from_conserved(cls, h, hu, hv, gravity):
        h = np.asarray(h, dtype=float)
        if np.any(h <= 0.0):
            raise ValueError("Maxwellian requires positive depth")
        return cls(h, np.asarray(hu) / h, np.asarray(hv) / h,
                   1.0 / (gravity * h))


def moment_tables(u, lam, kmax: int):
    """Full and half u-moments up to order ``kmax``.

    Returns (full, pos, neg), each of shape (kmax+1,) + u.shape, where
    pos[k] integrates over u > 0 and neg[k] over u < 0, normalised by
    depth.  Orders follow the two-term recursion
    <u^(k+2)> = U <u^(k+1)> + (k+1)/(2 lam) <u^k>, seeded for the half
    ranges by the complementary error function and a Gaussian term.
    """
    u = np.asarray(u, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0.0):
        raise ValueError("lam must be positive")
    shape = np.broadcast_shapes(u.shape, lam.shape)
    full = np.empty((kmax + 1,) + shape)
    pos = np.empty_like(full)
    neg = np.empty_like(full)

    sq = np.sqrt(lam)
    gauss = 0.5 * np.exp(-lam * u * u) / np.sqrt(np.pi * lam)
    full[0] = np.ones(shape)
    pos[0] = np.broadcast_to(0.5 * erfc(-sq * u), shape)
    neg[0] = np.broadcast_to(0.5 * erfc(sq * u), shape)
    if kmax >= 1:
        full[1] = np.broadcast_to(u, shape)
        pos[1] = u * pos[0] + gauss
        neg[1] = u * neg[0] - gauss
    inv2l = 0.5 / lam
    for k in range(kmax - 1):
        c = (k + 1) * inv2l
        full[k + 2] = u * full[k + 1] + c * full[k]
        pos[k + 2] = u * pos[k + 1] + c * pos[k]
        neg[k + 2] = u * neg[k + 1] + c * neg[k]
    return full, pos, neg


def maxwellian_moments(state: MaxwellianState, n: int):
    """Moment tables of one state: u-full/pos/neg and v-full up to order n."""
    ufull, upos, uneg = moment_tables(state.u, state.lam, n)
    vfull, _, _ = moment_tables(state.v, state.lam, n)
    return ufull, upos, uneg, vfull


def solve_expansion(u, v, lam, dw):
    """Coefficients a = (a1, a2, a3) of the slope expansion a . (1, u, v).

    Solves M a = dw where M_ij = <psi_i psi_j> for the Maxwellian with
    velocities (u, v) and shape lam; ``dw`` holds the three components of
    the depth-normalised derivative of (h, hU, hV) along one direction,
    stacked on the first axis.  Closed form of the 3x3 symmetric system.
    """
    b1, b2, b3 = dw[0], dw[1], dw[2]
    a2 = 2.0 * lam * (b2 - u * b1)
    a3 = 2.0 * lam * (b3 - v * b1)
    a1 = b1 - u * a2 - v * a3
    return np.stack([a1, a2, a3])


def collision_time(h_l, h_r, dt):
    """Interface relaxation time for inviscid flow.

    tau = C1*dt + C2*|hl^2 - hr^2|/(hl^2 + hr^2)*dt with C1 = 0.05, C2 = 5.
    """
    h_l = np.asarray(h_l, dtype=float)
    h_r = np.asarray(h_r, dtype=float)
    l2 = h_l * h_l
    r2 = h_r * h_r
    return TAU_C1 * dt + TAU_C2 * np.abs(l2 - r2) / (l2 + r2) * dt


def time_coefficients(dt, tau):
    """Integrals of the five evolution coefficients over [0, dt].

    C1 = 1 - e^(-t/tau), C2 = -tau*C1(t) + t*e^(-t/tau),
    C3 = -tau*C1(t) + t, C4 = e^(-t/tau), C5 = -t*e^(-t/tau).
    Closed forms; no numerical time quadrature.
    """
    r = dt / tau
    em = np.exp(-r)
    one_m = -np.expm1(-r)            # 1 - e^(-dt/tau), stable for all r
    g1 = dt - tau * one_m
    j = tau * tau * one_m - tau * dt * em   # integral of t*e^(-t/tau)
    g2 = -tau * g1 + j
    g3 = -tau * g1 + 0.5 * dt * dt
    g4 = tau * one_m
    g5 = -j
    return g1, g2, g3, g4, g5
