"""First-order surrogate machinery for the convexified inner problem.

Two functions in the lifted problem are convex but sit on the wrong side of
their inequalities: the antenna gain R[k,m](f) = |f^H h|² (we need R large)
and Q[p,m](c, v) = Δμ²·S²/v (we need Q large; x²/y is jointly convex for
y > 0).  Replacing both by their first-order Taylor expansions at a reference
point gives affine minorants; with g(f) = f_m^H h[k,m]:

    R̂(f)    = 2·Re[g(f)·conj(g^t)] − |g^t|²       (gradient A = 2·h·conj(g^t))
    Q̂(c, v) = Q^t + B·(v − v^t) + C·(S − S^t)

with  B = −Δμ²·(S^t)²/(v^t)² ≤ 0  and  C = 2·Δμ²·S^t/v^t ≥ 0 (the c-gradient
is the same for every device, so C is stored per (pair, feature)).  Convexity
makes both global underestimators: R̂ ≤ R and Q̂ ≤ Q everywhere, with equality
at the reference.  Consequently any point feasible for the surrogate
constraint set is feasible for the true one, which is what makes the outer
loop's iterates safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InfeasibleError
from .problem import DesignVariables, ProblemData, eval_Z

__all__ = ["TaylorReference", "taylor_R_hat", "taylor_Q_hat", "complete_surrogate"]

_V_FLOOR = 1e-300


@dataclass(frozen=True)
class TaylorReference:
    """Expansion point plus the precomputed gradient blocks."""

    vars: DesignVariables
    g_t: np.ndarray    # (K, M) complex: (f^t)^H h per (k, m)
    A: np.ndarray      # (K, M, N_r) complex: 2·h·conj(g^t), the R-gradient
    R_t: np.ndarray    # (K, M) = |g^t|²
    S_t: np.ndarray    # (M,)
    Q_t: np.ndarray    # (P, M), 0 on masked slots
    B: np.ndarray      # (P, M) ≤ 0, 0 on masked slots
    C: np.ndarray      # (P, M) ≥ 0, 0 on masked slots

    @classmethod
    def build(cls, problem: ProblemData, ref: DesignVariables) -> "TaylorReference":
        f_t = np.asarray(ref.f, complex)
        g_t = np.einsum("mn,kmn->km", f_t.conj(), problem.h)   # f^H h
        A = 2.0 * problem.h * g_t.conj()[:, :, None]
        R_t = np.abs(g_t) ** 2
        S_t = ref.c.sum(axis=0)
        msk = problem.mask
        if np.any(ref.v[msk] <= 0):
            raise InfeasibleError(
                "surrogate reference needs v > 0 on every active pair-feature slot "
                "(a feature with zero aggregate target makes the expansion degenerate)")
        v_t = ref.v
        Q_t = np.zeros_like(v_t)
        B = np.zeros_like(v_t)
        C = np.zeros_like(v_t)
        S2 = S_t ** 2
        Q_t[msk] = problem.dmu2[msk] * np.broadcast_to(S2, v_t.shape)[msk] / v_t[msk]
        B[msk] = -problem.dmu2[msk] * np.broadcast_to(S2, v_t.shape)[msk] / v_t[msk] ** 2
        C[msk] = 2.0 * problem.dmu2[msk] * np.broadcast_to(S_t, v_t.shape)[msk] / v_t[msk]
        return cls(vars=ref, g_t=g_t, A=A, R_t=R_t, S_t=S_t, Q_t=Q_t, B=B, C=C)


def taylor_R_hat(ref: TaylorReference, f: np.ndarray,
                 h: np.ndarray) -> np.ndarray:
    """Linearized antenna gain R̂[k,m](f); equals R at f = f^t and never
    exceeds it (gap = |g(f) − g^t|²)."""
    g = np.einsum("mn,kmn->km", np.asarray(f, complex).conj(), h)   # f^H h
    return 2.0 * (g * ref.g_t.conj()).real - ref.R_t


def taylor_Q_hat(ref: TaylorReference, c: np.ndarray, v: np.ndarray,
                 mask: np.ndarray) -> np.ndarray:
    """Linearized Q̂[p,m](c, v); 0 on masked slots."""
    S = np.asarray(c, float).sum(axis=0)
    out = ref.Q_t + ref.B * (np.asarray(v, float) - ref.vars.v) \
        + ref.C * (S - ref.S_t)[None, :]
    return np.where(mask, out, 0.0)


def complete_surrogate(problem: ProblemData, ref: TaylorReference,
                       P_s: np.ndarray, c: np.ndarray,
                       f: np.ndarray) -> DesignVariables:
    """Best surrogate-feasible completion of (P_s, c, f).

    Activates the three eliminable families: u = c²/R̂ (minimal admissible u,
    so minimal energy), v at the linearized variance constraint's equality
    (maximal admissible v, since B < 0), α = min_p Σ_m v.  Light repairs keep
    the map total: sensing power is clipped to its budget box, near-silent
    weights (below 1e-6 of the largest) snap to exact zero, weights on slots
    whose linearized gain is exactly zero are dropped (no admissible u), and
    c is scaled down per device if the energy budget is exceeded.

    Proposals that leave the feasible region entirely are blended toward the
    reference — which always completes — halving the step until they land.
    Two ways out exist: unlike the true Q, the linearized Q̂ is bounded above
    as v → 0 (by Q̂|_{v=v^t} + |B|·v^t), so a far proposal can have no
    admissible v at all, and a precoder can stray outside the cone R̂ ≥ 0
    that the linearization lives in.  At the reference point itself the
    completion returns the reference unchanged.
    """
    P_in = np.asarray(P_s, float)
    c_in = np.asarray(c, float)
    f_in = np.asarray(f, complex)
    rv = ref.vars
    t = 1.0
    for _ in range(200):
        out = _attempt_completion(
            problem, ref,
            t * P_in + (1 - t) * rv.P_s,
            t * c_in + (1 - t) * rv.c,
            t * f_in + (1 - t) * rv.f,
        )
        if out is not None:
            return out
        t *= 0.5
    raise InfeasibleError(
        "no surrogate-feasible completion found even at the expansion point")


def _attempt_completion(problem: ProblemData, ref: TaylorReference,
                        P_s, c, f) -> DesignVariables | None:
    P_s = np.clip(np.asarray(P_s, float), problem.P_min,
                  problem.P_cap * (1.0 - 1e-12))
    c = np.array(c, float, copy=True)
    f = np.asarray(f, complex)
    X = problem.require_X()

    # interior-point and dual-block "zeros" come back as dust (~1e-9
    # relative); snap them so silent slots read as silent downstream
    c[c < 1e-6 * c.max(initial=0.0)] = 0.0

    R_hat = taylor_R_hat(ref, f, problem.h)
    if np.any(R_hat < 0):
        return None            # outside the cone R̂ ≥ 0: f strayed too far
    c[R_hat <= 0] = 0.0
    u = np.zeros_like(c)
    nz = c > 0
    u[nz] = c[nz] ** 2 / R_hat[nz]

    # per-device energy repair: the communication term scales with s_k²
    comm = problem.budget.T_c * np.sum(u * X, axis=1)
    avail = problem.budget.E - problem.budget.E_p - P_s * problem.budget.T_s
    over = comm > avail
    if np.any(over):
        s = np.ones(problem.K)
        s[over] = np.sqrt(np.maximum(avail[over], 0.0)
                          / comm[over]) * (1.0 - 1e-12)
        c *= s[:, None]
        u *= (s ** 2)[:, None]

    Z = eval_Z(problem, P_s, c, f)
    S = c.sum(axis=0)
    msk = problem.mask
    q_c = ref.Q_t + ref.C * (S - ref.S_t)[None, :]       # Q̂ at v = v^t
    v = np.zeros_like(ref.vars.v)
    v[msk] = ref.vars.v[msk] + (q_c[msk] - np.broadcast_to(Z, v.shape)[msk]) \
        / (-ref.B[msk])
    if np.any(v[msk] <= _V_FLOOR):
        return None            # some slot admits no positive v: step too far
    v = np.where(msk, v, 0.0)
    alpha = float(np.min(v.sum(axis=1)))
    return DesignVariables(P_s=P_s, c=c, f=f, u=u, v=v, alpha=alpha)
