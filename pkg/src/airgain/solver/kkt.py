"""KKT system assembly, residual measurement and multiplier recovery.

The Lagrangian of the lifted problem (minimizing −α) is

    L = −α + Σ_k β_k·g1_k + Σ_p γ_p·g2_p + Σ_{k,m} θ_{k,m}·g3_{k,m}
        + Σ_{p,m} λ_{p,m}·g4_{p,m}

with the energy constraints g1, the epigraph constraints g2 = α − Σ_m v, the
extended constraints g3 = c²/u − R (ratio form, the one the closed-form block
updates differentiate) and the variance constraints g4 = Z − Q.  In surrogate
mode R̂/Q̂ replace R/Q; at the expansion point the two gradients coincide, so
a converged surrogate KKT point is a KKT point of the true problem with the
same multipliers.

Stationarity rows (complex f split into Re/Im pairs; combined gradient
convention ∂/∂fr + i·∂/∂fi):

    α:  −1 + Σ_p γ_p
    v:  −γ_p − λ·∂Q/∂v                (−λB surrogate, +λ·Δμ²S²/v² true)
    u:  β_k·T_c·X − θ·c²/u²
    c:  2θc/u + Σ_p λ(∂Z/∂c − ∂Q/∂c)
    P:  β_k·T_s − (σ_r²/P²)·Σ_m (Σ_p λ)·c²
    f:  −Σ_k θ·∇R + (Σ_p λ)·2·N0·f    (∇R̂ = A constant; ∇R = 2h·conj(g(f)))

Variables sitting at their bounds satisfy *one-sided* stationarity instead:
the Lagrangian derivative along the feasible re-entry direction must be ≥ 0,
otherwise the point is not optimal (there is a profitable move off the bound).
These conditions become extra inequality rows of the system:

    c = 0 (and u = 0 with it):  entering along the cheapest feasible path
        u = c²/R keeps g3 tight and the energy cost second-order, so the
        first-order condition is Σ_p λ·(2σ²S − ∂Q/∂c) ≥ 0 — one row per
        feature with a silent device that has R > 0 (device index drops out).
    P at the box edge:          ±(β·T_s − (σ_r²/P²)·Σ(Σλ)c²) ≥ 0
    v = 0, α = 0:               the usual rows, one-sided.

In surrogate mode the extended family is really the rotated cone
c² ≤ R̂·u, R̂ ≥ 0, u ≥ 0 (the linearized R̂ can go negative where the true
R cannot).  A silent slot pinned to the R̂ = 0 face carries a face
multiplier zeta on −R̂ ≤ 0, entering only the f rows: without it the
precoder rows cannot balance at solutions that drained that slot's gain
to zero, and its entry row is suppressed (no feasible entry path).

Dropping these rows instead (the tempting shortcut) lets points with a
negative reduced cost at the bound certify; on a convex instance that shows
up as two "certified" points with different objective values.

Residual normalization is cancellation-relative: each stationarity row is
|Σ terms| / (1 + Σ|terms|); feasibility and complementary slackness are scaled
by the natural magnitude of each constraint.  `fit_multipliers` recovers
nonnegative multipliers supported on the active set by NNLS on the
stationarity system — the α row anchors the scale (Σγ must reach 1), so a
zero fit can never look converged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .problem import DesignVariables, ProblemData, eval_R, eval_Z, eval_Q
from .taylor import TaylorReference, taylor_R_hat, taylor_Q_hat

__all__ = ["Multipliers", "KktReport", "kkt_residual", "fit_multipliers"]

# a variable counts as at-bound / a constraint as active within these
_C_FLOOR = 1e-12
_ACT_TOL = 1e-6


@dataclass
class Multipliers:
    """Dual variables, nonnegative after every update, plus the per-family
    base step sizes used by the dual-ascent loop."""

    beta: np.ndarray    # (K,)
    gamma: np.ndarray   # (P,)
    theta: np.ndarray   # (K, M); at silent slots holds the cone-face zeta
    lam: np.ndarray     # (P, M), zero on masked slots
    eta0: dict = field(default_factory=lambda: {
        "beta": 1e-2, "gamma": 1e-2, "theta": 1e-2, "lam": 1e-2,
        "v": 1e-2, "alpha": 1e-2,
    })

    @classmethod
    def zeros(cls, problem: ProblemData, eta0: dict | None = None) -> "Multipliers":
        m = cls(beta=np.zeros(problem.K),
                gamma=np.zeros(problem.n_pairs),
                theta=np.zeros((problem.K, problem.M)),
                lam=np.zeros((problem.n_pairs, problem.M)))
        if eta0:
            m.eta0.update(eta0)
        return m

    def copy(self) -> "Multipliers":
        return Multipliers(beta=self.beta.copy(), gamma=self.gamma.copy(),
                           theta=self.theta.copy(), lam=self.lam.copy(),
                           eta0=dict(self.eta0))


@dataclass(frozen=True)
class KktReport:
    """Normalized residual components; `overall` is their maximum."""

    stationarity: float
    feasibility: float
    comp_slack: float
    overall: float
    gamma_sum: float        # Σγ, 1 at exact stationarity of α

    def __str__(self):
        return (f"KKT(overall={self.overall:.3e}, stat={self.stationarity:.3e}, "
                f"feas={self.feasibility:.3e}, cs={self.comp_slack:.3e}, "
                f"Σγ={self.gamma_sum:.4f})")


class _System:
    """Stationarity matrix G (rows = free variable coordinates, columns =
    constraints) and objective gradient b, plus the bookkeeping to map
    multiplier objects to columns."""

    def __init__(self, problem: ProblemData, dv: DesignVariables,
                 ref: TaylorReference | None):
        K, M, P = problem.K, problem.M, problem.n_pairs
        N_r = problem.N_r
        self.problem, self.dv, self.ref = problem, dv, ref
        X = problem.require_X()
        msk = problem.mask

        # near-silent slots (relative to the largest weight) are treated as
        # at-bound: their interior rows are hopelessly ill-conditioned
        # (entries scale like 1/c) and the one-sided entry row is the
        # condition that actually matters there
        cmax = float(dv.c.max(initial=0.0))
        self.c_on = dv.c > max(_C_FLOOR, 1e-7 * cmax)     # (K, M)
        p_lo, p_hi = problem.P_min, problem.P_cap
        self.P_on = (dv.P_s > p_lo * (1 + 1e-9)) & (dv.P_s < p_hi * (1 - 1e-9))

        # row layout: alpha | v(mask) | u(c_on) | c(c_on) | P(P_on) | f re/im
        self.n_v = int(msk.sum())
        self.n_cu = int(self.c_on.sum())
        self.n_P = int(self.P_on.sum())
        self.n_f = 2 * M * N_r
        self.n_rows = 1 + self.n_v + 2 * self.n_cu + self.n_P + self.n_f
        r_v = 1
        r_u = r_v + self.n_v
        r_c = r_u + self.n_cu
        r_P = r_c + self.n_cu
        r_f = r_P + self.n_P

        self.b = np.zeros(self.n_rows)
        self.b[0] = -1.0

        # column layout: beta(K) | gamma(P) | theta(c_on) | lam(mask) | zeta
        self.col_beta = np.arange(K)
        self.col_gamma = K + np.arange(P)
        self.col_theta_index = np.argwhere(self.c_on)     # (n_cu, 2)
        self.col_lam_index = np.argwhere(msk)             # (n_v, 2)

        S = dv.c.sum(axis=0)
        w = problem.noise_add(dv.P_s)
        sigma2 = problem.model.sigma2
        if ref is None:
            g_f = np.einsum("mn,kmn->km", dv.f.conj(), problem.h)   # f^H h
            gradR = 2.0 * problem.h * g_f.conj()[:, :, None]        # (K,M,N_r)
            dg4_dv = problem.dmu2 * (S ** 2)[None, :]               # −∂Q/∂v ≥ 0
            # v = 0 slots become one-sided rows below; a finite clamp keeps
            # their entries representable (the condition is then conservative)
            v_den = np.maximum(np.where(msk, dv.v, 1.0),
                               1e-9 * (1.0 + dv.v.max(initial=0.0)))
            dg4_dv = np.where(msk, dg4_dv / v_den ** 2, 0.0)
            dQ_dc = np.where(msk, 2.0 * problem.dmu2 * S[None, :] / v_den, 0.0)
        else:
            gradR = ref.A
            dg4_dv = -ref.B           # ∂g4/∂v = −∂Q̂/∂v = −B ≥ 0
            dQ_dc = ref.C

        if ref is None:
            R = eval_R(dv.f, problem.h)
        else:
            R = taylor_R_hat(ref, dv.f, problem.h)
        tolR = _ACT_TOL * (1.0 + float(R.max(initial=0.0)))
        # silent slots pressed against the R̂ ≥ 0 face of the cone get their
        # own multiplier (zeta): the face is what stops f from trading that
        # slot's gain away, so its dual enters the f rows.  The exact R is a
        # squared magnitude whose gradient vanishes wherever R = 0, so in
        # true mode the column would be identically zero — skip it.
        if ref is not None:
            self.col_zeta_index = np.argwhere((~self.c_on) & (R <= tolR))
        else:
            self.col_zeta_index = np.zeros((0, 2), dtype=int)
        self.n_z = len(self.col_zeta_index)
        n_cols = K + P + self.n_cu + self.n_v + self.n_z
        G = np.zeros((self.n_rows, n_cols))

        # --- gamma columns ------------------------------------------------
        G[0, self.col_gamma] = 1.0
        v_rows = {tuple(ix): r_v + i for i, ix in enumerate(self.col_lam_index)}
        for i, (p, m) in enumerate(self.col_lam_index):
            G[v_rows[(p, m)], self.col_gamma[p]] = -1.0

        # --- beta columns ---------------------------------------------
        for j, (k, m) in enumerate(self.col_theta_index):
            G[r_u + j, self.col_beta[k]] = problem.budget.T_c * X[k, m]
        P_rows = {}
        j = 0
        for k in range(K):
            if self.P_on[k]:
                P_rows[k] = r_P + j
                G[r_P + j, self.col_beta[k]] = problem.budget.T_s[k]
                j += 1

        # --- theta columns --------------------------------------------
        cu_pos = {tuple(ix): j for j, ix in enumerate(self.col_theta_index)}
        for j, (k, m) in enumerate(self.col_theta_index):
            col = K + P + j
            cc, uu = dv.c[k, m], dv.u[k, m]
            G[r_u + j, col] = -cc ** 2 / uu ** 2
            G[r_c + j, col] = 2.0 * cc / uu
            # f rows feature-major: [Re(f_m) block, Im(f_m) block, ...]
            block = -gradR[k, m]
            base = r_f + 2 * m * N_r
            G[base:base + N_r, col] = block.real
            G[base + N_r:base + 2 * N_r, col] = block.imag

        # --- lam columns -----------------------------------------------
        for i, (p, m) in enumerate(self.col_lam_index):
            col = K + P + self.n_cu + i
            G[v_rows[(p, m)], col] = dg4_dv[p, m]
            for k in range(K):
                if self.c_on[k, m]:
                    j = cu_pos[(k, m)]
                    G[r_c + j, col] = (2.0 * sigma2[m] * S[m]
                                       + 2.0 * dv.c[k, m] * w[k]
                                       - dQ_dc[p, m])
                if self.P_on[k]:
                    G[P_rows[k], col] = (-problem.profile.sigma_r2
                                         * dv.c[k, m] ** 2 / dv.P_s[k] ** 2)
            base = r_f + 2 * m * N_r
            zgrad = 2.0 * problem.N0 * dv.f[m]
            G[base:base + N_r, col] = zgrad.real
            G[base + N_r:base + 2 * N_r, col] = zgrad.imag

        # --- zeta columns (silent slots on the R̂ = 0 face) ----------------
        for j, (k, m) in enumerate(self.col_zeta_index):
            col = K + P + self.n_cu + self.n_v + j
            block = -gradR[k, m]      # ∂(−R̂)/∂f = −A, same f entries as theta
            base = r_f + 2 * m * N_r
            G[base:base + N_r, col] = block.real
            G[base + N_r:base + 2 * N_r, col] = block.imag

        # --- one-sided rows for at-bound variables -----------------------
        # each row encodes "bb + Gb·μ ≥ 0"; violations count as stationarity
        Gb, bb = [], []
        lam_cols = K + P + self.n_cu + np.arange(self.n_v)
        lam_p = self.col_lam_index[:, 0]
        lam_m = self.col_lam_index[:, 1]
        # silent (k, m) slots with usable R: first-order entry condition.
        # Slots pinned to the R̂ = 0 face have no feasible entry path — they
        # carry a zeta column instead of an entry row.
        enterable = (~self.c_on) & (R > tolR)
        for m in np.flatnonzero(enterable.any(axis=0)):
            sel = lam_m == m
            if not sel.any():
                continue
            row = np.zeros(n_cols)
            row[lam_cols[sel]] = (2.0 * sigma2[m] * S[m]
                                  - dQ_dc[lam_p[sel], m])
            Gb.append(row)
            bb.append(0.0)
        # P pinned at the box: sign of aperture depends on which edge
        lo = np.broadcast_to(np.asarray(p_lo, float), (K,))
        for k in np.flatnonzero(~self.P_on):
            row = np.zeros(n_cols)
            row[self.col_beta[k]] = problem.budget.T_s[k]
            row[lam_cols] = (-problem.profile.sigma_r2
                             * dv.c[k, lam_m] ** 2 / dv.P_s[k] ** 2)
            at_lo = dv.P_s[k] <= lo[k] * (1 + 1e-9)
            Gb.append(row if at_lo else -row)
            bb.append(0.0)

        # rows whose variable sits (numerically) at zero turn one-sided: the
        # rounded point with v = 0 there is feasible and negligibly worse, so
        # certifying it is what we actually want — equality treatment of a
        # share that optimally rides its bound can never balance.  Distance
        # to the v = 0 corner is measured in the constraint's own units,
        # v·|∂g4/∂v| = slack of g4 at v = 0: a share can look respectable in
        # v while Z sits within solver noise of the corner (small |B| slots),
        # and such degenerate slots need their λ freed like any active bound.
        move = np.zeros(self.n_rows, dtype=bool)
        if dv.alpha <= 1e-12:
            move[0] = True
        vmax = float(dv.v.max(initial=0.0))
        if ref is not None:
            Z_m = eval_Z(problem, dv.P_s, dv.c, dv.f)
        for i, (p, m) in enumerate(self.col_lam_index):
            at0 = dv.v[p, m] <= 1e-7 * (1.0 + vmax)
            if not at0 and ref is not None:
                at0 = (dv.v[p, m] * (-ref.B[p, m])
                       <= 1e-6 * (1.0 + abs(Z_m[m])))
            if at0:
                move[r_v + i] = True
        for r in np.flatnonzero(move):
            Gb.append(G[r].copy())
            bb.append(self.b[r])

        self.Gb = (np.array(Gb) if Gb
                   else np.zeros((0, n_cols)))
        self.bb = np.array(bb) if bb else np.zeros(0)
        keep = ~move
        self.G = G[keep]
        self.b = self.b[keep]
        self.n_rows = int(keep.sum())
        self.K, self.P, self.M, self.N_r = K, P, M, N_r

    def pack(self, mults: Multipliers) -> np.ndarray:
        mu = np.zeros(self.G.shape[1])
        mu[self.col_beta] = mults.beta
        mu[self.col_gamma] = mults.gamma
        for j, (k, m) in enumerate(self.col_theta_index):
            mu[self.K + self.P + j] = mults.theta[k, m]
        for i, (p, m) in enumerate(self.col_lam_index):
            mu[self.K + self.P + self.n_cu + i] = mults.lam[p, m]
        # zeta rides in the theta array: its slots are silent, so the two
        # never collide, and a face multiplier is the ratio-form theta's limit
        for j, (k, m) in enumerate(self.col_zeta_index):
            mu[self.K + self.P + self.n_cu + self.n_v + j] = mults.theta[k, m]
        return mu

    def unpack(self, mu: np.ndarray) -> Multipliers:
        out = Multipliers.zeros(self.problem)
        out.beta = mu[self.col_beta].copy()
        out.gamma = mu[self.col_gamma].copy()
        for j, (k, m) in enumerate(self.col_theta_index):
            out.theta[k, m] = mu[self.K + self.P + j]
        for i, (p, m) in enumerate(self.col_lam_index):
            out.lam[p, m] = mu[self.K + self.P + self.n_cu + i]
        for j, (k, m) in enumerate(self.col_zeta_index):
            out.theta[k, m] = mu[self.K + self.P + self.n_cu + self.n_v + j]
        return out

    def stationarity_rows(self, mu: np.ndarray) -> np.ndarray:
        """Cancellation-relative residual per row."""
        num = np.abs(self.b + self.G @ mu)
        den = 1.0 + np.abs(self.b) + np.abs(self.G) @ np.abs(mu)
        return num / den

    def bound_rows_resid(self, mu: np.ndarray) -> np.ndarray:
        """One-sided rows: only the negative part of bb + Gb·μ counts."""
        if self.Gb.shape[0] == 0:
            return np.zeros(0)
        expr = self.bb + self.Gb @ mu
        den = 1.0 + np.abs(self.bb) + np.abs(self.Gb) @ np.abs(mu)
        return np.maximum(0.0, -expr) / den


def _constraint_values(problem: ProblemData, dv: DesignVariables,
                       ref: TaylorReference | None):
    """Signed g-values and their normalization scales, by family."""
    X = problem.require_X()
    msk = problem.mask
    if ref is None:
        R = eval_R(dv.f, problem.h)
        Q = eval_Q(problem, dv.c, dv.v)
    else:
        R = taylor_R_hat(ref, dv.f, problem.h)
        Q = taylor_Q_hat(ref, dv.c, dv.v, msk)
    Z = eval_Z(problem, dv.P_s, dv.c, dv.f)

    g1 = problem.energy_used_u(dv.P_s, dv.u) - problem.budget.E
    s1 = 1.0 + np.abs(problem.budget.E)
    g2 = dv.alpha - dv.v.sum(axis=1)
    s2 = 1.0 + abs(dv.alpha)
    g3 = np.maximum(dv.c ** 2 - R * dv.u, -R)       # cone form: R ≥ 0 as well
    s3 = 1.0 + dv.c ** 2 + np.abs(R * dv.u) + np.abs(R)
    g4 = np.where(msk, Z[None, :] - Q, 0.0)
    s4 = 1.0 + np.abs(Z[None, :]) + np.abs(Q)
    return (g1, s1), (g2, s2), (g3, s3), (g4, s4)


def kkt_residual(problem: ProblemData, dv: DesignVariables, mults: Multipliers,
                 ref: TaylorReference | None = None) -> KktReport:
    """Normalized KKT residual of a primal-dual pair.

    ref=None measures against the true problem; passing the Taylor reference
    measures against the surrogate (inner) problem.
    """
    sys = _System(problem, dv, ref)
    mu = sys.pack(mults)
    stat = float(np.max(sys.stationarity_rows(mu))) if sys.n_rows else 0.0
    stat = max(stat, float(np.max(sys.bound_rows_resid(mu), initial=0.0)))

    (g1, s1), (g2, s2), (g3, s3), (g4, s4) = _constraint_values(problem, dv, ref)
    feas = max(
        float(np.max(np.maximum(g1, 0) / s1)),
        float(np.max(np.maximum(g2, 0) / s2)),
        float(np.max(np.maximum(g3, 0) / s3)),
        float(np.max(np.maximum(g4, 0) / s4)) if problem.mask.any() else 0.0,
    )
    cs = max(
        float(np.max(np.abs(mults.beta * g1) / (1.0 + np.abs(mults.beta) * s1))),
        float(np.max(np.abs(mults.gamma * g2) / (1.0 + np.abs(mults.gamma) * s2))),
        float(np.max(np.abs(mults.theta * g3) / (1.0 + np.abs(mults.theta) * s3))),
        float(np.max(np.abs(mults.lam * g4) / (1.0 + np.abs(mults.lam) * s4))),
    )
    overall = max(stat, feas, cs)
    return KktReport(stationarity=stat, feasibility=feas, comp_slack=cs,
                     overall=overall, gamma_sum=float(np.sum(mults.gamma)))


def fit_multipliers(problem: ProblemData, dv: DesignVariables,
                    ref: TaylorReference | None = None,
                    act_tol: float = _ACT_TOL) -> Multipliers:
    """Recover nonnegative multipliers supported on the active set by NNLS.

    Inactive constraints get exactly zero; rows are pre-scaled to comparable
    magnitude so no single block dominates the least-squares fit.
    """
    sys = _System(problem, dv, ref)
    (g1, s1), (g2, s2), (g3, s3), (g4, s4) = _constraint_values(problem, dv, ref)

    active = np.zeros(sys.G.shape[1], dtype=bool)
    active[sys.col_beta] = g1 >= -act_tol * s1
    active[sys.col_gamma] = g2 >= -act_tol * s2
    for j, (k, m) in enumerate(sys.col_theta_index):
        active[sys.K + sys.P + j] = g3[k, m] >= -act_tol * s3[k, m]
    for i, (p, m) in enumerate(sys.col_lam_index):
        active[sys.K + sys.P + sys.n_cu + i] = g4[p, m] >= -act_tol * s4[p, m]
    # zeta columns exist only where the face is active, by construction
    active[sys.K + sys.P + sys.n_cu + sys.n_v:] = True

    if not active.any():
        return Multipliers.zeros(problem)

    # one-sided rows enter as equalities with a nonnegative slack unknown
    # each: bb + Gb·μ − s = 0, s ≥ 0  ⇔  bb + Gb·μ ≥ 0
    n_b = sys.Gb.shape[0]
    G_all = np.vstack([sys.G, sys.Gb]) if n_b else sys.G
    b_all = np.concatenate([sys.b, sys.bb]) if n_b else sys.b
    slack = np.zeros((G_all.shape[0], n_b))
    if n_b:
        slack[sys.G.shape[0]:, :] = -np.eye(n_b)
    cols = np.concatenate([np.flatnonzero(active),
                           sys.G.shape[1] + np.arange(n_b)]).astype(int)
    A_full = np.hstack([G_all, slack])[:, cols]

    # iteratively reweighted NNLS: rows are normalized by the same
    # cancellation denominator the residual report uses, so the fit
    # minimizes (approximately) what gets measured
    w = np.ones(G_all.shape[0])
    mu = np.zeros(sys.G.shape[1])
    for _ in range(3):
        sol, _ = nnls(A_full / w[:, None], -b_all / w)
        mu = np.zeros(sys.G.shape[1])
        mu[active] = sol[:int(active.sum())]
        w = 1.0 + np.abs(b_all) + np.abs(G_all) @ np.abs(mu)
    return sys.unpack(mu)
