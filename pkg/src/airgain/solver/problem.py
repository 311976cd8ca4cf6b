"""Problem assembly and exact (non-surrogate) evaluation.

The design problem: choose sensing powers P_s[k] > 0, received-power targets
c[k,m] ≥ 0 and receive beamformers f_m ∈ C^{N_r} to maximize the minimum
pair-wise discriminant gain of the aggregated features,

    maximize   α
    subject to α ≤ Σ_m Δμ²[p,m]·S_m²/Z_m       for every class pair p,
               P_s[k]·T_s[k] + E_p[k] + T_c·Σ_m c²[k,m]·X[k,m]/R[k,m] ≤ E[k],

with S_m = Σ_k c[k,m], R[k,m] = |f_m^H h[k,m]|² the effective antenna gain and

    Z_m = sigma2[m]·S_m² + Σ_k c²[k,m]·(sigma_s2[k] + sigma_r2/P_s[k]) + N0·‖f_m‖²

the received variance.  The solver works on an equivalent lifted form with
auxiliaries u[k,m] (a bound on the per-element transmit power |b|², active at
optimality: u = c²/R), v[p,m] (per-pair per-feature gain shares with
Z_m ≤ Δμ²·S_m²/v — at activity v equals the per-feature pair gain) and the
epigraph variable α ≤ Σ_m v[p,m].  Four constraint families result:

    (1) energy:   P_s·T_s + E_p + T_c·Σ_m u·X − E           ≤ 0   per device
    (2) pair:     α − Σ_m v[p,m]                            ≤ 0   per pair
    (3) extended: c²[k,m] − R[k,m]·u[k,m]                    ≤ 0   per (k,m)
    (4) variance: Z_m − Δμ²[p,m]·S_m²/v[p,m]                 ≤ 0   per (p,m)

X[k,m] (second moment of the transmitted feature) itself depends on P_s
through the sensing-noise variance; it is evaluated at a lagged reference
power and frozen per inner solve (`ProblemData.with_X`), refreshed by the
outer loop.

Pairs with Δμ[p,m] = 0 contribute exactly zero gain at feature m; the lifted
constraint (4) would be unsatisfiable there (Z_m > 0), so those slots are
masked out of family (4) with v[p,m] ≡ 0.  Gains are unaffected.

Scale invariance worth knowing: (c, f) → (s·c, s·f) leaves every gain and the
energy term c²·X/R unchanged, so optima come as rays; solutions are reported
as returned by the solver without any normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..channel import ChannelState, EnergyBudget
from ..dgain import gain_table, min_gain, pair_indices
from ..errors import ConfigError, InfeasibleError
from ..model import (
    MixtureModel,
    SensingProfile,
    local_second_moment,
    received_feature_stats,
)

__all__ = [
    "ProblemData",
    "DesignVariables",
    "FeasibilityReport",
    "eval_R",
    "eval_Z",
    "eval_Q",
    "complete_true",
    "true_min_gain",
    "feasibility_check",
]

# Δμ² at or below this is treated as a coincident-centroid slot and masked
_DMU2_FLOOR = 1e-30


@dataclass(frozen=True)
class ProblemData:
    """One fully-specified design instance.

    X is the frozen transmit second moment (see module docstring); pair
    bookkeeping (`pairs`, `dmu2`, `mask`) uses the global lexicographic
    unordered-pair order of :func:`airgain.dgain.pair_indices`.
    """

    model: MixtureModel
    profile: SensingProfile
    channel: ChannelState
    budget: EnergyBudget
    X: np.ndarray | None       # (K, M) or None until with_X()
    X_ref_power: np.ndarray | None
    pairs: np.ndarray          # (P, 2)
    dmu2: np.ndarray           # (P, M)
    mask: np.ndarray           # (P, M) bool: True where Δμ² > 0

    @classmethod
    def build(cls, model: MixtureModel, profile: SensingProfile,
              channel: ChannelState, budget: EnergyBudget) -> "ProblemData":
        K, M = profile.K, model.M
        if channel.h.shape[:2] != (K, M):
            raise ConfigError(
                f"channel shape {channel.h.shape[:2]} does not match (K, M)=({K}, {M})")
        if budget.K != K:
            raise ConfigError("budget and profile disagree on device count")
        if not np.allclose(budget.T_s, profile.T_s):
            raise ConfigError("budget.T_s and profile.T_s disagree")
        pairs = pair_indices(model.L)
        d = model.mu[pairs[:, 0]] - model.mu[pairs[:, 1]]
        dmu2 = d ** 2
        return cls(model=model, profile=profile, channel=channel, budget=budget,
                   X=None, X_ref_power=None, pairs=pairs, dmu2=dmu2,
                   mask=dmu2 > _DMU2_FLOOR)

    def with_X(self, P_ref: np.ndarray) -> "ProblemData":
        """Freeze the transmit second moment at the given sensing power."""
        sm = local_second_moment(self.model, self.profile, P_ref)
        return replace(self, X=sm.X, X_ref_power=sm.P_ref)

    # -- sizes ------------------------------------------------------------
    @property
    def K(self) -> int:
        return self.profile.K

    @property
    def M(self) -> int:
        return self.model.M

    @property
    def L(self) -> int:
        return self.model.L

    @property
    def N_r(self) -> int:
        return self.channel.N_r

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]

    # -- frequently used pieces -------------------------------------------
    @property
    def h(self) -> np.ndarray:
        return self.channel.h

    @property
    def N0(self) -> float:
        return self.channel.N0

    @property
    def P_cap(self) -> np.ndarray:
        """Sensing power that would consume the whole post-computation budget."""
        return (self.budget.E - self.budget.E_p) / self.budget.T_s

    @property
    def P_min(self) -> np.ndarray:
        return 1e-9 * self.P_cap

    def noise_add(self, P_s: np.ndarray) -> np.ndarray:
        """w_k = sigma_s2[k] + sigma_r2/P_s[k], the per-device variance add-on."""
        return self.profile.sigma_s2 + self.profile.sigma_r2 / np.asarray(P_s, float)

    def require_X(self) -> np.ndarray:
        if self.X is None:
            raise ConfigError("ProblemData.X not set; call with_X(P_ref) first")
        return self.X

    def energy_used_u(self, P_s: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Lifted-form energy: P_s·T_s + E_p + T_c·Σ_m u·X."""
        X = self.require_X()
        return (np.asarray(P_s, float) * self.budget.T_s + self.budget.E_p
                + self.budget.T_c * np.sum(np.asarray(u, float) * X, axis=1))


@dataclass(frozen=True)
class DesignVariables:
    """A full primal point of the lifted problem."""

    P_s: np.ndarray    # (K,)
    c: np.ndarray      # (K, M)
    f: np.ndarray      # (M, N_r) complex
    u: np.ndarray      # (K, M)
    v: np.ndarray      # (P, M)
    alpha: float

    def to_dict(self) -> dict:
        return {
            "P_s": self.P_s.tolist(),
            "c": self.c.tolist(),
            "f_re": self.f.real.tolist(),
            "f_im": self.f.imag.tolist(),
            "u": self.u.tolist(),
            "v": self.v.tolist(),
            "alpha": float(self.alpha),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DesignVariables":
        return cls(
            P_s=np.asarray(d["P_s"], float),
            c=np.asarray(d["c"], float),
            f=np.asarray(d["f_re"], float) + 1j * np.asarray(d["f_im"], float),
            u=np.asarray(d["u"], float),
            v=np.asarray(d["v"], float),
            alpha=float(d["alpha"]),
        )


# ---------------------------------------------------------------------------
# exact constraint-function evaluation
# ---------------------------------------------------------------------------

def eval_R(f: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Effective antenna gain R[k,m] = |f_m^H h[k,m]|² for f (M, N_r),
    h (K, M, N_r)."""
    g = np.einsum("mn,kmn->km", np.asarray(f, complex).conj(), np.asarray(h, complex))
    return np.abs(g) ** 2


def eval_Z(problem: ProblemData, P_s: np.ndarray, c: np.ndarray,
           f: np.ndarray) -> np.ndarray:
    """Received variance Z_m of the aggregated feature, shape (M,)."""
    P_s = np.asarray(P_s, float)
    if np.any(P_s <= 0):
        raise ConfigError("P_s must be positive in eval_Z")
    c = np.asarray(c, float)
    S = c.sum(axis=0)
    w = problem.noise_add(P_s)
    fnorm2 = np.sum(np.abs(np.asarray(f, complex)) ** 2, axis=1)
    return (problem.model.sigma2 * S ** 2
            + np.sum(c ** 2 * w[:, None], axis=0)
            + problem.N0 * fnorm2)


def eval_Q(problem: ProblemData, c: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Q[p,m] = Δμ²[p,m]·S_m²/v[p,m] on unmasked slots, 0 elsewhere."""
    c = np.asarray(c, float)
    v = np.asarray(v, float)
    S2 = c.sum(axis=0) ** 2
    out = np.zeros_like(problem.dmu2)
    msk = problem.mask
    if np.any(v[msk] <= 0):
        raise ConfigError("v must be positive on active pair-feature slots")
    out[msk] = problem.dmu2[msk] * np.broadcast_to(S2, v.shape)[msk] / v[msk]
    return out


def received_stats_of(problem: ProblemData, P_s: np.ndarray, c: np.ndarray,
                      f: np.ndarray):
    return received_feature_stats(problem.model, problem.profile, P_s, c, f,
                                  problem.N0)


def true_min_gain(problem: ProblemData, P_s: np.ndarray, c: np.ndarray,
                  f: np.ndarray) -> tuple[float, tuple[int, int]]:
    """Minimum pair-wise discriminant gain achieved by (P_s, c, f)."""
    table = gain_table(received_stats_of(problem, P_s, c, f))
    return min_gain(table)


def complete_true(problem: ProblemData, P_s: np.ndarray, c: np.ndarray,
                  f: np.ndarray) -> DesignVariables:
    """Extend (P_s, c, f) to a full lifted point by activating the remaining
    constraints: u = c²/R, v = Δμ²·S²/Z, α = min_p Σ_m v.

    Monotone completion: α equals the true minimum pair gain, and the result
    satisfies families (2)–(4) with equality wherever they bind.  Raises on a
    degenerate Z (needs N0·‖f‖² > 0 or some transmitted power).
    """
    P_s = np.asarray(P_s, float)
    c = np.asarray(c, float)
    f = np.asarray(f, complex)
    R = eval_R(f, problem.h)
    if np.any((c > 0) & (R <= 0)):
        raise InfeasibleError("zero effective antenna gain with c > 0")
    u = np.zeros_like(c)
    nz = c > 0
    u[nz] = c[nz] ** 2 / R[nz]
    Z = eval_Z(problem, P_s, c, f)
    if np.any(Z <= 0):
        raise InfeasibleError("degenerate received variance Z = 0")
    S2 = c.sum(axis=0) ** 2
    v = np.where(problem.mask, problem.dmu2 * (S2 / Z)[None, :], 0.0)
    totals = v.sum(axis=1)
    alpha = float(np.min(totals))
    return DesignVariables(P_s=P_s, c=c, f=f, u=u, v=v, alpha=alpha)


@dataclass(frozen=True)
class FeasibilityReport:
    """Signed residuals (≤ 0 is feasible) of the four constraint families plus
    the activity gaps the convergence analysis cares about."""

    energy: np.ndarray          # (K,)   E_used − E
    pair: np.ndarray            # (P,)   α − Σ_m v
    extended: np.ndarray        # (K,M)  max(c² − R·u, −R), the cone form
    variance: np.ndarray        # (P,M)  Z − Q, −inf on masked slots
    lemma2_gap: np.ndarray      # (K,M)  R·u − c²  (≥ 0 when feasible)
    lemma2_rel: np.ndarray      # (K,M)  gap / max(c², tiny)
    variance_gap: np.ndarray    # (P,M)  Q − Z on mask
    pair_gap: np.ndarray        # (P,)   Σ_m v − α
    max_violation: float
    P_s_positive: bool

    @property
    def feasible(self) -> bool:
        return self.max_violation <= 0.0 and self.P_s_positive

    def max_violation_at(self, tol: float) -> bool:
        return self.max_violation <= tol and self.P_s_positive


def feasibility_check(problem: ProblemData, dv: DesignVariables,
                      R: np.ndarray | None = None,
                      Q: np.ndarray | None = None) -> FeasibilityReport:
    """Evaluate all four families at a point.

    R and Q default to the exact functions; the surrogate machinery passes its
    linearized R̂ / Q̂ to check the inner (convex) problem instead.
    """
    if R is None:
        R = eval_R(dv.f, problem.h)
    if Q is None:
        Q = eval_Q(problem, dv.c, dv.v)
    energy = problem.energy_used_u(dv.P_s, dv.u) - problem.budget.E
    totals = dv.v.sum(axis=1)
    pair = dv.alpha - totals
    # cone form of the extended family: c² ≤ R·u together with R ≥ 0 (the
    # exact R is a squared magnitude, so the extra term only bites for the
    # linearized R̂, whose cone keeps the inner problem convex)
    extended = np.maximum(dv.c ** 2 - R * dv.u, -R)
    Z = eval_Z(problem, dv.P_s, dv.c, dv.f)
    variance = np.where(problem.mask, Z[None, :] - Q, -np.inf)

    gap = R * dv.u - dv.c ** 2
    rel = gap / np.maximum(dv.c ** 2, 1e-30)
    max_violation = max(
        float(np.max(energy)),
        float(np.max(pair)),
        float(np.max(extended)),
        float(np.max(variance[problem.mask])) if problem.mask.any() else -np.inf,
    )
    return FeasibilityReport(
        energy=energy, pair=pair, extended=extended, variance=variance,
        lemma2_gap=gap, lemma2_rel=rel,
        variance_gap=np.where(problem.mask, Q - Z[None, :], np.inf),
        pair_gap=totals - dv.alpha,
        max_violation=max_violation,
        P_s_positive=bool(np.all(dv.P_s > 0)),
    )
