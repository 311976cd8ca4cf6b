"""Reference schemes the joint design is compared against.

Both draw the sensing power at random instead of optimizing it — neither
treats sensing as part of the design.

`baseline_avg_dg` is the separate per-element design: each feature element
gets an even 1/M share of the leftover energy and its (c, f) maximize that
element's *average* pair gain, independently of the others.  Per element
every pair gain is Δμ²·S²/Z with the same ratio S²/Z, so average and
minimum coincide up to a constant and the element problem is

    minimize  Z = σ² + Σ_k c²·w + N0·‖f‖²   over  c ≥ 0, f,
    subject to Σ_k c = 1,  T_c·c²·X/R(f) ≤ share,

after pinning S = 1 by the usual scale freedom (c, f) → (s·c, s·f).  The
only nonconvexity is R = |f^H h|² in the cap, handled by the same concave
minorant the joint solver uses: R̂ = 2Re[g·conj(g_t)] − |g_t|² ≤ R, which
makes each round a small second-order-cone program and the Z sequence
nonincreasing (the expansion point stays feasible: R̂ = R there).

`baseline_naive` skips optimization entirely: a fixed all-ones beamformer
and uniform weights scaled to exhaust each device's remaining budget.
"""

from __future__ import annotations

import warnings

import numpy as np

from .problem import DesignVariables, ProblemData, complete_true, eval_R

__all__ = ["baseline_avg_dg", "baseline_naive", "draw_sensing_power"]

# an element whose class centroids all coincide contributes nothing; skip it
_D_FLOOR = 1e-30

_ELEM_CACHE: dict = {}


def draw_sensing_power(problem: ProblemData,
                       rng: np.random.Generator) -> np.ndarray:
    """Uniform draw over each device's energy-feasible range (0, P_cap)."""
    lo, hi = problem.P_min, problem.P_cap
    return lo + rng.random(problem.K) * (hi - lo)


def _elem_template(K: int, N_r: int):
    """Compiled per-element round: min Z at S = 1 under linearized caps.

    All instance data enters through parameters; products of parameters are
    folded on the numpy side (atr/ati/tm2 below) so the program stays in the
    disciplined-parametrized class and repeat solves skip canonicalization.
    """
    import cvxpy as cp

    key = (K, N_r)
    if key in _ELEM_CACHE:
        return _ELEM_CACHE[key]
    c = cp.Variable(K, nonneg=True)
    fr = cp.Variable(N_r)
    fi = cp.Variable(N_r)
    prm = {
        # rows of Br/Bi are 2·tau·Re/Im parts of conj(g_t)·h, folded so the
        # cap is a single parameter-matrix × variable product
        "Br": cp.Parameter((K, N_r)), "Bi": cp.Parameter((K, N_r)),
        "tm2": cp.Parameter(K),          # tau·|g_t|², folded
        "w": cp.Parameter(K, nonneg=True),
        "N0": cp.Parameter(nonneg=True),
    }
    cap = prm["Br"] @ fr + prm["Bi"] @ fi - prm["tm2"]
    cons = [cp.sum(c) == 1, cp.square(c) <= cap]
    obj = cp.Minimize(cp.sum(cp.multiply(prm["w"], cp.square(c)))
                      + prm["N0"] * (cp.sum_squares(fr) + cp.sum_squares(fi)))
    prob = cp.Problem(obj, cons)
    assert prob.is_dcp(dpp=True)
    tpl = {"prob": prob, "prm": prm, "c": c, "fr": fr, "fi": fi, "cold": True}
    _ELEM_CACHE[key] = tpl
    return tpl


def _optimize_element(h: np.ndarray, w: np.ndarray, tau: np.ndarray,
                      N0: float, f0: np.ndarray,
                      max_rounds: int = 60, tol: float = 1e-9):
    """Maximize S²/Z for one element: returns (c, f) with S = 1.

    tau[k] = share_k/(T_c·X_k) converts the energy share into the received
    cap c² ≤ tau·R.  Any positive share admits S = 1 (scaling f up relaxes
    the caps at the price of channel noise), so the start blows f0 up until
    the caps sum to 2 and splits c proportionally.
    """
    import cvxpy as cp

    K, N_r = h.shape
    R0 = np.abs(h @ f0.conj()) ** 2
    scale = 2.0 / np.sum(np.sqrt(tau * R0))
    f = np.sqrt(scale) * f0
    cmax = np.sqrt(tau * R0 * scale)
    c = cmax / cmax.sum()

    tpl = _elem_template(K, N_r)
    prm = tpl["prm"]
    prm["w"].value = w
    prm["N0"].value = float(N0)

    Z = float(c @ (w * c) + N0 * np.vdot(f, f).real)
    for _ in range(max_rounds):
        g_t = h @ f.conj()
        B = 2.0 * tau[:, None] * (g_t.conj()[:, None] * h)
        prm["Br"].value = B.real
        prm["Bi"].value = B.imag
        prm["tm2"].value = tau * np.abs(g_t) ** 2
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                if tpl.pop("cold", False):
                    # first solve canonicalizes from scratch, later ones map
                    # parameters through the compiled program; burn one so
                    # every answered solve takes the same (reproducible) path
                    tpl["prob"].solve(solver=cp.CLARABEL)
                tpl["prob"].solve(solver=cp.CLARABEL)
        except cp.error.SolverError:
            break
        if tpl["c"].value is None:
            break
        c_new = np.maximum(np.asarray(tpl["c"].value, float), 0.0)
        s = c_new.sum()
        if s <= 0:
            break
        c_new = c_new / s
        f_new = np.asarray(tpl["fr"].value, float) + 1j * np.asarray(tpl["fi"].value, float)
        # keep only true-cap-feasible improvements (minorant guarantees both,
        # up to solver dust — rescale f a hair if the cap is grazed)
        R_new = np.abs(h @ f_new.conj()) ** 2
        need = c_new ** 2 / np.maximum(tau, 1e-300)
        over = need > R_new
        if np.any(over):
            bump = np.sqrt(np.max(need[over] / np.maximum(R_new[over], 1e-300)))
            f_new = f_new * bump
        Z_new = float(c_new @ (w * c_new) + N0 * np.vdot(f_new, f_new).real)
        if Z_new >= Z * (1 - tol):
            if Z_new < Z:
                c, f, Z = c_new, f_new, Z_new
            break
        c, f, Z = c_new, f_new, Z_new
    return c, f


def _dominant_beam(problem: ProblemData, m: int) -> np.ndarray:
    Cm = np.einsum("kn,kj->nj", problem.h[:, m, :], problem.h[:, m, :].conj())
    _, vecs = np.linalg.eigh(Cm)
    return vecs[:, -1]


def baseline_avg_dg(problem: ProblemData,
                    rng: np.random.Generator) -> DesignVariables:
    """Per-element separate design under an even energy split.

    Sensing power is drawn uniformly within its feasible range; each feature
    element then independently maximizes its average pair gain with 1/M of
    every device's leftover energy.  No resource moves between elements and
    no element sees the min-pair objective — the two degrees of freedom the
    joint design adds.
    """
    K, M = problem.K, problem.M
    P_s = draw_sensing_power(problem, rng)
    prob = problem.with_X(P_s)
    X = prob.require_X()
    avail = prob.budget.E - prob.budget.E_p - P_s * prob.budget.T_s
    share = avail / M
    w = prob.noise_add(P_s)

    c = np.zeros((K, M))
    f = np.empty((M, problem.N_r), complex)
    for m in range(M):
        f[m] = _dominant_beam(problem, m)
        if np.mean(problem.dmu2[:, m]) <= _D_FLOOR:
            continue                     # element carries no class information
        tau = share / (prob.budget.T_c * X[:, m])
        c[:, m], f[m] = _optimize_element(problem.h[:, m, :], w, tau,
                                          problem.N0, f[m])
    return complete_true(prob, P_s, c, f)


def baseline_naive(problem: ProblemData,
                   rng: np.random.Generator) -> DesignVariables:
    """Fixed-beam maximum-power scheme.

    Sensing power drawn uniformly; f_m is the constant all-ones/√N_r beam;
    weights are uniform per device and scaled so each device's budget is
    exhausted exactly.
    """
    K, M = problem.K, problem.M
    P_s = draw_sensing_power(problem, rng)
    prob = problem.with_X(P_s)
    X = prob.require_X()

    f = np.full((M, problem.N_r), 1.0 / np.sqrt(problem.N_r), complex)
    R = eval_R(f, problem.h)
    avail = prob.budget.E - prob.budget.E_p - P_s * prob.budget.T_s
    live = R > 1e-12 * R.max(initial=0.0)
    cost = prob.budget.T_c * np.sum(
        np.where(live, X / np.where(live, R, 1.0), 0.0), axis=1)
    s = np.sqrt(avail / np.where(cost > 0, cost, 1.0))
    c = np.where(live, np.where(cost > 0, s, 0.0)[:, None], 0.0)
    return complete_true(prob, P_s, c, f)
