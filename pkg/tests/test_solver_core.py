"""Problem evaluators, Taylor blocks and KKT machinery.

Oracles used here:
  * straight-line loop re-implementations of R, Z, Q (no shared code paths);
  * the algebraic identity R − R̂ = |g − g^t|² for the concave minorant;
  * central finite differences for every gradient block;
  * a one-dimensional exhaustive reduction of the K=M=1 instance whose
    optimum must be a KKT point of the full problem.
"""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from airgain.errors import ConfigError, InfeasibleError
from airgain.solver.kkt import Multipliers, fit_multipliers, kkt_residual
from airgain.solver.problem import (
    DesignVariables,
    complete_true,
    eval_Q,
    eval_R,
    eval_Z,
    feasibility_check,
    true_min_gain,
)
from airgain.solver.taylor import (
    TaylorReference,
    complete_surrogate,
    taylor_Q_hat,
    taylor_R_hat,
)

from conftest import make_problem, random_point


# ---------------------------------------------------------------------------
# evaluators vs. straight-line oracles
# ---------------------------------------------------------------------------

def _oracle_R(f, h):
    K, M, N_r = h.shape
    R = np.zeros((K, M))
    for k in range(K):
        for m in range(M):
            g = 0.0 + 0.0j
            for n in range(N_r):
                g += np.conj(f[m, n]) * h[k, m, n]
            R[k, m] = abs(g) ** 2
    return R


def _oracle_Z(problem, P_s, c, f):
    K, M = c.shape
    Z = np.zeros(M)
    for m in range(M):
        S = sum(c[k, m] for k in range(K))
        acc = problem.model.sigma2[m] * S ** 2
        for k in range(K):
            w = problem.profile.sigma_s2[k] + problem.profile.sigma_r2 / P_s[k]
            acc += c[k, m] ** 2 * w
        acc += problem.N0 * sum(abs(f[m, n]) ** 2 for n in range(f.shape[1]))
        Z[m] = acc
    return Z


def _oracle_Q(problem, c, v):
    P, M = v.shape
    Q = np.zeros((P, M))
    for p in range(P):
        for m in range(M):
            if problem.mask[p, m]:
                S = c[:, m].sum()
                Q[p, m] = problem.dmu2[p, m] * S ** 2 / v[p, m]
    return Q


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_evaluators_match_loop_oracles(seed):
    problem = make_problem(seed=seed)
    P_s, c, f = random_point(problem, seed=seed)
    R = eval_R(f, problem.h)
    assert np.allclose(R, _oracle_R(f, problem.h), rtol=1e-12, atol=0)
    Z = eval_Z(problem, P_s, c, f)
    assert np.allclose(Z, _oracle_Z(problem, P_s, c, f), rtol=1e-12, atol=0)
    dv = complete_true(problem, P_s, c, f)
    Q = eval_Q(problem, dv.c, dv.v)
    assert np.allclose(Q, _oracle_Q(problem, dv.c, dv.v), rtol=1e-12, atol=0)


def test_eval_Z_rejects_nonpositive_power(small_problem):
    P_s, c, f = random_point(small_problem)
    P_s = P_s.copy()
    P_s[0] = 0.0
    with pytest.raises(ConfigError):
        eval_Z(small_problem, P_s, c, f)


def test_eval_Q_rejects_nonpositive_v(small_problem):
    P_s, c, f = random_point(small_problem)
    dv = complete_true(small_problem, P_s, c, f)
    v = dv.v.copy()
    p, m = np.argwhere(small_problem.mask)[0]
    v[p, m] = 0.0
    with pytest.raises(ConfigError):
        eval_Q(small_problem, dv.c, v)


def test_design_variables_dict_round_trip(small_problem):
    P_s, c, f = random_point(small_problem)
    dv = complete_true(small_problem, P_s, c, f)
    back = DesignVariables.from_dict(dv.to_dict())
    assert np.array_equal(back.P_s, dv.P_s)
    assert np.array_equal(back.c, dv.c)
    assert np.array_equal(back.f, dv.f)
    assert np.array_equal(back.u, dv.u)
    assert np.array_equal(back.v, dv.v)
    assert back.alpha == dv.alpha


# ---------------------------------------------------------------------------
# true completion
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 3, 7])
def test_complete_true_is_feasible_and_tight(seed):
    problem = make_problem(seed=seed)
    P_s, c, f = random_point(problem, seed=seed)
    dv = complete_true(problem, P_s, c, f)
    rep = feasibility_check(problem, dv)
    assert rep.max_violation <= 1e-9 * (1 + abs(dv.alpha))
    # u and v activate their constraints exactly
    assert np.all(np.abs(rep.extended) <= 1e-12 * (1 + dv.c ** 2))
    act = rep.variance[problem.mask]
    Z = eval_Z(problem, dv.P_s, dv.c, dv.f)
    assert np.all(np.abs(act) <= 1e-9 * (1 + Z.max()))
    # alpha is the true minimum pair gain
    g, _ = true_min_gain(problem, P_s, c, f)
    assert dv.alpha == pytest.approx(g, rel=1e-12)
    # pair constraint tight at the argmin pair
    assert np.min(rep.pair_gap) == pytest.approx(0.0, abs=1e-12 * (1 + g))


def test_complete_true_rejects_zero_gain_with_power(small_problem):
    P_s, c, f = random_point(small_problem)
    f = np.zeros_like(f)   # every R[k,m] = 0 while c > 0
    with pytest.raises(InfeasibleError):
        complete_true(small_problem, P_s, c, f)


# ---------------------------------------------------------------------------
# feasibility_check localizes violations to the right family
# ---------------------------------------------------------------------------

def _replace(dv, **kw):
    d = dict(P_s=dv.P_s, c=dv.c, f=dv.f, u=dv.u, v=dv.v, alpha=dv.alpha)
    d.update(kw)
    return DesignVariables(**d)


def test_feasibility_check_flags_each_family(small_problem):
    problem = small_problem
    P_s, c, f = random_point(problem)
    dv = complete_true(problem, P_s, c, f)

    big_u = _replace(dv, u=dv.u + 100.0)
    rep = feasibility_check(problem, big_u)
    assert np.all(rep.energy > 0) and not rep.feasible

    bad_alpha = _replace(dv, alpha=dv.alpha + 10.0)
    rep = feasibility_check(problem, bad_alpha)
    worst = int(np.argmin(dv.v.sum(axis=1)))
    assert rep.pair[worst] > 0 and rep.max_violation > 0

    small_u = _replace(dv, u=0.25 * dv.u)
    rep = feasibility_check(problem, small_u)
    assert np.all(rep.extended[dv.c > 0] > 0)

    big_v = _replace(dv, v=np.where(problem.mask, 2 * dv.v, 0.0))
    rep = feasibility_check(problem, big_v)
    assert np.all(rep.variance[problem.mask] > 0)


# ---------------------------------------------------------------------------
# Taylor blocks: tangency, minorants, gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 4])
def test_taylor_tangency_at_reference(seed):
    problem = make_problem(seed=seed)
    P_s, c, f = random_point(problem, seed=seed)
    dv = complete_true(problem, P_s, c, f)
    ref = TaylorReference.build(problem, dv)
    R_hat = taylor_R_hat(ref, dv.f, problem.h)
    assert np.allclose(R_hat, eval_R(dv.f, problem.h), rtol=1e-12, atol=1e-15)
    Q_hat = taylor_Q_hat(ref, dv.c, dv.v, problem.mask)
    assert np.allclose(Q_hat, eval_Q(problem, dv.c, dv.v), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", list(range(6)))
def test_taylor_R_minorant_identity(seed):
    problem = make_problem(seed=seed)
    _, _, f_t = random_point(problem, seed=seed)
    dv = complete_true(problem, *random_point(problem, seed=seed))
    ref = TaylorReference.build(problem, dv)
    rng = np.random.default_rng(seed)
    f = rng.standard_normal(dv.f.shape) + 1j * rng.standard_normal(dv.f.shape)
    # gap identity: R − R̂ = |g(f) − g^t|², hence the minorant property
    g = np.einsum("mn,kmn->km", f.conj(), problem.h)
    gap = eval_R(f, problem.h) - taylor_R_hat(ref, f, problem.h)
    assert np.allclose(gap, np.abs(g - ref.g_t) ** 2, rtol=1e-10, atol=1e-12)
    assert np.all(gap >= -1e-12)


@pytest.mark.parametrize("seed", list(range(6)))
def test_taylor_Q_minorant(seed):
    problem = make_problem(seed=seed)
    dv = complete_true(problem, *random_point(problem, seed=seed))
    ref = TaylorReference.build(problem, dv)
    rng = np.random.default_rng(100 + seed)
    c = dv.c * rng.uniform(0.2, 2.0, dv.c.shape)
    v = np.where(problem.mask, dv.v * rng.uniform(0.2, 2.0, dv.v.shape), 0.0)
    Q = eval_Q(problem, c, v)
    Q_hat = taylor_Q_hat(ref, c, v, problem.mask)
    slack = (Q - Q_hat)[problem.mask]
    assert np.all(slack >= -1e-9 * (1 + np.abs(Q[problem.mask])))


def test_gradient_blocks_match_finite_differences():
    problem = make_problem(seed=11)
    dv = complete_true(problem, *random_point(problem, seed=11))
    ref = TaylorReference.build(problem, dv)
    eps = 1e-6

    # A against central differences of the true R in a random real direction
    rng = np.random.default_rng(5)
    d = rng.standard_normal(dv.f.shape) + 1j * rng.standard_normal(dv.f.shape)
    num = (eval_R(dv.f + eps * d, problem.h)
           - eval_R(dv.f - eps * d, problem.h)) / (2 * eps)
    # combined-gradient convention: directional derivative = Re(conj(d)·A)
    ana = np.einsum("mn,kmn->km", d.conj(), ref.A).real
    assert np.allclose(num, ana, rtol=1e-5, atol=1e-7)

    # B = ∂Q/∂v, C = ∂Q/∂S, against central differences of the true Q
    p, m = map(int, np.argwhere(problem.mask)[0])
    dvv = np.zeros_like(dv.v)
    dvv[p, m] = eps * dv.v[p, m]
    num_B = (eval_Q(problem, dv.c, dv.v + dvv)[p, m]
             - eval_Q(problem, dv.c, dv.v - dvv)[p, m]) / (2 * dvv[p, m])
    assert num_B == pytest.approx(ref.B[p, m], rel=1e-5)

    dc = np.zeros_like(dv.c)
    dc[0, m] = eps * (1 + dv.c[0, m])
    num_C = (eval_Q(problem, dv.c + dc, dv.v)[p, m]
             - eval_Q(problem, dv.c - dc, dv.v)[p, m]) / (2 * dc[0, m])
    assert num_C == pytest.approx(ref.C[p, m], rel=1e-5)

    # R̂ and Q̂ are exactly linear with those slopes
    dR = taylor_R_hat(ref, dv.f + d, problem.h) - taylor_R_hat(ref, dv.f, problem.h)
    assert np.allclose(dR, np.einsum("mn,kmn->km", d.conj(), ref.A).real,
                       rtol=1e-10, atol=1e-10)


def test_reference_requires_positive_v(small_problem):
    dv = complete_true(small_problem, *random_point(small_problem))
    bad = _replace(dv, v=np.zeros_like(dv.v))
    with pytest.raises(InfeasibleError):
        TaylorReference.build(small_problem, bad)


# ---------------------------------------------------------------------------
# surrogate completion
# ---------------------------------------------------------------------------

def test_complete_surrogate_fixes_reference(small_problem):
    dv = complete_true(small_problem, *random_point(small_problem))
    ref = TaylorReference.build(small_problem, dv)
    out = complete_surrogate(small_problem, ref, dv.P_s, dv.c, dv.f)
    assert np.allclose(out.P_s, dv.P_s, rtol=1e-12)
    assert np.allclose(out.c, dv.c, rtol=1e-12)
    assert np.allclose(out.u, dv.u, rtol=1e-9)
    assert np.allclose(out.v[small_problem.mask], dv.v[small_problem.mask],
                       rtol=1e-9)
    assert out.alpha == pytest.approx(dv.alpha, rel=1e-9)


@pytest.mark.parametrize("seed", list(range(5)))
def test_complete_surrogate_feasible_both_ways(seed):
    """Surrogate completions satisfy the inner problem and, by the minorant
    property, the true problem too."""
    problem = make_problem(seed=seed)
    dv = complete_true(problem, *random_point(problem, seed=seed, budget_frac=0.6))
    ref = TaylorReference.build(problem, dv)
    rng = np.random.default_rng(300 + seed)
    P_s = dv.P_s * rng.uniform(0.5, 1.5, dv.P_s.shape)
    c = dv.c * rng.uniform(0.5, 1.4, dv.c.shape)
    f = dv.f + 0.2 * (rng.standard_normal(dv.f.shape)
                      + 1j * rng.standard_normal(dv.f.shape))
    out = complete_surrogate(problem, ref, P_s, c, f)

    R_hat = taylor_R_hat(ref, out.f, problem.h)
    Q_hat = taylor_Q_hat(ref, out.c, out.v, problem.mask)
    rep_inner = feasibility_check(problem, out, R=R_hat, Q=Q_hat)
    scale = 1 + float(np.max(np.abs(problem.budget.E)))
    assert rep_inner.max_violation <= 1e-9 * scale

    rep_true = feasibility_check(problem, out)
    assert rep_true.max_violation <= 1e-9 * scale


def test_complete_surrogate_energy_repair(small_problem):
    problem = small_problem
    dv = complete_true(problem, *random_point(problem))
    ref = TaylorReference.build(problem, dv)
    out = complete_surrogate(problem, ref, dv.P_s, 50.0 * dv.c, dv.f)
    used = problem.energy_used_u(out.P_s, out.u)
    assert np.all(used <= problem.budget.E + 1e-9)
    # repair scales per device: the aggressive c shrank back to the budget
    assert np.all(out.c <= 50.0 * dv.c + 1e-12)


def test_complete_surrogate_recovers_from_negative_gain(small_problem):
    """f = −f^t gives R̂ = −3R < 0 everywhere; the completion must blend back
    into the cone R̂ ≥ 0 and still return a surrogate-feasible point."""
    problem = small_problem
    dv = complete_true(problem, *random_point(problem))
    ref = TaylorReference.build(problem, dv)
    out = complete_surrogate(problem, ref, dv.P_s, dv.c, -dv.f)
    R_hat = taylor_R_hat(ref, out.f, problem.h)
    assert np.all(R_hat >= 0.0)
    assert np.all(out.c[R_hat <= 0] == 0.0)
    Q_hat = taylor_Q_hat(ref, out.c, out.v, problem.mask)
    rep = feasibility_check(problem, out, R=R_hat, Q=Q_hat)
    assert rep.max_violation <= 1e-9 * (1 + float(np.max(problem.budget.E)))
    # it did not jump all the way to −f^t
    assert np.vdot(out.f, dv.f).real > 0


# ---------------------------------------------------------------------------
# KKT residual and multiplier recovery
# ---------------------------------------------------------------------------

def _one_dim_instance(seed=0, E=6.0):
    return make_problem(K=1, M=1, L=2, N_r=1, seed=seed, E=E, spread=1.5)


def _solve_one_dim(problem):
    """Exhaustive 1-D oracle: with K = M = 1 and energy met with equality,
    the whole design reduces to the sensing power split."""
    R = float(eval_R(np.ones((1, 1), complex), problem.h)[0, 0])
    X = float(problem.require_X()[0, 0])
    E_net = float(problem.budget.E[0] - problem.budget.E_p[0])
    T_s = float(problem.budget.T_s[0])
    T_c = float(problem.budget.T_c)
    dmu2 = float(problem.dmu2[0, 0])
    s2 = float(problem.model.sigma2[0])
    N0 = problem.N0

    def phi(P):     # c² at energy equality
        return (E_net - T_s * P) * R / (T_c * X)

    def gain(P):
        w = problem.profile.sigma_s2[0] + problem.profile.sigma_r2 / P
        cc = phi(P)
        return dmu2 * cc / (cc * (s2 + w) + N0)

    cap = float(problem.P_cap[0])
    res = minimize_scalar(lambda P: -gain(P), bounds=(1e-9 * cap, cap * (1 - 1e-12)),
                          method="bounded", options={"xatol": 1e-13 * cap})
    P_star = float(res.x)
    c = np.array([[np.sqrt(phi(P_star))]])
    f = np.ones((1, 1), complex)
    return np.array([P_star]), c, f


def test_fit_multipliers_certifies_one_dim_optimum():
    problem = _one_dim_instance(seed=2)
    P_s, c, f = _solve_one_dim(problem)
    dv = complete_true(problem, P_s, c, f)
    mults = fit_multipliers(problem, dv)
    rep = kkt_residual(problem, dv, mults)
    assert rep.feasibility <= 1e-9
    assert rep.stationarity <= 1e-5
    assert rep.comp_slack <= 1e-6
    assert rep.gamma_sum == pytest.approx(1.0, abs=1e-5)

    # the same point certifies against the surrogate expanded at itself
    ref = TaylorReference.build(problem, dv)
    mults_s = fit_multipliers(problem, dv, ref=ref)
    rep_s = kkt_residual(problem, dv, mults_s, ref=ref)
    assert rep_s.overall <= 1e-5


def test_kkt_residual_large_away_from_optimum():
    problem = _one_dim_instance(seed=2)
    P_s, c, f = _solve_one_dim(problem)
    # same energy split but sensing power far off the optimum
    P_bad = np.array([0.05 * problem.P_cap[0]])
    R = float(eval_R(f, problem.h)[0, 0])
    X = float(problem.require_X()[0, 0])
    cc = ((float(problem.budget.E[0] - problem.budget.E_p[0])
           - float(problem.budget.T_s[0]) * P_bad[0])
          * R / (float(problem.budget.T_c) * X))
    dv = complete_true(problem, P_bad, np.array([[np.sqrt(cc)]]), f)
    mults = fit_multipliers(problem, dv)
    rep = kkt_residual(problem, dv, mults)
    assert rep.overall > 1e-3


def test_multipliers_zeros_shapes(small_problem):
    m = Multipliers.zeros(small_problem)
    assert m.beta.shape == (small_problem.K,)
    assert m.gamma.shape == (small_problem.n_pairs,)
    assert m.theta.shape == (small_problem.K, small_problem.M)
    assert m.lam.shape == (small_problem.n_pairs, small_problem.M)
    assert all(v > 0 for v in m.eta0.values())
