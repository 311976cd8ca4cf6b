"""Inner-solve contract tests.

The inner problem is convex, so any point passing the KKT gate is globally
optimal for it — the certificate is its own oracle.  These tests lean on
that, plus cross-route agreement (the ascent can never beat a certified
conic optimum) and the failure modes that must stay loud.
"""

import dataclasses

import numpy as np
import pytest

from airgain.errors import InfeasibleError
from airgain.solver.inner import solve_inner
from airgain.solver.kkt import fit_multipliers, kkt_residual
from airgain.solver.problem import complete_true, feasibility_check
from airgain.solver.taylor import (
    TaylorReference,
    complete_surrogate,
    taylor_Q_hat,
    taylor_R_hat,
)

from conftest import make_problem, random_point


def _reference(seed, **kw):
    problem = make_problem(seed=seed, **kw)
    dv = complete_true(problem, *random_point(problem, seed=seed))
    return problem, TaylorReference.build(problem, dv)


def _surrogate_feasible(problem, ref, dv, tol):
    rep = feasibility_check(problem, dv,
                            R=taylor_R_hat(ref, dv.f, problem.h),
                            Q=taylor_Q_hat(ref, dv.c, dv.v, problem.mask))
    return rep.max_violation <= tol


@pytest.mark.parametrize("seed", list(range(6)))
def test_certified_feasible_and_monotone(seed):
    problem, ref = _reference(seed)
    out, mults, trace = solve_inner(problem, ref, tol=1e-4)
    assert not trace.diverged
    rep = kkt_residual(problem, out, mults, ref=ref)
    assert rep.overall <= 1e-4
    scale = 1 + float(np.max(problem.budget.E))
    assert _surrogate_feasible(problem, ref, out, 1e-7 * scale)
    # never worse than the expansion point
    assert out.alpha >= ref.vars.alpha - 1e-9 * (1 + abs(ref.vars.alpha))
    assert trace.is_monotone()


def test_alpha_equals_min_pair_total():
    problem, ref = _reference(2)
    out, _, _ = solve_inner(problem, ref)
    assert out.alpha == pytest.approx(float(np.min(out.v.sum(axis=1))),
                                      rel=1e-12)


@pytest.mark.parametrize("seed", [3, 4])
def test_degenerate_corner_instances_certify(seed):
    """Seeds whose optimum rides a v* = 0 corner (3) or carries a slot with
    tiny curvature |B| (4) — both once stalled the certificate."""
    problem, ref = _reference(seed)
    out, mults, trace = solve_inner(problem, ref, tol=1e-4)
    assert not trace.diverged
    assert kkt_residual(problem, out, mults, ref=ref).overall <= 1e-4


def test_larger_shape_certifies():
    problem, ref = _reference(9, K=3, M=6, L=4, N_r=8)
    out, mults, trace = solve_inner(problem, ref, tol=1e-4)
    assert not trace.diverged
    assert kkt_residual(problem, out, mults, ref=ref).overall <= 1e-4


def test_dual_route_never_beats_certified_optimum():
    """The ascent works on the same feasible set; beating the certified conic
    optimum would mean it escaped the cone R̂ ≥ 0 (a bug this guards)."""
    problem, ref = _reference(9, K=3, M=6, L=4, N_r=8)
    star, _, trace = solve_inner(problem, ref, tol=1e-4)
    assert not trace.diverged
    dual, _, _ = solve_inner(problem, ref, tol=1e-4, max_iters=120,
                             route="dual")
    assert dual.alpha <= star.alpha + 1e-6 * (1 + abs(star.alpha))


def test_dual_route_returns_feasible_monotone_point():
    problem, ref = _reference(1)
    out, _, trace = solve_inner(problem, ref, tol=1e-4, max_iters=40,
                                route="dual")
    scale = 1 + float(np.max(problem.budget.E))
    assert _surrogate_feasible(problem, ref, out, 1e-7 * scale)
    assert out.alpha >= ref.vars.alpha - 1e-9 * (1 + abs(ref.vars.alpha))
    assert trace.route == "dual"


def test_diverged_flag_when_budget_exhausted():
    problem, ref = _reference(0)
    out, _, trace = solve_inner(problem, ref, tol=1e-12, max_iters=2,
                                route="dual")
    # tol is unreachable: the flag must say so, the point must still be usable
    assert trace.diverged
    scale = 1 + float(np.max(problem.budget.E))
    assert _surrogate_feasible(problem, ref, out, 1e-7 * scale)


def test_silenced_device_is_rejected():
    """Zeroing one device's weights gives a feasible but suboptimal point;
    one-sided entry rows must keep it from certifying."""
    problem, ref = _reference(5)
    c = ref.vars.c.copy()
    c[0] = 0.0
    pinned = complete_surrogate(problem, ref, ref.vars.P_s, c, ref.vars.f)
    mults = fit_multipliers(problem, pinned, ref=ref)
    rep = kkt_residual(problem, pinned, mults, ref=ref)
    assert rep.overall > 1e-2


def test_infeasible_reference_raises():
    problem, ref = _reference(0)
    bad_vars = dataclasses.replace(ref.vars, u=ref.vars.u * 50.0)
    bad = dataclasses.replace(ref, vars=bad_vars)
    with pytest.raises(InfeasibleError):
        solve_inner(problem, bad)


def test_argument_validation():
    problem, ref = _reference(0)
    with pytest.raises(ValueError):
        solve_inner(problem, ref, tol=0.0)
    with pytest.raises(ValueError):
        solve_inner(problem, ref, max_iters=0)
    with pytest.raises(ValueError):
        solve_inner(problem, ref, route="newton")


def test_trace_records_lagged_X_convention():
    problem, ref = _reference(0)
    _, _, trace = solve_inner(problem, ref)
    assert "lagged_X" in trace.notes
    assert trace.notes["X_ref_power"] == pytest.approx(
        list(problem.X_ref_power))
