"""Shared instance builders for the solver and harness tests."""

import numpy as np
import pytest

from airgain.channel import ChannelState, EnergyBudget, Topology, realize_channel
from airgain.model import MixtureModel, SensingProfile
from airgain.solver.problem import ProblemData


def make_model(M=4, L=3, seed=0, spread=2.0):
    rng = np.random.default_rng(seed)
    mu = spread * rng.standard_normal((L, M))
    sigma2 = 0.3 + rng.random(M)
    return MixtureModel(mu=mu, sigma2=sigma2)


def make_problem(K=2, M=4, L=3, N_r=3, seed=0, E=10.0, spread=2.0,
                 sigma_s2=0.2, sigma_r2=0.2, P_ref=None):
    """Small random instance with X frozen at P_ref (default: half the cap)."""
    rng = np.random.default_rng(seed + 1000)
    model = make_model(M=M, L=L, seed=seed, spread=spread)
    profile = SensingProfile.homogeneous(K=K, sigma_s2=sigma_s2,
                                         sigma_r2=sigma_r2, T_s=1.0)
    topo = Topology.draw(rng, K=K, N_r=N_r, R=0.45)
    channel = realize_channel(rng, topo, M=M)
    budget = EnergyBudget.homogeneous(K=K, E=E, E_p=0.1, T_s=1.0, T_c=1.0)
    problem = ProblemData.build(model, profile, channel, budget)
    if P_ref is None:
        P_ref = 0.5 * problem.P_cap
    return problem.with_X(np.asarray(P_ref, float) * np.ones(K))


def random_point(problem, seed=0, power_frac=0.3, budget_frac=0.8):
    """Feasible (P_s, c, f) with per-device energy use ≈ budget_frac of E."""
    rng = np.random.default_rng(seed + 2000)
    K, M, N_r = problem.K, problem.M, problem.N_r
    P_s = power_frac * problem.P_cap * (0.5 + rng.random(K))
    P_s = np.minimum(P_s, 0.9 * problem.P_cap)
    f = rng.standard_normal((M, N_r)) + 1j * rng.standard_normal((M, N_r))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    from airgain.solver.problem import eval_R
    R = eval_R(f, problem.h)
    X = problem.require_X()
    avail = problem.budget.E - problem.budget.E_p - P_s * problem.budget.T_s
    # uniform c with the communication energy split evenly across features
    share = budget_frac * avail[:, None] / (M * problem.budget.T_c)
    c = np.sqrt(share * R / X)
    c *= 0.5 + rng.random((K, M))
    # rescale so no device exceeds budget_frac of its available energy
    comm = problem.budget.T_c * np.sum(c ** 2 * X / R, axis=1)
    scale = np.sqrt(budget_frac * avail / comm)
    c *= np.minimum(scale, 1.0)[:, None]
    return P_s, c, f


@pytest.fixture
def small_problem():
    return make_problem()
