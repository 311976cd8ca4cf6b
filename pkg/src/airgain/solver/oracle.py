"""Exhaustive grid search over tiny instances.

Used in tests as the global-optimality reference the iterative solver is
measured against.  Enumeration is only tractable because the scale freedom
(c, f) → (s·c, s·f) leaves every gain and every energy term unchanged:
each beamformer can be pinned to the unit sphere, so the grid runs over

    P_s[k]   sensing-power fractions of P_cap,
    f_m      unit-norm beams (angle-parameterized; a single point for N_r=1),
    c[k,m]   per-slot weight fractions g of the single-slot cap
             c̄ = √(R·avail/(T_c·X)), whose energy feasibility condition
             collapses to Σ_m g²[k,m] ≤ 1 independently of (P, f).

The transmit second moment X is read from the problem data — the same
frozen-reference convention the iterative solver uses — so both score the
identical problem.  The sensing-noise term σ_r²/P_s in the variance stays an
explicit function of the candidate P_s, exactly as in the constraint set.

Everything else (u, v, α) follows by completion.  Instances beyond the tiny
envelope, or grids enumerating more than `max_points` candidates, are
refused loudly rather than silently subsampled.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import OracleSizeError
from .problem import DesignVariables, ProblemData, complete_true, eval_R

__all__ = ["GridSpec", "brute_force_oracle", "power_grid"]

_MAX_K, _MAX_M, _MAX_NR, _MAX_L = 2, 2, 2, 3


@dataclass(frozen=True)
class GridSpec:
    """Grid resolution: points per sensing power, per weight fraction, and
    per beam angle; `max_points` bounds the total enumeration."""

    n_power: int = 16
    n_weight: int = 16
    n_beam: int = 8
    max_points: int = 5_000_000

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(n_power=factor * self.n_power,
                        n_weight=factor * self.n_weight,
                        n_beam=factor * self.n_beam,
                        max_points=self.max_points)


def power_grid(problem: ProblemData, grid: GridSpec) -> np.ndarray:
    """(n_power, K) sensing-power candidates: cell midpoints of (0, P_cap]."""
    frac = (np.arange(grid.n_power) + 0.5) / grid.n_power
    return frac[:, None] * problem.P_cap[None, :]


def _unit_beams(N_r: int, n_beam: int) -> list[np.ndarray]:
    if N_r == 1:
        return [np.ones(1, complex)]
    theta = np.linspace(0.0, np.pi / 2, n_beam)
    phi = np.linspace(0.0, 2 * np.pi, 2 * n_beam, endpoint=False)
    return [np.array([np.cos(t), np.sin(t) * np.exp(1j * p)])
            for t in theta for p in phi]


def _weight_fractions(K: int, M: int, n_weight: int) -> np.ndarray:
    """(n, K, M) fraction matrices with Σ_m g² ≤ 1 for every device."""
    g = np.linspace(0.0, 1.0, n_weight)
    combos = np.array(list(itertools.product(g, repeat=K * M)))
    combos = combos.reshape(-1, K, M)
    ok = np.all(np.sum(combos ** 2, axis=2) <= 1.0 + 1e-12, axis=1)
    return combos[ok]


def brute_force_oracle(problem: ProblemData,
                       grid: GridSpec = GridSpec()
                       ) -> tuple[DesignVariables, float]:
    """Grid-best design and its min pair gain.

    Exhaustive over the declared grid — the returned α is a certified lower
    bound on the instance optimum and an upper bound on what any point *on
    the grid* achieves.  Raises OracleSizeError beyond the tiny envelope
    (K, M, N_r, L ≤ 2, 2, 2, 3) or past `grid.max_points` candidates.
    """
    K, M, N_r, L = problem.K, problem.M, problem.N_r, problem.L
    if K > _MAX_K or M > _MAX_M or N_r > _MAX_NR or L > _MAX_L:
        raise OracleSizeError(
            f"instance (K={K}, M={M}, N_r={N_r}, L={L}) exceeds the oracle "
            f"envelope ({_MAX_K}, {_MAX_M}, {_MAX_NR}, {_MAX_L})")

    beams = _unit_beams(N_r, grid.n_beam)
    fracs = _weight_fractions(K, M, grid.n_weight)
    P_cand = power_grid(problem, grid)
    total = (grid.n_power ** K) * (len(beams) ** M) * len(fracs)
    if total > grid.max_points:
        raise OracleSizeError(
            f"grid enumerates {total} candidates, above max_points="
            f"{grid.max_points}; coarsen the grid or shrink the instance")

    sigma2 = problem.model.sigma2
    dmu2 = problem.dmu2                                     # (P, M)
    T_c = problem.budget.T_c
    budget = problem.budget
    X = problem.require_X()                                 # frozen, as in the solver

    best_alpha = -np.inf
    best = None
    for P_idx in itertools.product(range(grid.n_power), repeat=K):
        P_s = P_cand[list(P_idx), np.arange(K)]
        w = problem.noise_add(P_s)                          # (K,)
        avail = budget.E - budget.E_p - P_s * budget.T_s
        if np.any(avail < 0):
            continue
        for f_idx in itertools.product(range(len(beams)), repeat=M):
            f = np.stack([beams[i] for i in f_idx])         # (M, N_r), unit
            R = eval_R(f, problem.h)
            cbar = np.sqrt(R * avail[:, None] / (T_c * X))  # (K, M)
            c_all = fracs * cbar[None, :, :]                # (n, K, M)
            S = c_all.sum(axis=1)                           # (n, M)
            A2 = np.sum(c_all ** 2 * w[None, :, None], axis=1)
            Z = sigma2[None, :] * S ** 2 + A2 + problem.N0  # ‖f_m‖² = 1
            ratio = np.where(Z > 0, S ** 2 / np.where(Z > 0, Z, 1.0), 0.0)
            alpha = (ratio @ dmu2.T).min(axis=1)            # (n,)
            i = int(np.argmax(alpha))
            if alpha[i] > best_alpha:
                best_alpha = float(alpha[i])
                best = (P_s, c_all[i], f)

    P_s, c, f = best
    dv = complete_true(problem, P_s, c, f)
    return dv, dv.alpha
