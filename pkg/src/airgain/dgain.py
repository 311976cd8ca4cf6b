"""Discriminant-gain metrics.

The separability of two Gaussian class components is measured by their
symmetric Kullback–Leibler divergence.  For univariate components p = N(m1, s1²)
and q = N(m2, s2²):

    KL(p‖q) + KL(q‖p) = (s1² + Δ²)/(2 s2²) + (s2² + Δ²)/(2 s1²) − 1,   Δ = m1 − m2,

which for a shared variance s² collapses to Δ²/s².  Features are independent,
so the gain of a feature vector is the sum of per-feature gains.  With the
aggregated statistics of :func:`airgain.model.received_feature_stats` the
per-feature pair gain has the closed form

    G_{ℓℓ'}(m) = (mu_hat[ℓ,m] − mu_hat[ℓ',m])² / sigma_hat2[m].

Design criteria built on the table of all unordered pair gains: the minimum
pair gain (the max-min objective of the solver) and the average pair gain with
its 2/(L(L−1)) normalization (the objective of the per-element baseline).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import ReceivedFeatureStats

__all__ = [
    "PairGainTable",
    "pair_indices",
    "pairwise_gain_closed",
    "pairwise_gain_kl",
    "gain_table",
    "min_gain",
    "avg_gain",
]

# variances below this are treated as configuration bugs, not operating points
_VAR_FLOOR = 1e-300

# gains closer than this tie-break lexicographically in min_gain
_TIE_TOL = 1e-12


def pair_indices(L: int) -> np.ndarray:
    """All unordered class pairs (ℓ, ℓ′), ℓ < ℓ′, in lexicographic order.

    Shape (L(L−1)/2, 2).  Every pair-indexed array in this package uses this
    ordering.
    """
    if L < 2:
        raise ConfigError(f"need at least two classes, got L={L}")
    return np.array([(a, b) for a in range(L) for b in range(a + 1, L)], dtype=int)


@dataclass(frozen=True)
class PairGainTable:
    """Per-feature and total discriminant gains of all unordered class pairs.

    pairs[p] = (ℓ, ℓ′) with ℓ < ℓ′; per_feature[p, m] ≥ 0; total[p] = Σ_m.
    The table stores each pair once; symmetry is by construction.
    """

    pairs: np.ndarray         # (P, 2) int
    per_feature: np.ndarray   # (P, M)
    total: np.ndarray         # (P,)

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]

    def pair_label(self, p: int) -> str:
        a, b = self.pairs[p]
        return f"{a}-{b}"


def _check_var(sigma2) -> np.ndarray:
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= _VAR_FLOOR):
        raise ConfigError("variance is zero (or denormal); refusing to divide")
    return sigma2


def pairwise_gain_closed(stats: ReceivedFeatureStats, l: int, lp: int, m: int) -> float:
    """Closed-form per-feature pair gain (mu_hat difference squared over the
    shared variance)."""
    var = _check_var(stats.sigma_hat2[m])
    d = stats.mu_hat[l, m] - stats.mu_hat[lp, m]
    return float(d * d / var)


def pairwise_gain_kl(mu1: float, var1: float, mu2: float, var2: float) -> float:
    """Symmetric KL divergence of two univariate Gaussians (general form).

    Reduces to (Δmu)²/var for var1 = var2 = var.
    """
    var1 = float(_check_var(var1))
    var2 = float(_check_var(var2))
    d2 = (float(mu1) - float(mu2)) ** 2
    return 0.5 * (var1 + d2) / var2 + 0.5 * (var2 + d2) / var1 - 1.0


def gain_table(stats: ReceivedFeatureStats) -> PairGainTable:
    """Evaluate the closed-form gains for every unordered pair and feature."""
    if stats.L < 2:
        raise ConfigError("gain table needs at least two classes")
    var = _check_var(stats.sigma_hat2)              # (M,)
    pairs = pair_indices(stats.L)
    d = stats.mu_hat[pairs[:, 0], :] - stats.mu_hat[pairs[:, 1], :]   # (P, M)
    per_feature = d ** 2 / var[None, :]
    return PairGainTable(pairs=pairs, per_feature=per_feature,
                         total=per_feature.sum(axis=1))


def min_gain(table: PairGainTable) -> tuple[float, tuple[int, int]]:
    """Minimum total pair gain and its pair; ties break to the
    lexicographically smallest pair (the table is already in that order)."""
    totals = table.total
    best = float(np.min(totals))
    # first index within tie tolerance of the minimum
    p = int(np.flatnonzero(totals <= best + _TIE_TOL)[0])
    a, b = table.pairs[p]
    return best, (int(a), int(b))


def avg_gain(table: PairGainTable) -> float:
    """Average total pair gain: (2/(L(L−1)))·Σ_pairs Σ_m G — the per-pair mean,
    since the table holds each unordered pair exactly once."""
    return float(np.mean(table.total))
