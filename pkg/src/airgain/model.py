"""Statistical feature model.

The ground truth is an M-dimensional Gaussian mixture with L equally likely
classes: feature m of class ℓ is N(mu[ℓ,m], sigma2[m]) with a per-feature
variance shared by all classes, and features independent across m.

Each device k observes the ground-truth feature vector through its own sensing
chain, which adds zero-mean Gaussian clutter residue (variance sigma_s2[k])
and sensing noise whose post-normalization variance is sigma_r2 / P_s[k],
where P_s[k] is the sensing transmit power.  Averaging Gaussians keeps things
Gaussian, so the local feature of device k at feature m is distributed as

    x_k(m) | class ℓ  ~  N(mu[ℓ,m], sigma2[m] + sigma_s2[k] + sigma_r2/P_s[k])

with the ground-truth realization shared across devices and the clutter/noise
independent per device.

After over-the-air aggregation with received-power targets c[k,m] and receive
beamformer f_m (see :mod:`airgain.channel`), the fused estimate of feature m
is again a Gaussian mixture with

    mu_hat[ℓ,m]   = (Σ_k c[k,m]) · mu[ℓ,m]
    sigma_hat2[m] = sigma2[m]·(Σ_k c[k,m])²
                    + Σ_k c[k,m]²·(sigma_s2[k] + sigma_r2/P_s[k])
                    + N0·‖f_m‖²

which this module evaluates in closed form alongside a Monte-Carlo sampler
used by the accuracy harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "MixtureModel",
    "SensingProfile",
    "LocalFeatureStats",
    "ReceivedFeatureStats",
    "SecondMoment",
    "local_feature_stats",
    "received_feature_stats",
    "local_second_moment",
    "sample_local_features",
]


@dataclass(frozen=True)
class MixtureModel:
    """Ground-truth Gaussian mixture: L classes × M features, uniform prior.

    mu has shape (L, M); sigma2 has shape (M,) and is shared by all classes.
    """

    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma2 = np.asarray(self.sigma2, dtype=float)
        if mu.ndim != 2:
            raise ConfigError(f"centroid matrix must be L×M, got shape {mu.shape}")
        if sigma2.shape != (mu.shape[1],):
            raise ConfigError(
                f"sigma2 must have shape ({mu.shape[1]},), got {sigma2.shape}"
            )
        if not np.all(sigma2 > 0):
            raise ConfigError("per-feature variances must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def L(self) -> int:
        return self.mu.shape[0]

    @property
    def M(self) -> int:
        return self.mu.shape[1]

    @property
    def prior(self) -> np.ndarray:
        """Uniform class prior, 1/L each."""
        return np.full(self.L, 1.0 / self.L)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma2": self.sigma2.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureModel":
        return cls(mu=np.asarray(d["mu"], float), sigma2=np.asarray(d["sigma2"], float))


@dataclass(frozen=True)
class SensingProfile:
    """Per-device sensing-stage parameters.

    sigma_s2[k]  clutter-residue variance of device k
    mu_s[k]      pre-estimated clutter mean (subtracted before transmission;
                 kept here so a nonzero residual bias can be injected in tests)
    sigma_r2     sensing-noise variance, shared by all devices
    T_s[k]       sensing duration in seconds (enters the energy budget)
    """

    sigma_s2: np.ndarray
    mu_s: np.ndarray
    sigma_r2: float
    T_s: np.ndarray

    def __post_init__(self):
        sigma_s2 = np.atleast_1d(np.asarray(self.sigma_s2, dtype=float))
        mu_s = np.atleast_1d(np.asarray(self.mu_s, dtype=float))
        T_s = np.atleast_1d(np.asarray(self.T_s, dtype=float))
        if not (sigma_s2.shape == mu_s.shape == T_s.shape):
            raise ConfigError("sigma_s2, mu_s and T_s must share shape (K,)")
        if np.any(sigma_s2 < 0):
            raise ConfigError("clutter variances must be nonnegative")
        if not self.sigma_r2 > 0:
            raise ConfigError("sensing-noise variance must be positive")
        if np.any(T_s <= 0):
            raise ConfigError("sensing times must be positive")
        object.__setattr__(self, "sigma_s2", sigma_s2)
        object.__setattr__(self, "mu_s", mu_s)
        object.__setattr__(self, "T_s", T_s)

    @property
    def K(self) -> int:
        return self.sigma_s2.shape[0]

    @classmethod
    def homogeneous(cls, K: int, sigma_s2: float, sigma_r2: float,
                    T_s: float = 1.0, mu_s: float = 0.0) -> "SensingProfile":
        """All-devices-identical profile, the usual experiment setup."""
        return cls(
            sigma_s2=np.full(K, sigma_s2),
            mu_s=np.full(K, mu_s),
            sigma_r2=sigma_r2,
            T_s=np.full(K, T_s),
        )


def sensing_noise_var(profile: SensingProfile, P_s: np.ndarray) -> np.ndarray:
    """Per-device variance added by sensing: sigma_s2[k] + sigma_r2/P_s[k]."""
    P_s = np.asarray(P_s, dtype=float)
    return profile.sigma_s2 + profile.sigma_r2 / P_s


@dataclass(frozen=True)
class LocalFeatureStats:
    """Distribution of device-local features: centroids unchanged, variance
    inflated by the sensing chain.  var has shape (K, M)."""

    mu: np.ndarray          # (L, M) — identical to the ground-truth centroids
    var: np.ndarray         # (K, M)
    P_s: np.ndarray         # (K,) sensing power the variances were evaluated at

    @property
    def K(self) -> int:
        return self.var.shape[0]


@dataclass(frozen=True)
class ReceivedFeatureStats:
    """Post-aggregation mixture statistics.

    All L class components share the same per-feature variance sigma_hat2[m];
    only the means differ.  shared_variance is kept explicit because the
    discriminant-gain closed form relies on it.
    """

    mu_hat: np.ndarray      # (L, M)
    sigma_hat2: np.ndarray  # (M,)
    shared_variance: bool = field(default=True)

    @property
    def L(self) -> int:
        return self.mu_hat.shape[0]

    @property
    def M(self) -> int:
        return self.mu_hat.shape[1]


def _check_positive_power(P_s: np.ndarray, K: int) -> np.ndarray:
    P_s = np.atleast_1d(np.asarray(P_s, dtype=float))
    if P_s.shape != (K,):
        raise ConfigError(f"P_s must have shape ({K},), got {P_s.shape}")
    bad = np.flatnonzero(~(P_s > 0))
    if bad.size:
        raise ConfigError(f"sensing power must be positive; device {bad[0]} has "
                          f"P_s={P_s[bad[0]]!r}")
    return P_s


def local_feature_stats(model: MixtureModel, profile: SensingProfile,
                        P_s: np.ndarray) -> LocalFeatureStats:
    """Distribution of the local feature elements of every device.

    Variance per (k, m) is sigma2[m] + sigma_s2[k] + sigma_r2/P_s[k]; the
    centroids are untouched by the (zero-mean) sensing impairments.
    """
    P_s = _check_positive_power(P_s, profile.K)
    add = sensing_noise_var(profile, P_s)          # (K,)
    var = model.sigma2[None, :] + add[:, None]     # (K, M)
    return LocalFeatureStats(mu=model.mu, var=var, P_s=P_s)


def received_feature_stats(model: MixtureModel, profile: SensingProfile,
                           P_s: np.ndarray, c: np.ndarray, f: np.ndarray,
                           N0: float) -> ReceivedFeatureStats:
    """Mixture statistics of the aggregated estimate x̂.

    c is the (K, M) matrix of nonnegative received-power targets, f the
    (M, N_r) receive beamformers.  The variance combines three terms: the
    ground-truth spread scaled by (Σ_k c)², the per-device sensing impairments
    scaled by c², and the channel-noise term N0·‖f_m‖².
    """
    P_s = _check_positive_power(P_s, profile.K)
    c = np.asarray(c, dtype=float)
    f = np.asarray(f, dtype=complex)
    if c.shape != (profile.K, model.M):
        raise ConfigError(f"c must have shape ({profile.K}, {model.M}), got {c.shape}")
    if f.ndim != 2 or f.shape[0] != model.M:
        raise ConfigError(f"f must have shape ({model.M}, N_r), got {f.shape}")
    if N0 < 0:
        raise ConfigError("noise power N0 must be nonnegative")

    csum = c.sum(axis=0)                                   # (M,)
    add = sensing_noise_var(profile, P_s)                  # (K,)
    fnorm2 = np.sum(np.abs(f) ** 2, axis=1)                # (M,)
    sigma_hat2 = (model.sigma2 * csum ** 2
                  + np.sum(c ** 2 * add[:, None], axis=0)
                  + N0 * fnorm2)
    mu_hat = model.mu * csum[None, :]
    return ReceivedFeatureStats(mu_hat=mu_hat, sigma_hat2=sigma_hat2)


@dataclass(frozen=True)
class SecondMoment:
    """E[x_k(m)²] of the transmitted local features, with the sensing power it
    was evaluated at (the solver freezes this value per inner solve and
    refreshes it across outer iterations)."""

    X: np.ndarray       # (K, M)
    P_ref: np.ndarray   # (K,)


def local_second_moment(model: MixtureModel, profile: SensingProfile,
                        P_s_ref: np.ndarray) -> SecondMoment:
    """Per-device per-feature second moment of the transmitted signal.

    X[k,m] = (1/L)·Σ_ℓ mu[ℓ,m]² + sigma2[m] + sigma_s2[k] + sigma_r2/P_ref[k].
    """
    P_ref = _check_positive_power(P_s_ref, profile.K)
    mean_sq = np.mean(model.mu ** 2, axis=0)               # (M,)
    add = sensing_noise_var(profile, P_ref)                # (K,)
    X = mean_sq[None, :] + model.sigma2[None, :] + add[:, None]
    return SecondMoment(X=X, P_ref=P_ref)


def sample_local_features(model: MixtureModel, profile: SensingProfile,
                          P_s: np.ndarray, label: int, count: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Draw `count` joint local-feature realizations for class `label`.

    Returns shape (K, M, count).  The ground-truth draw x is SHARED across
    devices (all devices sense the same target); clutter and sensing noise
    are independent per device.  A nonzero mu_s shifts device means, which
    models an imperfectly removed clutter mean — the closed-form received
    statistics assume it is zero.
    """
    P_s = _check_positive_power(P_s, profile.K)
    if not 0 <= label < model.L:
        raise ConfigError(f"class label must be in [0, {model.L}), got {label}")
    if count < 1:
        raise ConfigError("count must be >= 1")

    K, M = profile.K, model.M
    # shared ground truth: (M, count)
    x = model.mu[label][:, None] + np.sqrt(model.sigma2)[:, None] * rng.standard_normal((M, count))
    add_sd = np.sqrt(sensing_noise_var(profile, P_s))      # (K,)
    noise = add_sd[:, None, None] * rng.standard_normal((K, M, count))
    return x[None, :, :] + profile.mu_s[:, None, None] + noise
