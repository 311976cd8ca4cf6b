"""Channel realizations, over-the-air aggregation and energy accounting.

Devices sit in a ring [R, R+width] km around the server.  The channel of
device k combines distance path loss PL_dB = 128.1 + 37.6·log10(d_km),
log-normal shadowing N(0, sigma_zeta2) dB and an i.i.d. Rayleigh small-scale
vector rho ~ CN(0, I_{N_r}).  Raw gains at sub-kilometre distances are around
−115 dB; a configurable global amplitude normalization (default: unit median
channel power at the configured base radius) keeps the optimization
well-conditioned while preserving the relative path-loss structure.  The
normalization is resolved once per experiment — radius sweeps must NOT
re-normalize per cell, or the distance trend would cancel out.

Aggregation: on subcarrier m all devices transmit simultaneously, so the
server's array receives y(m) = Σ_k h[k,m]·b[k,m]·x_k(m) + w(m) and estimates
x̂(m) = Re(f_m^H y(m)).  Noise convention: the real and imaginary parts of
each entry of w(m) are independent N(0, N0), so Var(Re(f_m^H w)) = N0·‖f_m‖²
exactly — this is the convention the closed-form received-feature variance
assumes.

Choosing the precoder b[k,m] = c[k,m]/(f_m^H h[k,m]) makes the effective gain
of each device the real, nonnegative target c[k,m]; the per-device transmit
energy is then T_c·Σ_m |b|²·X[k,m] = T_c·Σ_m c²·X/|f^H h|².
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SingularChannelError

__all__ = [
    "Topology",
    "ChannelState",
    "EnergyBudget",
    "path_loss_db",
    "default_gain_normalization",
    "realize_channel",
    "aircomp_aggregate",
    "precoder_from_c",
    "transmit_energy",
]

# default large-scale parameters
PL_REF_DB = 128.1
PL_SLOPE_DB = 37.6

_SINGULAR_EPS = 1e-12


def path_loss_db(d_km) -> np.ndarray:
    """Distance path loss in dB: 128.1 + 37.6·log10(d_km)."""
    d = np.asarray(d_km, dtype=float)
    if np.any(d <= 0):
        raise ConfigError("distances must be positive")
    return PL_REF_DB + PL_SLOPE_DB * np.log10(d)


def default_gain_normalization(R_km: float) -> float:
    """Amplitude factor making the median channel power ≈ 1 at distance R."""
    return 10.0 ** (float(path_loss_db(R_km)) / 20.0)


@dataclass(frozen=True)
class Topology:
    """Server-centric cell: K devices in the ring [R, R+width] km, N_r
    receive antennas at the server."""

    K: int
    N_r: int
    R: float
    width: float
    d: np.ndarray   # (K,) device distances, km

    def __post_init__(self):
        if self.K < 1 or self.N_r < 1:
            raise ConfigError("need K >= 1 devices and N_r >= 1 antennas")
        d = np.asarray(self.d, dtype=float)
        if d.shape != (self.K,):
            raise ConfigError(f"d must have shape ({self.K},), got {d.shape}")
        lo, hi = self.R, self.R + self.width
        if np.any(d < lo - 1e-12) or np.any(d > hi + 1e-12):
            raise ConfigError(f"device distances must lie in [{lo}, {hi}] km")
        object.__setattr__(self, "d", d)

    @classmethod
    def draw(cls, rng: np.random.Generator, K: int, N_r: int,
             R: float = 0.45, width: float = 0.05) -> "Topology":
        """Place K devices uniformly (by area) in the ring."""
        u = rng.random(K)
        d = np.sqrt(R ** 2 + u * ((R + width) ** 2 - R ** 2))
        return cls(K=K, N_r=N_r, R=R, width=width, d=d)


@dataclass(frozen=True)
class ChannelState:
    """Per-device per-subcarrier channel vectors h[k, m] ∈ C^{N_r} and the
    receiver noise power N0.

    Channels are static within a coherence block, so the default realization
    stores identical copies across the M subcarriers; the extra axis exists
    for generality.
    """

    h: np.ndarray   # (K, M, N_r) complex
    N0: float

    def __post_init__(self):
        h = np.asarray(self.h, dtype=complex)
        if h.ndim != 3:
            raise ConfigError(f"h must have shape (K, M, N_r), got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ConfigError("channel entries must be finite")
        if self.N0 < 0:
            raise ConfigError("noise power must be nonnegative")
        object.__setattr__(self, "h", h)

    @property
    def K(self) -> int:
        return self.h.shape[0]

    @property
    def M(self) -> int:
        return self.h.shape[1]

    @property
    def N_r(self) -> int:
        return self.h.shape[2]

    def to_json(self) -> str:
        return json.dumps({
            "N0": self.N0,
            "h_re": self.h.real.tolist(),
            "h_im": self.h.imag.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "ChannelState":
        d = json.loads(text)
        h = np.asarray(d["h_re"], float) + 1j * np.asarray(d["h_im"], float)
        return cls(h=h, N0=float(d["N0"]))


@dataclass(frozen=True)
class EnergyBudget:
    """Per-device energy accounting: total E[k], computation E_p[k], sensing
    time T_s[k] and per-element transmit time T_c (seconds)."""

    E: np.ndarray
    E_p: np.ndarray
    T_s: np.ndarray
    T_c: float

    def __post_init__(self):
        E = np.atleast_1d(np.asarray(self.E, dtype=float))
        E_p = np.atleast_1d(np.asarray(self.E_p, dtype=float))
        T_s = np.atleast_1d(np.asarray(self.T_s, dtype=float))
        if not (E.shape == E_p.shape == T_s.shape):
            raise ConfigError("E, E_p, T_s must share shape (K,)")
        if np.any(E <= E_p):
            raise ConfigError("total energy must exceed computation energy")
        if np.any(T_s <= 0) or self.T_c <= 0:
            raise ConfigError("times must be positive")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "E_p", E_p)
        object.__setattr__(self, "T_s", T_s)

    @property
    def K(self) -> int:
        return self.E.shape[0]

    @classmethod
    def homogeneous(cls, K: int, E: float, E_p: float = 0.1,
                    T_s: float = 1.0, T_c: float = 1.0) -> "EnergyBudget":
        return cls(E=np.full(K, E), E_p=np.full(K, E_p), T_s=np.full(K, T_s), T_c=T_c)


def realize_channel(rng: np.random.Generator, topo: Topology, M: int,
                    shadowing_var_db: float = 8.0, N0: float = 1.0,
                    gain_norm: float | None = None) -> ChannelState:
    """Draw one channel realization.

    Large-scale amplitude of device k: 10^((−PL(d_k) + ζ_k)/20) · gain_norm
    with shadowing ζ_k ~ N(0, shadowing_var_db) in dB.  gain_norm=None applies
    the default normalization at the topology's base radius R (unit median
    power there); pass an explicit value when sweeping R.

    Small-scale: rho ~ CN(0, I), i.e. E[‖rho‖²] = N_r; identical across the M
    subcarriers (static channel).
    """
    if gain_norm is None:
        gain_norm = default_gain_normalization(topo.R)
    pl = path_loss_db(topo.d)                                 # (K,)
    zeta = np.sqrt(shadowing_var_db) * rng.standard_normal(topo.K)
    amp = 10.0 ** ((-pl + zeta) / 20.0) * gain_norm           # (K,)
    rho = (rng.standard_normal((topo.K, topo.N_r))
           + 1j * rng.standard_normal((topo.K, topo.N_r))) / np.sqrt(2.0)
    h_k = amp[:, None] * rho                                  # (K, N_r)
    h = np.repeat(h_k[:, None, :], M, axis=1)                 # (K, M, N_r)
    return ChannelState(h=h, N0=N0)


def _effective_gain(channel: ChannelState, f: np.ndarray) -> np.ndarray:
    """g[k,m] = f_m^H h[k,m]."""
    f = np.asarray(f, dtype=complex)
    if f.shape != (channel.M, channel.N_r):
        raise ConfigError(f"f must have shape ({channel.M}, {channel.N_r}), got {f.shape}")
    return np.einsum("mn,kmn->km", f.conj(), channel.h)


def aircomp_aggregate(x: np.ndarray, b: np.ndarray, f: np.ndarray,
                      channel: ChannelState,
                      rng: np.random.Generator) -> np.ndarray:
    """Simulate one (or a batch of) over-the-air aggregation slots.

    x: local features, shape (K, M) or (K, M, n) for a batch of n slots.
    Returns Re(f_m^H(Σ_k h[k,m] b[k,m] x_k(m) + w(m))) with w's real and
    imaginary parts each N(0, N0) per antenna — shape (M,) or (M, n).
    """
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=complex)
    if b.shape != (channel.K, channel.M):
        raise ConfigError(f"b must have shape ({channel.K}, {channel.M}), got {b.shape}")
    batched = x.ndim == 3
    if x.shape[:2] != (channel.K, channel.M) or x.ndim not in (2, 3):
        raise ConfigError(f"x must have shape ({channel.K}, {channel.M}[, n]), got {x.shape}")

    g = _effective_gain(channel, f)                 # (K, M)
    gb = g * b                                      # effective per-device gain
    xb = x if batched else x[:, :, None]
    signal = np.einsum("km,kmn->mn", gb, xb)        # (M, n) complex

    n = xb.shape[2]
    fnorm2 = np.sum(np.abs(np.asarray(f)) ** 2, axis=1)       # (M,)
    # Var(Re(f^H w)) = N0·‖f‖² under the per-real-dimension convention
    noise_sd = np.sqrt(channel.N0 * fnorm2)
    w = noise_sd[:, None] * rng.standard_normal((channel.M, n))
    out = signal.real + w
    return out if batched else out[:, 0]


def precoder_from_c(c: np.ndarray, f: np.ndarray,
                    channel: ChannelState) -> np.ndarray:
    """Invert the effective gain: b[k,m] = c[k,m]/(f_m^H h[k,m]).

    Raises SingularChannelError when |f^H h| is numerically zero at an entry
    with c > 0; entries with c = 0 get b = 0 regardless of the channel.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != (channel.K, channel.M):
        raise ConfigError(f"c must have shape ({channel.K}, {channel.M}), got {c.shape}")
    if np.any(c < 0):
        raise ConfigError("received-power targets c must be nonnegative")
    g = _effective_gain(channel, f)
    bad = (np.abs(g) < _SINGULAR_EPS) & (c > 0)
    if np.any(bad):
        k, m = np.argwhere(bad)[0]
        raise SingularChannelError(
            f"|f^H h| < {_SINGULAR_EPS} at device {k}, feature {m} with c > 0")
    b = np.zeros_like(g)
    nz = c > 0
    b[nz] = c[nz] / g[nz]
    return b


def transmit_energy(P_s: np.ndarray, c: np.ndarray, f: np.ndarray,
                    channel: ChannelState, X: np.ndarray,
                    budget: EnergyBudget) -> tuple[np.ndarray, np.ndarray]:
    """Per-device energy use and slack against the budget.

    E_used[k] = P_s[k]·T_s[k] + E_p[k] + T_c·Σ_m c²[k,m]·X[k,m]/|f_m^H h[k,m]|².
    Returns (E_used, slack) with slack = E − E_used.
    """
    P_s = np.atleast_1d(np.asarray(P_s, dtype=float))
    c = np.asarray(c, dtype=float)
    X = np.asarray(X, dtype=float)
    g2 = np.abs(_effective_gain(channel, f)) ** 2
    bad = (g2 < _SINGULAR_EPS ** 2) & (c > 0)
    if np.any(bad):
        k, m = np.argwhere(bad)[0]
        raise SingularChannelError(
            f"zero effective channel at device {k}, feature {m} with c > 0")
    comm = np.zeros_like(c)
    nz = c > 0
    comm[nz] = c[nz] ** 2 * X[nz] / g2[nz]
    E_used = P_s * budget.T_s + budget.E_p + budget.T_c * comm.sum(axis=1)
    return E_used, budget.E - E_used
