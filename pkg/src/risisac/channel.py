"""Rician channel generation, cascaded/effective channels and the two SNRs.

All quantities are linear (Watts, ratios).  Conversions to dB live at the
edges via :func:`db_from_linear` and friends.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .complexlin import cn_random, steering

__all__ = [
    "Scenario",
    "ChannelSet",
    "CascadedPair",
    "RisPhases",
    "sample_channels",
    "cascade",
    "effective",
    "snr_comm",
    "snr_radar",
    "db_from_linear",
    "linear_from_db",
    "watts_from_dbm",
    "dbm_from_watts",
]


@dataclass(frozen=True)
class Scenario:
    """Physical configuration of the RIS-aided ISAC link.

    Attributes
    ----------
    M, N : int
        BS antenna count and RIS element count.
    P_t : float
        Transmit power budget in Watts.
    sigma_c2, sigma_r2 : float
        Noise power at the user and at the BS, Watts.
    tau_c : float
        Minimum user SNR (linear).
    kappa : float
        Rician factor (linear).
    """

    M: int
    N: int
    P_t: float
    sigma_c2: float
    sigma_r2: float
    tau_c: float
    kappa: float = 10.0

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError(f"M and N must be >= 1, got M={self.M}, N={self.N}")
        for name in ("P_t", "sigma_c2", "sigma_r2", "tau_c"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be positive, got {val}")
        if not (self.kappa >= 0):
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")

    @classmethod
    def from_db(cls, M: int, N: int, P_t_dbm: float = 8.0, sigma_c2_dbm: float = -20.0,
                sigma_r2_dbm: float = -20.0, tau_c_db: float = 10.0, kappa: float = 10.0) -> "Scenario":
        return cls(M=M, N=N, P_t=watts_from_dbm(P_t_dbm), sigma_c2=watts_from_dbm(sigma_c2_dbm),
                   sigma_r2=watts_from_dbm(sigma_r2_dbm), tau_c=linear_from_db(tau_c_db), kappa=kappa)

    @property
    def comm_floor(self) -> float:
        """``tau_c * sigma_c2``, the required received power at the user."""
        return self.tau_c * self.sigma_c2


@dataclass(frozen=True)
class ChannelSet:
    G: np.ndarray  # N x M, BS -> RIS
    h_rc: np.ndarray  # N, RIS -> user
    h_rt: np.ndarray  # N, RIS -> target


@dataclass(frozen=True)
class CascadedPair:
    phi_t: np.ndarray  # N x M
    phi_c: np.ndarray  # N x M

    @property
    def N(self) -> int:
        return self.phi_t.shape[0]

    @property
    def M(self) -> int:
        return self.phi_t.shape[1]


@dataclass(frozen=True)
class RisPhases:
    theta: np.ndarray
    v: np.ndarray

    @classmethod
    def from_theta(cls, theta) -> "RisPhases":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta=theta, v=np.cos(theta) + 1j * np.sin(theta))


def _rician(los: np.ndarray, kappa: float, rng: np.random.Generator) -> np.ndarray:
    nlos = cn_random(los.shape[0], los.shape[1], 1.0, rng)
    if np.isinf(kappa):
        return los.astype(np.complex128)
    return np.sqrt(kappa / (1.0 + kappa)) * los + np.sqrt(1.0 / (1.0 + kappa)) * nlos


def sample_channels(scn: Scenario, rng: np.random.Generator) -> ChannelSet:
    """Draw one realization of G, h_rc, h_rt with unit large-scale gain."""
    N, M = scn.N, scn.M
    a_ris, a_bs, a_user, a_tgt = rng.uniform(-np.pi / 2, np.pi / 2, size=4)
    g_los = np.outer(steering(N, a_ris), np.conj(steering(M, a_bs)))
    G = _rician(g_los, scn.kappa, rng)
    h_rc = _rician(steering(N, a_user)[:, None], scn.kappa, rng)[:, 0]
    h_rt = _rician(steering(N, a_tgt)[:, None], scn.kappa, rng)[:, 0]
    return ChannelSet(G=G, h_rc=h_rc, h_rt=h_rt)


def cascade(ch: ChannelSet) -> CascadedPair:
    """``diag(h^H) G`` for the user and target links."""
    if ch.h_rc.shape[0] != ch.G.shape[0] or ch.h_rt.shape[0] != ch.G.shape[0]:
        raise ValueError("RIS dimension mismatch between G and h_rc/h_rt")
    return CascadedPair(phi_t=np.conj(ch.h_rt)[:, None] * ch.G,
                        phi_c=np.conj(ch.h_rc)[:, None] * ch.G)


def effective(cp: CascadedPair, p) -> tuple[np.ndarray, np.ndarray]:
    """Effective channels ``(h_t, h_c) = (phi_t^H v, phi_c^H v)``.

    ``p`` may be a :class:`RisPhases` or a raw phase vector ``v`` with
    optional leading batch axes.
    """
    v = p.v if isinstance(p, RisPhases) else np.asarray(p)
    if v.shape[-1] != cp.phi_t.shape[0]:
        raise ValueError(f"phase vector length {v.shape[-1]} != N={cp.phi_t.shape[0]}")
    return v @ np.conj(cp.phi_t), v @ np.conj(cp.phi_c)


def snr_comm(h_c: np.ndarray, w: np.ndarray, sigma_c2: float) -> float:
    if h_c.shape != w.shape:
        raise ValueError("h_c and w must have equal length")
    return float(np.abs(np.vdot(h_c, w)) ** 2 / sigma_c2)


def snr_radar(h_t: np.ndarray, w: np.ndarray, sigma_r2: float) -> float:
    """Echo SNR ``||h_t h_t^H w||^2 / sigma_r2`` via the rank-one shortcut."""
    if h_t.shape != w.shape:
        raise ValueError("h_t and w must have equal length")
    return float(np.vdot(h_t, h_t).real * np.abs(np.vdot(h_t, w)) ** 2 / sigma_r2)


def db_from_linear(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise ValueError("dB conversion needs strictly positive input")
    out = 10.0 * np.log10(x)
    return float(out) if out.ndim == 0 else out


def linear_from_db(x_db):
    out = 10.0 ** (np.asarray(x_db, dtype=np.float64) / 10.0)
    return float(out) if out.ndim == 0 else out


def watts_from_dbm(x_dbm):
    return linear_from_db(np.asarray(x_dbm, dtype=np.float64) - 30.0)


def dbm_from_watts(x):
    return db_from_linear(x) + 30.0
