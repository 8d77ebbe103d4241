"""Closed-form transmit beamformer for a fixed RIS configuration.

Maximizes ``||h_t h_t^H w||^2`` subject to ``|h_c^H w|^2 >= tau_c*sigma_c2``
and ``||w||^2 <= P_t``.  The optimum either points straight at the target
channel or lives in ``span{h_c, h_t}`` with the user constraint active.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .channel import Scenario

__all__ = [
    "Branch",
    "TxSolution",
    "InfeasibleError",
    "is_feasible",
    "transmit_beamformer",
    "closed_form_snrs",
]

_DENOM_FLOOR = 1e-14


class Branch(enum.Enum):
    ALIGNED = "aligned"
    TWO_BASIS = "two_basis"


class InfeasibleError(ValueError):
    """The user SNR threshold cannot be met within the power budget."""


@dataclass(frozen=True)
class TxSolution:
    w: np.ndarray
    branch: Branch
    feasible: bool


def is_feasible(h_c: np.ndarray, scn: Scenario) -> bool:
    return bool(scn.P_t * np.vdot(h_c, h_c).real >= scn.comm_floor)


def _unit_phase(z: complex) -> complex:
    # any unit factor is optimal when z == 0; pick 1
    mag = abs(z)
    return 1.0 + 0j if mag == 0 else z / mag


def transmit_beamformer(h_t: np.ndarray, h_c: np.ndarray, scn: Scenario) -> TxSolution:
    """Optimal ``w`` for given effective channels.

    Raises :class:`InfeasibleError` when ``P_t ||h_c||^2 < tau_c sigma_c2``.
    A zero target channel makes every feasible ``w`` optimal; the minimum-power
    beam along ``h_c`` is returned in that case.
    """
    h_t = np.asarray(h_t, dtype=np.complex128)
    h_c = np.asarray(h_c, dtype=np.complex128)
    if h_t.shape != h_c.shape:
        raise ValueError(f"h_t {h_t.shape} and h_c {h_c.shape} differ in shape")
    if not is_feasible(h_c, scn):
        raise InfeasibleError(
            f"P_t*||h_c||^2={scn.P_t * np.vdot(h_c, h_c).real:.6g} < tau_c*sigma_c2={scn.comm_floor:.6g}")

    floor = scn.comm_floor
    nc2 = np.vdot(h_c, h_c).real
    nt2 = np.vdot(h_t, h_t).real
    if nt2 == 0.0:
        u1 = h_c / np.sqrt(nc2)
        return TxSolution(w=np.sqrt(floor / nc2) * u1, branch=Branch.TWO_BASIS, feasible=True)

    ip = np.vdot(h_c, h_t)
    if scn.P_t * abs(ip) ** 2 >= floor * nt2:
        return TxSolution(w=np.sqrt(scn.P_t) * h_t / np.sqrt(nt2), branch=Branch.ALIGNED, feasible=True)

    u1 = h_c / np.sqrt(nc2)
    resid = h_t - np.vdot(u1, h_t) * u1
    denom = np.linalg.norm(resid)
    if not denom > _DENOM_FLOOR:
        raise RuntimeError(f"degenerate second basis vector (norm {denom:.3g}) in two-basis branch")
    u2 = resid / denom
    x1 = np.sqrt(floor / nc2) * _unit_phase(np.vdot(u1, h_t))
    x2 = np.sqrt(max(scn.P_t - floor / nc2, 0.0)) * _unit_phase(np.vdot(u2, h_t))
    return TxSolution(w=x1 * u1 + x2 * u2, branch=Branch.TWO_BASIS, feasible=True)


def closed_form_snrs(h_t: np.ndarray, h_c: np.ndarray, scn: Scenario):
    """Vectorized ``(gamma_r, gamma_c, feasible)`` of the optimal beamformer.

    ``h_t`` and ``h_c`` carry the antenna axis last; any leading axes are a
    batch.  Infeasible entries get ``nan`` SNRs.  Equivalent to calling
    :func:`transmit_beamformer` followed by the SNR formulas, without forming
    ``w``.
    """
    nt2 = np.einsum("...m,...m->...", h_t.real, h_t.real) + np.einsum("...m,...m->...", h_t.imag, h_t.imag)
    nc2 = np.einsum("...m,...m->...", h_c.real, h_c.real) + np.einsum("...m,...m->...", h_c.imag, h_c.imag)
    ip = np.einsum("...m,...m->...", np.conj(h_c), h_t)
    ip2 = ip.real ** 2 + ip.imag ** 2
    floor = scn.comm_floor
    P = scn.P_t
    feasible = P * nc2 >= floor
    aligned = P * ip2 >= floor * nt2

    with np.errstate(divide="ignore", invalid="ignore"):
        safe_nc2 = np.where(feasible, nc2, 1.0)
        x1 = np.sqrt(floor / safe_nc2)
        x2 = np.sqrt(np.maximum(P - floor / safe_nc2, 0.0))
        proj1 = np.sqrt(ip2 / safe_nc2)
        proj2 = np.sqrt(np.maximum(nt2 - ip2 / safe_nc2, 0.0))
        gain_two = (x1 * proj1 + x2 * proj2) ** 2
        gamma_r = np.where(aligned, P * nt2, gain_two) * nt2 / scn.sigma_r2
        gamma_c_aligned = np.where(nt2 > 0, P * ip2 / np.where(nt2 > 0, nt2, 1.0), floor) / scn.sigma_c2
        gamma_c = np.where(aligned & (nt2 > 0), gamma_c_aligned, scn.tau_c)
    gamma_r = np.where(feasible, gamma_r, np.nan)
    gamma_c = np.where(feasible, gamma_c, np.nan)
    return gamma_r, gamma_c, feasible
