"""Non-learning RIS phase designers: random floor, gradient ascent, brute force."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .channel import CascadedPair, RisPhases, Scenario
from .ibfnet import surrogate_terms
from .txbf import closed_form_snrs

__all__ = [
    "PgdConfig",
    "BudgetError",
    "ExhaustiveResult",
    "random_phases",
    "surrogate",
    "pgd_phases",
    "exhaustive_phases",
]

TIE_RTOL = 1e-12


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 500
    step_size: float = 0.1
    restarts: int = 8
    seed: int = 0
    tol: float = 1e-12

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1:
            raise ValueError(f"steps and restarts must be >= 1, got {self.steps}, {self.restarts}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


class BudgetError(ValueError):
    """Exhaustive search would exceed the candidate budget."""


class ExhaustiveResult(NamedTuple):
    phases: RisPhases | None
    gamma_r: float
    feasible: bool


def random_phases(N: int, rng: np.random.Generator) -> RisPhases:
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return RisPhases.from_theta(rng.uniform(0.0, 2.0 * np.pi, size=N))


def surrogate(cp: CascadedPair, theta, alpha: float) -> np.ndarray:
    """``J(theta) = ||h_t|| |h_t^H h_c| + alpha ||h_t||^2`` (vectorized over leading axes of theta)."""
    corr, gain, _, _ = surrogate_terms(cp.phi_t, cp.phi_c, theta, need_grad=False)
    return corr + alpha * gain


def pgd_phases(cp: CascadedPair, alpha: float, cfg: PgdConfig = PgdConfig()) -> RisPhases:
    """Monotone gradient ascent on ``J`` over the phase angles.

    All restarts advance together.  Each takes a step of length ``step`` (in
    the max-norm) along its gradient; a step that does not improve ``J`` is
    rejected and ``step`` halved, an accepted one lets ``step`` grow back by
    1.5x up to ``cfg.step_size``.  Stops early once every restart's step has
    dropped below ``cfg.tol``.
    """
    N = cp.phi_t.shape[0]
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(cfg.restarts, N))
    J = surrogate(cp, theta, alpha)
    step = np.full(cfg.restarts, cfg.step_size)
    phi_t = np.broadcast_to(cp.phi_t, (cfg.restarts,) + cp.phi_t.shape)
    phi_c = np.broadcast_to(cp.phi_c, (cfg.restarts,) + cp.phi_c.shape)
    for _ in range(cfg.steps):
        corr, gain, dcorr, dgain = surrogate_terms(phi_t, phi_c, theta)
        g = dcorr + alpha * dgain
        gmax = np.max(np.abs(g), axis=1)
        direction = g / np.where(gmax > 0, gmax, 1.0)[:, None]
        trial = theta + step[:, None] * direction
        J_trial = surrogate(cp, trial, alpha)
        better = J_trial > J
        theta = np.where(better[:, None], trial, theta)
        J = np.where(better, J_trial, J)
        step = np.where(better, np.minimum(step * 1.5, cfg.step_size), step * 0.5)
        if np.all(step < cfg.tol):
            break
    best = int(np.argmax(J))
    return RisPhases.from_theta(theta[best])


def _iter_candidate_blocks(N: int, K: int, chunk: int):
    """Yield ``(start, digits)`` blocks of base-K phase indices in lexicographic order."""
    total = K ** N
    powers = K ** np.arange(N - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        yield start, (idx[:, None] // powers[None, :]) % K


def exhaustive_phases(cp: CascadedPair, scn: Scenario, K: int, budget: int = 2 ** 21,
                      chunk: int = 2 ** 18) -> ExhaustiveResult:
    """Best quantized RIS configuration for the true echo SNR.

    Enumerates every ``theta_i in {2 pi k / K}`` and scores it through the
    closed-form transmit beamformer.  Ties go to the lexicographically
    smallest index vector, where scores within a relative ``TIE_RTOL`` count
    as tied.
    """
    N = cp.phi_t.shape[0]
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    total = K ** N
    if total > budget:
        raise BudgetError(f"K^N = {K}^{N} = {total} candidates exceeds budget {budget}")
    table = np.exp(2j * np.pi * np.arange(K) / K)
    ct = np.conj(cp.phi_t)
    cc = np.conj(cp.phi_c)
    best_val = -np.inf
    best_idx = None
    for start, digits in _iter_candidate_blocks(N, K, chunk):
        v = table[digits]
        gamma_r, _, feasible = closed_form_snrs(v @ ct, v @ cc, scn)
        scores = np.where(feasible, gamma_r, -np.inf)
        top = scores.max()
        if not np.isfinite(top) or top <= best_val * (1 + TIE_RTOL):
            continue
        # global-phase rotations tie up to roundoff; take the first near-maximal index
        j = int(np.argmax(scores >= top * (1 - TIE_RTOL)))
        best_val = float(scores[j])
        best_idx = digits[j].copy()
    if best_idx is None:
        return ExhaustiveResult(None, float("nan"), False)
    theta = 2.0 * np.pi * best_idx / K
    return ExhaustiveResult(RisPhases.from_theta(theta), best_val, True)
