"""Dense complex helpers and seeded random streams.

Complex matrices and vectors are plain ``numpy`` ``complex128`` arrays in
row-major (C) order.  Random streams are counter-based Philox generators so
that sample ``i`` of a data set can be produced independently of every other
sample.
"""
from __future__ import annotations

import numpy as np

__all__ = ["make_rng", "cn_random", "steering", "gram"]


def make_rng(seed: int, stream: int | None = None, purpose: int = 0) -> np.random.Generator:
    """Return a Philox generator keyed by ``(seed, purpose, stream)``.

    ``stream`` is typically a sample index; two calls with the same triple
    yield bit-identical draws regardless of call order.
    """
    entropy = [int(seed), int(purpose)]
    if stream is not None:
        entropy.append(int(stream))
    ss = np.random.SeedSequence(entropy)
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))


def cn_random(rows: int, cols: int, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Matrix with iid circularly-symmetric complex Gaussian entries CN(0, variance)."""
    if variance < 0:
        raise ValueError(f"variance must be nonnegative, got {variance}")
    std = np.sqrt(variance / 2.0)
    re = rng.standard_normal((rows, cols))
    im = rng.standard_normal((rows, cols))
    return std * (re + 1j * im)


def steering(n: int, angle: float) -> np.ndarray:
    """Half-wavelength ULA response ``exp(j*pi*k*sin(angle))`` for k = 0..n-1."""
    if n < 1:
        raise ValueError(f"array size must be >= 1, got {n}")
    k = np.arange(n)
    return np.exp(1j * np.pi * k * np.sin(angle))


def gram(a: np.ndarray) -> np.ndarray:
    """``A @ A^H``; leading axes are treated as a batch."""
    a = np.asarray(a)
    return a @ np.conj(np.swapaxes(a, -1, -2))
