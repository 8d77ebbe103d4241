"""Image-shaped network inputs and the ``IBFD`` channel-set file format.

Only raw cascaded channels are stored; Gram planes are derived on demand so
the loss and the network input always come from the same numbers.

File layout (little-endian)::

    offset 0   4s   magic  b"IBFD"
    offset 4   u16  version (1)
    offset 6   u16  M
    offset 8   u16  N
    offset 10  u64  count
    offset 18  f32  payload: per sample, phi_t then phi_c, row-major,
                    real/imag interleaved
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .channel import CascadedPair
from .complexlin import gram, make_rng

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER",
    "DatasetFormatError",
    "ChannelDataset",
    "build_input",
    "build_inputs",
    "write_dataset",
    "read_dataset",
    "batch_iter",
]

MAGIC = b"IBFD"
VERSION = 1
HEADER = struct.Struct("<4sHHHQ")


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ChannelDataset:
    """A stack of cascaded channel pairs, arrays shaped ``(count, N, M)``."""

    phi_t: np.ndarray
    phi_c: np.ndarray

    def __post_init__(self):
        self.phi_t = np.asarray(self.phi_t, dtype=np.complex128)
        self.phi_c = np.asarray(self.phi_c, dtype=np.complex128)
        if self.phi_t.ndim != 3 or self.phi_t.shape != self.phi_c.shape:
            raise ValueError(f"expected matching (count, N, M) stacks, got {self.phi_t.shape} and {self.phi_c.shape}")

    @classmethod
    def empty(cls, N: int, M: int) -> "ChannelDataset":
        z = np.zeros((0, N, M), dtype=np.complex128)
        return cls(z, z.copy())

    @classmethod
    def from_pairs(cls, pairs) -> "ChannelDataset":
        pairs = list(pairs)
        return cls(np.stack([p.phi_t for p in pairs]), np.stack([p.phi_c for p in pairs]))

    @property
    def N(self) -> int:
        return self.phi_t.shape[1]

    @property
    def M(self) -> int:
        return self.phi_t.shape[2]

    def __len__(self) -> int:
        return self.phi_t.shape[0]

    def __getitem__(self, idx) -> "ChannelDataset | CascadedPair":
        if np.isscalar(idx):
            return CascadedPair(phi_t=self.phi_t[idx], phi_c=self.phi_c[idx])
        return ChannelDataset(self.phi_t[idx], self.phi_c[idx])

    def pairs(self) -> Iterator[CascadedPair]:
        for i in range(len(self)):
            yield self[i]

    def to_float32(self) -> "ChannelDataset":
        """Round to the on-disk precision (what a write/read cycle returns)."""
        f = lambda a: a.astype(np.complex64).astype(np.complex128)
        return ChannelDataset(f(self.phi_t), f(self.phi_c))


def build_inputs(phi_t: np.ndarray, phi_c: np.ndarray):
    """Batched :func:`build_input`: ``(B, N, M)`` stacks -> ``(B, 4, N, N)`` and scales ``(B,)``."""
    phi_t = np.asarray(phi_t)
    phi_c = np.asarray(phi_c)
    if not (np.all(np.isfinite(phi_t)) and np.all(np.isfinite(phi_c))):
        raise ValueError("cascaded channels contain non-finite entries")
    gt = gram(phi_t)
    gc = gram(phi_c)
    planes = np.stack([gt.real, gt.imag, gc.real, gc.imag], axis=-3)
    scale = np.abs(planes).reshape(planes.shape[:-3] + (-1,)).max(axis=-1)
    scale = np.where(scale > 0, scale, 1.0)
    return planes / scale[..., None, None, None], scale


def build_input(cp: CascadedPair):
    """Four ``N x N`` planes (Re/Im of both Grams) over one shared max-abs scale."""
    planes, scale = build_inputs(cp.phi_t, cp.phi_c)
    return planes, float(scale)


def write_dataset(path, ds: ChannelDataset) -> None:
    count, N, M = ds.phi_t.shape
    payload = np.empty((count, 2, N, M, 2), dtype="<f4")
    payload[:, 0, ..., 0] = ds.phi_t.real
    payload[:, 0, ..., 1] = ds.phi_t.imag
    payload[:, 1, ..., 0] = ds.phi_c.real
    payload[:, 1, ..., 1] = ds.phi_c.imag
    with open(os.fspath(path), "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, M, N, count))
        fh.write(payload.tobytes())


def read_dataset(path) -> ChannelDataset:
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        raise DatasetFormatError(f"truncated header: {len(raw)} of {HEADER.size} bytes", len(raw))
    magic, version, M, N, count = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    per_sample = 2 * 2 * N * M * 4
    expected = HEADER.size + count * per_sample
    if len(raw) < expected:
        raise DatasetFormatError(
            f"truncated payload: need {expected} bytes for {count} samples, have {len(raw)}", len(raw))
    if len(raw) > expected:
        raise DatasetFormatError(f"{len(raw) - expected} trailing bytes after payload", expected)
    payload = np.frombuffer(raw, dtype="<f4", count=count * 4 * N * M, offset=HEADER.size)
    payload = payload.reshape(count, 2, N, M, 2).astype(np.float64)
    cplx = payload[..., 0] + 1j * payload[..., 1]
    return ChannelDataset(cplx[:, 0], cplx[:, 1])


def batch_iter(n_samples: int, batch_size: int, epoch_seed: int) -> Iterator[np.ndarray]:
    """Yield index arrays covering a seeded permutation of ``range(n_samples)``.

    The final batch may be shorter than ``batch_size``.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    if isinstance(n_samples, ChannelDataset):
        n_samples = len(n_samples)
    perm = make_rng(epoch_seed, purpose=7).permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        yield perm[start:start + batch_size]
