import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from risisac.channel import CascadedPair
from risisac.dataset import (
    HEADER, ChannelDataset, DatasetFormatError, batch_iter, build_input, build_inputs, read_dataset, write_dataset,
)

from conftest import random_complex, random_pair


def random_dataset(rng, count, N, M):
    return ChannelDataset(random_complex(rng, count, N, M), random_complex(rng, count, N, M)).to_float32()


def test_scalar_grams():
    a, b = 0.5 - 1.0j, 2.0 + 0.1j
    x, scale = build_input(CascadedPair(np.array([[a]]), np.array([[b]])))
    m = max(abs(a) ** 2, abs(b) ** 2)
    np.testing.assert_allclose(x[:, 0, 0], [abs(a) ** 2 / m, 0, abs(b) ** 2 / m, 0], atol=1e-15)
    assert scale == pytest.approx(m)


def test_identical_channels_give_identical_planes(rng):
    phi = random_complex(rng, 5, 3)
    x, _ = build_input(CascadedPair(phi, phi.copy()))
    np.testing.assert_array_equal(x[0], x[2])
    np.testing.assert_array_equal(x[1], x[3])


def test_planes_match_independent_grams(rng):
    cp = random_pair(rng, 4, 2)
    x, scale = build_input(cp)
    gt = np.zeros((4, 4), complex)
    gc = np.zeros((4, 4), complex)
    for i in range(4):
        for j in range(4):
            gt[i, j] = sum(cp.phi_t[i, m] * np.conj(cp.phi_t[j, m]) for m in range(2))
            gc[i, j] = sum(cp.phi_c[i, m] * np.conj(cp.phi_c[j, m]) for m in range(2))
    ref = np.stack([gt.real, gt.imag, gc.real, gc.imag])
    assert scale == pytest.approx(np.abs(ref).max(), rel=1e-12)
    np.testing.assert_allclose(x * scale, ref, atol=1e-10)


def test_plane_symmetry_and_normalization(rng):
    for _ in range(100):
        x, _ = build_input(random_pair(rng, 6, 3))
        for k in (0, 2):
            assert np.max(np.abs(x[k] - x[k].T)) <= 1e-10
        for k in (1, 3):
            assert np.max(np.abs(x[k] + x[k].T)) <= 1e-10
        assert np.abs(x).max() == pytest.approx(1.0, abs=1e-15)


def test_zero_channels_scale_one():
    z = np.zeros((3, 2), complex)
    x, scale = build_input(CascadedPair(z, z))
    assert scale == 1.0 and not x.any()


def test_non_finite_channels_rejected():
    bad = np.array([[np.nan + 0j]])
    with pytest.raises(ValueError):
        build_input(CascadedPair(bad, bad))


def test_batched_matches_single(rng):
    ds = random_dataset(rng, 5, 4, 2)
    xs, scales = build_inputs(ds.phi_t, ds.phi_c)
    for i in range(5):
        x, s = build_input(ds[i])
        np.testing.assert_array_equal(xs[i], x)
        assert scales[i] == s


def test_empty_dataset_round_trip(tmp_path):
    path = tmp_path / "empty.ibfd"
    write_dataset(path, ChannelDataset.empty(N=8, M=4))
    assert os.path.getsize(path) == 18 == HEADER.size
    back = read_dataset(path)
    assert len(back) == 0 and back.N == 8 and back.M == 4


def test_payload_size(tmp_path, rng):
    path = tmp_path / "one.ibfd"
    write_dataset(path, random_dataset(rng, 1, 2, 1))
    assert os.path.getsize(path) - 18 == 2 * (2 * 2 * 1) * 4 == 32


def test_round_trip_bit_exact(tmp_path, rng):
    ds = random_dataset(rng, 1000, 4, 3)
    p1, p2 = tmp_path / "a.ibfd", tmp_path / "b.ibfd"
    write_dataset(p1, ds)
    back = read_dataset(p1)
    assert back.phi_t.tobytes() == ds.phi_t.tobytes()
    assert back.phi_c.tobytes() == ds.phi_c.tobytes()
    write_dataset(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_header_little_endian(tmp_path, rng):
    path = tmp_path / "h.ibfd"
    write_dataset(path, random_dataset(rng, 3, 4, 2))
    raw = path.read_bytes()
    assert raw[:4] == b"IBFD"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert int.from_bytes(raw[6:8], "little") == 2  # M
    assert int.from_bytes(raw[8:10], "little") == 4  # N
    assert int.from_bytes(raw[10:18], "little") == 3


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XBFD" + b[4:], 0),
    (lambda b: b[:4] + (2).to_bytes(2, "little") + b[6:], 4),
    (lambda b: b[:-3], None),
    (lambda b: b[:10], 10),
    (lambda b: b + b"\0", None),
])
def test_parse_errors_name_offset(tmp_path, rng, mutate, offset):
    path = tmp_path / "x.ibfd"
    write_dataset(path, random_dataset(rng, 2, 2, 2))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(DatasetFormatError) as info:
        read_dataset(path)
    assert "offset" in str(info.value)
    if offset is not None:
        assert info.value.offset == offset


def test_batch_iter_single_batch():
    batches = list(batch_iter(7, 7, 0))
    assert len(batches) == 1 and sorted(batches[0]) == list(range(7))


def test_batch_iter_singletons():
    batches = list(batch_iter(6, 1, 3))
    assert [len(b) for b in batches] == [1] * 6
    assert sorted(int(b[0]) for b in batches) == list(range(6))


def test_batch_iter_short_tail():
    batches = list(batch_iter(10, 3, 42))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_batch_iter_rejects_zero():
    with pytest.raises(ValueError):
        list(batch_iter(5, 0, 0))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(0, 200), S=st.integers(1, 64), seed=st.integers(0, 2 ** 32))
def test_batch_iter_partition_and_determinism(n, S, seed):
    a = list(batch_iter(n, S, seed))
    b = list(batch_iter(n, S, seed))
    assert all(np.array_equal(x, y) for x, y in zip(a, b)) and len(a) == len(b)
    flat = np.concatenate(a) if a else np.array([], int)
    assert sorted(flat.tolist()) == list(range(n))
    assert all(len(x) == S for x in a[:-1])
