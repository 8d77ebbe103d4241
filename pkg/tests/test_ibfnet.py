import numpy as np
import pytest
from scipy.signal import correlate2d

from risisac import autodiff as ad
from risisac.channel import CascadedPair, Scenario, cascade, effective, sample_channels
from risisac.complexlin import make_rng
from risisac.dataset import ChannelDataset, build_inputs
from risisac.ibfnet import (
    ModelFormatError, NetConfig, TrainConfig, build_net, euler_map, forward, load_model, loss_l2,
    predict_phases, save_model, surrogate_terms, train,
)

from conftest import random_complex, random_pair
from gradcheck import check_gradients


def random_dataset(count, N, M, seed=0):
    scn = Scenario.from_db(M=M, N=N)
    return ChannelDataset.from_pairs([cascade(sample_channels(scn, make_rng(seed, i))) for i in range(count)])


def perturbed_model(cfg, seed=0):
    """A built model with non-trivial BN statistics and affine parameters."""
    m = build_net(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for name, t in m.params.items():
        if name.endswith(("gamma", "beta", "fc.b")):
            t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    for s in m.bn.values():
        s.running_mean = 0.2 * rng.standard_normal(s.running_mean.shape)
        s.running_var = rng.uniform(0.5, 2.0, s.running_var.shape)
    return m


def manual_eval_forward(m, x):
    """Independent eval-mode forward: scipy correlations and explicit BN algebra."""
    p = {k: t.data for k, t in m.params.items()}

    def bn_relu(h, prefix):
        s = m.bn[prefix]
        g, b = p[prefix + ".gamma"], p[prefix + ".beta"]
        out = (h - s.running_mean[:, None, None]) / np.sqrt(s.running_var[:, None, None] + s.eps)
        return np.maximum(g[:, None, None] * out + b[:, None, None], 0)

    w = p["stem.conv.w"]
    h = np.stack([sum(correlate2d(x[c], w[o, c], mode="same") for c in range(x.shape[0])) for o in range(w.shape[0])])
    h = bn_relu(h, "stem.bn")
    for i, (_, _, stride) in enumerate(m.cfg.block_channels()):
        dw = p[f"block{i}.dw.w"]
        h = np.stack([correlate2d(h[c], dw[c], mode="same")[::stride, ::stride] for c in range(h.shape[0])])
        h = bn_relu(h, f"block{i}.dw.bn")
        h = np.einsum("oc,chw->ohw", p[f"block{i}.pw.w"], h)
        h = bn_relu(h, f"block{i}.pw.bn")
    feat = h.mean(axis=(1, 2))
    return p["fc.w"] @ feat + p["fc.b"]


def explicit_terms(cp, theta):
    v = euler_map(theta)
    h_t, h_c = effective(cp, v)
    Ht = np.outer(h_t, h_t.conj())
    return np.linalg.norm(Ht @ h_c), np.linalg.norm(Ht, "fro")


# ------------------------------------------------------------ architecture

def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(N=12, L=2)
    with pytest.raises(ValueError):
        NetConfig(N=2, L=0)
    assert NetConfig.for_n(32) == NetConfig(N=32, L=4)


def test_shapes_n8():
    m = build_net(NetConfig(N=8, L=2), seed=0)
    taps = []
    out = forward(m, np.zeros((1, 4, 8, 8)), taps=taps)
    shapes = [t[1].shape[1:] for t in taps]
    assert shapes == [(32, 8, 8), (64, 8, 8), (128, 4, 4), (256, 2, 2), (256, 1, 1)]
    assert out.shape == (1, 8)


def test_shapes_n32():
    m = build_net(NetConfig(N=32, L=4), seed=0)
    taps = []
    out = forward(m, np.zeros((1, 4, 32, 32)), taps=taps)
    assert taps[-2][1].shape[1:] == (1024, 2, 2)
    assert out.shape == (1, 32)


def test_build_deterministic():
    a = build_net(NetConfig(N=8, L=2), seed=5)
    b = build_net(NetConfig(N=8, L=2), seed=5)
    c = build_net(NetConfig(N=8, L=2), seed=6)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_zero_input_fresh_model_gives_fc_bias():
    m = build_net(NetConfig(N=8, L=2), seed=1)
    m.params["fc.b"].data = np.arange(8.0)
    np.testing.assert_array_equal(predict_phases(m, np.zeros((4, 8, 8))), np.arange(8.0))


@pytest.mark.parametrize("zero", [True, False])
def test_eval_forward_matches_manual_composition(zero):
    m = perturbed_model(NetConfig(N=8, L=2))
    x = np.zeros((4, 8, 8)) if zero else np.random.default_rng(3).standard_normal((4, 8, 8))
    np.testing.assert_allclose(predict_phases(m, x), manual_eval_forward(m, x), rtol=1e-10, atol=1e-10)


def test_predict_phases_length_and_determinism():
    m = build_net(NetConfig(N=16, L=3), seed=2)
    x = np.random.default_rng(0).standard_normal((4, 16, 16))
    a, b = predict_phases(m, x), predict_phases(m, x)
    assert a.shape == (16,) and a.tobytes() == b.tobytes()


def test_predict_phases_shape_mismatch():
    m = build_net(NetConfig(N=8, L=2), seed=0)
    with pytest.raises(ValueError):
        predict_phases(m, np.zeros((4, 16, 16)))
    with pytest.raises(ValueError):
        predict_phases(m, np.full((4, 8, 8), np.nan))


# ------------------------------------------------------------ Euler map

def test_euler_examples():
    np.testing.assert_allclose(euler_map([0.0, np.pi / 2, np.pi]), [1, 1j, -1], atol=1e-12)


def test_euler_unit_modulus_extreme():
    theta = np.array([1e6, -1e6, 3.3e5, 0.1, -7.0])
    assert np.max(np.abs(np.abs(euler_map(theta)) - 1)) <= 1e-12


# ------------------------------------------------------------ loss

def test_unit_scalar_loss():
    cp = CascadedPair(np.array([[1.0 + 0j]]), np.array([[1.0 + 0j]]))
    for theta in (0.0, 1.3, -4.0):
        rep, _ = loss_l2([cp], None, np.array([[theta]]), alpha=0.7)
        assert rep.corr_terms[0] == pytest.approx(1.0)
        assert rep.gain_terms[0] == pytest.approx(1.0)
        assert rep.value == pytest.approx(-1.7)


def test_alpha_zero_is_l1(rng):
    pairs = [random_pair(rng, 4, 2) for _ in range(3)]
    thetas = rng.uniform(0, 6, (3, 4))
    rep, _ = loss_l2(pairs, None, thetas, alpha=0.0)
    l1 = -np.mean([explicit_terms(cp, th)[0] for cp, th in zip(pairs, thetas)])
    assert rep.value == pytest.approx(l1, rel=1e-12)
    assert rep.value == -np.sum(rep.corr_terms) / 3


def test_loss_matches_explicit_matrices(rng):
    pairs = [random_pair(rng, 4, 2) for _ in range(3)]
    thetas = rng.uniform(0, 6, (3, 4))
    rep, grad = loss_l2(pairs, None, thetas, alpha=0.8)
    ref_terms = [explicit_terms(cp, th) for cp, th in zip(pairs, thetas)]
    ref = -np.mean([c + 0.8 * g for c, g in ref_terms])
    assert rep.value == pytest.approx(ref, rel=1e-12)
    assert rep.value == pytest.approx(-np.mean(rep.corr_terms + 0.8 * rep.gain_terms), abs=1e-12)

    h = 1e-6
    for s in range(3):
        for i in range(4):
            up, down = thetas.copy(), thetas.copy()
            up[s, i] += h
            down[s, i] -= h
            fd = (loss_l2(pairs, None, up, 0.8)[0].value - loss_l2(pairs, None, down, 0.8)[0].value) / (2 * h)
            assert grad[s, i] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_rank_one_identities(rng):
    for _ in range(100):
        cp = random_pair(rng, 6, 3)
        theta = rng.uniform(0, 2 * np.pi, 6)
        corr, gain, _, _ = surrogate_terms(cp.phi_t, cp.phi_c, theta, need_grad=False)
        ref_corr, ref_gain = explicit_terms(cp, theta)
        assert corr == pytest.approx(ref_corr, rel=1e-12)
        assert gain == pytest.approx(ref_gain, rel=1e-12)


def test_loss_reads_raw_channels_not_normalized_inputs(rng):
    ds = ChannelDataset(random_complex(rng, 4, 4, 2), random_complex(rng, 4, 4, 2))
    thetas = rng.uniform(0, 6, (4, 4))
    planes, scale = build_inputs(ds.phi_t, ds.phi_c)
    value = loss_l2(ds.phi_t, ds.phi_c, thetas, 0.8)[0].value

    def from_planes(planes, scale):
        v = euler_map(thetas)
        Gt = (planes[:, 0] + 1j * planes[:, 1]) * scale[:, None, None]
        gain = np.einsum("bi,bij,bj->b", v.conj(), Gt, v).real
        # |h_t^H h_c| is not a Gram quantity; reuse the raw-channel term
        corr = loss_l2(ds.phi_t, ds.phi_c, thetas, 0.0)[0].corr_terms
        return -np.mean(corr + 0.8 * gain)

    assert from_planes(planes, scale) == pytest.approx(value, rel=1e-12)
    assert from_planes(planes / 2, scale * 2) == pytest.approx(value, rel=1e-12)


def test_end_to_end_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    m = build_net(NetConfig(N=8, L=2), seed=3)
    ds = random_dataset(2, N=8, M=4, seed=9)
    x, _ = build_inputs(ds.phi_t, ds.phi_c)

    def build_loss():
        theta = forward(m, x, train=True)
        def head(th):
            rep, grad = loss_l2(ds.phi_t, ds.phi_c, th, 0.8)
            return rep.value, grad

        return ad.custom_scalar(theta, head)

    err = check_gradients(build_loss, m.param_list(), rng, step=1e-5, max_entries=200)
    assert err <= 1e-4


# ------------------------------------------------------------ training

def test_zero_epochs_leave_model_unchanged():
    m = build_net(NetConfig(N=8, L=2), seed=0)
    before = {k: t.data.copy() for k, t in m.params.items()}
    _, log = train(m, random_dataset(20, 8, 2), TrainConfig(S=5, epochs=0))
    assert log == []
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)


def test_one_epoch_full_batch_is_one_step():
    m = build_net(NetConfig(N=8, L=2), seed=0)
    train(m, random_dataset(12, 8, 2), TrainConfig(S=12, epochs=1))
    assert m.adam.step == 1


def test_mismatched_n_rejected():
    m = build_net(NetConfig(N=8, L=2), seed=0)
    with pytest.raises(ValueError):
        train(m, random_dataset(4, 16, 2), TrainConfig(S=2, epochs=1))


def test_training_log_reproducible():
    ds = random_dataset(60, 8, 2)
    held = random_dataset(10, 8, 2, seed=1)
    scn = Scenario.from_db(M=2, N=8)
    logs = []
    for _ in range(2):
        m = build_net(NetConfig(N=8, L=2), seed=4)
        logs.append(train(m, ds, TrainConfig(S=16, epochs=2, seed=3), scn, held)[1])
    assert logs[0] == logs[1]
    assert np.isfinite(logs[0][-1].gamma_r_db)


def test_desk_training_reduces_loss():
    ds = random_dataset(5000, N=8, M=4, seed=21)
    m = build_net(NetConfig(N=8, L=2), seed=0)
    _, log = train(m, ds, TrainConfig(S=100, lr=1e-3, epochs=3, alpha=0.8, seed=0))
    assert log[2].loss < log[0].loss


# ------------------------------------------------------------ persistence

def test_model_round_trip(tmp_path):
    m = perturbed_model(NetConfig(N=8, L=2))
    train(m, random_dataset(8, 8, 2), TrainConfig(S=4, epochs=1))
    path = tmp_path / "m.ibfm"
    save_model(path, m)
    back = load_model(path)
    assert back.cfg == m.cfg
    for k in m.params:
        assert back.params[k].data.tobytes() == m.params[k].data.tobytes()
    for k in m.bn:
        assert back.bn[k].running_mean.tobytes() == m.bn[k].running_mean.tobytes()
        assert back.bn[k].running_var.tobytes() == m.bn[k].running_var.tobytes()
    assert back.adam.step == m.adam.step == 2
    x = np.random.default_rng(1).standard_normal((4, 8, 8))
    assert predict_phases(back, x).tobytes() == predict_phases(m, x).tobytes()
    save_model(tmp_path / "again.ibfm", back)
    assert (tmp_path / "again.ibfm").read_bytes() == path.read_bytes()
    assert path.read_bytes()[:4] == b"IBFM"


def test_model_truncated(tmp_path):
    path = tmp_path / "m.ibfm"
    save_model(path, build_net(NetConfig(N=8, L=2), seed=0))
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(ModelFormatError, match="missing"):
        load_model(path)


def test_model_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.ibfm"
    save_model(path, build_net(NetConfig(N=8, L=2), seed=0))
    raw = path.read_bytes()
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(path)
    path.write_bytes(raw[:4] + (9).to_bytes(2, "little") + raw[6:])
    with pytest.raises(ModelFormatError, match="version"):
        load_model(path)


def test_model_shape_mismatch(tmp_path):
    path = tmp_path / "m.ibfm"
    save_model(path, build_net(NetConfig(N=8, L=2, base_channels=4), seed=0))
    raw = bytearray(path.read_bytes())
    raw[10:12] = (8).to_bytes(2, "little")  # claim base_channels=8
    path.write_bytes(bytes(raw))
    with pytest.raises(ModelFormatError, match="shape"):
        load_model(path)
