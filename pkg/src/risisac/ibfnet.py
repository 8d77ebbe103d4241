"""IBF-Net: a depthwise-separable CNN mapping Gram images to RIS phases.

Layout for ``N = 2**(L+1)`` and ``base = 32``::

    stem     conv3x3 4->base, BN, ReLU                      base x N x N
    block 0  dw3x3/s1, BN, ReLU ; pw base->2base, BN, ReLU  2base x N x N
    block i  dw3x3/s2, BN, ReLU ; pw doubling, BN, ReLU     (2base*2^i) x N/2^i x N/2^i
    pool     2x2 average                                    2base*2^L
    fc       linear -> N phases

Training is unsupervised: the loss rewards target-channel gain and
target/user channel correlation, evaluated on the raw cascaded channels.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, BatchNormState, Tape, Tensor
from .channel import Scenario, db_from_linear
from .complexlin import make_rng
from .dataset import ChannelDataset, batch_iter, build_inputs
from .txbf import closed_form_snrs

__all__ = [
    "NetConfig",
    "Model",
    "LossReport",
    "TrainConfig",
    "EpochLog",
    "ModelFormatError",
    "build_net",
    "forward",
    "predict_phases",
    "euler_map",
    "surrogate_terms",
    "loss_l2",
    "evaluate_phases",
    "train",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class NetConfig:
    N: int
    L: int
    base_channels: int = 32

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if self.N != 2 ** (self.L + 1):
            raise ValueError(f"N={self.N} incompatible with L={self.L}: need N = 2**(L+1) = {2 ** (self.L + 1)}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")

    @classmethod
    def for_n(cls, N: int, base_channels: int = 32) -> "NetConfig":
        L = int(round(np.log2(N))) - 1
        return cls(N=N, L=L, base_channels=base_channels)

    def block_channels(self):
        """``(in, out, stride)`` for each DW-PW block."""
        b = self.base_channels
        out = [(b, 2 * b, 1)]
        c = 2 * b
        for _ in range(self.L):
            out.append((c, 2 * c, 2))
            c *= 2
        return out


@dataclass
class Model:
    cfg: NetConfig
    params: dict  # name -> Tensor, in architectural order
    bn: dict  # name -> BatchNormState
    adam: AdamState = field(default_factory=AdamState)

    def param_list(self):
        return list(self.params.values())

    def copy(self) -> "Model":
        params = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.params.items()}
        bn = {k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps)
              for k, s in self.bn.items()}
        a = self.adam
        adam = AdamState(a.lr, a.beta1, a.beta2, a.eps, a.step, [m.copy() for m in a.m], [v.copy() for v in a.v])
        return Model(self.cfg, params, bn, adam)


def _bn_names(prefix):
    return f"{prefix}.gamma", f"{prefix}.beta"


def build_net(cfg: NetConfig, seed: int, dtype=np.float64) -> Model:
    """Freshly initialized model; equal seeds give bit-identical parameters."""
    rng = make_rng(seed, purpose=11)
    params: dict = {}
    bn: dict = {}

    def uniform(shape, fan_in, gain=6.0):
        bound = np.sqrt(gain / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    def add_bn(prefix, channels):
        g, b = _bn_names(prefix)
        params[g] = np.ones(channels, dtype=dtype)
        params[b] = np.zeros(channels, dtype=dtype)
        bn[prefix] = BatchNormState.fresh(channels, dtype=dtype)

    base = cfg.base_channels
    params["stem.conv.w"] = uniform((base, 4, 3, 3), 4 * 9)
    add_bn("stem.bn", base)
    for i, (cin, cout, _) in enumerate(cfg.block_channels()):
        params[f"block{i}.dw.w"] = uniform((cin, 3, 3), 9)
        add_bn(f"block{i}.dw.bn", cin)
        params[f"block{i}.pw.w"] = uniform((cout, cin), cin)
        add_bn(f"block{i}.pw.bn", cout)
    feat = 2 * base * 2 ** cfg.L
    # output layer feeds no ReLU: variance-preserving bound
    params["fc.w"] = uniform((cfg.N, feat), feat, gain=3.0)
    params["fc.b"] = np.zeros(cfg.N, dtype=dtype)
    return Model(cfg, {k: Tensor(v, requires_grad=True) for k, v in params.items()}, bn)


def _bn_relu(model: Model, x, prefix, train):
    g, b = _bn_names(prefix)
    return ad.relu(ad.batchnorm2d(x, model.params[g], model.params[b], model.bn[prefix], train=train))


def forward(model: Model, x, train: bool = False, taps: list | None = None) -> Tensor:
    """Network output ``theta`` shaped ``(B, N)`` for inputs ``(B, 4, N, N)``.

    If ``taps`` is a list, ``(stage, activation)`` pairs are appended to it
    after the stem, each block and the pooling layer.
    """
    p = model.params
    cfg = model.cfg
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (4, cfg.N, cfg.N):
        raise ValueError(f"input shape {x.shape[1:]} does not match (4, {cfg.N}, {cfg.N})")
    h = ad.conv2d(Tensor(x.astype(p["stem.conv.w"].data.dtype, copy=False)), p["stem.conv.w"], stride=1, pad=1)
    h = _bn_relu(model, h, "stem.bn", train)
    if taps is not None:
        taps.append(("stem", h.data))
    for i, (_, _, stride) in enumerate(cfg.block_channels()):
        h = ad.depthwise_conv2d(h, p[f"block{i}.dw.w"], stride=stride, pad=1)
        h = _bn_relu(model, h, f"block{i}.dw.bn", train)
        h = ad.pointwise_conv2d(h, p[f"block{i}.pw.w"])
        h = _bn_relu(model, h, f"block{i}.pw.bn", train)
        if taps is not None:
            taps.append((f"block{i}", h.data))
    h = ad.avgpool2d(h, 2)
    if taps is not None:
        taps.append(("pool", h.data))
    h = ad.reshape(h, (h.shape[0], -1))
    return ad.linear(h, p["fc.w"], p["fc.b"])


def predict_phases(model: Model, inputs, mode: str = "eval") -> np.ndarray:
    """Raw (unbounded) phase angles; a single ``4 x N x N`` input gives a length-N vector."""
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
    arr = np.asarray(inputs)
    if not np.all(np.isfinite(arr)):
        raise ValueError("network input contains non-finite values")
    theta = forward(model, arr, train=(mode == "train")).data.astype(np.float64)
    return theta[0] if arr.ndim == 3 else theta


def euler_map(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return np.cos(theta) + 1j * np.sin(theta)


# ---------------------------------------------------------------- loss

@dataclass
class LossReport:
    value: float
    corr_terms: np.ndarray  # ||H_t h_c||_2 per sample
    gain_terms: np.ndarray  # ||H_t||_F per sample
    alpha: float = 0.0


def surrogate_terms(phi_t, phi_c, theta, need_grad: bool = True):
    """Per-sample correlation and gain terms and their theta-gradients.

    ``corr = ||h_t|| |h_t^H h_c|`` and ``gain = ||h_t||^2`` (the rank-one forms
    of ``||H_t h_c||`` and ``||H_t||_F``).  Arrays carry an optional leading
    batch axis.  Returns ``(corr, gain, dcorr, dgain)``.
    """
    phi_t = np.asarray(phi_t)
    phi_c = np.asarray(phi_c)
    v = euler_map(theta)
    ht = np.einsum("...n,...nm->...m", v, np.conj(phi_t))
    hc = np.einsum("...n,...nm->...m", v, np.conj(phi_c))
    gain = np.sum(ht.real ** 2 + ht.imag ** 2, axis=-1)
    c = np.sum(np.conj(ht) * hc, axis=-1)
    absc = np.abs(c)
    norm_t = np.sqrt(gain)
    corr = norm_t * absc
    if not need_grad:
        return corr, gain, None, None

    # Wirtinger derivatives w.r.t. v, then d/dtheta = -2 Im(v * df/dv)
    dgain_dv = np.conj(np.einsum("...nm,...m->...n", phi_t, ht))
    dc_dv = np.conj(np.einsum("...nm,...m->...n", phi_c, ht))
    dcbar_dv = np.conj(np.einsum("...nm,...m->...n", phi_t, hc))
    safe_absc = np.where(absc > 0, absc, 1.0)
    safe_norm = np.where(norm_t > 0, norm_t, 1.0)
    dabsc_dv = np.where(absc > 0, 1.0, 0.0)[..., None] * (
        np.conj(c)[..., None] * dc_dv + c[..., None] * dcbar_dv) / (2.0 * safe_absc[..., None])
    dcorr_dv = (np.where(norm_t > 0, absc / (2.0 * safe_norm), 0.0)[..., None] * dgain_dv
                + norm_t[..., None] * dabsc_dv)
    dgain = -2.0 * np.imag(v * dgain_dv)
    dcorr = -2.0 * np.imag(v * dcorr_dv)
    return corr, gain, dcorr, dgain


def loss_l2(phi_t, phi_c, thetas, alpha: float):
    """Batch loss ``-mean(corr + alpha*gain)`` on raw channels and its theta-gradient.

    ``phi_t``/``phi_c`` are ``(S, N, M)`` stacks (a list of
    :class:`~risisac.channel.CascadedPair` is also accepted as ``phi_t`` with
    ``phi_c=None``).  Returns ``(LossReport, grad)`` with ``grad`` shaped like
    ``thetas``.
    """
    if phi_c is None:
        pairs = list(phi_t)
        phi_t = np.stack([p.phi_t for p in pairs])
        phi_c = np.stack([p.phi_c for p in pairs])
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.ndim == 1:
        thetas = thetas[None]
    S = thetas.shape[0]
    if S == 0:
        raise ValueError("loss over an empty batch")
    corr, gain, dcorr, dgain = surrogate_terms(phi_t, phi_c, thetas)
    value = -float(np.sum(corr + alpha * gain)) / S
    grad = -(dcorr + alpha * dgain) / S
    return LossReport(value=value, corr_terms=corr, gain_terms=gain, alpha=alpha), grad


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    S: int = 200
    lr: float = 1e-3
    epochs: int = 30
    alpha: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.S < 1 or self.epochs < 0 or not self.lr > 0:
            raise ValueError(f"bad training config {self}")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    gamma_r_db: float
    gamma_c_db: float


def evaluate_phases(data: ChannelDataset, theta: np.ndarray, scn: Scenario):
    """Per-sample ``(gamma_r, gamma_c, feasible)`` through the closed-form beamformer."""
    v = euler_map(theta)
    ht = np.einsum("bn,bnm->bm", v, np.conj(data.phi_t))
    hc = np.einsum("bn,bnm->bm", v, np.conj(data.phi_c))
    return closed_form_snrs(ht, hc, scn)


def mean_db(x, feasible) -> float:
    x = np.asarray(x)[np.asarray(feasible, dtype=bool)]
    return float(np.mean(db_from_linear(x))) if x.size else float("nan")


def _design_batch(model, data, batch=500):
    out = []
    for start in range(0, len(data), batch):
        sub = data[start:start + batch]
        inputs, _ = build_inputs(sub.phi_t, sub.phi_c)
        out.append(predict_phases(model, inputs, "eval"))
    return np.concatenate(out) if out else np.zeros((0, model.cfg.N))


def train(model: Model, data: ChannelDataset, cfg: TrainConfig, scn: Scenario | None = None,
          heldout: ChannelDataset | None = None, progress=None):
    """Adam on the unsupervised loss; updates ``model`` in place.

    Returns ``(model, log)`` with one :class:`EpochLog` per epoch.  SNR
    columns are ``nan`` unless both ``scn`` and ``heldout`` are given.
    """
    if data.N != model.cfg.N:
        raise ValueError(f"dataset N={data.N} does not match model N={model.cfg.N}")
    if heldout is not None and heldout.N != model.cfg.N:
        raise ValueError(f"held-out N={heldout.N} does not match model N={model.cfg.N}")
    model.adam.lr = cfg.lr
    params = model.param_list()
    dtype = params[0].data.dtype
    log = []
    for epoch in range(1, cfg.epochs + 1):
        epoch_seed = int(make_rng(cfg.seed, epoch, purpose=13).integers(2 ** 62))
        total = 0.0
        for idx in batch_iter(len(data), cfg.S, epoch_seed):
            phi_t, phi_c = data.phi_t[idx], data.phi_c[idx]
            inputs, _ = build_inputs(phi_t, phi_c)
            inputs = inputs.astype(dtype, copy=False)
            box = {}

            def head(theta, phi_t=phi_t, phi_c=phi_c, box=box):
                report, grad = loss_l2(phi_t, phi_c, theta, cfg.alpha)
                box["report"] = report
                return report.value, grad.astype(theta.dtype)

            with Tape() as tape:
                theta = forward(model, inputs, train=True)
                loss = ad.custom_scalar(theta, head)
            grads = ad.backward(tape, loss, params)
            ad.adam_step([p.data for p in params], grads, model.adam)
            total += box["report"].value * len(idx)
        row = EpochLog(epoch=epoch, loss=total / len(data), gamma_r_db=float("nan"), gamma_c_db=float("nan"))
        if scn is not None and heldout is not None and len(heldout):
            gr, gc, feas = evaluate_phases(heldout, _design_batch(model, heldout), scn)
            row.gamma_r_db, row.gamma_c_db = mean_db(gr, feas), mean_db(gc, feas)
        log.append(row)
        if progress is not None:
            progress(row)
    return model, log


# ---------------------------------------------------------------- persistence

MODEL_MAGIC = b"IBFM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHHHH")


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _pack_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        avail = len(self.raw) - self.pos
        if avail < n:
            raise ModelFormatError(f"truncated model file: {what} needs {n} bytes, {avail} available "
                                   f"({n - avail} missing)", self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def tensor(self, expected_shape, what: str) -> np.ndarray:
        start = self.pos
        (ndim,) = self.unpack("<B", f"{what} rank")
        shape = self.unpack(f"<{ndim}I", f"{what} shape") if ndim else ()
        if tuple(shape) != tuple(expected_shape):
            raise ModelFormatError(f"{what}: stored shape {tuple(shape)} != expected {tuple(expected_shape)}", start)
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").reshape(shape).astype(np.float64)


def save_model(path, model: Model) -> None:
    """Write the ``IBFM`` v1 file: header, parameters, BN statistics, Adam state."""
    cfg = model.cfg
    chunks = [_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, cfg.N, cfg.L, cfg.base_channels)]
    chunks.append(struct.pack("<I", len(model.params)))
    for t in model.params.values():
        chunks.append(_pack_tensor(t.data))
    chunks.append(struct.pack("<I", len(model.bn)))
    for s in model.bn.values():
        chunks += [_pack_tensor(s.running_mean), _pack_tensor(s.running_var), struct.pack("<dd", s.momentum, s.eps)]
    a = model.adam
    chunks.append(struct.pack("<ddddQB", a.lr, a.beta1, a.beta2, a.eps, a.step, 1 if a.m else 0))
    if a.m:
        for m, v in zip(a.m, a.v):
            chunks += [_pack_tensor(m), _pack_tensor(v)]
    with open(os.fspath(path), "wb") as fh:
        fh.write(b"".join(chunks))


def load_model(path) -> Model:
    with open(os.fspath(path), "rb") as fh:
        r = _Reader(fh.read())
    magic, version, N, L, base = r.unpack(_MODEL_HEADER.format, "header")
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", 0)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}", 4)
    try:
        cfg = NetConfig(N=N, L=L, base_channels=base)
    except ValueError as exc:
        raise ModelFormatError(f"invalid network config: {exc}", 6) from None
    model = build_net(cfg, seed=0)
    (n_params,) = r.unpack("<I", "parameter count")
    if n_params != len(model.params):
        raise ModelFormatError(f"{n_params} parameter tensors stored, architecture has {len(model.params)}", r.pos - 4)
    for name, t in model.params.items():
        t.data = r.tensor(t.shape, name)
    (n_bn,) = r.unpack("<I", "batch-norm count")
    if n_bn != len(model.bn):
        raise ModelFormatError(f"{n_bn} batch-norm layers stored, architecture has {len(model.bn)}", r.pos - 4)
    for name, s in model.bn.items():
        s.running_mean = r.tensor(s.running_mean.shape, f"{name}.running_mean")
        s.running_var = r.tensor(s.running_var.shape, f"{name}.running_var")
        s.momentum, s.eps = r.unpack("<dd", f"{name} momentum/eps")
    lr, b1, b2, eps, step, has_moments = r.unpack("<ddddQB", "optimizer state")
    adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
    if has_moments:
        for name, t in model.params.items():
            adam.m.append(r.tensor(t.shape, f"{name} first moment"))
            adam.v.append(r.tensor(t.shape, f"{name} second moment"))
    model.adam = adam
    if r.pos != len(r.raw):
        raise ModelFormatError(f"{len(r.raw) - r.pos} trailing bytes", r.pos)
    return model
