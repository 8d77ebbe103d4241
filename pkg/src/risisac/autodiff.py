"""Tape-based reverse-mode differentiation for the handful of layers IBF-Net uses.

Tensors are batched ``NCHW`` numpy arrays.  Operations executed while a
:class:`Tape` is active are recorded if any input requires a gradient;
:func:`backward` then walks the records in reverse execution order.

>>> w = Tensor(np.eye(2), requires_grad=True)
>>> with Tape() as tape:
...     y = linear(Tensor(np.array([1.0, 2.0])), w)
...     loss = sum_squares(y)
>>> backward(tape, loss, [w])[0]
array([[2., 4.],
       [4., 8.]])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "BatchNormState",
    "AdamState",
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "batchnorm2d",
    "relu",
    "avgpool2d",
    "linear",
    "reshape",
    "sum_squares",
    "weighted_sum",
    "custom_scalar",
    "backward",
    "adam_step",
]


class Tensor:
    """An ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    _stack: list = []

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, inputs, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("operation produced non-finite values")
    out = Tensor(data)
    if Tape._stack and any(t is not None and t.requires_grad for t in inputs):
        out.requires_grad = True
        Tape._stack[-1].records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def _chan_sum(a):
    return np.einsum("bchw->c", a)


def _out_size(size, k, stride, pad):
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ValueError(f"kernel {k} with pad {pad} does not fit spatial size {size}")
    return out


def _unbatched(op, x, *args, **kwargs):
    # lets the conv ops take a single C x H x W image
    y = op(reshape(x, (1,) + x.shape), *args, **kwargs)
    return reshape(y, y.shape[1:])


# ---------------------------------------------------------------- layers

def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation, ``weight`` shaped ``(C_out, C_in, k, k)``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    if x.data.ndim == 3:
        return _unbatched(conv2d, x, weight, bias, stride=stride, pad=pad)
    B, C, H, W = x.shape
    Co, Ci, k, k2 = weight.shape
    if Ci != C or k != k2:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Ci} (kernel {k}x{k2})")
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = weight.data.reshape(Co, C * k * k)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = _chan_sum(g) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for p in range(k):
                for q in range(k):
                    gxp[:, :, p:p + stride * Ho:stride, q:q + stride * Wo:stride] += \
                        dcols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw, gb

    return _emit(out, (x, weight, bias), back)


def depthwise_conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel cross-correlation, ``weight`` shaped ``(C, k, k)``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    if x.data.ndim == 3:
        return _unbatched(depthwise_conv2d, x, weight, bias, stride=stride, pad=pad)
    B, C, H, W = x.shape
    Cw, k, k2 = weight.shape
    if Cw != C or k != k2:
        raise ValueError(f"depthwise_conv2d: input has {C} channels, weight has {Cw} (kernel {k}x{k2})")
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wd = weight.data
    out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(x.data, wd))
    for p in range(k):
        for q in range(k):
            out += xp[:, :, p:p + stride * Ho:stride, q:q + stride * Wo:stride] * wd[None, :, p, q, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gw = np.empty_like(wd) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for p in range(k):
            for q in range(k):
                sl = (slice(None), slice(None), slice(p, p + stride * Ho, stride), slice(q, q + stride * Wo, stride))
                if gw is not None:
                    gw[:, p, q] = np.einsum("bchw,bchw->c", g, xp[sl])
                if gxp is not None:
                    gxp[sl] += g * wd[None, :, p, q, None, None]
        gb = _chan_sum(g) if bias is not None and bias.requires_grad else None
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw, gb

    return _emit(out, (x, weight, bias), back)


def pointwise_conv2d(x, weight, bias=None) -> Tensor:
    """1x1 convolution, ``weight`` shaped ``(C_out, C_in)``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    if x.data.ndim == 3:
        return _unbatched(pointwise_conv2d, x, weight, bias)
    B, C, H, W = x.shape
    Co, Ci = weight.shape
    if Ci != C:
        raise ValueError(f"pointwise_conv2d: input has {C} channels, weight expects {Ci}")
    xr = x.data.reshape(B, C, H * W)
    out = weight.data @ xr
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(B, Co, H, W)

    def back(g):
        gr = g.reshape(B, Co, H * W)
        gw = None
        if weight.requires_grad:
            gw = gr.transpose(1, 0, 2).reshape(Co, B * H * W) @ xr.transpose(0, 2, 1).reshape(B * H * W, C)
        gb = _chan_sum(g) if bias is not None and bias.requires_grad else None
        gx = (weight.data.T @ gr).reshape(B, C, H, W) if x.requires_grad else None
        return gx, gw, gb

    return _emit(out, (x, weight, bias), back)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batchnorm2d(x, gamma, beta, state: BatchNormState, train: bool = True) -> Tensor:
    """Per-channel normalization over ``(B, H, W)``.

    Training mode uses the biased batch variance and folds the batch moments
    into ``state`` with weight ``state.momentum``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    B, C, H, W = x.shape
    n = B * H * W
    if n < 1:
        raise ValueError("batchnorm2d needs at least one value per channel")
    if train:
        mean = _chan_sum(x.data) / n
        xc = x.data - mean[None, :, None, None]
        var = np.einsum("bchw,bchw->c", xc, xc) / n
        mom = state.momentum
        state.running_mean = (1.0 - mom) * state.running_mean + mom * mean
        state.running_var = (1.0 - mom) * state.running_var + mom * var
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g):
        gbeta = _chan_sum(g)
        gxhat_xhat = np.einsum("bchw,bchw->c", g, xhat)
        ggamma = gxhat_xhat if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if train:
                s1 = (gamma.data * gbeta)[None, :, None, None]
                s2 = (gamma.data * gxhat_xhat)[None, :, None, None]
                gx = (inv_std[None, :, None, None] / n) * (n * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, (gbeta if beta.requires_grad else None)

    return _emit(out, (x, gamma, beta), back)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def avgpool2d(x, k: int) -> Tensor:
    """Non-overlapping ``k x k`` mean pooling."""
    x = _as_tensor(x)
    if x.data.ndim == 3:
        return _unbatched(avgpool2d, x, k)
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"pool size {k} must divide spatial size {H}x{W}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def back(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (B, C, H // k, k, W // k, k))
        return (gx.reshape(B, C, H, W),)

    return _emit(out, (x,), back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` shaped ``(D_in,)`` or ``(B, D_in)``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = (g @ weight.data) if x.requires_grad else None
        return gx, gw, gb

    return _emit(out, (x, weight, bias), back)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def sum_squares(x) -> Tensor:
    x = _as_tensor(x)
    return _emit(np.asarray(np.sum(x.data * x.data)), (x,), lambda g: (2.0 * g * x.data,))


def weighted_sum(x, weights) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant ``weights``; handy as a probe loss."""
    x = _as_tensor(x)
    weights = np.asarray(weights)
    return _emit(np.asarray(np.sum(x.data * weights)), (x,), lambda g: (g * weights,))


def custom_scalar(x, fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Scalar node whose value and gradient come from ``fn(x.data) -> (value, dvalue/dx)``.

    Used to splice losses computed outside the tape (complex-valued channel
    math) into the network graph.
    """
    x = _as_tensor(x)
    value, grad = fn(x.data)
    grad = np.asarray(grad)
    if grad.shape != x.shape:
        raise ValueError(f"custom_scalar gradient shape {grad.shape} != input shape {x.shape}")
    return _emit(np.asarray(value, dtype=np.float64), (x,), lambda g: (g * grad,))


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None, grad_output=1.0):
    """Propagate ``d loss`` through ``tape`` and accumulate into leaf ``.grad``.

    Returns the gradients of ``params`` (zeros for parameters the loss does
    not depend on) when given.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    end = None
    for i in range(len(tape.records) - 1, -1, -1):
        if tape.records[i].out is loss:
            end = i
            break
    if end is None:
        raise RuntimeError("loss was not produced on this tape; run the forward pass first")

    grads = {id(loss): np.full(loss.shape, grad_output, dtype=loss.data.dtype)}
    leaves = {}
    produced = {id(r.out) for r in tape.records[:end + 1]}
    for rec in reversed(tape.records[:end + 1]):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if inp is None or gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
    if params is None:
        return None
    return [np.array(grads[id(p)]) if id(p) in grads else np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
