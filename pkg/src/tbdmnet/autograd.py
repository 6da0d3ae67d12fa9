"""Small dense-tensor engine with a reverse-mode tape.

Only the operations the network needs are provided. Recording happens while a
:class:`Tape` is active (``with Tape() as tape: ...``); outside a tape every op
is a plain numpy computation, which is what evaluation uses.

Precision follows the arrays: ``float32`` by default, ``float64`` inside
``with precision(np.float64):`` (used by the gradient checks).
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "precision",
    "default_dtype",
    "backward",
    "causal_dilated_conv1d",
    "activation",
    "concat_channels",
    "reverse_time",
    "batch_norm_1d",
    "BatchNormState",
    "spatial_dropout",
    "global_avg_pool_time",
    "linear",
    "weighted_sum",
    "add",
    "mul",
    "tensor_sum",
    "softmax",
    "softmax_cross_entropy",
]

_local = threading.local()

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """An array plus gradient bookkeeping.

    ``node`` is ``(tape, index)`` for tensors produced by a recorded op and
    ``None`` for leaves and for values computed outside any tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered log of differentiable operations."""

    records: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs, output: Tensor, backward_fn) -> None:
        output.node = (self, len(self.records))
        self.records.append(_Record(tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node[0] is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        last = loss.node[1]
        for rec in reversed(self.records[: last + 1]):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            _store(rec.output, g_out)
            for inp, g in zip(rec.inputs, rec.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # whatever is left are leaves (no producing record on this tape)
        leaves = {}
        for rec in self.records[: last + 1]:
            for inp in rec.inputs:
                if id(inp) in grads:
                    leaves[id(inp)] = inp
        for key, t in leaves.items():
            _store(t, grads[key])


def _store(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor that feeds ``loss``."""
    if loss.node is None:
        raise ValueError("loss is not attached to a tape")
    loss.node[0].backward(loss)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(inputs, out, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def causal_dilated_conv1d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Left-padded dilated convolution; output frame t sees input frames <= t.

    ``y[b,o,t] = bias[o] + sum_{c,j} weight[o,c,j] * xpad[b,c,t + j*dilation]``
    where ``xpad`` carries ``(k-1)*dilation`` leading zeros.
    """
    if dilation is None or int(dilation) != dilation or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation!r}")
    dilation = int(dilation)
    if x.data.ndim != 3:
        raise ValueError(f"conv input must be [B, C, T], got shape {x.shape}")
    if weight.data.ndim != 3:
        raise ValueError(f"conv weight must be [Cout, Cin, k], got shape {weight.shape}")
    B, cin, T = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise ValueError(f"conv channel mismatch: input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv bias must have shape ({cout},), got {bias.shape}")
    if T < 1:
        raise ValueError("conv input needs at least one frame")

    pad = (k - 1) * dilation
    # im2col: cols[b, t, j*cin + c] = xpad[b, c, t + j*dilation]
    xt = np.ascontiguousarray(x.data.transpose(0, 2, 1))
    if pad:
        xt = np.concatenate([np.zeros((B, pad, cin), dtype=xt.dtype), xt], axis=1)
    cols = np.concatenate([xt[:, j * dilation : j * dilation + T] for j in range(k)], axis=2).reshape(B * T, k * cin)
    W = weight.data
    wmat = W.transpose(0, 2, 1).reshape(cout, k * cin)
    y = (cols @ wmat.T + bias.data).reshape(B, T, cout).transpose(0, 2, 1)
    y = np.ascontiguousarray(y)

    def _backward(g):
        gx = gw = gb = None
        gflat = g.transpose(0, 2, 1).reshape(B * T, cout)
        if bias.requires_grad:
            gb = gflat.sum(axis=0)
        if weight.requires_grad:
            gw = (gflat.T @ cols).reshape(cout, k, cin).transpose(0, 2, 1)
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(B, T, k, cin)
            gxt = np.zeros((B, T + pad, cin), dtype=gcols.dtype)
            for j in range(k):
                gxt[:, j * dilation : j * dilation + T] += gcols[:, :, j]
            gx = gxt[:, pad:].transpose(0, 2, 1)
        return gx, gw, gb

    return _make(y, (x, weight, bias), _backward)


# ---------------------------------------------------------------------------
# elementwise


def _gelu(v):
    return v * 0.5 * (1.0 + erf(v / _SQRT2))


def _gelu_grad(v):
    cdf = 0.5 * (1.0 + erf(v / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    return cdf + v * pdf


def activation(x: Tensor, kind: str = "gelu") -> Tensor:
    """Elementwise GELU (exact erf form), ReLU or sigmoid."""
    kind = kind.lower()
    v = x.data
    if kind == "gelu":
        y = _gelu(v).astype(v.dtype, copy=False)

        def _backward(g):
            return (g * _gelu_grad(v),)

    elif kind == "relu":
        y = np.maximum(v, 0)

        def _backward(g):
            return (g * (v > 0),)

    elif kind == "sigmoid":
        y = (1.0 / (1.0 + np.exp(-v))).astype(v.dtype, copy=False)

        def _backward(g):
            return (g * y * (1 - y),)

    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _make(y, (x,), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    av, bv = a.data, b.data
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def tensor_sum(x: Tensor) -> Tensor:
    v = x.data
    return _make(np.asarray(v.sum(), dtype=v.dtype), (x,), lambda g: (np.broadcast_to(g, v.shape),))


# ---------------------------------------------------------------------------
# structural


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    B, _, T = xs[0].shape
    for t in xs:
        if t.data.ndim != 3 or t.shape[0] != B or t.shape[2] != T:
            raise ValueError(f"concat_channels: shape {t.shape} incompatible with batch {B}, frames {T}")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)
    y = np.concatenate([t.data for t in xs], axis=1)

    def _backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _make(y, xs, _backward)


def reverse_time(x: Tensor) -> Tensor:
    y = np.ascontiguousarray(x.data[..., ::-1])
    return _make(y, (x,), lambda g: (g[..., ::-1],))


def global_avg_pool_time(x: Tensor) -> Tensor:
    T = x.shape[-1]
    if T < 1:
        raise ValueError("cannot pool over zero frames")
    y = x.data.mean(axis=-1)

    def _backward(g):
        return (np.repeat(g[..., None] / T, T, axis=-1),)

    return _make(y, (x,), _backward)


# ---------------------------------------------------------------------------
# normalisation / regularisation


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> "BatchNormState":
        dtype = dtype or default_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm_1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalisation over (batch, time).

    Train mode uses batch statistics and updates ``state`` in place (running
    variance uses the unbiased estimate). Eval mode uses the running stats.
    """
    B, C, T = x.shape
    v = x.data
    g_ = gamma.data[None, :, None]
    b_ = beta.data[None, :, None]
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + BN_EPS)
        scale = (gamma.data * inv).astype(v.dtype, copy=False)
        xhat = (v - state.running_mean[None, :, None]) * inv[None, :, None]
        y = (xhat * g_ + b_).astype(v.dtype, copy=False)

        def _backward(g):
            return (
                g * scale[None, :, None],
                (g * xhat).sum(axis=(0, 2)),
                g.sum(axis=(0, 2)),
            )

        return _make(y, (x, gamma, beta), _backward)

    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n = B * T
    if n < 2:
        raise ValueError("batch_norm_1d in train mode needs batch*frames >= 2")
    mean = v.mean(axis=(0, 2))
    centered = v - mean[None, :, None]
    var = (centered**2).mean(axis=(0, 2))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = centered * inv[None, :, None]
    y = (xhat * g_ + b_).astype(v.dtype, copy=False)

    m = state.momentum
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    state.running_var[...] = (1 - m) * state.running_var + m * var * (n / (n - 1))

    def _backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2))
        dbeta = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            gx = (inv[None, :, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        return gx, dgamma, dbeta

    return _make(y, (x, gamma, beta), _backward)


def spatial_dropout(x: Tensor, rate: float, mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Drops whole channels of a [B, C, T] tensor with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("spatial_dropout in train mode needs an rng")
    B, C = x.shape[0], x.shape[1]
    keep = rng.random((B, C)) >= rate
    mask = (keep / (1.0 - rate)).astype(x.data.dtype)[:, :, None]
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# head


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or W.data.ndim != 2:
        raise ValueError(f"linear expects x [B, D] and W [D, O], got {x.shape} and {W.shape}")
    if x.shape[1] != W.shape[0]:
        raise ValueError(f"linear dimension mismatch: x has {x.shape[1]} features, W expects {W.shape[0]}")
    if b.shape != (W.shape[1],):
        raise ValueError(f"linear bias must have shape ({W.shape[1]},), got {b.shape}")
    xv, Wv = x.data, W.data
    y = xv @ Wv + b.data

    def _backward(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return _make(y, (x, W, b), _backward)


def weighted_sum(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """``sum_k w[k] * xs[k]`` with learnable scalar weights ``w``."""
    xs = list(xs)
    if w.shape != (len(xs),):
        raise ValueError(f"need one weight per input: {len(xs)} inputs, weights shape {w.shape}")
    shape = xs[0].shape
    for t in xs:
        if t.shape != shape:
            raise ValueError(f"weighted_sum inputs must share a shape, got {t.shape} and {shape}")
    wv = w.data
    y = wv[0] * xs[0].data
    for k in range(1, len(xs)):
        y = y + wv[k] * xs[k].data

    def _backward(g):
        gw = np.array([(g * t.data).sum() for t in xs], dtype=wv.dtype)
        return tuple(g * wv[k] for k in range(len(xs))) + (gw,)

    return _make(np.asarray(y), (*xs, w), _backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood and the class probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    v = logits.data
    z = v - v.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    loss = -logp[np.arange(B), labels].mean()

    def _backward(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1.0
        return (d * (g / B),)

    return _make(np.asarray(loss, dtype=v.dtype), (logits,), _backward), probs
