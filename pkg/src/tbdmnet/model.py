"""TBDM-Net: bidirectional, densely connected dilated TAB stacks with learnable multi-scale fusion.

Shapes: inputs are ``[B, C0, T]``. Each TAB maps its dense input
(``C0 + i*F`` channels for the i-th block, zero-based) to ``F`` channels.
Per scale the forward and (time-realigned) reverse outputs are concatenated,
reduced back to ``F`` channels by a width-1 convolution, averaged over time and
fused with one learnable scalar per scale before the linear classifier.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .errors import ConfigError

N_MFCC = 39


@dataclass
class ModelConfig:
    n_tabs: int = 6
    dilations: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])
    filters: int = 39
    kernel: int = 2
    activation: str = "gelu"
    bidirectional: bool = True
    multiscale: bool = True
    dropout_rate: float = 0.1
    use_batch_norm: bool = True
    input_channels: int = 39
    n_classes: int = 7
    merge: str = "concat"

    def __post_init__(self):
        self.dilations = [int(d) for d in self.dilations]
        self.activation = self.activation.lower()

    def validate(self) -> "ModelConfig":
        if self.n_tabs < 1:
            raise ConfigError(f"n_tabs must be >= 1, got {self.n_tabs}")
        if len(self.dilations) != self.n_tabs:
            raise ConfigError(f"length(dilations) == n_tabs violated: {len(self.dilations)} dilations for {self.n_tabs} TABs")
        if any(d < 1 for d in self.dilations) or any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ConfigError(f"dilations must be strictly increasing positive integers, got {self.dilations}")
        if self.filters < 1 or self.kernel < 1 or self.input_channels < 1:
            raise ConfigError("filters, kernel and input_channels must be positive")
        if N_MFCC <= self.input_channels <= N_MFCC + 2 and self.filters != N_MFCC:
            raise ConfigError(f"filters must equal the {N_MFCC} MFCC coefficients for MFCC inputs, got {self.filters}")
        if self.n_classes < 1:
            raise ConfigError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"activation must be gelu or relu, got {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.merge not in ("concat", "sum"):
            raise ConfigError(f"merge must be concat or sum, got {self.merge!r}")
        return self

    @property
    def has_reduction(self) -> bool:
        return not (self.bidirectional and self.merge == "sum")

    @property
    def merged_channels(self) -> int:
        return 2 * self.filters if (self.bidirectional and self.merge == "concat") else self.filters

    def tab_input_widths(self) -> list[int]:
        return [self.input_channels + i * self.filters for i in range(self.n_tabs)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState


@dataclass
class TabParams:
    conv1: Conv
    conv2: Conv
    bn1: Optional[Norm] = None
    bn2: Optional[Norm] = None

    def sublayers(self):
        yield "conv1", self.conv1, "bn1", self.bn1
        yield "conv2", self.conv2, "bn2", self.bn2


@dataclass
class ModelParams:
    fwd: list
    rev: Optional[list]
    reduce: list  # one Conv (or None when unused) per scale; empty for merge="sum"
    fusion: Optional[Tensor]
    fc_w: Tensor
    fc_b: Tensor

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for tag, tabs in (("fwd", self.fwd), ("rev", self.rev or [])):
            for i, tab in enumerate(tabs):
                for cname, conv, nname, norm in tab.sublayers():
                    out.append((f"{tag}.{i}.{cname}.weight", conv.weight))
                    out.append((f"{tag}.{i}.{cname}.bias", conv.bias))
                    if norm is not None:
                        out.append((f"{tag}.{i}.{nname}.gamma", norm.gamma))
                        out.append((f"{tag}.{i}.{nname}.beta", norm.beta))
        for k, conv in enumerate(self.reduce):
            if conv is not None:
                out.append((f"reduce.{k}.weight", conv.weight))
                out.append((f"reduce.{k}.bias", conv.bias))
        if self.fusion is not None:
            out.append(("fusion.weight", self.fusion))
        out.append(("fc.weight", self.fc_w))
        out.append(("fc.bias", self.fc_b))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for tag, tabs in (("fwd", self.fwd), ("rev", self.rev or [])):
            for i, tab in enumerate(tabs):
                for _, _, nname, norm in tab.sublayers():
                    if norm is not None:
                        out.append((f"{tag}.{i}.{nname}.running_mean", norm.state.running_mean))
                        out.append((f"{tag}.{i}.{nname}.running_var", norm.state.running_var))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, t in self.named_parameters():
            yield name, t.data
        yield from self.named_buffers()

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite values in place from a name -> array mapping (all names required)."""
        for name, arr in self.state_arrays():
            if name not in arrays:
                raise KeyError(f"missing tensor {name!r}")
            src = arrays[name]
            if src.shape != arr.shape:
                raise ValueError(f"tensor {name!r}: expected shape {arr.shape}, got {src.shape}")
            arr[...] = src

    def as_dtype(self, dtype) -> "ModelParams":
        out = self.copy()
        for _, t in out.named_parameters():
            t.data = t.data.astype(dtype)
        for tabs in (out.fwd, out.rev or []):
            for tab in tabs:
                for _, _, _, norm in tab.sublayers():
                    if norm is not None:
                        norm.state.running_mean = norm.state.running_mean.astype(dtype)
                        norm.state.running_var = norm.state.running_var.astype(dtype)
        return out


# ---------------------------------------------------------------------------
# construction


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _conv(rng, cout: int, cin: int, k: int, dtype) -> Conv:
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias, fan_in = cin * k
    fan_in = cin * k
    return Conv(_uniform(rng, (cout, cin, k), fan_in, dtype), _uniform(rng, (cout,), fan_in, dtype))


def _norm(channels: int, dtype) -> Norm:
    return Norm(
        Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        BatchNormState.fresh(channels, dtype),
    )


def _tab(rng, cin: int, config: ModelConfig, dtype) -> TabParams:
    F, k = config.filters, config.kernel
    conv1 = _conv(rng, F, cin, k, dtype)
    conv2 = _conv(rng, F, F, k, dtype)
    bn1 = _norm(F, dtype) if config.use_batch_norm else None
    bn2 = _norm(F, dtype) if config.use_batch_norm else None
    return TabParams(conv1, conv2, bn1, bn2)


def build(config: ModelConfig, rng: np.random.Generator, dtype=None) -> ModelParams:
    """Initialise parameters.

    Draw order: forward TABs, reverse TABs, reduction convs, classifier.
    """
    config.validate()
    dtype = np.dtype(dtype or ag.default_dtype())
    widths = config.tab_input_widths()
    fwd = [_tab(rng, w, config, dtype) for w in widths]
    rev = [_tab(rng, w, config, dtype) for w in widths] if config.bidirectional else None

    reduce = []
    if config.has_reduction:
        for k in range(config.n_tabs):
            used = config.multiscale or k == config.n_tabs - 1
            reduce.append(_conv(rng, config.filters, config.merged_channels, 1, dtype) if used else None)

    fusion = None
    if config.multiscale:
        fusion = Tensor(np.full(config.n_tabs, 1.0 / config.n_tabs, dtype=dtype), requires_grad=True)

    fc_w = _uniform(rng, (config.filters, config.n_classes), config.filters, dtype)
    fc_b = _uniform(rng, (config.n_classes,), config.filters, dtype)
    return ModelParams(fwd, rev, reduce, fusion, fc_w, fc_b)


def tab_param_count(cin: int, config: ModelConfig) -> int:
    F, k = config.filters, config.kernel
    n = F * cin * k + F + F * F * k + F
    if config.use_batch_norm:
        n += 4 * F
    return n


def param_count(config: ModelConfig) -> int:
    """Learnable parameter count of ``build(config)``; running statistics excluded."""
    config.validate()
    F, K = config.filters, config.n_tabs
    per_direction = sum(tab_param_count(w, config) for w in config.tab_input_widths())
    total = per_direction * (2 if config.bidirectional else 1)
    if config.has_reduction:
        n_reduce = K if config.multiscale else 1
        total += n_reduce * (F * config.merged_channels + F)
    if config.multiscale:
        total += K
    total += F * config.n_classes + config.n_classes
    return total


def swap_directions(params: ModelParams, config: ModelConfig) -> ModelParams:
    """Exchange forward and reverse stacks, permuting the reduction inputs to match.

    Running this on a time-reversed input reproduces the original logits.
    """
    if not config.bidirectional:
        raise ConfigError("swap_directions needs a bidirectional model")
    out = params.copy()
    out.fwd, out.rev = out.rev, out.fwd
    F = config.filters
    if config.merge == "concat":
        for conv in out.reduce:
            if conv is not None:
                w = conv.weight.data
                conv.weight.data = np.concatenate([w[:, F:], w[:, :F]], axis=1)
    return out


# ---------------------------------------------------------------------------
# forward


def tab_forward(
    x: Tensor,
    tab: TabParams,
    dilation: int,
    config: ModelConfig,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Two (conv -> norm -> activation -> spatial dropout) sub-layers with one dilation."""
    h = x
    for _, conv, _, norm in tab.sublayers():
        h = ag.causal_dilated_conv1d(h, conv.weight, conv.bias, dilation)
        if norm is not None:
            h = ag.batch_norm_1d(h, norm.gamma, norm.beta, norm.state, mode)
        h = ag.activation(h, config.activation)
        h = ag.spatial_dropout(h, config.dropout_rate, mode, rng)
    return h


def directional_stack(
    x: Tensor,
    tabs: list,
    config: ModelConfig,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> list[Tensor]:
    outputs = []
    h = x
    for tab, d in zip(tabs, config.dilations):
        y = tab_forward(h, tab, d, config, mode, rng)
        outputs.append(y)
        h = ag.concat_channels([h, y])
    return outputs


def forward(
    x: Tensor,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, np.ndarray]:
    """Return ``(logits, probs)`` for a ``[B, C0, T]`` batch."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 3 or x.shape[1] != config.input_channels:
        raise ConfigError(f"model expects [B, {config.input_channels}, T] input, got shape {x.shape}")
    K = config.n_tabs
    ys_fwd = directional_stack(x, params.fwd, config, mode, rng)
    ys_rev = None
    if config.bidirectional:
        ys_rev = directional_stack(ag.reverse_time(x), params.rev, config, mode, rng)

    scales = range(K) if config.multiscale else [K - 1]
    pooled = []
    for k in scales:
        if ys_rev is None:
            g = ys_fwd[k]
        elif config.merge == "concat":
            g = ag.concat_channels([ys_fwd[k], ag.reverse_time(ys_rev[k])])
        else:
            g = ag.add(ys_fwd[k], ag.reverse_time(ys_rev[k]))
        if config.has_reduction:
            red = params.reduce[k]
            g = ag.causal_dilated_conv1d(g, red.weight, red.bias, 1)
        pooled.append(ag.global_avg_pool_time(g))

    fused = ag.weighted_sum(pooled, params.fusion) if config.multiscale else pooled[0]
    logits = ag.linear(fused, params.fc_w, params.fc_b)
    return logits, ag.softmax(logits.data)


def predict_proba(
    params: ModelParams,
    config: ModelConfig,
    X: np.ndarray,
    batch_size: int = 64,
) -> np.ndarray:
    """Eval-mode class probabilities for ``X`` of shape [N, C0, T]."""
    X = np.asarray(X)
    dtype = params.fc_w.dtype
    out = []
    for start in range(0, len(X), batch_size):
        xb = Tensor(X[start : start + batch_size], dtype=dtype)
        _, probs = forward(xb, params, config, "eval")
        out.append(probs)
    if not out:
        return np.zeros((0, config.n_classes), dtype=dtype)
    return np.concatenate(out, axis=0)
