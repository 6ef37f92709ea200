"""
Minimal reverse-mode tensor kit
Dense numpy layers with hand-written backward passes, Adam, spectral
normalization and the weight snapshot format

Tensors are numpy arrays laid out (N, C, H, W) or (N, F). Runtime code is
float32; every layer preserves the dtype it is given so gradient checks can
run in float64.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import (
    ADAM_BETAS, ADAM_EPS, ATTENTION_REDUCTION, BN_EPS, BN_MOMENTUM, PRELU_INIT,
    SNAPSHOT_FORMAT_VERSION, SPECTRAL_EPS,
)
from errors import CheckpointError, ParseError, ShapeError, ShapeMismatch, StateError

DTYPE = np.float32


class Parameter:
    """A trainable array and its accumulated gradient"""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(DTYPE)


class Layer:
    """Base class: forward caches what backward needs"""

    kind = "layer"

    def __init__(self):
        self.training = True
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    # Structure
    def children(self) -> List[Tuple[str, "Layer"]]:
        return []

    def own_parameters(self) -> List[Tuple[str, Parameter]]:
        return []

    def own_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return []

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self.own_parameters():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self.own_buffers():
            yield prefix + name, b
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def astype(self, dtype) -> "Layer":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        for name, b in list(self.named_buffers()):
            self._assign_buffer(name, b.astype(dtype))
        return self

    def _assign_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if not rest:
            self.set_buffer(head, value)
            return
        dict(self.children())[head]._assign_buffer(rest, value)

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    # Weights
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        if strict:
            missing = (set(params) | set(buffers)) - set(state)
            if missing:
                raise ShapeMismatch(f"State is missing tensors: {sorted(missing)[:5]}")
        for name, value in state.items():
            if name in params:
                target = params[name]
                if target.value.shape != tuple(value.shape):
                    raise ShapeMismatch(f"{name}: expected {target.value.shape}, got {tuple(value.shape)}")
                target.value = np.array(value, dtype=target.value.dtype)
            elif name in buffers:
                if buffers[name].shape != tuple(value.shape):
                    raise ShapeMismatch(f"{name}: expected {buffers[name].shape}, got {tuple(value.shape)}")
                self._assign_buffer(name, np.array(value, dtype=buffers[name].dtype))
            elif strict:
                raise ShapeMismatch(f"Unexpected tensor in state: {name}")


def _check_4d(x: np.ndarray, channels: int, layer: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{layer} input", expected=("N", channels, "H", "W"), actual=x.shape)


class Identity(Layer):
    kind = "identity"

    def forward(self, x):
        self._cache = True
        return x

    def backward(self, grad):
        self._require_cache()
        return grad


class Conv2d(Layer):
    """Grouped 2-D convolution, zero padding (k-1)//2, optional stride"""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 groups: int = 1, bias: bool = True, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError(f"Channels {in_channels}->{out_channels} not divisible by groups={groups}")
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.groups = kernel, stride, groups
        self.padding = (kernel - 1) // 2
        fan_in = (in_channels // groups) * kernel * kernel
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels // groups, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=DTYPE)) if bias else None
        self.weight_override: Optional[np.ndarray] = None

    def own_parameters(self):
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        k, p, s = self.kernel, self.padding, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        _check_4d(x, self.in_channels, "Conv2d")
        n, c, h, w = x.shape
        k, p, s, g = self.kernel, self.padding, self.stride, self.groups
        if k > h + 2 * p or k > w + 2 * p:
            raise ShapeError("Kernel larger than padded input", expected=(k, k), actual=(h, w))
        cg, og = c // g, self.out_channels // g
        weight = self.weight.value if self.weight_override is None else self.weight_override

        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = windows.shape[2], windows.shape[3]
        cols = (windows.reshape(n, g, cg, ho, wo, k, k)
                .transpose(1, 0, 3, 4, 2, 5, 6)
                .reshape(g, n * ho * wo, cg * k * k))
        wmat = weight.reshape(g, og, cg * k * k)
        out = np.matmul(cols, wmat.transpose(0, 2, 1))
        out = out.reshape(g, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, self.out_channels, ho, wo)
        if self.bias is not None:
            out = out + self.bias.value.reshape(1, -1, 1, 1)
        self._cache = (x.shape, cols, wmat, (ho, wo))
        return out

    def backward(self, grad):
        (n, c, h, w), cols, wmat, (ho, wo) = self._require_cache()
        k, p, s, g = self.kernel, self.padding, self.stride, self.groups
        cg, og = c // g, self.out_channels // g

        go = grad.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, og)
        self.weight.grad += np.matmul(go.transpose(0, 2, 1), cols).reshape(self.weight.value.shape)
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=(0, 2, 3))

        dcols = (np.matmul(go, wmat)
                 .reshape(g, n, ho, wo, cg, k, k)
                 .transpose(1, 0, 4, 2, 3, 5, 6)
                 .reshape(n, c, ho, wo, k, k))
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[..., i, j]
        return dxp[:, :, p:p + h, p:p + w]


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=DTYPE)) if bias else None
        self.weight_override: Optional[np.ndarray] = None

    def own_parameters(self):
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError("Linear input", expected=("N", self.in_features), actual=x.shape)
        weight = self.weight.value if self.weight_override is None else self.weight_override
        out = x @ weight.T
        if self.bias is not None:
            out = out + self.bias.value
        self._cache = (x, weight)
        return out

    def backward(self, grad):
        x, weight = self._require_cache()
        self.weight.grad += grad.T @ x
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=0)
        return grad @ weight


def _channel_view(x: np.ndarray, values: np.ndarray) -> np.ndarray:
    return values.reshape((1, -1) + (1,) * (x.ndim - 2))


def _channel_axes(x: np.ndarray) -> Tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


class PReLU(Layer):
    """One learned negative slope per channel"""

    kind = "prelu"

    def __init__(self, channels: int, init: float = PRELU_INIT):
        super().__init__()
        self.channels = channels
        self.alpha = Parameter(np.full(channels, init, dtype=DTYPE))

    def own_parameters(self):
        return [("alpha", self.alpha)]

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError("PReLU input channels", expected=self.channels, actual=x.shape[1])
        a = _channel_view(x, self.alpha.value)
        positive = x > 0
        self._cache = (x, positive)
        return np.where(positive, x, a * x)

    def backward(self, grad):
        x, positive = self._require_cache()
        a = _channel_view(x, self.alpha.value)
        self.alpha.grad += np.where(positive, 0, grad * x).sum(axis=_channel_axes(x))
        return np.where(positive, grad, a * grad)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        positive = x > 0
        self._cache = positive
        return np.where(positive, x, 0).astype(x.dtype)

    def backward(self, grad):
        positive = self._require_cache()
        return np.where(positive, grad, 0).astype(grad.dtype)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        out = sigmoid(x)
        self._cache = out
        return out

    def backward(self, grad):
        out = self._require_cache()
        return grad * out * (1 - out)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=DTYPE))
        self.beta = Parameter(np.zeros(channels, dtype=DTYPE))
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)

    def own_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def set_buffer(self, name, value):
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self, name, value)

    def forward(self, x):
        _check_4d(x, self.channels, "BatchNorm2d")
        axes = (0, 2, 3)
        if self.training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            unbiased = var * count / max(count - 1, 1)
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        else:
            count = None
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self._cache = (xhat, inv_std, count)
        out = xhat * self.gamma.value.reshape(1, -1, 1, 1) + self.beta.value.reshape(1, -1, 1, 1)
        return out.astype(x.dtype)

    def backward(self, grad):
        xhat, inv_std, count = self._require_cache()
        axes = (0, 2, 3)
        self.gamma.grad += (grad * xhat).sum(axis=axes)
        self.beta.grad += grad.sum(axis=axes)
        dxhat = grad * self.gamma.value.reshape(1, -1, 1, 1)
        inv = inv_std.reshape(1, -1, 1, 1)
        if count is None:
            return (dxhat * inv).astype(grad.dtype)
        sum_d = dxhat.sum(axis=axes, keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return (inv / count * (count * dxhat - sum_d - xhat * sum_dx)).astype(grad.dtype)


class PixelShuffle(Layer):
    """(N, C*r*r, H, W) -> (N, C, rH, rW)"""

    kind = "pixelshuffle"

    def __init__(self, factor: int):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        r = self.factor
        n, c, h, w = x.shape
        if c % (r * r):
            raise ShapeError("PixelShuffle channels must divide by r^2", expected=r * r, actual=c)
        self._cache = x.shape
        return x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c // (r * r), h * r, w * r)

    def backward(self, grad):
        n, c, h, w = self._require_cache()
        r = self.factor
        return grad.reshape(n, c // (r * r), h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x):
        self._cache = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad):
        n, c, h, w = self._require_cache()
        return np.broadcast_to(grad / (h * w), (n, c, h, w)).astype(grad.dtype)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._require_cache())


class Add(Layer):
    """Elementwise sum of any number of same-shape inputs"""

    kind = "add"

    def forward(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        shape = inputs[0].shape
        for x in inputs[1:]:
            if x.shape != shape:
                raise ShapeError("Add operands", expected=shape, actual=x.shape)
        self._cache = len(inputs)
        out = inputs[0].copy()
        for x in inputs[1:]:
            out += x
        return out

    def backward(self, grad) -> List[np.ndarray]:
        return [grad] * self._require_cache()


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *layers: Tuple[str, Layer]):
        super().__init__()
        self.layers: List[Tuple[str, Layer]] = list(layers)

    def children(self):
        return self.layers

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        self._cache = True
        return x

    def backward(self, grad):
        self._require_cache()
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class _ChannelGate(Layer):
    """Shared SE / CA mechanics: y = x * gate(x), gate ends in a sigmoid"""

    def __init__(self, channels: int, gate: Sequential):
        super().__init__()
        self.channels = channels
        self.gate = gate

    def children(self):
        return [("gate", self.gate)]

    def forward(self, x):
        _check_4d(x, self.channels, type(self).__name__)
        gate_out = self.gate.forward(x)
        s = gate_out.reshape(x.shape[0], self.channels, 1, 1)
        self._cache = (x, s, gate_out.shape)
        return x * s

    def backward(self, grad):
        x, s, gate_shape = self._require_cache()
        ds = (grad * x).sum(axis=(2, 3)).reshape(gate_shape)
        return grad * s + self.gate.backward(ds)


class SEBlock(_ChannelGate):
    """Squeeze-and-excitation: pooled vector through two fully connected layers"""

    kind = "se"

    def __init__(self, channels: int, reduction: int = ATTENTION_REDUCTION,
                 rng: Optional[np.random.Generator] = None):
        hidden = max(channels // reduction, 1)
        gate = Sequential(
            ("pool", GlobalAvgPool()),
            ("flatten", Flatten()),
            ("fc1", Linear(channels, hidden, rng=rng)),
            ("relu", ReLU()),
            ("fc2", Linear(hidden, channels, rng=rng)),
            ("sigmoid", Sigmoid()),
        )
        super().__init__(channels, gate)


class CABlock(_ChannelGate):
    """Channel attention: pooled map through two 1x1 convolutions"""

    kind = "ca"

    def __init__(self, channels: int, reduction: int = ATTENTION_REDUCTION,
                 rng: Optional[np.random.Generator] = None):
        hidden = max(channels // reduction, 1)
        gate = Sequential(
            ("pool", GlobalAvgPool()),
            ("conv1", Conv2d(channels, hidden, 1, rng=rng)),
            ("relu", ReLU()),
            ("conv2", Conv2d(hidden, channels, 1, rng=rng)),
            ("sigmoid", Sigmoid()),
        )
        super().__init__(channels, gate)


def dsep_conv(in_channels: int, out_channels: int, kernel: int,
              rng: Optional[np.random.Generator] = None) -> Sequential:
    seq = Sequential(
        ("depthwise", Conv2d(in_channels, in_channels, kernel, groups=in_channels, rng=rng)),
        ("pointwise", Conv2d(in_channels, out_channels, 1, rng=rng)),
    )
    seq.kind = "dsep"
    return seq


def inverted_bottleneck(in_channels: int, out_channels: int, kernel: int, expansion: int,
                        rng: Optional[np.random.Generator] = None) -> Sequential:
    hidden = out_channels * expansion
    seq = Sequential(
        ("expand", Conv2d(in_channels, hidden, 1, rng=rng)),
        ("relu1", ReLU()),
        ("depthwise", Conv2d(hidden, hidden, kernel, groups=hidden, rng=rng)),
        ("relu2", ReLU()),
        ("project", Conv2d(hidden, out_channels, 1, rng=rng)),
    )
    seq.kind = "invblock"
    return seq


# ── Spectral normalization ──────────────────────────────────────

@dataclass
class PowerIterationState:
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def random(cls, rows: int, cols: int, rng: np.random.Generator) -> "PowerIterationState":
        u = rng.standard_normal(rows)
        v = rng.standard_normal(cols)
        return cls(_l2normalize(u), _l2normalize(v))


def _l2normalize(v: np.ndarray) -> np.ndarray:
    return v / (np.linalg.norm(v) + SPECTRAL_EPS)


def spectral_normalize(weight: np.ndarray, state: PowerIterationState,
                       update: bool = True) -> Tuple[np.ndarray, PowerIterationState, float]:
    """One power-iteration step, then W / sigma with sigma = u^T W v"""
    wmat = weight.reshape(weight.shape[0], -1)
    u, v = state.u, state.v
    if update:
        v = _l2normalize(wmat.T @ u)
        u = _l2normalize(wmat @ v)
    sigma = float(u @ wmat @ v)
    return weight / sigma, PowerIterationState(u.astype(state.u.dtype), v.astype(state.v.dtype)), sigma


class SpectralNorm(Layer):
    """Wraps a Conv2d or Linear; the wrapped weight is divided by its spectral norm"""

    kind = "spectralnorm"

    def __init__(self, inner: Layer, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.inner = inner
        w = inner.weight.value
        self.power = PowerIterationState.random(w.shape[0], w[0].size, rng)
        self.power = PowerIterationState(self.power.u.astype(w.dtype), self.power.v.astype(w.dtype))

    def children(self):
        return [("inner", self.inner)]

    def own_buffers(self):
        return [("u", self.power.u), ("v", self.power.v)]

    def set_buffer(self, name, value):
        if name == "u":
            self.power = PowerIterationState(value, self.power.v)
        elif name == "v":
            self.power = PowerIterationState(self.power.u, value)
        else:
            raise KeyError(name)

    def forward(self, x):
        w = self.inner.weight.value
        w_sn, self.power, sigma = spectral_normalize(w, self.power, update=self.training)
        self.inner.weight_override = w_sn.astype(w.dtype)
        self._cache = (sigma, self.power.u.copy(), self.power.v.copy())
        return self.inner.forward(x)

    def backward(self, grad):
        sigma, u, v = self._require_cache()
        weight = self.inner.weight
        accumulated = weight.grad
        weight.grad = np.zeros_like(weight.value)
        dx = self.inner.backward(grad)
        g = weight.grad
        correction = float((g * weight.value).sum()) / sigma ** 2
        dw = g / sigma - correction * np.outer(u, v).reshape(weight.value.shape)
        weight.grad = accumulated + dw.astype(accumulated.dtype)
        return dx


# ── Optimizer ───────────────────────────────────────────────────

@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    betas: Tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, lr: float) -> List[np.ndarray]:
    """Bias-corrected Adam; returns the updated arrays and advances `state`"""
    b1, b2 = state.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeMismatch(f"Adam slot {i}: param {p.shape}, grad {g.shape}, moment {state.m[i].shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        updated.append((p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype))
    return updated


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.zeros_like([p.value for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        new_values = adam_step([p.value for p in self.params], [p.grad for p in self.params],
                               self.state, self.lr)
        for p, value in zip(self.params, new_values):
            p.value = value


# ── Snapshots ───────────────────────────────────────────────────

def _snapshot_paths(stem: Path) -> Tuple[Path, Path]:
    stem = Path(stem)
    return Path(f"{stem}.bin"), Path(f"{stem}.json")


def save_snapshot(stem: Path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Raw little-endian float32 blob plus a JSON manifest"""
    bin_path, json_path = _snapshot_paths(stem)
    entries = []
    offset = 0
    try:
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        with open(bin_path, "wb") as f:
            for name in sorted(tensors):
                data = np.ascontiguousarray(tensors[name], dtype="<f4")
                f.write(data.tobytes())
                entries.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
                offset += data.size
        manifest = {"format": SNAPSHOT_FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
        tmp = json_path.with_suffix(".json.tmp")
        with open(tmp, "w") as f:
            json.dump(manifest, f, indent=2)
        tmp.replace(json_path)
    except OSError as e:
        raise CheckpointError(f"Could not write snapshot {stem}: {e}")


def load_snapshot(stem: Path) -> Tuple[Dict[str, np.ndarray], dict]:
    bin_path, json_path = _snapshot_paths(stem)
    try:
        with open(json_path) as f:
            manifest = json.load(f)
        blob = np.fromfile(bin_path, dtype="<f4")
    except OSError as e:
        raise CheckpointError(f"Could not read snapshot {stem}: {e}")
    except json.JSONDecodeError as e:
        raise ParseError(str(json_path), f"invalid manifest: {e}")
    if manifest.get("format") != SNAPSHOT_FORMAT_VERSION:
        raise ParseError("format", f"unsupported snapshot format {manifest.get('format')!r}")
    tensors = {}
    for i, entry in enumerate(manifest.get("tensors", [])):
        start, count = entry["offset"], entry["count"]
        if start + count > blob.size:
            raise ParseError(f"tensors[{i}]", "extends past end of blob")
        tensors[entry["name"]] = blob[start:start + count].reshape(entry["shape"]).astype(DTYPE)
    return tensors, manifest.get("meta", {})


def snapshot_exists(stem: Path) -> bool:
    bin_path, json_path = _snapshot_paths(stem)
    return bin_path.exists() and json_path.exists()
