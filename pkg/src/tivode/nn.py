"""Parameter containers, the handful of layers the pipeline needs, and Adam."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Parameter, Tensor


class Module:
    """Registers parameters, buffers and submodules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, np.array(value, dtype=np.float64))

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data.copy()
        for name, b in self.named_buffers():
            out[name] = np.array(b, copy=True)
        return out

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        seen = set()
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != p.shape:
                    raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
                p.data = arr.copy()
                seen.add(name)
        for name, _ in list(self.named_buffers()):
            if name in state:
                owner, attr = self._resolve(name)
                object.__setattr__(owner, attr, np.array(state[name], dtype=np.float64))
                seen.add(name)
        if strict:
            expected = set(params) | {n for n, _ in self.named_buffers()}
            missing = expected - seen
            extra = set(state) - expected
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")

    def _resolve(self, dotted: str):
        owner = self
        *path, attr = dotted.split(".")
        for part in path:
            owner = owner._modules[part]
        return owner, attr

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, fan_in, gain=1.0):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0):
        super().__init__()
        self.weight = Parameter(_uniform(rng, (n_in, n_out), n_in, gain))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, pad=0, bias=True, gain=1.0):
        super().__init__()
        self.stride = stride
        self.pad = pad
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel, gain))
        self.bias = Parameter(np.zeros((1, c_out, 1, 1))) if bias else None

    def forward(self, x):
        y = T.conv2d(x, self.weight, self.stride, self.pad)
        return y if self.bias is None else y + self.bias


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise DimensionError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return T.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, scale, size=(n, dim)))

    def forward(self, ids):
        return T.embedding(self.weight, ids)


class Adam:
    """Adam with optional global gradient-norm clipping."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, clip_norm=1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = T.parameters_grad_norm(self.params)
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def state_dict(self) -> dict:
        out = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m.copy()
            out[f"v.{i}"] = v.copy()
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"][0])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"m.{i}"], dtype=np.float64)
            self.v[i] = np.array(state[f"v.{i}"], dtype=np.float64)
