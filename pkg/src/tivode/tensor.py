"""Dense fp64 tensors with define-by-run reverse-mode differentiation.

Every primitive stores its parents and a closure mapping the output gradient
to one gradient per parent. Nodes receive a monotonically increasing id when
they are created, so sorting reachable nodes by id gives a valid topological
order; :class:`Tape` is that ordered list.

Images and latent grids use the NCHW layout throughout the package.
"""
from __future__ import annotations

import contextlib
import itertools
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_ids = itertools.count(1)
_grad_enabled = True
_debug = os.environ.get("TIVODE_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle finite-value checks after every primitive."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "node_id", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.node_id = next(_ids) if requires_grad else None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.node_id = None
        return t

    # array-like surface
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the payload."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> "Tape":
        return backward(self)


class Parameter(Tensor):
    """A leaf tensor that an optimizer updates."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    out = Tensor._wrap(data)
    if _debug and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{name} produced non-finite values from finite inputs")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.node_id = next(_ids)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- tape / backward


class Tape:
    """Nodes reachable from a root, ordered so every node follows its parents."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen = {id(root)}
        stack = [root]
        nodes = []
        while stack:
            node = stack.pop()
            nodes.append(node)
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda n: n.node_id)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def leaves(self) -> list:
        return [n for n in self.nodes if not n._parents]


def backward(root: Tensor) -> Tape:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not depend on any tracked tensor")
    tape = Tape.from_root(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return _result(ad / bd, (a, b), bw, "div")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for any finite z
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = _sigmoid(xd)
    return _result(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def stop_gradient(x) -> Tensor:
    """Identity in the forward pass; contributes no gradient upstream."""
    x = as_tensor(x)
    return Tensor._wrap(x.data)


def straight_through(x, value) -> Tensor:
    """Forward ``value`` exactly; pass the gradient to ``x`` unchanged.

    Equivalent to ``x + stop_gradient(value - x)`` without the rounding that
    the explicit sum introduces.
    """
    x = as_tensor(x)
    value = np.asarray(as_tensor(value).data, dtype=np.float64)
    if value.shape != x.shape:
        raise DimensionError(f"straight_through shape mismatch: {x.shape} vs {value.shape}")
    return _result(value.copy(), (x,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------- reductions / shape


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _result(y, (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x, start: int = 1) -> Tensor:
    x = as_tensor(x)
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "transpose")


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(np.array(x.data[idx]), (x,), bw, "index")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    """Join tensors along ``axis`` (channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                   lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"embedding id out of range [0, {n})")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _result(table.data[ids], (table,), bw, "embedding")


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _result(y, (x,), bw, "upsample")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def _conv_out(n: int, k: int, stride: int, pad: int, what: str) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv2d {what}: (size {n} + 2*pad {pad} - kernel {k}) is not a non-negative multiple of stride {stride}")
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, s: int, pad: int, Ho: int, Wo: int) -> np.ndarray:
    """(C*kh*kw, B*Ho*Wo) patch matrix of an NCHW array."""
    B, C = x.shape[:2]
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xp = np.zeros((C, B, x.shape[2] + 2 * pad, x.shape[3] + 2 * pad))
        xp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]] = xt
        xt = xp
    cols = np.empty((C, kh, kw, B, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    return cols.reshape(C * kh * kw, B * Ho * Wo)


def _cols_to_nchw(y: np.ndarray, O: int, B: int, Ho: int, Wo: int) -> np.ndarray:
    return np.ascontiguousarray(y.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) of NCHW input with OCkk weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    Ho = _conv_out(H, kh, stride, pad, "height")
    Wo = _conv_out(W, kw, stride, pad, "width")
    cols2 = _im2col(x.data, kh, kw, stride, pad, Ho, Wo)
    w2 = w.data.reshape(O, -1)
    out = _cols_to_nchw(w2 @ cols2, O, B, Ho, Wo)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gw = (g2 @ cols2.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and kh == kw and pad <= kh - 1:
                # full correlation of g with the flipped, channel-swapped kernel
                wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
                gc = _im2col(g, kh, kw, 1, kh - 1 - pad, H, W)
                return _cols_to_nchw(wt @ gc, C, B, H, W), gw
            s = stride
            Hp, Wp = H + 2 * pad, W + 2 * pad
            dcols = (w2.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            dxt = np.zeros((C, B, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    dxt[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, i, j]
            dx = dxt.transpose(1, 0, 2, 3)
            if pad:
                dx = dx[:, :, pad:pad + H, pad:pad + W]
            gx = np.ascontiguousarray(dx)
        return gx, gw

    return _result(out, (x, w), bw, "conv2d")


# ---------------------------------------------------------------- normalization


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel-group) to zero mean and unit variance.

    ``weight`` and ``bias`` are per-channel affine parameters (shape ``(C,)``);
    either may be omitted.
    """
    x = as_tensor(x)
    B, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise DimensionError(f"group_norm: {C} channels not divisible into {groups} groups")
    spatial = x.shape[2:]
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * len(spatial)
    wd = None if weight is None else as_tensor(weight).data.reshape(bshape)
    y = xhat if wd is None else xhat * wd
    if bias is not None:
        y = y + as_tensor(bias).data.reshape(bshape)
    parents = [x]
    if weight is not None:
        parents.append(as_tensor(weight))
    if bias is not None:
        parents.append(as_tensor(bias))
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        grads = []
        dxhat = g if wd is None else g * wd
        dg = dxhat.reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        dx = inv * (dg - dg.mean(axis=2, keepdims=True) - xh * (dg * xh).mean(axis=2, keepdims=True))
        grads.append(dx.reshape(x.shape))
        if weight is not None:
            grads.append((g * xhat).sum(axis=red).reshape(as_tensor(weight).shape))
        if bias is not None:
            grads.append(g.sum(axis=red).reshape(as_tensor(bias).shape))
        return tuple(grads)

    return _result(y, parents, bw, "group_norm")


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (per token)."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    wd = None if weight is None else as_tensor(weight).data
    y = xhat if wd is None else xhat * wd
    if bias is not None:
        y = y + as_tensor(bias).data
    parents = [x] + [as_tensor(p) for p in (weight, bias) if p is not None]
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g if wd is None else g * wd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result(y, parents, bw, "layer_norm")


# ---------------------------------------------------------------- attention


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _result(p, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),), "softmax")


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-stochastic attention matrix softmax(q kᵀ/√d) with masked keys removed."""
    d = q.shape[-1]
    if d == 0:
        raise DimensionError("attention feature dimension is zero")
    s = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(d)
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_dot_attention(q, k, v, mask=None) -> Tensor:
    """softmax(q·kᵀ/√d)·v over the last two axes, leading axes batched.

    ``mask`` is a boolean array broadcastable to (..., L_q, L_k); False keys
    receive a -inf logit.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d == 0 or k.shape[-1] == 0:
        raise DimensionError("attention feature dimension is zero")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention q/k feature mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention k/v length mismatch: {k.shape} vs {v.shape}")
    scale = 1.0 / np.sqrt(d)
    p = attention_weights(q.data, k.data, mask)
    out = p @ v.data
    qd, kd, vd = q.data, k.data, v.data

    def bw(g):
        gv = _unbroadcast(np.swapaxes(p, -1, -2) @ g, vd.shape)
        dp = g @ np.swapaxes(vd, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        gq = _unbroadcast(ds @ kd, qd.shape)
        gk = _unbroadcast(np.swapaxes(ds, -1, -2) @ qd, kd.shape)
        return gq, gk, gv

    return _result(out, (q, k, v), bw, "attention")


# ---------------------------------------------------------------- losses


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------- serialization


def tensor_to_bytes(x) -> bytes:
    """Rank, dims (u32 little-endian) then the fp64 little-endian payload."""
    arr = np.asarray(as_tensor(x).data, dtype="<f8", order="C")
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one serialized tensor; returns (array, next offset)."""
    from .errors import FormatError

    if offset + 4 > len(buf):
        raise FormatError("truncated tensor header", offset)
    (rank,) = struct.unpack_from("<I", buf, offset)
    if rank > 16:
        raise FormatError(f"implausible tensor rank {rank}", offset)
    pos = offset + 4
    if pos + 4 * rank > len(buf):
        raise FormatError("truncated tensor dims", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = int(np.prod(dims)) if rank else 1
    end = pos + 8 * n
    if end > len(buf):
        raise FormatError(f"truncated tensor payload: need {8 * n} bytes", pos)
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
    return arr, end


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
