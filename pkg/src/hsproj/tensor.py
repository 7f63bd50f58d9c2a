"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Only the operations the projection head and the distillation losses need are
provided. Every op works on numpy arrays with optional leading batch
dimensions, builds its graph node eagerly, and frees it after ``backward``.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> y = (x * x).sum()
    >>> backward(y)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    EmptySequenceError,
)

__all__ = [
    "Tensor",
    "ComputeGraph",
    "backward",
    "custom_op",
    "no_grad",
    "matmul",
    "layer_norm",
    "softmax",
    "log_softmax",
    "gelu",
    "multi_head_self_attention",
    "masked_mean_pool",
    "l2_normalize",
    "grad_check",
]

# additive logit applied to padding keys before the attention softmax
MASK_LOGIT = -1e9

_grad_enabled = contextvars.ContextVar("hsproj_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation, finite differences)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "op")
    # make numpy defer to our reflected operators (ndarray @ Tensor etc.)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._prev

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_wrap(other, self.dtype), self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return tensor_sum(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def custom_op(data, parents: Sequence[Tensor], backward_fn, op: str = "custom") -> Tensor:
    """Create a graph node from precomputed ``data``.

    ``backward_fn(grad_out)`` must return one gradient array (or ``None``) per
    parent. All built-in ops go through here.
    """
    out = Tensor(data)
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)

        def _run(g):
            grads = backward_fn(g)
            for parent, pg in zip(parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg

        out._backward = _run
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return custom_op(
        data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return custom_op(
        data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op(data, (a,), bw, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), bw, "getitem")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return custom_op(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return custom_op(data, (a, b), bw, "matmul")


# -- normalisation and softmax ---------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op(out, (x, gain, bias), bw, "layer_norm")


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(x.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom_op(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (x,), bw, "log_softmax")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit L2 norm. Zero vectors are rejected."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot L2-normalize a zero vector")
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return custom_op(y, (x,), bw, "l2_normalize")


# -- sequence ops ----------------------------------------------------------------

def _check_mask(x: Tensor, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} does not match sequence shape {x.shape}")
    return mask


def masked_mean_pool(x: Tensor, mask) -> Tensor:
    """Mean of the rows of ``x[..., n, d]`` whose ``mask[..., n]`` is true."""
    mask = _check_mask(x, mask)
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise EmptySequenceError("masked_mean_pool: every position is masked")
    weights = (mask / counts).astype(x.dtype)[..., None]
    data = (np.where(mask[..., None], x.data, 0.0) * weights).sum(axis=-2)

    def bw(g):
        return (weights * g[..., None, :],)

    return custom_op(data, (x,), bw, "masked_mean_pool")


def multi_head_self_attention(x: Tensor, mask, params: dict, heads: int) -> Tensor:
    """Scaled dot-product self-attention over valid positions.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``. Padding keys get an
    additive logit of ``MASK_LOGIT`` so they receive zero attention weight.
    """
    d_model = x.shape[-1]
    if heads < 1 or d_model % heads:
        raise ConfigurationError(f"model width {d_model} is not divisible by {heads} heads")
    mask = _check_mask(x, mask)
    n = x.shape[-2]
    lead = x.shape[:-2]
    head_dim = d_model // heads
    nl = len(lead)
    split_axes = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(t: Tensor) -> Tensor:
        return t.reshape(lead + (n, heads, head_dim)).transpose(split_axes)

    q = split(x @ params["wq"] + params["bq"])
    k = split(x @ params["wk"] + params["bk"])
    v = split(x @ params["wv"] + params["bv"])
    key_bias = np.where(mask, 0.0, MASK_LOGIT).astype(x.dtype)[..., None, None, :]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(head_dim)) + key_bias
    attn = softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(split_axes).reshape(lead + (n, d_model))
    return ctx @ params["wo"] + params["bo"]


# -- graph traversal -----------------------------------------------------------------

class ComputeGraph:
    """Topologically ordered nodes reachable from a root tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> ComputeGraph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, seed: np.ndarray) -> None:
        root = self.nodes[-1]
        root.grad = seed if root.grad is None else root.grad + seed
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def release(self) -> None:
        for node in self.nodes:
            node._prev = ()
            node._backward = None


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every tensor that requires it."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not depend on any tensor requiring grad")
    graph = ComputeGraph.from_root(root)
    graph.run_backward(np.ones_like(root.data))
    graph.release()


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative error between autodiff and central differences.

    ``f(*inputs)`` must return a scalar tensor. The error for one coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``. The floor sits
    above the central-difference roundoff (about 1e-11 at h=1e-5 in float64),
    so coordinates whose true gradient is essentially zero do not dominate.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            agrad = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*inputs).data)
                flat[i] = orig - h
                fm = float(f(*inputs).data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                denom = max(abs(agrad[i]), abs(numeric), floor)
                worst = max(worst, abs(agrad[i] - numeric) / denom)
    return worst
