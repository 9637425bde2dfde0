"""A small reverse-mode autodiff engine on top of numpy.

Every differentiable operation returns a :class:`Tensor` whose ``node``
records the inputs and a backward rule.  :func:`backward` orders the nodes
reachable from a scalar root by creation sequence (which is a topological
order) and replays the rules in reverse, accumulating into the ``grad``
buffers of leaf tensors.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from parallax.errors import DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    __slots__ = ("parents", "backward", "seq")

    def __init__(self, parents, backward, seq):
        self.parents = parents
        self.backward = backward
        self.seq = seq


class Tensor:
    """n-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)

    def tanh(self):
        return activation(self, "tanh")


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(parents, backward, next(_seq))
    else:
        out.requires_grad = False
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------
# tape replay
# ----------------------------------------------------------------------
class Tape(list):
    """Nodes reachable from a root, in creation (topological) order."""

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for p in node.parents:
                if p.node is not None:
                    stack.append(p)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if root.shape != ():
        raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward() root does not require grad")
    seed = np.ones((), dtype=root.dtype)
    if root.node is None:
        _accumulate_leaf(root, seed)
        return
    tape = Tape.from_root(root)
    pending = {id(root.node): seed}
    for node in reversed(tape):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        grads = node.backward(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is not None:
                key = id(parent.node)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg
            else:
                _accumulate_leaf(parent, pg)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise UsageError("only scalar exponents are supported")
    e = float(exponent)

    def bw(g):
        return (g * e * a.data ** (e - 1),)

    return _make(a.data**e, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (unbroadcast(g, a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} and {b.shape}") from exc
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight laid out ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear input {x.shape} does not match weight {weight.shape}")
    k, n = weight.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (n,))

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ----------------------------------------------------------------------
# normalisation, softmax, losses
# ----------------------------------------------------------------------
def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dimension (max-subtracted)."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty dimension")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


softmax_lastdim = softmax


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    if logits.ndim != 2 or labels.shape != (n,):
        raise DimensionError(f"cross_entropy expects [B,C] logits and [B] labels, got {logits.shape}, {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise each last-dimension slice with population variance.

    ``gain`` and ``bias`` must broadcast against ``x`` and span its last dimension.
    """
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape[-1] != d:
            raise DimensionError(f"layer_norm {name} {p.shape} does not match last dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        gx = None
        if x.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = rstd * (dxhat - m1 - xhat * m2)
        grads = [gx]
        if gain is not None:
            grads.append(unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None)
        if bias is not None:
            grads.append(unbroadcast(g, bias.shape) if bias.requires_grad else None)
        return tuple(grads)

    parents = (x,) + tuple(p for p in (gain, bias) if p is not None)
    return _make(np.asarray(out, dtype=x.dtype), parents, bw)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over the spatial dims of [B,C,H,W]."""
    b, c, h, w = x.shape
    return layer_norm(x.reshape(b, c, h * w), eps=eps).reshape(b, c, h, w)


# ----------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------
_GELU_C = math.sqrt(2.0 / math.pi)


def activation(x: Tensor, kind: str = "gelu", alpha: float = 0.2) -> Tensor:
    """Elementwise nonlinearity: ``gelu`` (tanh form), ``relu``, ``leaky_relu`` or ``tanh``."""
    d = x.data
    if kind == "gelu":
        sq = d * d
        u = sq * (_GELU_C * 0.044715)
        u += _GELU_C
        u *= d
        t = np.tanh(u, out=u)
        out = t + 1.0
        out *= d
        out *= 0.5

        def bw(g):
            # 0.5(1+t) + 0.5 d (1-t^2) c (1 + 3*0.044715 d^2)
            du = sq * (3 * 0.044715 * _GELU_C)
            du += _GELU_C
            du *= d
            s = t * t
            np.subtract(1.0, s, out=s)
            s *= du
            s += t
            s += 1.0
            s *= 0.5
            s *= g
            return (s,)

    elif kind == "relu":
        mask = d > 0
        out = d * mask

        def bw(g):
            return (g * mask,)

    elif kind == "leaky_relu":
        if not 0 < alpha < 1:
            raise UsageError(f"leaky_relu alpha must lie in (0, 1), got {alpha}")
        slope = np.where(d > 0, 1.0, alpha).astype(d.dtype)
        out = d * slope

        def bw(g):
            return (g * slope,)

    elif kind == "tanh":
        out = np.tanh(d)

        def bw(g):
            return (g * (1.0 - out * out),)

    else:
        raise UsageError(f"unknown activation {kind!r}")
    return _make(np.asarray(out, dtype=x.dtype), (x,), bw)


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------
def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding. x: [B,C,H,W], weight: [O,C,k,k]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    bsz, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise DimensionError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output size {ho}x{wo} for input {x.shape}, k={k}, stride={stride}, pad={pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(bsz, ho, wo, c, k, k)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, bw)


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------
def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
                            oracle_dtype=np.float64) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``.

    The analytic gradient is computed in ``x``'s dtype.  The difference
    quotients are evaluated in ``oracle_dtype`` (float64 by default), so a
    float32 gradient is judged against an oracle whose rounding noise sits
    well below the tolerance.  Per-coordinate error is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    base = np.array(x.data, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    ref = base.astype(oracle_dtype)
    numeric = np.zeros(base.shape, dtype=np.float64)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = ref.copy()
            xp.reshape(-1)[i] += h
            xm = ref.copy()
            xm.reshape(-1)[i] -= h
            fp = f(Tensor(xp)).item()
            fm = f(Tensor(xm)).item()
            flat[i] = (fp - fm) / (2 * h)
    return _relative_error(analytic.astype(np.float64), numeric)


def gradcheck_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
                     max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Like :func:`finite_difference_check` but perturbs parameter tensors in place.

    ``max_coords`` caps the number of probed coordinates per parameter (sampled with ``rng``).
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * h)
            worst = max(worst, _relative_error(analytic.reshape(-1)[idx], numeric))
    return worst
