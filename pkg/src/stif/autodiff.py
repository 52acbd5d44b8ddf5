"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them. ``Tensor.backward``
walks the graph in reverse topological order, so each node's backward rule
runs exactly once.

Only the primitives the association network needs are provided. Broadcasting
is supported for elementwise ops (gradients are summed back to the operand
shape).
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "mul_scalar",
    "matmul",
    "concat",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "abs_",
    "square",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "index",
    "scatter_rows",
    "layer_norm",
    "softmax",
    "log_softmax",
    "max_pool",
    "cross_entropy",
    "mse",
    "norm",
    "multi_head_attention",
    "gradcheck",
]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# per-thread so concurrent tapes do not interfere
_local = threading.local()


@contextmanager
def no_grad():
    """Disable graph construction (inference) on the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # --- basic info -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # --- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / float(other))
        raise TypeError("only division by a Python scalar is supported")

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # --- backprop -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(x) into ``x.grad`` for every ancestor ``x``.

        Gradients accumulate across calls; zero them between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError("operation produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# --- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _make(out, (a,), bw)


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


# --- reductions & shape ---------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul_scalar(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a: Tensor, key) -> Tensor:
    """Basic or integer-array indexing (gradients scatter-add back)."""
    shape = a.shape
    out = a.data[key]

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw)


def scatter_rows(rows: Tensor, idx, base: Tensor) -> Tensor:
    """Copy of ``base`` with ``base[idx[r]] = rows[r]`` (distinct ``idx``)."""
    idx = np.asarray(idx, dtype=np.int64)
    if rows.shape[0] != idx.size or rows.shape[1:] != base.shape[1:]:
        raise ShapeError(f"scatter_rows: {rows.shape} into {base.shape} at {idx.size} rows")
    out = base.data.copy()
    out[idx] = rows.data
    keep = np.ones(base.shape[0], dtype=bool)
    keep[idx] = False

    def bw(g):
        return (g[idx], g * keep.reshape((-1,) + (1,) * (g.ndim - 1)))

    return _make(out, (rows, base), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


# --- linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _make(ad @ bd, (a, b), bw)


# --- normalization & softmax ---------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over ``axis`` then apply elementwise gain and bias."""
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    gshape, bshape = gain.shape, bias.shape

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=axis, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gshape), _unbroadcast(g, bshape))

    return _make(xhat * gd + bias.data, (x, gain, bias), bw)


def _softmax_np(z: np.ndarray, axis: int, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        if np.any(~mask.any(axis=axis)):
            raise NumericError("softmax: a slice has every entry masked")
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    p = _softmax_np(x.data, axis, mask)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def max_pool(x: Tensor, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    ax = axis % x.ndim
    arg = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(out, (x,), bw)


# --- losses --------------------------------------------------------------------------

def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over rows of ``-sum_c target[r, c] * log softmax(logits)[r, c]``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    rows = int(np.prod(logits.shape[:-1])) if logits.ndim > 1 else 1
    ls = log_softmax(logits, axis=-1)
    return mul_scalar(sum_(mul(ls, target)), -1.0 / rows)


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences over every element."""
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    return mean(square(sub(a, b)))


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` (zero-vector derivative taken as 0)."""
    return sqrt(sum_(square(x), axis=axis))


# --- attention -------------------------------------------------------------------------

def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, weights: dict, heads: int,
                         mask=None, prefix: str = "") -> tuple[Tensor, Tensor]:
    """Scaled dot-product multi-head attention without positional encoding.

    ``weights`` holds ``{prefix}wq``, ``wk``, ``wv`` (d x d), ``wo`` (d x d) and
    ``bo`` (d). Returns the projected output (n_q x d) and the pre-softmax
    scaled logits (heads x n_q x n_k). ``mask`` (n_q x n_k, True = attend)
    removes keys from the softmax.
    """
    nq, d = q.shape
    nk = k.shape[0]
    if d % heads:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    if k.shape[1] != d or v.shape != k.shape:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    dh = d // heads
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (nq, nk):
            raise ShapeError(f"attention mask {mask.shape}, expected {(nq, nk)}")
        if np.any(~mask.any(axis=1)):
            raise ShapeError("attention: a query row has every key masked")
        mask = mask[None, :, :]

    def split(t: Tensor, n: int) -> Tensor:
        return transpose(reshape(t, (n, heads, dh)), (1, 0, 2))

    qh = split(matmul(q, weights[prefix + "wq"]), nq)
    kh = split(matmul(k, weights[prefix + "wk"]), nk)
    vh = split(matmul(v, weights[prefix + "wv"]), nk)
    logits = mul_scalar(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = softmax(logits, axis=-1, mask=mask)
    ctx = reshape(transpose(matmul(attn, vh), (1, 0, 2)), (nq, d))
    out = add(matmul(ctx, weights[prefix + "wo"]), weights[prefix + "bo"])
    return out, logits


# --- gradient checking --------------------------------------------------------------------

def gradcheck(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None
              ) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the scalar output from the current parameter values.
    The relative error of a parameter is ``||g_a - g_n|| / max(||g_a||, ||g_n||, 1e-12)``
    over the checked entries. ``max_entries`` subsamples large tensors.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        num = np.empty(idx.size)
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            with no_grad():
                fp = fn().item()
            flat[i] = old - eps
            with no_grad():
                fm = fn().item()
            flat[i] = old
            num[n] = (fp - fm) / (2 * eps)
        ana = analytic.reshape(-1)[idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    for p in params:
        p.grad = None
    return worst
