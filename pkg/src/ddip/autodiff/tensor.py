"""Reverse-mode autodiff on top of numpy arrays.

Every differentiable operation produces a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks the recorded graph in reverse topological order, so a
node's gradient is complete before its own rule fires.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit as _sigmoid

DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    """Re-enable graph recording, e.g. inside a ``no_grad`` block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op}: produced non-finite values")
    t = Tensor(out)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = rule
        t.op = op
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), rule, "mul")


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar (no graph node for the constant)."""
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data

    def rule(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record(out, (a, b), rule, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)

    def rule(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _record(out, (a,), rule, "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def rule(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _record(out, (a,), rule, "silu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), rule, "softmax")


def soft_threshold(a, tau: float) -> Tensor:
    """sign(a) * max(|a| - tau, 0), built from relu so kinks follow relu's rule."""
    return sub(relu(sub(a, tau)), relu(sub(neg(a), tau)))


# -- reductions -------------------------------------------------------------
def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _record(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)
    return _record(
        out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / n,), "mean"
    )


def sq_norm(a, axis=None, keepdims=False) -> Tensor:
    """Squared L2 norm, optionally per slice along ``axis``."""
    a = as_tensor(a)
    out = (a.data * a.data).sum(axis=axis, keepdims=keepdims)
    return _record(
        out, (a,), lambda g: (2.0 * _expand(g, a.shape, axis, keepdims) * a.data,), "sq_norm"
    )


def l1_norm(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data).sum(axis=axis, keepdims=keepdims)
    return _record(
        out,
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims) * np.sign(a.data),),
        "l1_norm",
    )


def norm(a, axis=None, keepdims=False) -> Tensor:
    """Euclidean norm; the gradient at the origin is defined as zero."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def rule(g):
        full = _expand(out, a.shape, axis, keepdims)
        safe = np.where(full > 0, full, 1.0)
        gg = _expand(g, a.shape, axis, keepdims)
        return (np.where(full > 0, gg * a.data / safe, 0.0),)

    return _record(out, (a,), rule, "norm")


def batch_dot(a, b, batch_axes: int = 1) -> Tensor:
    """Inner product over all but the leading ``batch_axes`` axes.

    The result keeps singleton trailing axes so it broadcasts back.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"batch_dot: incompatible shapes {a.shape} and {b.shape}")
    axes = tuple(range(batch_axes, a.ndim))
    return tsum(mul(a, b), axis=axes, keepdims=True)


# -- shape manipulation -----------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast: incompatible shapes {a.shape} and {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in ts)
        raise ValueError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _record(out, ts, rule, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    if isinstance(out, np.ndarray) and out.base is not None:
        out = out.copy()

    fancy = _is_fancy(index)

    def rule(g):
        full = np.zeros(a.shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record(np.asarray(out), (a,), rule, "slice")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def rule(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = np.matmul(bd, g[..., None])[..., 0] if bd.ndim > 1 else None
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if bd.ndim == 1:
            ga = g[..., :, None] * bd
            gb = np.matmul(np.swapaxes(ad, -1, -2), g[..., None])[..., 0]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), rule, "matmul")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, H, W) -> (C*kh*kw, B*Ho*Wo) patch matrix."""
    B, C = x.shape[:2]
    cols = sliding_window_view(x, (kh, kw), axis=(2, 3)).transpose(1, 4, 5, 0, 2, 3)
    return cols.reshape(C * kh * kw, -1)


def _corr2d(x: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    O, _, kh, kw = w.shape
    B, Ho, Wo = x.shape[0], x.shape[2] - kh + 1, x.shape[3] - kw + 1
    if cols is None:
        cols = _im2col(x, kh, kw)
    return (w.reshape(O, -1) @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)


def conv2d(x, w, b=None, padding: int | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero padding (``same`` by default).

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw = w.shape[2:]
    if padding is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"conv2d: 'same' padding needs odd kernels, got {w.shape}")
        ph, pw = kh // 2, kw // 2
    else:
        ph = pw = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    cols = _im2col(xp, kh, kw)
    out = _corr2d(xp, w.data, cols)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ValueError(f"conv2d: incompatible shapes {w.shape} and {b.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def rule(g):
        # operands outside the graph (frozen weights, raw inputs) get no gradient
        gx = gw = None
        if w.requires_grad:
            gw = (g.transpose(1, 0, 2, 3).reshape(w.shape[0], -1) @ cols.T).reshape(w.shape)
        if x.requires_grad:
            gpad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            H, W = x.shape[2:]
            gx = _corr2d(gpad, wf)[:, :, ph : ph + H, pw : pw + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _record(out, parents, rule, "conv2d")


def avg_pool2x(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2x: spatial shape {x.shape} not divisible by 2")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def rule(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _record(out, (x,), rule, "avg_pool2x")


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def rule(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), rule, "upsample_nearest2x")


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    B, C = x.shape[:2]
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    cshape = (1, C) + (1,) * (x.ndim - 2)
    parents = [x]
    out = xhat
    if weight is not None:
        weight, bias = as_tensor(weight), as_tensor(bias)
        out = xhat * weight.data.reshape(cshape) + bias.data.reshape(cshape)
        parents += [weight, bias]

    def rule(g):
        red = (0,) + tuple(range(2, x.ndim))
        gx_hat = g * weight.data.reshape(cshape) if weight is not None else g
        gh = gx_hat.reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
        grads = [gx.reshape(x.shape)]
        if weight is not None:
            grads += [(g * xhat).sum(axis=red), g.sum(axis=red)]
        return tuple(grads)

    return _record(out, parents, rule, "group_norm")


def linear_map(x, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray], name: str = "linear_map") -> Tensor:
    """Apply an arbitrary linear operator whose transpose is ``adjoint``."""
    x = as_tensor(x)
    out = np.asarray(forward(x.data), dtype=DTYPE)
    return _record(out, (x,), lambda g: (np.asarray(adjoint(g), dtype=DTYPE),), name)


# -- graph traversal ---------------------------------------------------------
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor) -> dict[int, np.ndarray]:
    if root.size != 1:
        raise ValueError(f"backward: output must be a scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(_topo_order(root)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=DTYPE, copy=True)
        if node._parents:
            del grads[id(node)]
    return grads


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves passed explicitly but not on the path receive a zero gradient.
    """
    grads = _propagate(root)
    reached = _leaves(root)
    targets = list(reached.values())
    if leaves is not None:
        for leaf in leaves:
            reached.setdefault(id(leaf), leaf)
        targets = list(reached.values())
    for leaf in targets:
        if not leaf.requires_grad:
            continue
        g = grads.get(id(leaf), np.zeros(leaf.shape))
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def grad(root: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(root)/d(input) for each input without touching ``.grad``."""
    grads = _propagate(root)
    return [grads.get(id(t), np.zeros(t.shape)) for t in inputs]


def _leaves(root: Tensor) -> dict[int, Tensor]:
    return {id(n): n for n in _topo_order(root) if not n._parents and n.requires_grad}
