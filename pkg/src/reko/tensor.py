"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op records a :class:`Node` on its output when any input requires
grad. ``Tensor.backward`` walks the recorded nodes in reverse topological
order and releases them; a second backward through the same nodes raises
:class:`GraphError` instead of silently double-counting.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-8


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording nodes (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False

    def __repr__(self):
        return f"Node({self.op}, inputs={len(self.parents)}, consumed={self.consumed})"


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to Tensor's reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- construction -------------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op}: produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._node = None
        out.requires_grad = False
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._node = Node(op, tuple(parents), backward_fn)
        return out

    # -- basic properties ---------------------------------------------------

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
    def op(self) -> str | None:
        return self._node.op if self._node is not None else None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    # -- autodiff -----------------------------------------------------------

    def _topo(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._node.parents:
                if p._node is not None and id(p) not in seen:
                    stack.append((p, False))
        return order

    def graph(self) -> list[Node]:
        """Nodes reachable from this tensor, inputs before consumers."""
        return [t._node for t in self._topo()]

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward: loss does not depend on any tensor requiring grad")
        if self._node is None:
            self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1.0
            return
        order = self._topo()
        for t in order:
            if t._node.consumed:
                raise GraphError(f"backward: graph already consumed at op '{t._node.op}'")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for out in reversed(order):
            node = out._node
            g = grads.pop(id(out), None)
            backward_fn = node.backward_fn
            node.consumed = True
            node.backward_fn = None
            if g is None:
                continue
            for p, pg in zip(node.parents, backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise ShapeError(
                        f"backward of '{node.op}': gradient shape {pg.shape} != input shape {p.data.shape}"
                    )
                if p._node is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a python scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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

    def abs(self):
        return abs_(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def leaky_relu(self):
        return leaky_relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise / linear ops ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._result(
        ad * bd, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (operands of rank >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape} ({a.shape[-1]} != {b.shape[-2]})")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return Tensor._result(ad @ bd, "matmul", (a, b), backward)


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.abs(ad), "abs", (a,), lambda g: (g * np.sign(ad),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._result(out, "log", (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor._result(np.where(pos, a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    slopes = np.where(a.data > 0, 1.0, slope)
    return Tensor._result(a.data * slopes, "leaky_relu", (a,), lambda g: (g * slopes,))


# -- reductions ----------------------------------------------------------------


def _norm_axis(op: str, axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"{op}: axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def _expand(g: np.ndarray, axes: tuple, keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis("sum", axis, a.ndim)
    shape = a.shape
    return Tensor._result(
        np.sum(a.data, axis=axes, keepdims=keepdims), "sum", (a,),
        lambda g: (np.broadcast_to(_expand(g, axes, keepdims), shape).copy(),),
    )


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis("mean", axis, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    return Tensor._result(
        np.mean(a.data, axis=axes, keepdims=keepdims), "mean", (a,),
        lambda g: (np.broadcast_to(_expand(g, axes, keepdims) / count, shape).copy(),),
    )


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable ``log(sum(exp(a)))`` along one axis (max-shifted)."""
    (ax,) = _norm_axis("logsumexp", axis, a.ndim)
    if a.shape[ax] == 0:
        raise ShapeError("logsumexp: empty axis")
    m = np.max(a.data, axis=ax, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=ax, keepdims=True)
    out = m + np.log(total)
    soft = shifted / total

    def backward(g):
        g = g if keepdims else np.expand_dims(g, ax)
        return (g * soft,)

    return Tensor._result(out if keepdims else np.squeeze(out, ax), "logsumexp", (a,), backward)


def l2_normalize(a: Tensor, axis: int = 0, eps: float = NORM_EPS) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm; norms below ``eps`` are clamped to ``eps``."""
    (ax,) = _norm_axis("l2_normalize", axis, a.ndim)
    norm = np.sqrt(np.sum(a.data * a.data, axis=ax, keepdims=True))
    small = norm < eps
    denom = np.where(small, eps, norm)
    out = a.data / denom

    def backward(g):
        proj = np.sum(out * g, axis=ax, keepdims=True)
        return (np.where(small, g / eps, (g - out * proj) / denom),)

    return Tensor._result(out, "l2_normalize", (a,), backward)


# -- shape ops -------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inv = np.argsort(axes)
    return Tensor._result(
        np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._result(out, "concat", ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather_columns(a: Tensor, index) -> Tensor:
    """Select columns along the last axis.

    ``index`` is a 1-D integer array shared by all leading dims, or one row of
    indices per leading batch element when ``a`` is (N, C, M) and ``index`` is (N, K).
    """
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather_columns: index must be integer")
    m = a.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"gather_columns: index out of range [0, {m}) for shape {a.shape}")
    ad = a.data
    if idx.ndim == 1:
        out = ad[..., idx]

        def backward(g):
            full = np.zeros_like(ad)
            np.add.at(full, (..., idx), g)
            return (full,)

    elif a.ndim == 3 and idx.ndim == 2 and idx.shape[0] == a.shape[0]:
        bidx = np.broadcast_to(idx[:, None, :], (a.shape[0], a.shape[1], idx.shape[1]))
        out = np.take_along_axis(ad, bidx, axis=-1)
        rows = np.arange(a.shape[0])[:, None]

        def backward(g):
            full = np.zeros((a.shape[0], m, a.shape[1]))
            np.add.at(full, (rows, idx), g.transpose(0, 2, 1))
            return (full.transpose(0, 2, 1).copy(),)

    else:
        raise ShapeError(f"gather_columns: index shape {idx.shape} incompatible with {a.shape}")
    return Tensor._result(np.ascontiguousarray(out), "gather_columns", (a,), backward)


# -- convolution -----------------------------------------------------------------


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x (N, Cin, H, W), w (Cout, Cin, k, k), b (Cout,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} with padding {padding} does not fit input {h}x{wd}")
    cols = kernels.im2col(x.data, k, stride, padding)
    wm = w.data.reshape(cout, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    xshape = x.shape

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = kernels.col2im(wm.T @ gm, xshape, k, stride, padding) if x.requires_grad else None
        gb = gm.sum(axis=1) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, "conv2d", parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d. x (N, Cin, H, W), w (Cin, Cout, k, k), b (Cout,).

    Output size is ``(H - 1) * stride - 2 * padding + k``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    wcin, cout, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv_transpose2d: kernel must be square, got {k}x{k2}")
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels but weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({cout},)")
    ho, wo = (h - 1) * stride - 2 * padding + k, (wd - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1 or _conv_out(ho, k, stride, padding) != h or _conv_out(wo, k, stride, padding) != wd:
        raise ShapeError(f"conv_transpose2d: k={k}, stride={stride}, padding={padding} invalid for {h}x{wd}")
    wm = w.data.reshape(cin, -1)
    xm = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    oshape = (n, cout, ho, wo)
    out = kernels.col2im(wm.T @ xm, oshape, k, stride, padding)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gcols = kernels.im2col(g, k, stride, padding)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wm @ gcols).reshape(cin, n, h, wd).transpose(1, 0, 2, 3))
        gw = (xm @ gcols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, "conv_transpose2d", parents, backward)


# -- gradient checking -------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-3) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    loss = f(x)
    if loss.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {loss.shape}")
    loss.backward()
    analytic = np.zeros_like(x0) if x.grad is None else x.grad
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x0)).item()
            flat[i] = orig - h
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"grad_check: f is not finite near coordinate {i}")
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())
