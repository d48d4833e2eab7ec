"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output adjoint to the
parent adjoints. ``backward`` walks the recorded graph once in reverse
topological order and then releases it, so each forward graph is
differentiated exactly once.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from colgeo import kernels

EPS = 1e-12

_grad_enabled = True


_branch_log: list | None = None


@contextlib.contextmanager
def record_branches():
    """Collect the branch decisions of ops that are not continuously differentiable
    (max, clamp, abs, relu).

    Finite-difference checks compare these logs across a stencil: a changed
    entry means the stencil straddles a kink and the difference quotient is
    not a valid oracle there.
    """
    global _branch_log
    prev = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def note_branch(decision: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.asarray(decision).tobytes())


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested op."""


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_non_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    # -- method forms of common ops --------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self) -> None:
        backward(self)


def _raise_non_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the extents that broadcasting expanded to reach it."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# binary ops
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b, eps: float = EPS) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(np.abs(b.data) <= eps):
        raise ZeroDivisionError(f"divisor magnitude at or below {eps:g}")
    inv = 1.0 / b.data
    out = a.data * inv

    def bw(g):
        return unbroadcast(g * inv, a.shape), unbroadcast(-g * out * inv, b.shape)

    return _make(out, (a, b), bw)


def weighted_sum(terms: Sequence, weights: Sequence[float]) -> Tensor:
    """``sum_i w_i * t_i`` with the forward value rounded once (``math.fsum``) per element."""
    terms = [as_tensor(t) for t in terms]
    weights = [float(w) for w in weights]
    if len(terms) != len(weights) or not terms:
        raise ValueError("weighted_sum needs one weight per term and at least one term")
    shape = np.broadcast_shapes(*(t.shape for t in terms))
    prods = np.stack([np.broadcast_to(t.data * w, shape) for t, w in zip(terms, weights)])
    out = np.array([math.fsum(col) for col in prods.reshape(len(terms), -1).T]).reshape(shape)

    def bw(g):
        return tuple(unbroadcast(g * w, t.shape) for t, w in zip(terms, weights))

    return _make(out, terms, bw)


# ---------------------------------------------------------------------------
# unary ops
# ---------------------------------------------------------------------------
def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    note_branch(pos)
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def elu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0  # continuously differentiable at 0, so not a recorded branch
    e = np.exp(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, e - 1.0)
    return _make(out, (x,), lambda g: (g * np.where(pos, 1.0, e),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign to avoid overflow in exp
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive input")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("sqrt requires strictly positive input")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def absolute(x) -> Tensor:
    """|x| with subgradient 0 at exactly zero."""
    x = as_tensor(x)
    note_branch(np.sign(x.data))
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data >= lo
    note_branch(keep)
    return _make(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,))


UNARY = {
    "relu": relu,
    "elu": elu,
    "sigmoid": sigmoid,
    "log": log,
    "sqrt": sqrt,
    "exp": exp,
    "sin": sin,
    "cos": cos,
    "neg": neg,
    "abs": absolute,
    "square": square,
}


def unary(op: str, x, c: float | None = None) -> Tensor:
    if op == "scale":
        return scale(x, 1.0 if c is None else c)
    try:
        return UNARY[op](x)
    except KeyError:
        raise ValueError(f"unknown unary op {op!r}") from None


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand(g: np.ndarray, axes, ndim, keepdims) -> np.ndarray:
    if keepdims:
        return g
    return np.expand_dims(g, axes) if axes else g


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("reduction over an empty tensor")
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        return (np.broadcast_to(_expand(g, axes, x.ndim, keepdims), x.shape).copy(),)

    return _make(out, (x,), bw)


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("reduction over an empty tensor")
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.sum(axis=axes, keepdims=keepdims) / n

    def bw(g):
        return (np.broadcast_to(_expand(g, axes, x.ndim, keepdims) / n, x.shape).copy(),)

    return _make(out, (x,), bw)


def reduce_max(x, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the adjoint goes to the first maximal element in row-major order."""
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("reduction over an empty tensor")
    axes = _norm_axes(axis, x.ndim)
    rest = tuple(a for a in range(x.ndim) if a not in axes)
    perm = rest + axes
    moved = x.data.transpose(perm)
    lead_shape = moved.shape[: len(rest)]
    flat = moved.reshape(lead_shape + (-1,))
    idx = np.argmax(flat, axis=-1)  # argmax returns the first occurrence
    note_branch(idx)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = vals
    if keepdims:
        out = out.reshape(tuple(1 if a in axes else x.shape[a] for a in range(x.ndim)))

    def bw(g):
        g = np.asarray(g).reshape(lead_shape)
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (gmoved.transpose(np.argsort(perm)),)

    return _make(np.asarray(out), (x,), bw)


def channel_mean(x) -> Tensor:
    return reduce_mean(x, axis=-3, keepdims=True)


def channel_max(x) -> Tensor:
    return reduce_max(x, axis=-3, keepdims=True)


def spatial_mean(x) -> Tensor:
    return reduce_mean(x, axis=(-2, -1), keepdims=True)


def spatial_max(x) -> Tensor:
    return reduce_max(x, axis=(-2, -1), keepdims=True)


REDUCE = {
    "sum": reduce_sum,
    "mean": reduce_mean,
    "max": reduce_max,
    "channel-mean": channel_mean,
    "channel-max": channel_max,
    "spatial-mean": spatial_mean,
    "spatial-max": spatial_max,
}


def reduce(op: str, x) -> Tensor:
    try:
        return REDUCE[op](x)
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is not supported."""
    x = as_tensor(x)
    parts = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts):
        raise TypeError("only basic slicing is supported")
    out = np.asarray(x.data[index])

    def bw(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return _make(out.copy(), (x,), bw)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: extents {[q.shape for q in parts]} disagree"
            )
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, parts, bw)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------
def _batch_outer(g2: np.ndarray, cols2: np.ndarray) -> np.ndarray:
    """``sum_b g2[b] @ cols2[b].T`` as one matmul over the batch-major concatenation."""
    n, cout, m = g2.shape
    gt = g2.transpose(1, 0, 2).reshape(cout, n * m)
    ct = cols2.transpose(1, 0, 2).reshape(cols2.shape[1], n * m)
    return gt @ ct.T


def conv2d(x, kernel, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of ``[C,H,W]`` or ``[N,C,H,W]`` input.

    ``kernel`` is ``[C_out, C_in, kh, kw]``. Output extent per axis is
    ``(H + 2*padding - dilation*(kh-1) - 1) // stride + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("stride and dilation must be >= 1, padding >= 0")
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-D [C_out,C_in,kh,kw], got {kernel.shape}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    eff_h, eff_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if eff_h > hp or eff_w > wp:
        raise ShapeError(
            f"dilated kernel {eff_h}x{eff_w} does not fit padded input {hp}x{wp}"
        )
    out_h = (hp - eff_h) // stride + 1
    out_w = (wp - eff_w) // stride + 1
    wmat = kernel.data.reshape(cout, -1)
    if kh == kw == 1 and stride == 1 and padding == 0:
        # pointwise convolution: no patch extraction needed
        x2 = xd.reshape(n, cin, h * w)
        out = np.matmul(wmat, x2).reshape(n, cout, h, w)
        if not batched:
            out = out[0]

        def bw1(g):
            g2 = (g if batched else g[None]).reshape(n, cout, h * w)
            gk = _batch_outer(g2, x2)
            gx = np.matmul(wmat.T, g2).reshape(xd.shape)
            return (gx if batched else gx[0]), gk.reshape(kernel.shape)

        return _make(out, (x, kernel), bw1)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = kernels.im2col(xp, kh, kw, stride, dilation, out_h, out_w)
    cols2 = cols.reshape(n, cin * kh * kw, out_h * out_w)
    out = np.matmul(wmat, cols2).reshape(n, cout, out_h, out_w)
    if not batched:
        out = out[0]

    def bw(g):
        g2 = (g if batched else g[None]).reshape(n, cout, out_h * out_w)
        gk = _batch_outer(g2, cols2)
        gcols = np.matmul(wmat.T, g2).reshape(cols.shape)
        gxp = kernels.col2im(gcols, xp.shape, stride, dilation)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if not batched:
            gx = gx[0]
        return gx, gk.reshape(kernel.shape)

    return _make(out, (x, kernel), bw)


def _bilinear_matrix(n: int, factor: int) -> np.ndarray:
    """Interpolation matrix ``[n*factor, n]`` with the align-corners-false convention."""
    dst = np.arange(n * factor)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    m = np.zeros((n * factor, n))
    np.add.at(m, (dst, i0), 1.0 - w1)
    np.add.at(m, (dst, i1), w1)
    return m


def _nearest_matrix(n: int, factor: int) -> np.ndarray:
    m = np.zeros((n * factor, n))
    m[np.arange(n * factor), np.arange(n * factor) // factor] = 1.0
    return m


def resize(x, factor: int, mode: str = "nearest") -> Tensor:
    """Upsample the last two axes by an integer factor."""
    x = as_tensor(x)
    if factor < 1:
        raise ValueError("resize factor must be >= 1")
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown resize mode {mode!r}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    h, w = x.shape[-2:]
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

        def bw(g):
            gs = g.reshape(g.shape[:-2] + (h, factor, w, factor))
            return (gs.sum(axis=(-3, -1)),)

        return _make(out, (x,), bw)
    mh, mw = _bilinear_matrix(h, factor), _bilinear_matrix(w, factor)
    out = mh @ x.data @ mw.T
    return _make(out, (x,), lambda g: (mh.T @ g @ mw,))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every ``requires_grad`` leaf.

    The graph is released afterwards; differentiating the same output again
    raises ``RuntimeError``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already differentiated; re-run the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            pgrads = node._backward(g)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None
        node._consumed = True


def parameters_grad_finite(params: Iterable[Tensor]) -> bool:
    return all(p.grad is not None and np.all(np.isfinite(p.grad)) for p in params)
