"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation builds its output with :func:`_result`, which
records the parents and a closure mapping the output gradient to parent
gradients.  :func:`backward` walks the recorded graph in reverse topological
order.  Storage is a plain numpy array (float64 unless the caller passes
float32 data explicitly).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from lacrange.errors import ContractError, DimensionError, NumericalError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar -----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Promote operands; plain constants adopt the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` and, if any parent needs a gradient, record the tape entry."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # gradient arrays are never updated in place, so sharing g is safe
        t.grad = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor upstream of ``loss`` that requires it.

    The tape is consumed: interior nodes drop their parent links afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError("backward() called on a non-finite loss")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        node._parents = ()
        node._backward = None


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Raise :class:`NumericalError` when ``t`` holds NaN or Inf."""
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"{what} contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: _accumulate(a, -g))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return _result(a.data ** p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * 0.5 / out))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: _accumulate(a, g * np.sign(a.data)))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b``.  ``cond`` is constant."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _result(np.where(cond, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

LEAKY_SLOPE = 0.01


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _result(out, (a,), lambda g: _accumulate(a, np.where(pos, g, slope * g)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        _accumulate(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _result(out, (a,), bw)


def masked_softmax(a, valid: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over the entries flagged in ``valid``; others get weight 0.

    Rows with no valid entry come out all-zero.
    """
    a = as_tensor(a)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), a.shape)
    z = np.where(valid, a.data, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(valid, np.exp(np.where(valid, a.data, 0.0) - zmax), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (a,),
                   lambda g: _accumulate(a, _expand_reduced(g, a.shape, axis, keepdims)))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(np.asarray(out).size, 1)

    def bw(g):
        _accumulate(a, _expand_reduced(g, a.shape, axis, keepdims) / n)

    return _result(np.asarray(out), (a,), bw)


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; ties share the gradient equally."""
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def bw(g):
        full = _expand_reduced(out, a.shape, axis, keepdims)
        hit = (a.data == full).astype(a.data.dtype)
        cnt = hit.sum(axis=axis, keepdims=True)
        _accumulate(a, hit / cnt * _expand_reduced(g, a.shape, axis, keepdims))

    return _result(np.asarray(out), (a,), bw)


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def bw(g):
        o = np.expand_dims(out, axis)
        safe = np.where(o > 0, o, 1.0)
        scale = np.where(o > 0, np.expand_dims(g, axis) / safe, 0.0)
        _accumulate(a, a.data * scale)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation and indexing
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: _accumulate(a, np.transpose(g, inv)))


def index(a, idx) -> Tensor:
    """General numpy indexing; the backward pass scatters with ``np.add.at``."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _result(np.array(out, copy=True), (a,), bw)


def scatter_add(n: int, rows: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """``out[rows[i]] += vals[i]`` into an ``n``-row zero array (column-wise bincount)."""
    flat = vals.reshape(len(rows), -1)
    if flat.shape[1] > 4:
        # one sparse product beats a bincount per column for wide rows
        m = sp.csr_matrix((np.ones(len(rows), dtype=vals.dtype), (rows, np.arange(len(rows)))),
                          shape=(n, len(rows)))
        return np.asarray(m @ flat).reshape((n,) + vals.shape[1:])
    out = np.empty((n, flat.shape[1]), dtype=vals.dtype)
    for j in range(flat.shape[1]):
        out[:, j] = np.bincount(rows, weights=flat[:, j], minlength=n)
    return out.reshape((n,) + vals.shape[1:])


def take_rows(a, rows: np.ndarray) -> Tensor:
    """Gather along axis 0 with an integer index array of any shape."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    out = a.data[rows]

    def bw(g):
        _accumulate(a, scatter_add(a.shape[0], rows.reshape(-1), g.reshape((-1,) + a.shape[1:])))

    return _result(out, (a,), bw)


def scatter_rows(a, rows: np.ndarray, n_out: int) -> Tensor:
    """Sum rows of ``a`` into an ``n_out``-row zero array at ``rows`` (inverse of take_rows)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    out = scatter_add(n_out, rows, a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g[rows]))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(ts):
            _accumulate(t, np.take(g, i, axis=axis))

    return _result(np.stack([t.data for t in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), bw)


def sparse_left_matmul(s, x) -> Tensor:
    """``s @ x`` for a constant scipy sparse matrix ``s`` and 2-D tensor ``x``."""
    x = as_tensor(x)
    st = s.T.tocsr()
    return _result(np.asarray(s @ x.data), (x,), lambda g: _accumulate(x, np.asarray(st @ g)))


def resample(x, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Separable linear resampling of ``x[..., h, w]`` to ``rows @ x @ cols.T``.

    ``rows`` has shape (out_h, h) and ``cols`` (out_w, w).  Bilinear
    upsampling and adaptive average pooling are both instances.
    """
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=x.dtype)
    cols = np.asarray(cols, dtype=x.dtype)
    out = rows @ x.data @ cols.T

    def bw(g):
        _accumulate(x, rows.T @ g @ cols)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling on [C, H, W] maps
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    # win: [C, H, W, kh, kw] -> [C*kh*kw, H*W]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, h * w)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, pad: int) -> np.ndarray:
    c, h, w = shape
    cols = cols.reshape(c, kh, kw, h, w)
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + h, j:j + w] += cols[:, i, j]
    if pad:
        out = out[:, pad:pad + h, pad:pad + w]
    return out


def conv2d(x, weight, bias=None, pad: int | None = None) -> Tensor:
    """Stride-1 cross-correlation of ``x[C,H,W]`` with ``weight[Co,C,k,k]``.

    Default padding keeps the spatial size ("same" padding for odd k).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    co, ci, kh, kw = weight.shape
    if x.ndim != 3 or x.shape[0] != ci:
        raise DimensionError(f"conv2d expects input [{ci},H,W], got {x.shape}")
    if pad is None:
        pad = kh // 2
    c, h, w = x.shape
    oh, ow = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if kh == 1 and kw == 1 and pad == 0:
        cols = x.data.reshape(ci, h * w)
    else:
        cols = _im2col(x.data, kh, kw, pad)
    wmat = weight.data.reshape(co, ci * kh * kw)
    out = (wmat @ cols).reshape(co, oh, ow)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(co, 1, 1)
        parents.append(bias)

    def bw(g):
        gm = g.reshape(co, oh * ow)
        if weight.requires_grad:
            _accumulate(weight, (gm @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gm.sum(axis=1))
        if x.requires_grad:
            gc = wmat.T @ gm
            if kh == 1 and kw == 1 and pad == 0:
                _accumulate(x, gc.reshape(x.shape))
            else:
                _accumulate(x, _col2im(gc, x.shape, kh, kw, pad))

    return _result(out, parents, bw)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2 on ``x[C,H,W]`` (H, W even)."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        _accumulate(x, up)

    return _result(out, (x,), bw)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights (n_out, n_in) under the align-corners convention."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def adaptive_avg_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging weights (n_out, n_in) with adaptive-pool bin edges."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def upsample_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsampling of ``x[C,h,w]`` with corner pixels mapped exactly."""
    x = as_tensor(x)
    if out_h <= 0 or out_w <= 0:
        raise DimensionError("upsample target must be non-empty")
    if x.ndim != 3:
        raise DimensionError(f"upsample expects [C,h,w], got {x.shape}")
    _, h, w = x.shape
    if out_h < h or out_w < w:
        raise DimensionError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    if (out_h, out_w) == (h, w):
        return x
    return resample(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w))


def adaptive_avg_pool(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    _, h, w = x.shape
    return resample(x, adaptive_avg_matrix(h, out_h), adaptive_avg_matrix(w, out_w))
