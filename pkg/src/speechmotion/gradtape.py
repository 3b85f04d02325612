"""Small reverse-mode autodiff over numpy arrays.

Operations on :class:`Tensor` run eagerly. While a :class:`Tape` is active
in the current thread, every op whose inputs need gradients appends a node
(output, inputs, pullback) to it; :func:`backward` walks that list in
reverse. Tapes are thread-local, so independent tapes can run on separate
threads.

Only bias-add broadcasting is supported. Anything else takes an explicit
:func:`reshape` or :func:`transpose`.
"""
from __future__ import annotations

import threading
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import BadLoss, NonFiniteGradient, ShapeError

DEFAULT_DTYPE = np.float32
# flip on to assert finiteness after every op
DEBUG_FINITE = False

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else
                         (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f"
                          else DEFAULT_DTYPE))
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    inputs: Tuple[Tensor, ...]
    pullback: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records ops executed inside ``with tape:`` on the current thread."""

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


def _active_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], pullback) -> Tensor:
    if DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by a tensor op")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.nodes.append(_Node(out, tuple(inputs), pullback))
    return out


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-D bias over ``a``'s last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1]:
        axes = tuple(range(a.data.ndim - 1))
        return _record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def mul(a, b) -> Tensor:
    """Elementwise product, or scaling by a python/numpy scalar."""
    if np.isscalar(b):
        a = _as_tensor(a)
        c = a.data.dtype.type(b)
        return _record(a.data * c, (a,), lambda g: (g * c,))
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    x = _as_tensor(x)
    if not 0 <= slope <= 1:
        raise ValueError(f"leaky_relu slope must lie in [0, 1], got {slope}")
    s = x.data.dtype.type(slope)
    y = np.maximum(x.data, s * x.data)

    def pullback(g):
        scale = (x.data > 0).astype(g.dtype)
        scale *= 1 - s
        scale += s
        return (g * scale,)

    return _record(y, (x,), pullback)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = expit(x.data)
    return _record(y, (x,), lambda g: (g * y * (1 - y),))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# -- shape ------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record(y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


# -- reductions / losses ----------------------------------------------------

def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.data.size
        shape = x.shape
        return _record(np.asarray(x.data.mean(), dtype=x.dtype).reshape(1), (x,),
                       lambda g: (np.full(shape, g.reshape(-1)[0] / count, dtype=g.dtype),))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(a % x.data.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    y = x.data.mean(axis=axes)

    def pullback(g):
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=True),)

    return _record(y, (x,), pullback)


def mse(pred, target) -> Tensor:
    """Mean squared error; ``target`` may be a constant array."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    val = np.asarray((diff * diff).mean(), dtype=pred.dtype).reshape(1)

    def pullback(g):
        d = (2.0 / n) * g.reshape(-1)[0] * diff
        return d, -d

    return _record(val, (pred, target), pullback)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; rank-3 operands are multiplied batch-wise."""
    a, b = _as_tensor(a), _as_tensor(b)
    nd = a.data.ndim
    if nd not in (2, 3) or b.data.ndim != nd or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    at, bt = a.data.swapaxes(-1, -2), b.data.swapaxes(-1, -2)
    return _record(a.data @ b.data, (a, b), lambda g: (g @ bt, at @ g))


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv_transpose_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k


@lru_cache(maxsize=32)
def _tap_matrix(shape: Tuple[int, int, int], k: int, stride: int, pad: int):
    """Sparse 0/1 map from input voxels to (tap, output position) columns.

    Taps that land in the zero padding have no entry, so padding costs
    nothing. Gather is ``x @ S``, the adjoint scatter is ``g @ S.T``.
    """
    osz = [conv_out_size(n, k, stride, pad) for n in shape]
    if min(osz) < 1:
        raise ShapeError(f"conv3d: kernel size {k} larger than padded input {shape}")
    taps = np.arange(k)
    grids = np.meshgrid(taps, taps, taps, *[np.arange(o) for o in osz], indexing="ij")
    i, j, l, a, b, c = (g.ravel() for g in grids)
    px, py, pz = i + stride * a - pad, j + stride * b - pad, l + stride * c - pad
    X, Y, Z = shape
    ok = (px >= 0) & (px < X) & (py >= 0) & (py < Y) & (pz >= 0) & (pz < Z)
    rows = (px * Y + py) * Z + pz
    cols = np.arange(i.size)
    S = sparse.csr_matrix((np.ones(int(ok.sum())), (rows[ok], cols[ok])), shape=(X * Y * Z, i.size))
    return S, S.T.tocsr(), tuple(osz)


def im2col3d(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Patch matrix (C*k^3, N*ox*oy*oz) of a channels-leading (C, N, X, Y, Z) array.

    Passing it back to :func:`conv3d` through ``cols=`` skips the gather,
    which pays off when a constant input is convolved many times.
    """
    C, N = x.shape[:2]
    S, _, (ox, oy, oz) = _tap_matrix(tuple(x.shape[2:]), k, stride, pad)
    P = ox * oy * oz
    flat = (x.reshape(C * N, -1) @ S).astype(x.dtype, copy=False)
    return np.ascontiguousarray(flat.reshape(C, N, k ** 3, P).transpose(0, 2, 1, 3)).reshape(C * k ** 3, N * P)


def conv3d(x, w, b=None, stride: int = 1, pad: int = 0, cols: Optional[np.ndarray] = None) -> Tensor:
    """3-D cross-correlation with cubic kernels.

    ``x`` is channels-leading, (C, N, X, Y, Z), and so is the output
    (O, N, ox, oy, oz); with that layout neither the patch gather nor the
    product needs a transpose. ``w`` is (O, C, k, k, k).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d: expected rank-5 input and kernel, got {x.shape} and {w.shape}")
    C, N = x.shape[:2]
    O, Cw, k, ky, kz = w.shape
    if Cw != C:
        raise ShapeError(f"conv3d: input {x.shape} has {C} channels, kernel {w.shape} expects {Cw}")
    if not k == ky == kz:
        raise ShapeError(f"conv3d: only cubic kernels are supported, got {w.shape}")
    _, ST, (ox, oy, oz) = _tap_matrix(tuple(x.shape[2:]), k, stride, pad)
    cols2 = im2col3d(x.data, k, stride, pad) if cols is None else cols
    if cols2.shape != (C * k ** 3, N * ox * oy * oz):
        raise ShapeError(f"conv3d: precomputed patches {cols2.shape} do not fit input {x.shape}")
    w2 = w.data.reshape(O, -1)
    y = w2 @ cols2
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (O,):
            raise ShapeError(f"conv3d: bias {b.shape} does not match {O} output channels")
        y += b.data[:, None]
        inputs.append(b)

    def pullback(g):
        g2 = g.reshape(O, -1)
        dw = (g2 @ cols2.T).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            P = ox * oy * oz
            dcols = (w2.T @ g2).reshape(C, k ** 3, N, P).transpose(0, 2, 1, 3).reshape(C * N, -1)
            dx = (dcols @ ST).astype(x.dtype, copy=False).reshape(x.shape)
        out = [dx, dw]
        if b is not None:
            out.append(g2.sum(axis=1))
        return out

    return _record(y.reshape(O, N, ox, oy, oz), inputs, pullback)


@lru_cache(maxsize=32)
def _spread_matrix(shape: Tuple[int, int], k: int, stride: int, pad: int):
    """Sparse map from (tap, input position) rows to cropped output pixels."""
    H, W = shape
    Ho, Wo = conv_transpose_out_size(H, k, stride, pad), conv_transpose_out_size(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d_transpose: padding {pad} leaves no output for input {shape}")
    taps = np.arange(k)
    i, j, a, b = (g.ravel() for g in np.meshgrid(taps, taps, np.arange(H), np.arange(W), indexing="ij"))
    py, px = i + stride * a - pad, j + stride * b - pad
    ok = (py >= 0) & (py < Ho) & (px >= 0) & (px < Wo)
    rows = np.arange(i.size)
    S = sparse.csr_matrix((np.ones(int(ok.sum())), (rows[ok], (py * Wo + px)[ok])), shape=(i.size, Ho * Wo))
    return S, S.T.tocsr(), (Ho, Wo)


def conv2d_transpose(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed 2-D convolution with square kernels.

    ``x`` is (N, C, H, W), ``w`` is (C, O, k, k); the output is cropped by
    ``pad`` on every side, giving (H - 1) * stride - 2 * pad + k rows.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose: expected rank-4 input and kernel, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    Cw, O, k, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d_transpose: input {x.shape} has {C} channels, kernel {w.shape} expects {Cw}")
    if k != kw:
        raise ShapeError(f"conv2d_transpose: only square kernels are supported, got {w.shape}")
    S, ST, (Ho, Wo) = _spread_matrix((H, W), k, stride, pad)
    HW = H * W
    x2 = x.data.transpose(1, 0, 2, 3).reshape(C, -1)
    w2 = w.data.reshape(C, -1)
    # (O*k*k, N*H*W) -> rows (O, N), columns (tap, position)
    contrib = (w2.T @ x2).reshape(O, k * k, N, HW).transpose(0, 2, 1, 3).reshape(O * N, -1)
    y = (contrib @ ST.T).astype(x.dtype, copy=False).reshape(O, N, Ho, Wo)
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (O,):
            raise ShapeError(f"conv2d_transpose: bias {b.shape} does not match {O} output channels")
        y += b.data[:, None, None, None]
        inputs.append(b)

    def pullback(g):
        gt_ = g.transpose(1, 0, 2, 3).reshape(O * N, -1)
        gathered = (gt_ @ S.T).astype(g.dtype, copy=False)  # (O*N, k*k*HW)
        g2 = gathered.reshape(O, N, k * k, HW).transpose(0, 2, 1, 3).reshape(O * k * k, -1)
        dx = (w2 @ g2).reshape(C, N, H, W).transpose(1, 0, 2, 3) if x.requires_grad else None
        dw = (x2 @ g2.T).reshape(w.shape) if w.requires_grad else None
        out = [dx, dw]
        if b is not None:
            out.append(g.sum(axis=(0, 2, 3)))
        return out

    return _record(np.ascontiguousarray(y.transpose(1, 0, 2, 3)), inputs, pullback)


# -- reverse pass -----------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` for every leaf tensor with requires_grad.

    Leaf gradients are also accumulated into ``.grad``. The tape is emptied
    afterwards, whether or not the pass succeeds.
    """
    try:
        if loss.data.size != 1:
            raise BadLoss(f"loss must be a scalar, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.out) for n in tape.nodes}
        leaves: Dict[int, Tensor] = {}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.pullback(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        out = {}
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g
            out[t] = g
        return out
    finally:
        tape.clear()


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    """Step count plus first and second moments, flattened in parameter order."""
    step: int = 0
    names: Tuple[str, ...] = ()
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def moments(self, name: str, shapes: Dict[str, Tuple[int, ...]]):
        """``(m, v)`` views for one parameter."""
        pos = 0
        for n in self.names:
            size = int(np.prod(shapes[n], dtype=np.int64))
            if n == name:
                return (self.m[pos:pos + size].reshape(shapes[n]),
                        self.v[pos:pos + size].reshape(shapes[n]))
            pos += size
        raise KeyError(name)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Parameters without a gradient entry are treated as having gradient 0.
    """
    names = tuple(params)
    if state.m is not None and state.names != names:
        raise ShapeError("optimizer state was built for a different parameter set")
    dtype = np.result_type(*[params[n].dtype for n in names]) if names else np.dtype(DEFAULT_DTYPE)
    gparts = []
    for n in names:
        g = grads.get(n)
        if g is None:
            g = np.zeros_like(params[n])
        elif g.shape != params[n].shape:
            raise ShapeError(f"gradient for {n!r} has shape {g.shape}, parameter {params[n].shape}")
        gparts.append(g.ravel())
    g = np.concatenate(gparts).astype(dtype, copy=False) if gparts else np.zeros(0, dtype)
    if not np.isfinite(g).all():
        bad = [n for n in grads if not np.all(np.isfinite(grads[n]))]
        raise NonFiniteGradient(f"gradient of {bad[0]!r} contains NaN or inf")
    p = np.concatenate([params[n].ravel() for n in names]).astype(dtype, copy=False) if names else g.copy()

    t = state.step + 1
    m = g * dtype.type(1 - beta1)
    v = g * g
    v *= dtype.type(1 - beta2)
    if state.m is not None:
        m += dtype.type(beta1) * state.m
        v += dtype.type(beta2) * state.v
    denom = v * dtype.type(1.0 / (1 - beta2 ** t))
    np.sqrt(denom, out=denom)
    denom += dtype.type(eps)
    upd = m * dtype.type(lr / (1 - beta1 ** t))
    upd /= denom
    p = p - upd

    out, pos = {}, 0
    for n in names:
        size = params[n].size
        out[n] = p[pos:pos + size].reshape(params[n].shape)
        pos += size
    return out, AdamState(t, names, m, v)
