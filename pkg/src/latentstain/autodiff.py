"""Dense-tensor engine with reverse-mode automatic differentiation.

Values are stored as 32-bit floats by default; reductions, matrix products
and convolution inner loops accumulate in 64-bit before casting back.
A computation graph is built eagerly as ops are applied and is freed by
``backward()`` — graphs are single-use and confined to one thread.
"""
from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

# Guard for log/division-style ops where the model math may hit zero.
EPS = 1e-8


class InvalidShapeError(ValueError):
    pass


class InvalidArgumentError(ValueError):
    pass


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    ``requires_grad`` tensors reachable from a scalar loss receive a
    populated ``grad`` after ``loss.backward()``; repeated backward passes
    (through freshly built graphs) accumulate into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._freed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar; frees the graph afterwards."""
        if self.size != 1:
            raise InvalidArgumentError(
                f"backward() requires a scalar, got shape {self.shape}")
        if self._freed:
            raise InvalidArgumentError("graph already freed by a previous backward()")
        order = _toposort(self)
        flowing = {id(self): np.ones_like(self.data)}
        for node in order:
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = flowing.get(id(parent))
                flowing[id(parent)] = pg if prev is None else prev + pg
        # Eager single-use graphs: drop edges so memory is reclaimed.
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None
                node._freed = True

    # -- operator sugar -------------------------------------------------------

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

    def sum(self, axes=None, keepdims: bool = False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return reduce_mean(self, axes, keepdims)

    def max(self, axes=None, keepdims: bool = False):
        return reduce_max(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _toposort(root: Tensor):
    """Nodes ordered output-first (each node before all of its parents)."""
    post, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    post.reverse()
    return post


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), requires_grad=False,
                  dtype=like.dtype)


def _result_dtype(*tensors) -> np.dtype:
    return np.result_type(*[t.data.dtype for t in tensors])


def _from_op(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._freed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape, dtype) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape`` (64-bit sums)."""
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    # note: reshape also normalizes the 0-d case (ascontiguousarray would
    # silently promote scalars to shape (1,))
    return np.asarray(g, dtype=dtype).reshape(shape)


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = np.add(a.data, b.data, dtype=_result_dtype(a, b))

    def backward(g):
        return (_unbroadcast(g, a.shape, a.dtype),
                _unbroadcast(g, b.shape, b.dtype))

    return _from_op(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = np.subtract(a.data, b.data, dtype=_result_dtype(a, b))

    def backward(g):
        return (_unbroadcast(g, a.shape, a.dtype),
                _unbroadcast(-g, b.shape, b.dtype))

    return _from_op(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = np.multiply(a.data, b.data, dtype=_result_dtype(a, b))

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape, a.dtype),
                _unbroadcast(g * a.data, b.shape, b.dtype))

    return _from_op(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = np.divide(a.data, b.data, dtype=_result_dtype(a, b))

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape, a.dtype),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape, b.dtype))

    return _from_op(data, (a, b), backward)


def _coerce_pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    raise InvalidArgumentError("at least one operand must be a Tensor")


# -- elementwise --------------------------------------------------------------

def neg(x: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _from_op(-x.data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward(g):
        return ((g * mask).astype(x.dtype, copy=False),)

    return _from_op(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data.astype(np.float64, copy=False)
    e = np.exp(-np.abs(xd))
    y64 = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    data = y64.astype(x.dtype)

    def backward(g):
        return ((g * (y64 * (1.0 - y64))).astype(x.dtype, copy=False),)

    return _from_op(data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        return ((g * data).astype(x.dtype, copy=False),)

    return _from_op(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    # Inputs clamped at EPS; the derivative is consistent with the clamp.
    clamped = np.maximum(x.data, EPS)
    data = np.log(clamped)
    mask = x.data >= EPS

    def backward(g):
        return ((g * mask / clamped).astype(x.dtype, copy=False),)

    return _from_op(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(np.maximum(x.data, 0))

    def backward(g):
        return ((g / (2.0 * np.maximum(data, 1e-12))).astype(x.dtype, copy=False),)

    return _from_op(data, (x,), backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    data = np.maximum(x.data, np.asarray(floor, dtype=x.dtype))
    mask = x.data >= floor

    def backward(g):
        return ((g * mask).astype(x.dtype, copy=False),)

    return _from_op(data, (x,), backward)


# -- shape manipulation -------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _from_op(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _from_op(data, (x,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise InvalidArgumentError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _from_op(data, tuple(tensors), backward)


# -- reductions ---------------------------------------------------------------

def _norm_axes(axes, ndim):
    # Spec convention: None or an empty axis list means full reduction.
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) % ndim for a in axes)
    if len(axes) == 0:
        return tuple(range(ndim))
    if len(set(axes)) != len(axes):
        raise InvalidArgumentError(f"duplicate reduction axes {axes}")
    for a in axes:
        if not 0 <= a < ndim:
            raise InvalidArgumentError(f"axis {a} out of range for ndim {ndim}")
    return tuple(sorted(axes))


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, x.shape).astype(x.dtype, copy=False).copy(),)

    return _from_op(data, (x,), backward)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    data = (x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)
            / count).astype(x.dtype)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return ((np.broadcast_to(gk, x.shape) / count).astype(x.dtype, copy=False),)

    return _from_op(data, (x,), backward)


def reduce_max(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Max over ``axes``; ties route gradient to the lowest flat index."""
    axes = _norm_axes(axes, x.ndim)
    kept = tuple(i for i in range(x.ndim) if i not in axes)
    perm = kept + axes
    moved = x.data.transpose(perm)
    lead = moved.shape[:len(kept)]
    flat = moved.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)  # first max wins on ties
    red = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if keepdims:
        data = np.expand_dims(red, axes).copy()
    else:
        data = red.copy()

    def backward(g):
        gr = g.squeeze(axis=axes) if keepdims else g
        scatter = np.zeros_like(flat)
        np.put_along_axis(scatter, arg[..., None], gr[..., None].astype(x.dtype), axis=-1)
        scatter = scatter.reshape(moved.shape).transpose(tuple(np.argsort(perm)))
        return (np.ascontiguousarray(scatter),)

    return _from_op(data, (x,), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out_dtype = _result_dtype(a, b)
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    data = (a64 @ b64).astype(out_dtype)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        return ((g64 @ b64.T).astype(a.dtype) if need_a else None,
                (a64.T @ g64).astype(b.dtype) if need_b else None)

    return _from_op(data, (a, b), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map [N,D] @ [D,M] + [M]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise InvalidShapeError(f"dense expects 2-D input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise InvalidShapeError(
            f"dense dimension mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise InvalidShapeError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)")
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- convolution and pooling --------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with [K,C,kh,kw] filters."""
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidShapeError(
            f"conv2d expects 4-D input/weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise InvalidShapeError(
            f"input channels {c} do not match weight channels {cw}")
    if stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise InvalidArgumentError(f"padding must be >= 0, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise InvalidShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (k,):
        raise InvalidShapeError(f"conv2d bias shape {bias.shape} != ({k},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [n, c, oh, ow, kh, kw]
    cols64 = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5), dtype=np.float64
                                  ).reshape(n * oh * ow, c * kh * kw)
    wmat64 = weight.data.reshape(k, c * kh * kw).astype(np.float64)
    out64 = cols64 @ wmat64.T
    if bias is not None:
        out64 = out64 + bias.data.astype(np.float64)
    out_dtype = _result_dtype(x, weight)
    data = np.ascontiguousarray(out64.reshape(n, oh, ow, k).transpose(0, 3, 1, 2),
                                dtype=out_dtype)

    need_x = x.requires_grad

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)
                                    ).reshape(n * oh * ow, k).astype(np.float64)
        dw = (gmat.T @ cols64).reshape(weight.shape).astype(weight.dtype)
        db = None
        if bias is not None:
            db = gmat.sum(axis=0).astype(bias.dtype)
        dx = None
        if need_x:
            dcols = (gmat @ wmat64).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            dx = dxp.astype(x.dtype)
        grads = (dx, dw)
        return grads + (db,) if bias is not None else grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _from_op(data, parents, backward)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; window ties keep the lowest flat index."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise InvalidShapeError(f"pool size {size} does not divide {h}x{w}")
    r = reshape(x, (n, c, h // size, size, w // size, size))
    return reshape(reduce_max(r, axes=(3, 5)), (n, c, h // size, w // size))


def avgpool2d(x: Tensor, size: int) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise InvalidShapeError(f"pool size {size} does not divide {h}x{w}")
    r = reshape(x, (n, c, h // size, size, w // size, size))
    return reshape(reduce_mean(r, axes=(3, 5)), (n, c, h // size, w // size))


# -- softmax ------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Row softmax for [N,C] logits, computed with max subtraction."""
    if x.ndim != 2:
        raise InvalidShapeError(f"softmax expects [N,C] logits, got {x.shape}")
    x64 = x.data.astype(np.float64, copy=False)
    shifted = x64 - x64.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y64 = e / e.sum(axis=1, keepdims=True)
    data = y64.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        inner = (g64 * y64).sum(axis=1, keepdims=True)
        return ((y64 * (g64 - inner)).astype(x.dtype),)

    return _from_op(data, (x,), backward)
