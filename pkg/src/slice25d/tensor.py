"""Dense tensors with reverse-mode automatic differentiation.

Every op that has at least one input with ``requires_grad`` records a
:class:`TapeNode` holding its parents and a closure mapping the output
gradient to input gradients. Node ids increase monotonically, so sorting the
nodes reachable from a loss by id gives a valid topological order; that set of
nodes is the gradient tape of the graph. A tape is consumed by one call to
:func:`backward`.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

_state = threading.local()
_node_ids = itertools.count()


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (reused tape, missing tape)."""


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable recording of ops on the tape."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class TapeNode:
    __slots__ = ("id", "parents", "backward_fn", "consumed", "op")

    def __init__(self, op, parents, backward_fn):
        self.id = next(_node_ids)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """An n-dimensional float array that can take part in autodiff.

    ``data`` is always a C-contiguous numpy array. Integer or list inputs are
    converted to the current default dtype; float arrays keep their dtype.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_default_dtype())
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._retain = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def node_id(self):
        return None if self._node is None else self._node.id

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def retain_grad(self):
        """Keep the gradient of a non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

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

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        backward(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make_result(data, parents, backward_fn, op=""):
    """Wrap ``data`` as an op output and record it on the tape if needed."""
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = TapeNode(op, parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch between {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------

def elementwise(op_kind, a, b=None):
    """Apply a named elementwise op; binary kinds broadcast ``b`` against ``a``."""
    unary = {"neg": neg, "relu": relu, "exp": exp, "log": log,
             "sigmoid": sigmoid, "tanh": tanh, "sqrt": sqrt}
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op_kind in unary:
        return unary[op_kind](a)
    if op_kind in binary:
        return binary[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a):
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a):
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def power(a, p):
    p = float(p)
    out = a.data ** p
    return make_result(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """Batched matrix product ``[..., m, k] @ [..., k, n]``.

    Leading batch dimensions must be equal or 1.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def reduce(op_kind, x, axis=None, keepdims=False):
    """Reduce ``x`` with ``sum``, ``mean`` or ``max`` over ``axis``.

    Max backward routes the gradient to the first maximal index.
    """
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for ax in axes:
        if x.shape[ax] == 0:
            raise ValueError(f"{op_kind} over empty axis {ax} of shape {x.shape}")
        count *= x.shape[ax]
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    if op_kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        return make_result(out, (x,), lambda g: (np.broadcast_to(g.reshape(kept), x.shape).copy(),), "sum")
    if op_kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / count

        def bw(g):
            return (np.broadcast_to(g.reshape(kept) * scale, x.shape).astype(x.dtype),)

        return make_result(out, (x,), bw, "mean")
    if op_kind == "max":
        # move reduced axes to the end and flatten them so argmax picks the first max
        rest = tuple(i for i in range(x.ndim) if i not in axes)
        perm = rest + axes
        moved = x.data.transpose(perm)
        flat = moved.reshape(moved.shape[:len(rest)] + (count,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            out = out.reshape(kept)

        def bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (gmoved.transpose(np.argsort(perm)),)

        return make_result(np.array(out), (x,), bw, "max")
    raise ValueError(f"unknown reduction {op_kind!r}")


def softmax(x, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    ax = _norm_axes(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    ax = _norm_axes(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=ax, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


# -- shape ops -------------------------------------------------------------

def reshape(x, shape):
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def swapaxes(x, a, b):
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x, idx):
    out = np.array(x.data[idx], copy=True)

    basic = all(isinstance(i, (slice, int)) or i is Ellipsis or i is None
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(out, (x,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(lo, hi), axis=ax))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def pad(x, widths):
    """Zero-pad with ``widths`` given as ``[(before, after), ...]`` per axis."""
    widths = tuple(tuple(w) for w in widths)
    if not any(b or a for b, a in widths):
        return x
    slices = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return make_result(np.pad(x.data, widths), (x,), lambda g: (np.ascontiguousarray(g[slices]),), "pad")


# -- backward --------------------------------------------------------------

def backward(loss):
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    The tape (all nodes reachable from ``loss``) is consumed; a second call on
    the same graph raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("no active tape: loss was not produced by a recorded op")
    if loss._node.consumed:
        raise TapeError("tape already consumed by a previous backward call")

    # collect reachable non-leaf tensors
    order = []
    seen = {id(loss)}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        order.append(t)
        for p in t._node.parents:
            if p._node is not None and id(p) not in seen:
                if p._node.consumed:
                    raise TapeError("tape already consumed by a previous backward call")
                seen.add(id(p))
                stack_.append(p)
    order.sort(key=lambda t: t._node.id, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in order:
        node = t._node
        g = grads.pop(id(t), None)
        if g is not None:
            if t._retain:
                t.grad = g if t.grad is None else t.grad + g
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
        node.consumed = True
        node.backward_fn = None
        node.parents = ()


def grad_check(f, params, h=1e-5, max_checks_per_param=None, seed=0, floor=1e-6):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` builds a scalar loss from ``params`` and must be deterministic.
    Returns the maximum over checked entries of ``|a - n| / max(|a|, |n|, floor)``.
    With ``max_checks_per_param`` only a random subset of entries per tensor is
    probed numerically.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks_per_param is not None and flat.size > max_checks_per_param:
                idx = rng.choice(flat.size, size=max_checks_per_param, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = float(a.reshape(-1)[i])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst
