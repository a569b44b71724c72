"""Reverse-mode automatic differentiation on dense numpy arrays.

The operation set is deliberately small and closed: matrix product,
broadcasting elementwise arithmetic, relu/exp/guarded-log, masked row
softmax, log-sum-exp, reductions, row gather, concatenation, transpose
and slicing.  Every backward rule is a few lines and can be checked
against central finite differences.  Values default to float64 so those
checks are meaningful; float32 can be selected for training speed.
"""

import numpy as np

LOG_GUARD_EPS = 1e-12

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    """Select the dtype newly created tensors use ('float32' or 'float64')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("default dtype must be float32 or float64, got %s" % dt)
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return np.dtype(_DEFAULT_DTYPE)


class Tensor:
    """Node in the computation graph: a numpy payload plus a backward rule.

    ``requires_grad`` marks leaves that should accumulate gradients; any
    tensor derived from one inherits it.  ``backward`` may only be called
    on scalars (single-element tensors).
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error()

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        """Run reverse-mode accumulation from this scalar through the graph."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss, got shape %s" % (self.shape,))
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; the real rules live in the module functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (self.shape, self.requires_grad)


def _scalar_error():
    raise ValueError("item() requires a single-element tensor")


def _wrap(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value))


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._prev = tuple(parents)
        out._backward = backward_fn
    else:
        out._prev = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` over the axes numpy broadcasting expanded to reach ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands, got %s and %s" % (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise ValueError("matmul inner dimensions differ: %s vs %s" % (a.shape, b.shape))
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(data, (a, b), backward)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def div(a, b):
    """Elementwise quotient; caller must keep the denominator away from zero.

    Exists alongside exp/log composition because the forward value is the
    correctly-rounded quotient, which keeps score-ranking ties exact.
    """
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * data / b.data, b.shape))

    return _result(data, (a, b), backward)


def relu(x):
    x = _wrap(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _result(data, (x,), backward)


def exp(x):
    x = _wrap(x)
    data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * data)

    return _result(data, (x,), backward)


def log_guarded(x, eps=LOG_GUARD_EPS):
    """log(max(x, eps)); the guard makes zero inputs finite instead of -inf."""
    x = _wrap(x)
    clipped = np.maximum(x.data, eps)
    data = np.log(clipped)
    live = x.data > eps

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * live / clipped)

    return _result(data, (x,), backward)


def softmax_rows(x, mask=None):
    """Row-wise softmax of a 2-D tensor; masked-out entries are exactly zero.

    ``mask`` is a boolean array (True = keep).  A row with every entry
    masked has no well-defined distribution and raises.
    """
    x = _wrap(x)
    if x.ndim != 2:
        raise ValueError("softmax_rows expects a 2-D tensor, got %s" % (x.shape,))
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not keep.any(axis=1).all():
        raise ValueError("softmax_rows: a row is fully masked")
    shifted = np.where(keep, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=1, keepdims=True)
            x._accumulate((g - dot) * data)

    return _result(data, (x,), backward)


def _check_reduce_axis(x, axis):
    if axis is None:
        if x.data.size == 0:
            raise ValueError("reduction over an empty tensor")
    else:
        if x.data.shape[axis] == 0:
            raise ValueError("reduction over an empty axis")


def reduce_sum(x, axis=None, keepdims=False):
    x = _wrap(x)
    _check_reduce_axis(x, axis)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data)

    def backward(g):
        if x.requires_grad:
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return _result(data, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    _check_reduce_axis(x, axis)
    count = x.data.size if axis is None else x.data.shape[axis]
    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if x.requires_grad:
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            x._accumulate(np.broadcast_to(gg, x.shape) / count)

    return _result(data, (x,), backward)


def reduce_max(x, axis=None, keepdims=False):
    """Maximum along ``axis``; also returns argmax indices.

    Gradient flows only to the argmax element; ties resolve to the lowest
    index (numpy first occurrence), which keeps runs deterministic.
    """
    x = _wrap(x)
    _check_reduce_axis(x, axis)
    if axis is None:
        idx = int(x.data.argmax())
        data = np.asarray(x.data.max())
        if keepdims:
            data = data.reshape((1,) * x.ndim)

        def backward(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gx.reshape(-1)[idx] = np.asarray(g).reshape(-1)[0]
                x._accumulate(gx)

        return _result(data, (x,), backward), idx

    idx = x.data.argmax(axis=axis)
    data = np.asarray(x.data.max(axis=axis, keepdims=keepdims))

    def backward(g):
        if x.requires_grad:
            gg = np.asarray(g)
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            gx = np.zeros_like(x.data)
            expanded = np.expand_dims(idx, axis)
            np.put_along_axis(gx, expanded, gg, axis=axis)
            x._accumulate(gx)

    return _result(data, (x,), backward), idx


def logsumexp(x, axis, keepdims=True):
    """Numerically stable log(sum(exp(x))) along one axis of a 2-D tensor."""
    x = _wrap(x)
    if x.ndim != 2:
        raise ValueError("logsumexp expects a 2-D tensor, got %s" % (x.shape,))
    _check_reduce_axis(x, axis)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = m + np.log(s)
    soft = e / s
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(g):
        if x.requires_grad:
            gg = np.asarray(g)
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            x._accumulate(gg * soft)

    return _result(data, (x,), backward)


def gather_rows(x, indices):
    """Select rows of a 2-D tensor; backward scatters additively."""
    x = _wrap(x)
    if x.ndim != 2:
        raise ValueError("gather_rows expects a 2-D tensor, got %s" % (x.shape,))
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows indices must be 1-D")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("gather_rows index out of range for %d rows" % n)
    data = x.data[idx]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return _result(data, (x,), backward)


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ValueError("concat of no tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _result(data, tuple(parts), backward)


def transpose(x):
    x = _wrap(x)
    if x.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor, got %s" % (x.shape,))
    data = x.data.T.copy()

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.T)

    return _result(data, (x,), backward)


def narrow(x, axis, start, length):
    """Contiguous slice of length ``length`` starting at ``start`` along ``axis``."""
    x = _wrap(x)
    if axis < 0 or axis >= x.ndim:
        raise ValueError("narrow axis out of range")
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ValueError("narrow slice [%d:%d] outside axis of size %d"
                         % (start, start + length, x.shape[axis]))
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = x.data[sl].copy()

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[sl] = g
            x._accumulate(gx)

    return _result(data, (x,), backward)


class ParameterStore:
    """Named collection of trainable tensors with a deterministic order.

    Iteration is always sorted by name so optimizer sweeps, checkpoints
    and finite-difference probes all see parameters in the same order.
    """

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise ValueError("duplicate parameter name %r" % name)
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(name, self._params[name]) for name in self.names()]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def copy(self):
        out = ParameterStore()
        for name, t in self.items():
            out.add(name, t.data.copy())
        return out
