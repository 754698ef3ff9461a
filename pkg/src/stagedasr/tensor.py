"""Float64 tensors with reverse-mode automatic differentiation.

Every operation records its parent tensors and one vector-Jacobian
closure per parent on the result; ``Tensor.backward`` walks the graph
once in reverse topological order and accumulates gradients on the
leaves.  There is no tape object: the graph is the web of parent links.

Conventions that the rest of the package relies on:

* all data is float64, and -inf is the canonical log-domain zero;
* NaN is never a legitimate value, log-domain ops guard against
  producing it (``logaddexp(-inf, -inf)`` is -inf with zero gradients);
* tensors are immutable once created, except that leaf ``data`` may be
  poked in place by the finite-difference checker.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, dev evals)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_f64(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Backpropagate from a scalar root.

        Visits every reachable node exactly once, in reverse topological
        order, so gradient accumulation is linear in graph size.
        Gradients of intermediate nodes are freed as soon as they have
        been propagated; leaves keep theirs.
        """
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar root, got shape %r"
                             % (self.data.shape,))
        order = _topo(self)
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                pg = vjp(g)
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
            if node._parents:
                node.grad = None

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Tensor):
    """A named leaf tensor that an optimizer may update."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _topo(root):
    order = []
    visited = {id(root)}
    stack = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i < len(node._parents):
            stack.append((node, i + 1))
            p = node._parents[i]
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, 0))
        else:
            order.append(node)
    return order


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents, vjps):
    """Build a graph node from raw forward output and per-parent vjps.

    ``parents`` and ``vjps`` are filtered to the parents that actually
    require gradients; when recording is off (or nothing requires a
    gradient) the result is a plain constant tensor.
    """
    out = Tensor(data)
    if _GRAD_ENABLED:
        kept = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
        if kept:
            out.requires_grad = True
            out._parents = tuple(p for p, _ in kept)
            out._vjps = tuple(v for _, v in kept)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    return make_op(a.data + b.data, (a, b),
                   (lambda g: _unbroadcast(g, a.data.shape),
                    lambda g: _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    return make_op(a.data - b.data, (a, b),
                   (lambda g: _unbroadcast(g, a.data.shape),
                    lambda g: _unbroadcast(-g, b.data.shape)))


def neg(a):
    a = _lift(a)
    return make_op(-a.data, (a,), (lambda g: -g,))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    return make_op(a.data * b.data, (a, b),
                   (lambda g: _unbroadcast(g * b.data, a.data.shape),
                    lambda g: _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return make_op(out, (a, b),
                   (lambda g: _unbroadcast(g / b.data, a.data.shape),
                    lambda g: _unbroadcast(-g * out / b.data, b.data.shape)))


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return make_op(out, (a,), (lambda g: g * out,))


def log(a):
    a = _lift(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return make_op(out, (a,), (lambda g: g / a.data,))


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), (lambda g: g / (2.0 * out),))


def tanh(a):
    a = _lift(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), (lambda g: g * (1.0 - out * out),))


def sigmoid(a):
    a = _lift(a)
    out = _sigmoid_np(a.data)
    return make_op(out, (a,), (lambda g: g * out * (1.0 - out),))


def _sigmoid_np(x):
    # overflow-safe in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# log-domain ops ---------------------------------------------------------

def logaddexp(a, b):
    a, b = _lift(a), _lift(b)
    out = np.logaddexp(a.data, b.data)
    safe = np.where(np.isneginf(out), 0.0, out)

    def vjp_a(g):
        return _unbroadcast(g * np.exp(a.data - safe), a.data.shape)

    def vjp_b(g):
        return _unbroadcast(g * np.exp(b.data - safe), b.data.shape)

    return make_op(out, (a, b), (vjp_a, vjp_b))


def logsumexp_t(a, axis, keepdims=False):
    """Graph-recorded logsumexp along one axis; -inf rows stay -inf."""
    a = _lift(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = shift + np.log(np.sum(np.exp(a.data - shift),
                                      axis=axis, keepdims=True))
    safe = np.where(np.isneginf(out_k), 0.0, out_k)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return gk * np.exp(a.data - safe)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return make_op(out, (a,), (vjp,))


def logsumexp(xs):
    """Plain float logsumexp of a 1-D collection, exact on edge cases.

    Empty input is an error; all -inf inputs give -inf; a single finite
    value comes back unchanged.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise ValueError("logsumexp of an empty collection")
    m = float(np.max(xs))
    if m == -math.inf:
        return -math.inf
    return m + math.log(float(np.sum(np.exp(xs - m))))


def softmax_rows(a, axis=-1):
    """exp-normalize along ``axis``; each slice sums to 1."""
    return exp(sub(a, logsumexp_t(a, axis=axis, keepdims=True)))


# reductions and shaping -------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gk = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gk, a.data.shape).copy()

    return make_op(out, (a,), (vjp,))


def amax(a, axis, keepdims=False):
    """Max along one axis; gradient routes to the first argmax (ties)."""
    a = _lift(a)
    out = np.max(a.data, axis=axis, keepdims=keepdims)
    idx = np.argmax(a.data, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        z = np.zeros_like(a.data)
        np.put_along_axis(z, np.expand_dims(idx, axis), gk, axis)
        return z

    return make_op(out, (a,), (vjp,))


def reshape(a, shape):
    a = _lift(a)
    return make_op(a.data.reshape(shape), (a,),
                   (lambda g: g.reshape(a.data.shape),))


def transpose2d(a):
    a = _lift(a)
    return make_op(a.data.T, (a,), (lambda g: g.T,))


def getitem(a, idx):
    a = _lift(a)
    out = a.data[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return z

    return make_op(out, (a,), (vjp,))


def concat(tensors, axis):
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return make_op(out, tuple(tensors),
                   tuple(make_vjp(i) for i in range(len(tensors))))


def where(cond, a, b):
    """Select by a constant boolean mask; gradients route by the mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _lift(a), _lift(b)
    out = np.where(cond, a.data, b.data)
    return make_op(out, (a, b),
                   (lambda g: _unbroadcast(np.where(cond, g, 0.0), a.data.shape),
                    lambda g: _unbroadcast(np.where(cond, 0.0, g), b.data.shape)))


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out = np.matmul(a.data, b.data)
    if a.data.ndim == 2 and b.data.ndim == 2:
        vjps = (lambda g: g @ b.data.T, lambda g: a.data.T @ g)
    elif a.data.ndim == 3 and b.data.ndim == 2:
        vjps = (lambda g: g @ b.data.T,
                lambda g: np.tensordot(a.data, g, axes=((0, 1), (0, 1))))
    elif b.data.ndim == 1 and a.data.ndim >= 2:
        vjps = (lambda g: g[..., None] * b.data,
                lambda g: (a.data * g[..., None]).sum(
                    axis=tuple(range(a.data.ndim - 1))))
    else:
        raise ValueError("unsupported matmul shapes %r @ %r"
                         % (a.data.shape, b.data.shape))
    return make_op(out, (a, b), vjps)


def gather_last(a, idx):
    """Pick entries along the last axis: out[..., k] = a[..., idx[..., k]].

    idx may match a's leading shape exactly (one entry per row, last
    axis dropped) or carry one extra trailing axis (several entries per
    row, kept as the output's last axis).
    """
    a = _lift(a)
    idx = np.asarray(idx)
    lead = a.data.shape[:-1]
    if idx.shape == lead:
        take_idx = idx[..., None]
        squeeze = True
    elif idx.shape[:-1] == lead:
        take_idx = idx
        squeeze = False
    else:
        raise ValueError("gather_last: idx shape %r does not match data %r"
                         % (idx.shape, a.data.shape))
    out = np.take_along_axis(a.data, take_idx, axis=-1)
    if squeeze:
        out = out[..., 0]

    def vjp(g):
        z = np.zeros_like(a.data)
        zf = z.reshape(-1, z.shape[-1])
        k = 1 if squeeze else idx.shape[-1]
        rows = np.repeat(np.arange(zf.shape[0]), k)
        np.add.at(zf, (rows, idx.reshape(-1)), g.reshape(-1))
        return z

    return make_op(out, (a,), (vjp,))


def embedding(table, ids):
    """Row lookup with scatter-add backward (repeated ids accumulate)."""
    table = _lift(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def vjp(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids.reshape(-1),
                  g.reshape(-1, table.data.shape[-1]))
        return z

    return make_op(out, (table,), (vjp,))


# gradient checking ------------------------------------------------------

def zero_grads(params):
    for p in params:
        p.grad = None


def finite_diff_check(f, params, h=1e-5):
    """Compare analytic gradients of ``f`` against central differences.

    Args:
        f: callable taking ``params`` and returning a scalar Tensor.  It
            must be deterministic: any noise or dropout masks have to be
            fixed by the caller before checking.
        params: dict of name -> Parameter; every coordinate of every
            parameter is perturbed by +-h.
        h: central-difference step.

    Returns:
        dict of name -> array of per-coordinate relative errors,
        ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``.
    """
    plist = list(params.values())
    zero_grads(plist)
    loss = f(params)
    if not np.isfinite(loss.data):
        raise ValueError("finite_diff_check: f evaluated non-finite")
    loss.backward()
    analytic = {}
    for name, p in params.items():
        analytic[name] = (np.zeros_like(p.data) if p.grad is None
                          else np.array(p.grad, dtype=np.float64))

    errs = {}
    with no_grad():
        for name, p in params.items():
            fd = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            fd_flat = fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(params).data)
                flat[i] = orig - h
                fm = float(f(params).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise ValueError("finite_diff_check: f evaluated "
                                     "non-finite during perturbation")
                fd_flat[i] = (fp - fm) / (2.0 * h)
            a = analytic[name]
            errs[name] = np.abs(a - fd) / np.maximum(
                np.maximum(np.abs(a), np.abs(fd)), 1e-8)
    return errs
