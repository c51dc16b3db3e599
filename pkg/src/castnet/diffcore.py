"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: every value is a float64 numpy array wrapped in a
:class:`Tensor`; each primitive records its parents and a closure that maps the
output gradient to parent gradients. :func:`backward` linearises the recorded
graph (the tape) in topological order and accumulates gradients.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .exceptions import ContractError, DimensionError, ShapeError

__all__ = [
    "Tensor", "Tape", "Adam", "tensor", "constant",
    "add", "sub", "mul", "div", "neg", "tanh", "sigmoid", "relu", "absolute",
    "elementwise", "matmul", "softmax", "softmax_rows", "dilated_conv1d",
    "sum", "mean", "reshape", "transpose", "concat", "stack", "reduce_max",
    "reduce_min", "take", "dropout", "backward", "gradcheck",
]

_builtin_sum = sum


class Tensor:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

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


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(parents)
    out._parents = parents
    out._backward = backward_fn if parents else None
    return out


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of size-1 stretching)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b)
    out_data = a.data + b.data

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out_data, (a, b), _make_binary(a, b, _bw))


def sub(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _make_binary(a, b, _bw))


def mul(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b)

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), _make_binary(a, b, _bw))


def div(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b)
    out_data = a.data / b.data

    def _bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out_data / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out_data, (a, b), _make_binary(a, b, _bw))


def _make_binary(a, b, bw):
    # map parent-order gradients onto whichever parents actually require grad
    def _backward(g):
        ga, gb = bw(g)
        grads = []
        if a.requires_grad:
            grads.append(ga)
        if b.requires_grad:
            grads.append(gb)
        return grads

    return _backward


def _unary(a, out_data, local_grad):
    a = constant(a)
    return _result(out_data, (a,), lambda g: [g * local_grad()])


def neg(a):
    a = constant(a)
    return _result(-a.data, (a,), lambda g: [-g])


def tanh(a):
    a = constant(a)
    y = np.tanh(a.data)
    return _unary(a, y, lambda: 1.0 - y * y)


def sigmoid(a):
    a = constant(a)
    y = expit(a.data)
    return _unary(a, y, lambda: y * (1.0 - y))


def relu(a):
    a = constant(a)
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0.0), lambda: mask.astype(np.float64))


def absolute(a):
    a = constant(a)
    return _unary(a, np.abs(a.data), lambda: np.sign(a.data))


_ELEMENTWISE = {
    "add": add, "mul": mul, "sub": sub, "div": div,
    "tanh": tanh, "sigmoid": sigmoid, "relu": relu, "neg": neg, "abs": absolute,
}


def elementwise(op, *args):
    """Dispatch a named pointwise primitive."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ------------------------------------------------------------------- products

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    # stacked-rows times a shared matrix: one GEMM instead of a batch of small ones
    if b.ndim == 2 and a.ndim > 2:
        lead = a.shape[:-1]
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(lead + (b.shape[-1],))

        def _backward(g):
            grads = []
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                grads.append((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                grads.append(a.data.reshape(-1, a.shape[-1]).T @ g2)
            return grads

        return _result(out, (a, b), _backward)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def _backward(g):
        grads = []
        if a.requires_grad:
            if a.ndim == 2 and g.ndim > 2:
                # shared left operator: contract batch and column axes at once
                lead = tuple(range(g.ndim - 2))
                grads.append(np.tensordot(g, b.data, axes=(lead + (g.ndim - 1,), lead + (g.ndim - 1,))))
            else:
                grads.append(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            grads.append(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
        return grads

    return _result(out, (a, b), _backward)


def softmax(a, axis=-1):
    """Softmax along ``axis``; ``-inf`` entries map to exactly zero."""
    a = constant(a)
    x = a.data
    top = np.max(x, axis=axis, keepdims=True)
    if np.any(np.isneginf(top)):
        raise ContractError("softmax over a fully masked row is undefined")
    e = np.exp(x - top)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return [y * (g - (g * y).sum(axis=axis, keepdims=True))]

    return _result(y, (a,), _backward)


def softmax_rows(a):
    a = constant(a)
    if a.ndim != 2:
        raise DimensionError("softmax_rows expects a matrix")
    return softmax(a, axis=1)


def dilated_conv1d(x, kernel, dilation=1, left_pad=None, bias=None):
    """Causal dilated convolution along the time axis.

    ``x`` has shape ``(..., T, C_in)``; ``kernel`` has shape ``(k, C_in, C_out)``
    (a 1-D kernel of length ``k`` is treated as a single channel). Tap ``j``
    reads the input ``j * dilation`` steps in the past, so with the default
    ``left_pad = (k - 1) * dilation`` the output keeps length ``T`` and
    ``out[t]`` depends only on ``x[:t + 1]``.
    """
    x, kernel = constant(x), constant(kernel)
    if dilation < 1 or int(dilation) != dilation:
        raise ContractError("dilation must be a positive integer")
    dilation = int(dilation)
    squeeze = False
    if kernel.ndim == 1:
        kernel = reshape(kernel, (kernel.shape[0], 1, 1))
        if x.ndim == 1:
            x = reshape(x, (x.shape[0], 1))
            squeeze = True
    if kernel.ndim != 3:
        raise DimensionError("kernel must have shape (k, C_in, C_out)")
    k, c_in, c_out = kernel.shape
    if x.ndim < 2 or x.shape[-1] != c_in:
        raise DimensionError(f"input channels {x.shape[-1:]} do not match kernel C_in={c_in}")
    span = (k - 1) * dilation
    pad = span if left_pad is None else int(left_pad)
    if pad < 0:
        raise ShapeError("left_pad must be nonnegative")
    T = x.shape[-2]
    L = T + pad - span
    if L <= 0:
        raise ShapeError(f"kernel span {span + 1} longer than padded input {T + pad}")

    lead = x.shape[:-2]
    xp = np.zeros(lead + (T + pad, c_in))
    xp[..., pad:, :] = x.data
    K = kernel.data
    starts = [span - j * dilation for j in range(k)]
    # gather the k taps side by side so the whole convolution is one GEMM
    cols = np.concatenate([xp[..., s0:s0 + L, :] for s0 in starts], axis=-1)
    flat_cols = cols.reshape(-1, k * c_in)
    K_flat = K.reshape(k * c_in, c_out)
    out = (flat_cols @ K_flat).reshape(lead + (L, c_out))
    if bias is not None:
        bias = constant(bias)
        out += bias.data

    def _backward(g):
        grads = []
        flat_g = g.reshape(-1, c_out)
        if x.requires_grad:
            gcols = (flat_g @ K_flat.T).reshape(lead + (L, k, c_in))
            gxp = np.zeros(lead + (T + pad, c_in))
            for j, s0 in enumerate(starts):
                gxp[..., s0:s0 + L, :] += gcols[..., j, :]
            grads.append(gxp[..., pad:, :])
        if kernel.requires_grad:
            grads.append((flat_cols.T @ flat_g).reshape(K.shape))
        if bias is not None and bias.requires_grad:
            grads.append(flat_g.sum(axis=0).reshape(bias.shape))
        return grads

    parents = (x, kernel) + ((bias,) if bias is not None else ())
    res = _result(out, parents, _backward)
    if squeeze:
        res = reshape(res, (L,))
    return res


# ----------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = constant(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, a.shape).copy()]

    return _result(np.asarray(out, dtype=np.float64), (a,), _backward)


def mean(a, axis=None, keepdims=False):
    a = constant(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def _reduce_extreme(a, axis, fn):
    a = constant(a)
    out = fn(a.data, axis=axis, keepdims=True)
    # ties: split gradient evenly so the backward stays well-defined
    hit = (a.data == out).astype(np.float64)
    hit /= hit.sum(axis=axis, keepdims=True)

    def _backward(g):
        return [np.expand_dims(g, axis) * hit]

    return _result(np.squeeze(out, axis=axis), (a,), _backward)


def reduce_max(a, axis):
    return _reduce_extreme(a, axis, np.max)


def reduce_min(a, axis):
    return _reduce_extreme(a, axis, np.min)


# ------------------------------------------------------------------ structure

def reshape(a, shape):
    a = constant(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, (a,), lambda g: [g.reshape(old)])


def transpose(a, axes=None):
    a = constant(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: [np.transpose(g, inv)])


def concat(tensors, axis=-1):
    ts = [constant(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def _backward(g):
        pieces = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                pieces.append(g[tuple(idx)])
        return pieces

    return _result(out, ts, _backward)


def stack(tensors, axis=0):
    ts = [constant(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def _backward(g):
        return [np.take(g, i, axis=axis) for i, t in enumerate(ts) if t.requires_grad]

    return _result(out, ts, _backward)


def take(a, key):
    """Basic indexing ``a[key]`` (slices and integers) as a differentiable op."""
    a = constant(a)
    out = a.data[key]

    def _backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return [full]

    return _result(np.array(out, dtype=np.float64), (a,), _backward)


def dropout(a, p, rng, training=True):
    """Inverted dropout; the identity when not training or ``p == 0``."""
    a = constant(a)
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, keep)


# ------------------------------------------------------------------- backward

class Tape:
    """Topologically ordered record of the graph feeding a scalar root."""

    def __init__(self, root):
        self.root = root
        self.nodes = self._linearise(root)

    @staticmethod
    def _linearise(root):
        order, seen = [], set()
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack_.append((p, False))
        return order

    def run(self):
        for node in self.nodes:
            node.grad = None
        self.root.grad = np.ones_like(self.root.data)
        owned = set()
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None:
                    continue
                key = id(parent)
                # the first gradient may alias another buffer, so accumulate
                # in place only into sums this pass allocated itself
                if parent.grad is None:
                    parent.grad = g
                elif key in owned:
                    parent.grad += g
                else:
                    parent.grad = parent.grad + g
                    owned.add(key)
        leaves = {}
        for n in self.nodes:
            if not n._parents and n.requires_grad:
                if n.grad is not None:
                    n.grad = np.array(n.grad, dtype=np.float64, copy=True).reshape(n.shape)
                leaves[n] = n.grad
        return leaves


def backward(loss):
    """Propagate d(loss)/d(node) to every node; returns the leaf gradient map."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = Tape(loss).run()
    for leaf, g in grads.items():
        if g is None:
            leaf.grad = np.zeros_like(leaf.data)
    return grads


def gradcheck(fn, params, h=1e-5, probes=None, rng=None):
    """Largest relative error between autodiff and central differences.

    ``fn`` maps nothing to a scalar Tensor built from ``params``. When
    ``probes`` is given, that many random coordinates are checked instead of
    all of them.
    """
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    coords = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if probes is not None and probes < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=probes, replace=False)
        coords = [coords[i] for i in pick]
    worst = 0.0
    for pi, idx in coords:
        p = params[pi]
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = fn().item()
        p.data[idx] = orig - h
        down = fn().item()
        p.data[idx] = orig
        numeric = (up - down) / (2 * h)
        a = analytic[pi][idx]
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


class Adam:
    """Adaptive-moment optimizer with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
