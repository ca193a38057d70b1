"""Minimal dense-array reverse-mode autodiff on float64 numpy arrays.

Every operation builds a node graph; ``backward`` replays the graph in
reverse topological order exactly once per node. NaNs abort immediately
with the identity of the producing node.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "slice_",
    "concat",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "silu",
    "relu",
    "reduce_sum",
    "reduce_mean",
    "reduce_logsumexp",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "masked_fill",
    "backward",
    "trace",
    "finite_difference_check",
]

_node_counter = 0


class AutodiffError(RuntimeError):
    pass


def _next_id():
    global _node_counter
    _node_counter += 1
    return _node_counter


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    Leaf tensors (parameters, inputs) have no parents. Op results carry
    references to their parents and a closure that maps the output
    gradient to per-parent gradients.
    """

    __slots__ = ("data", "parents", "_grad_fn", "grad", "op", "node_id")

    def __init__(self, data, parents=(), grad_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self._grad_fn = grad_fn
        self.grad = None
        self.op = op
        self.node_id = _next_id()
        if op != "leaf" and np.isnan(self.data).any():
            raise AutodiffError(f"NaN produced by node #{self.node_id} ({op})")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def tensor(data):
    """Create a leaf tensor."""
    return Tensor(data)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum out axes that numpy broadcasting introduced or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        op="add",
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        op="sub",
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
        op="mul",
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
        op="div",
    )


def neg(a):
    a = _as_tensor(a)
    return Tensor(-a.data, (a,), lambda g: (-g,), op="neg")


def matmul(a, b):
    """Matrix product with numpy stacking semantics on the leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data

    def grad_fn(g):
        if a.data.ndim == 1 or b.data.ndim == 1:
            raise AutodiffError("matmul requires operands of rank >= 2")
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(out, (a, b), grad_fn, op="matmul")


def transpose(a, axes):
    a = _as_tensor(a)
    inverse = np.argsort(axes)
    return Tensor(
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inverse),),
        op="transpose",
    )


def slice_(a, key):
    a = _as_tensor(a)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return Tensor(a.data[key], (a,), grad_fn, op="slice")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        grad_fn,
        op="concat",
    )


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,), op="exp")


def log(a):
    a = _as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return Tensor(out, (a,), lambda g: (g / a.data,), op="log")


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,), op="sqrt")


def sigmoid(a):
    a = _as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),), op="sigmoid")


def silu(a):
    """Smooth gated unit x * sigmoid(x)."""
    return mul(a, sigmoid(a))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor(a.data * mask, (a,), lambda g: (g * mask,), op="relu")


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.data.shape).copy(),)

    return Tensor(out, (a,), grad_fn, op="reduce_sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_logsumexp(a, axis=-1, keepdims=False):
    """log(sum(exp(x))) along one axis, stable against -inf rows."""
    a = _as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(a.data - m_safe)
    total = shifted.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = np.log(total) + m_safe
    out_k = np.where(np.isfinite(m), out_k, m)  # all -inf row stays -inf
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    total_safe = np.where(total == 0.0, 1.0, total)

    def grad_fn(g):
        g_exp = g if keepdims else np.expand_dims(g, axis)
        soft = shifted / total_safe
        return (g_exp * soft,)

    return Tensor(out, (a,), grad_fn, op="reduce_logsumexp")


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, (a,), grad_fn, op="softmax")


def log_softmax(a, axis=-1):
    return sub(a, reduce_logsumexp(a, axis=axis, keepdims=True))


def l2_normalize(a, axis=-1, eps=1e-12):
    """Rows scaled to unit norm; norms below eps are clamped to eps."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom

    def grad_fn(g):
        clipped = norm <= eps
        dot = (g * out).sum(axis=axis, keepdims=True)
        grad = (g - np.where(clipped, 0.0, out * dot)) / denom
        return (grad,)

    return Tensor(out, (a,), grad_fn, op="l2_normalize")


def masked_fill(a, mask, value=-1e30):
    """Where mask is nonzero the output takes ``value`` and passes no gradient."""
    a = _as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, value, a.data)
    return Tensor(out, (a,), lambda g: (np.where(m, 0.0, g),), op="masked_fill")


def custom_op(out_data, parents, grad_fn, op):
    """Register an externally computed value with a hand-written gradient."""
    return Tensor(out_data, parents, grad_fn, op=op)


class Tape:
    """Topologically ordered record of every node reachable from an output."""

    __slots__ = ("nodes",)

    def __init__(self, nodes):
        self.nodes = nodes


def trace(output):
    """Build the tape for ``output``: parents always precede their consumers."""
    order = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return Tape(order)


def backward(output, tape=None):
    """Accumulate gradients of a scalar ``output`` into every reachable node.

    Returns the tape that was walked. Leaves that do not feed the output
    keep a zero gradient (set lazily: untouched ``grad`` stays None and is
    treated as zero by callers).
    """
    if output.data.size != 1:
        raise AutodiffError(
            f"backward requires a scalar output, got shape {output.data.shape}"
        )
    if tape is None:
        tape = trace(output)
    for node in tape.nodes:
        node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(tape.nodes):
        if node._grad_fn is None or node.grad is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad = parent.grad + g
    return tape


def grad_of(leaf):
    """Gradient of a leaf after backward; zeros if the leaf was unreachable."""
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)


def finite_difference_check(f, x, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a leaf Tensor to a scalar Tensor. The analytic gradient comes
    from one reverse pass; each coordinate is then probed at x +/- step.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaf = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
    out = f(leaf)
    backward(out)
    analytic = grad_of(leaf)

    base = leaf.data.copy()
    flat = base.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(base)).data)
        flat[i] = orig - step
        lo = float(f(Tensor(base)).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise AutodiffError("function returned non-finite value at probe point")
        numeric = (hi - lo) / (2.0 * step)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
