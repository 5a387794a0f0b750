"""Dense float64 tensors with reverse-mode differentiation.

Every op records a vector-Jacobian rule expressed in terms of the same
primitive ops, so a backward pass run with ``retain=True`` produces gradient
tensors that are themselves differentiable. That re-taping path is what the
meta label-refinement step relies on for its second-order gradient.

Scope is deliberately small: 2-D (and scalar) arrays, CPU only, no views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True
_CHECK_FINITE = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    Non-leaf tensors keep references to their parents and a local
    vector-Jacobian rule; leaves created with ``requires_grad=True``
    collect gradients in ``.grad`` (a numpy array) during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite tensor value")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _needs_graph(self):
        return self.requires_grad or self._vjp is not None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Thin operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _make(data, parents, vjp):
    """Create an op output, recording the graph only when needed."""
    if _GRAD_ENABLED and any(p._needs_graph() for p in parents):
        return Tensor(data, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _sum_to_shape_np(arr, shape):
    """Reduce a broadcast numpy result back to `shape` by summing."""
    while arr.ndim > len(shape):
        arr = arr.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and arr.shape[ax] != 1:
            arr = arr.sum(axis=ax, keepdims=True)
    return arr.reshape(shape)


def broadcast_to(x, shape):
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape)
    return _make(out.copy(), [x], lambda g: [sum_to_shape(g, x.shape)])


def sum_to_shape(x, shape):
    shape = tuple(shape)
    out = _sum_to_shape_np(x.data, shape)
    return _make(out, [x], lambda g: [broadcast_to(g, x.shape)])


def add(a, b):
    out = a.data + b.data
    return _make(out, [a, b],
                 lambda g: [sum_to_shape(g, a.shape), sum_to_shape(g, b.shape)])


def neg(a):
    return _make(-a.data, [a], lambda g: [neg(g)])


def sub(a, b):
    return add(a, neg(b))


def mul(a, b):
    out = a.data * b.data
    return _make(out, [a, b],
                 lambda g: [sum_to_shape(mul(g, b), a.shape),
                            sum_to_shape(mul(g, a), b.shape)])


def scale(a, c):
    """Multiply by a python float constant."""
    c = float(c)
    return _make(a.data * c, [a], lambda g: [scale(g, c)])


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, [a, b],
                 lambda g: [matmul(g, transpose(b)), matmul(transpose(a), g)])


def transpose(a):
    return _make(a.data.T.copy(), [a], lambda g: [transpose(g)])


def relu(a):
    mask = (a.data > 0).astype(np.float64)
    mask_t = Tensor(mask)
    return _make(np.maximum(a.data, 0.0), [a], lambda g: [mul(g, mask_t)])


def exp(a):
    out_np = np.exp(a.data)
    out = _make(out_np, [a], lambda g: [mul(g, exp(a))])
    return out


def log(a):
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(a.data), [a], lambda g: [mul(g, pow_const(a, -1.0))])


def pow_const(a, p):
    p = float(p)
    out = np.power(a.data, p)
    return _make(out, [a], lambda g: [mul(g, scale(pow_const(a, p - 1.0), p))])


def sum_all(a):
    return _make(np.array(a.data.sum()), [a],
                 lambda g: [broadcast_to(g, a.shape)])


def sum_rows(a):
    """Row-wise sum, shape (n, d) -> (n, 1)."""
    out = a.data.sum(axis=1, keepdims=True)
    return _make(out, [a], lambda g: [broadcast_to(g, a.shape)])


def mean_rows(a):
    """Column mean over rows, shape (n, d) -> (1, d)."""
    n = a.shape[0]
    out = a.data.mean(axis=0, keepdims=True)
    return _make(out, [a], lambda g: [scale(broadcast_to(g, a.shape), 1.0 / n)])


def softmax_rows(a):
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_np = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        s = softmax_rows(a)
        return [mul(s, sub(g, broadcast_to(sum_rows(mul(g, s)), a.shape)))]

    return _make(out_np, [a], vjp)


def log_softmax_rows(a):
    m = a.data.max(axis=1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    out_np = a.data - lse

    def vjp(g):
        s = softmax_rows(a)
        return [sub(g, mul(s, broadcast_to(sum_rows(g), a.shape)))]

    return _make(out_np, [a], vjp)


def logsumexp_rows(a):
    """Row-wise log-sum-exp, shape (n, d) -> (n, 1)."""
    m = a.data.max(axis=1, keepdims=True)
    out_np = np.log(np.exp(a.data - m).sum(axis=1, keepdims=True)) + m

    def vjp(g):
        return [mul(softmax_rows(a), broadcast_to(g, a.shape))]

    return _make(out_np, [a], vjp)


def concat_cols(tensors):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def vjp(g):
        return [slice_cols(g, offsets[i], offsets[i + 1])
                for i in range(len(tensors))]

    return _make(out, tensors, vjp)


def concat_rows(tensors):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def vjp(g):
        return [slice_rows(g, offsets[i], offsets[i + 1])
                for i in range(len(tensors))]

    return _make(out, tensors, vjp)


def slice_cols(a, lo, hi):
    lo, hi = int(lo), int(hi)
    out = a.data[:, lo:hi].copy()
    return _make(out, [a], lambda g: [_embed_cols(g, a.shape, lo)])


def _embed_cols(g, full_shape, lo):
    out = np.zeros(full_shape)
    out[:, lo:lo + g.shape[1]] = g.data
    return _make(out, [g], lambda gg: [slice_cols(gg, lo, lo + g.shape[1])])


def slice_rows(a, lo, hi):
    lo, hi = int(lo), int(hi)
    out = a.data[lo:hi, :].copy()
    return _make(out, [a], lambda g: [_embed_rows(g, a.shape, lo)])


def _embed_rows(g, full_shape, lo):
    out = np.zeros(full_shape)
    out[lo:lo + g.shape[0], :] = g.data
    return _make(out, [g], lambda gg: [slice_rows(gg, lo, lo + g.shape[0])])


def gather_rows(a, idx):
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx, :].copy()
    return _make(out, [a], lambda g: [scatter_rows(g, idx, a.shape[0])])


def scatter_rows(a, idx, n_rows):
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((int(n_rows), a.shape[1]))
    np.add.at(out, idx, a.data)
    return _make(out, [a], lambda g: [gather_rows(g, idx)])


def dropout_mask(shape, keep_prob, rng):
    """Inverted-scaling dropout mask as a constant tensor.

    Multiply activations by it at train time; skip entirely at eval.
    """
    if not (0.0 < keep_prob <= 1.0):
        raise ValueError("keep_prob must be in (0, 1]")
    mask = (rng.random(shape) < keep_prob).astype(np.float64) / keep_prob
    return Tensor(mask)


def l2_normalize_rows(a, eps=1e-30):
    sq = sum_rows(mul(a, a))
    inv = pow_const(add(sq, Tensor(np.full(sq.shape, eps))), -0.5)
    return mul(a, broadcast_to(inv, a.shape))


def backward(loss, retain=False):
    """Reverse-mode sweep from a scalar loss.

    Populates ``.grad`` on every ``requires_grad`` leaf and returns a map
    from visited tensor to its gradient tensor. With ``retain=True`` the
    gradient tensors stay connected to the graph and can be differentiated
    again.
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if loss._vjp is None and not loss.requires_grad:
        raise ValueError("loss is detached from any computation graph")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): Tensor(np.ones(loss.shape))}
    result = {}
    ctx = no_grad() if not retain else _NullCtx()
    with ctx:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            result[id(node)] = g
            if node.requires_grad and node._vjp is None:
                node.grad = g.data.copy() if node.grad is None else node.grad + g.data
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p._needs_graph():
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    return result


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


@dataclass
class OptimizerState:
    """SGD-with-momentum or Adam, with L2 weight decay added to the gradient."""

    kind: str  # "sgd" | "adam"
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def step(self, params):
        """Update named parameter tensors in place from their ``.grad``."""
        self.t += 1
        for name, p in params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            g = p.grad + self.weight_decay * p.data
            if self.kind == "sgd":
                buf = self.buffers.get(name)
                if buf is None:
                    buf = np.zeros_like(p.data)
                buf = self.momentum * buf + g
                self.buffers[name] = buf
                update = -self.lr * buf
            else:
                m = self.buffers.get(name + ".m", np.zeros_like(p.data))
                v = self.buffers.get(name + ".v", np.zeros_like(p.data))
                m = self.beta1 * m + (1 - self.beta1) * g
                v = self.beta2 * v + (1 - self.beta2) * g * g
                self.buffers[name + ".m"] = m
                self.buffers[name + ".v"] = v
                mhat = m / (1 - self.beta1 ** self.t)
                vhat = v / (1 - self.beta2 ** self.t)
                update = -self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if not np.all(np.isfinite(update)):
                raise FloatingPointError(f"non-finite update for {name!r}")
            p.data = p.data + update
