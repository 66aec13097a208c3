"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every op stores its forward value as float32. Reductions (matmul, norms,
softmax sums) accumulate in float64 and gradients flow in float64 until
they land on a leaf, where they are stored as float32.

No general broadcasting: binary ops take equal shapes, or a right operand
whose shape equals the trailing dimensions of the left one (bias add).
"""
from __future__ import annotations

import contextlib
import functools
import math
import threading
from dataclasses import dataclass, field

import numpy as np

F32 = np.float32
F64 = np.float64

MASK_NEG = -1e9


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op, where=None):
        self.op = op
        self.where = where
        msg = f"non-finite values produced by {op}"
        if where:
            msg += f" in {where}"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float32 array that records the ops applied to it.

    Leaves are created by the user; interior nodes are produced by ops and
    keep a closure mapping the upstream gradient to parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=F32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if self._consumed:
            raise GraphError("backward already ran through this graph; run forward again")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones(self.shape, dtype=F64)
        else:
            grad = np.asarray(grad, dtype=F64)
            if grad.shape != self.shape:
                raise DimensionError(f"grad shape {grad.shape} != tensor shape {self.shape}")

        order = _topo_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    g32 = g.astype(F32)
                    node.grad = g32 if node.grad is None else node.grad + g32
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._consumed = True
                node._backward = None
                node._parents = ()


def _raise_item(t):
    raise DimensionError(f"item() needs a single element, got shape {t.shape}")


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed:
            raise GraphError("graph contains a node already used by a backward pass")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, backward, op):
    if not np.isfinite(value).all():
        raise NonFiniteError(op)
    out = Tensor(value)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _quiet(fn):
    """Silence numpy overflow warnings; non-finite results raise in ``_result`` instead."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)
    return wrapper


def _check_bias_shape(a, b, op):
    if a.shape == b.shape:
        return False
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead else g


# ---------------------------------------------------------------- elementwise

@_quiet
def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_bias_shape(a, b, "add")
    bshape = b.shape

    def backward(g):
        return g, (_reduce_to(g, bshape) if bias else g)

    return _result(a.data + b.data, (a, b), backward, "add")


@_quiet
def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_bias_shape(a, b, "sub")
    bshape = b.shape

    def backward(g):
        return g, -(_reduce_to(g, bshape) if bias else g)

    return _result(a.data - b.data, (a, b), backward, "sub")


@_quiet
def mul(a, b):
    """Elementwise product; ``b`` may be a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)

        def backward_s(g):
            return (g * c,)

        return _result((a.data.astype(F64) * c).astype(F32), (a,), backward_s, "scale")
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _result(ad * bd, (a, b), backward, "mul")


_GELU_C = math.sqrt(2.0 / math.pi)


@_quiet
def gelu(x):
    """tanh-approximated GELU."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(F32(_GELU_C) * xd * (F32(1.0) + F32(0.044715) * x2))
    out = F32(0.5) * xd * (F32(1.0) + th)

    def backward(g):
        x64, th64 = xd.astype(F64), th.astype(F64)
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x64 * x64)
        return (g * (0.5 * (1.0 + th64) + 0.5 * x64 * (1.0 - th64 * th64) * dinner),)

    return _result(out, (x,), backward, "gelu")


@_quiet
def dropout(x, p, rng):
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    x = _as_tensor(x)
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(F64) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _result((x.data * keep).astype(F32), (x,), backward, "dropout")


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {old} to {shape}")

    def backward(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def permute(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "permute")


def transpose(x):
    """Swap the last two axes."""
    axes = list(range(_as_tensor(x).ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return permute(x, axes)


def take_rows(weight, indices):
    """Embedding lookup: ``weight[indices]``."""
    weight = _as_tensor(weight)
    idx = np.asarray(indices, dtype=np.int64)
    if weight.ndim != 2:
        raise DimensionError("take_rows expects a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise DimensionError("take_rows index out of range")
    wshape = weight.shape

    def backward(g):
        flat = idx.reshape(-1)
        onehot = np.zeros((flat.size, wshape[0]), dtype=F64)
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(-1, wshape[1]),)

    return _result(weight.data[idx], (weight,), backward, "take_rows")


# ---------------------------------------------------------------- linear algebra

@_quiet
def matmul(a, b):
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D or has the same
    leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} x {b.shape}")
    a64, b64 = a.data.astype(F64), b.data.astype(F64)
    out = a64 @ b64

    def backward(g):
        ga = g @ np.swapaxes(b64, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif b64.ndim == 2:
            gb = a64.reshape(-1, a64.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a64, -1, -2) @ g
        return ga, gb

    return _result(out.astype(F32), (a, b), backward, "matmul")


def _softmax64(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


@_quiet
def softmax(x, axis=-1):
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    p = _softmax64(x.data.astype(F64), axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p.astype(F32), (x,), backward, "softmax")


@_quiet
def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: feature size {d} vs gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data.astype(F64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data.astype(F64)
    out = xhat * gd + bias.data.astype(F64)

    def backward(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _result(out.astype(F32), (x, gain, bias), backward, "layer_norm")


@_quiet
def attention(q, k, v, mask=None):
    """Scaled dot-product attention over the last two axes of ``q, k, v``.

    ``mask`` is an additive T x T array (0 or ``MASK_NEG``).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
    T, d = q.shape[-2], q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    q64, k64, v64 = (t.data.astype(F64) for t in (q, k, v))
    s = (q64 @ np.swapaxes(k64, -1, -2)) * scale
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=F64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"attention mask must be square, got {m.shape}")
        if m.shape[0] != T:
            raise DimensionError(f"attention mask is {m.shape}, sequence length {T}")
        s = s + m
    p = _softmax64(s, -1)
    out = p @ v64

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v64, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ k64) * scale
        gk = (np.swapaxes(gs, -1, -2) @ q64) * scale
        return gq, gk, gv

    return _result(out.astype(F32), (q, k, v), backward, "attention")


# ---------------------------------------------------------------- losses

@_quiet
def cross_entropy(logits, labels, ignore_index=-100):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is (..., K); ``labels`` matches the leading shape. Entries equal
    to ``ignore_index`` are skipped; if every entry is skipped the loss is 0.
    """
    logits = _as_tensor(logits)
    K = logits.shape[-1]
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {lab.shape} do not match logits {logits.shape}")
    flat = lab.reshape(-1)
    keep = flat != ignore_index
    bad = keep & ((flat < 0) | (flat >= K))
    if bad.any():
        raise LabelError(f"label {int(flat[bad][0])} outside [0, {K})")
    n = int(keep.sum())
    z = logits.data.astype(F64).reshape(-1, K)
    if n == 0:
        def backward0(g):
            return (np.zeros(logits.shape, dtype=F64),)

        return _result(np.zeros((), dtype=F32), (logits,), backward0, "cross_entropy")
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    logp = z - lse
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, flat[rows]].sum() / n

    def backward(g):
        gz = np.exp(logp)
        gz[~keep] = 0.0
        gz[rows, flat[rows]] -= 1.0
        return ((gz * (g / n)).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=F32), (logits,), backward, "cross_entropy")


@_quiet
def mse(pred, target, mask=None):
    """Mean squared error over the elements selected by ``mask``.

    ``mask`` is a boolean array equal to ``pred.shape`` or to a leading prefix
    of it; True entries contribute, False entries are masked out. No selected
    elements gives 0.
    """
    pred = _as_tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=F32)
    if tgt.shape != pred.shape:
        raise DimensionError(f"mse: pred {pred.shape} vs target {tgt.shape}")
    diff = pred.data.astype(F64) - tgt.astype(F64)
    if mask is None:
        w = np.ones(pred.shape, dtype=F64)
    else:
        m = np.asarray(mask, dtype=bool)
        if pred.shape[:m.ndim] != m.shape:
            raise DimensionError(f"mse: mask {m.shape} does not prefix {pred.shape}")
        w = np.broadcast_to(m.reshape(m.shape + (1,) * (pred.ndim - m.ndim)), pred.shape).astype(F64)
    n = w.sum()
    if n == 0:
        def backward0(g):
            return (np.zeros(pred.shape, dtype=F64),)

        return _result(np.zeros((), dtype=F32), (pred,), backward0, "mse")
    loss = (w * diff * diff).sum() / n

    def backward(g):
        return (g * 2.0 * w * diff / n,)

    return _result(np.asarray(loss, dtype=F32), (pred,), backward, "mse")


@_quiet
def weighted_sum(x, weights):
    """Scalar ``sum(x * weights)`` with ``weights`` a constant array."""
    x = _as_tensor(x)
    w = np.asarray(weights, dtype=F64)
    if w.shape != x.shape:
        raise DimensionError(f"weights {w.shape} vs x {x.shape}")

    def backward(g):
        return (g * w,)

    return _result(np.asarray((x.data.astype(F64) * w).sum(), dtype=F32), (x,), backward, "weighted_sum")


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One bias-corrected Adam step (decoupled weight decay) over ``grads``' keys.

    ``params`` maps name -> Tensor; each updated tensor gets a fresh data
    array, so arrays held elsewhere are never mutated.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=F64)
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=F64)
            v = np.zeros(p.shape, dtype=F64)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        w = p.data.astype(F64)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            upd = upd + lr * weight_decay * w
        if np.any(upd):
            p.data = (w - upd).astype(F32)
    return params, state
