"""Dense float tensors with tape-based reverse-mode differentiation.

Values are numpy arrays (float32 by default, float64 when the caller builds
float64 arrays for tighter gradient checks). Every primitive records itself
on the active ``Tape``; ``backward`` replays the tape in exact reverse order
and accumulates gradients, summing over repeated uses of a value.

Tensors are treated as immutable once recorded on a tape. The optimizer may
rebind ``.data`` between steps, after the tape has been discarded.
"""

from __future__ import annotations

import numpy as np


class ContractViolation(ValueError):
    """An operation was called outside its stated contract."""


def _as_array(x, ref_dtype=np.float32):
    arr = np.asarray(x)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(ref_dtype)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "tracked")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        # tracked: gradients must flow through this value (leaf param or
        # anything computed from one while a tape is active)
        self.tracked = requires_grad

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

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; scalars and arrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


class _OpRecord:
    __slots__ = ("outs", "inputs", "vjp")

    def __init__(self, outs, inputs, vjp):
        self.outs = outs
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of executed primitives.

    Used as a context manager; primitives executed inside the block are
    appended in execution order. Without an active tape, primitives run in
    inference mode and record nothing.
    """

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(outs, inputs, vjp):
    """Register a primitive application on the active tape.

    ``vjp(*grads_of_outs)`` must return one gradient array (or None) per
    input, in order. Only called when some input is tracked.
    """
    tape = active_tape()
    if tape is None or not any(t.tracked or t.requires_grad for t in inputs):
        return
    for o in outs:
        o.tracked = True
    tape.ops.append(_OpRecord(tuple(outs), tuple(inputs), vjp))


def backward(tape, loss):
    """Reverse-replay ``tape`` from scalar ``loss``; return a gradient map.

    The map covers every tracked input that appeared on the tape; tensors
    with ``requires_grad`` also get the array assigned to ``.grad``.
    Accumulation order is fixed by the tape, so repeated runs are
    bitwise-identical.
    """
    if loss.data.size != 1:
        raise ContractViolation(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # vjps may hand back views or the incoming gradient itself; arrays in
    # ``borrowed`` are read-only until a second contribution forces a copy
    borrowed: set[int] = set()
    leaves: dict[int, Tensor] = {}
    for op in reversed(tape.ops):
        out_grads = []
        any_grad = False
        for o in op.outs:
            g = grads.pop(id(o), None)
            if g is None:
                g = np.zeros_like(o.data)
            else:
                any_grad = True
            out_grads.append(g)
        if not any_grad:
            continue
        in_grads = op.vjp(*out_grads)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not (t.tracked or t.requires_grad):
                continue
            acc = grads.get(id(t))
            if acc is None:
                grads[id(t)] = gi
                borrowed.add(id(t))
            else:
                if id(t) in borrowed:
                    acc = acc.copy()
                    grads[id(t)] = acc
                    borrowed.discard(id(t))
                acc += gi
            if t.requires_grad:
                leaves[id(t)] = t
    result = {}
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        result[t] = g
    return result


def _unbroadcast(g, shape):
    """Sum gradient ``g`` back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    out = Tensor(a.data + b.data)
    record(
        (out,),
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )
    return out


def sub(a, b):
    out = Tensor(a.data - b.data)
    record(
        (out,),
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )
    return out


def mul(a, b):
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    record((out,), (a, b), vjp)
    return out


def div(a, b):
    out = Tensor(a.data / b.data)

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    record((out,), (a, b), vjp)
    return out


def neg(a):
    out = Tensor(-a.data)
    record((out,), (a,), lambda g: (-g,))
    return out


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first argument."""
    out = Tensor(np.maximum(a.data, b.data))

    def vjp(g):
        take_a = a.data >= b.data
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    record((out,), (a, b), vjp)
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    """``a @ b`` where b is a 2-D parameter matrix; a may carry batch dims."""
    if b.data.ndim != 2:
        raise ContractViolation("matmul right operand must be 2-D")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        if a.data.ndim == 1:
            da = np.matmul(b.data, g)
            db = np.outer(a.data, g)
        else:
            da = np.matmul(g, b.data.T)
            db = np.matmul(
                a.data.reshape(-1, a.data.shape[-1]).T, g.reshape(-1, g.shape[-1])
            )
        return da, db

    record((out,), (a, b), vjp)
    return out


def tsum(x, axis=None, keepdims=False):
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    record((out,), (x,), vjp)
    return out


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    record((out,), (x,), lambda g: (g.reshape(x.data.shape),))
    return out


def transpose(x, axes):
    out = Tensor(np.transpose(x.data, axes))
    inverse = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    record((out,), (x,), vjp)
    return out


def concat(xs, axis=-1):
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    record((out,), tuple(xs), vjp)
    return out


def stack(xs, axis=0):
    out = Tensor(np.stack([x.data for x in xs], axis=axis))

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    record((out,), tuple(xs), vjp)
    return out


def getitem(x, idx):
    out = Tensor(x.data[idx].copy())

    def vjp(g):
        buf = np.zeros_like(x.data)
        buf[idx] += g
        return (buf,)

    record((out,), (x,), vjp)
    return out


def gather_rows(table, ids):
    """Row lookup ``table[ids]`` for a 2-D table; backward scatter-adds."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def vjp(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.ravel(), g.reshape(-1, table.data.shape[-1]))
        return (buf,)

    record((out,), (table,), vjp)
    return out


def pick(x, ids):
    """Select one column per row: out[i] = x[i, ids[i]]."""
    ids = np.asarray(ids)
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, ids])

    def vjp(g):
        buf = np.zeros_like(x.data)
        buf[rows, ids] += g
        return (buf,)

    record((out,), (x,), vjp)
    return out


def gather_time(seq, idx):
    """Gather timesteps per batch column: out[i, b] = seq[idx[i, b], b].

    seq is [T, B, d]; idx is an int array [T', B].
    """
    idx = np.asarray(idx)
    out = Tensor(np.take_along_axis(seq.data, idx[:, :, None], axis=0))
    bcols = np.arange(seq.data.shape[1])[None, :]

    def vjp(g):
        buf = np.zeros_like(seq.data)
        np.add.at(buf, (idx, bcols), g)
        return (buf,)

    record((out,), (seq,), vjp)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(x):
    y = np.tanh(x.data)
    out = Tensor(y)
    record((out,), (x,), lambda g: (g * (1.0 - y * y),))
    return out


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    record((out,), (x,), lambda g: (g * y * (1.0 - y),))
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0))
    record((out,), (x,), lambda g: (g * (x.data > 0),))
    return out


def exp(x):
    y = np.exp(x.data)
    out = Tensor(y)
    record((out,), (x,), lambda g: (g * y,))
    return out


def log(x):
    out = Tensor(np.log(x.data))
    record((out,), (x,), lambda g: (g / x.data,))
    return out


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    record((out,), (x,), vjp)
    return out


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    record((out,), (x,), vjp)
    return out


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize the last dimension to zero mean / unit variance, then scale.

    eps sits inside the square root. gain and bias have the size of the
    last dimension of x.
    """
    d = x.data.shape[-1]
    if d == 0:
        raise ContractViolation("layer_norm needs a non-empty last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def vjp(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    record((out,), (x, gain, bias), vjp)
    return out


def hard_sigmoid(a, slope):
    """max(0, min(1, (slope*a + 1)/2)); saturates at a = ±1/slope."""
    if slope <= 0:
        raise ContractViolation("hard_sigmoid slope must be positive")
    pre = slope * a.data
    y = np.clip((pre + 1.0) * 0.5, 0.0, 1.0)
    out = Tensor(y)
    inside = (pre > -1.0) & (pre < 1.0)

    def vjp(g):
        return (g * (0.5 * slope) * inside,)

    record((out,), (a,), vjp)
    return out


def straight_through_step(a, slope):
    """Binary step forward (1 where a > 0), hard-sigmoid slope backward.

    The forward output is exactly 0 or 1; the tie at a == 0 emits 0. The
    backward rule is identical to hard_sigmoid at the same slope, so the
    step trains as if it were its smooth surrogate.
    """
    if slope <= 0:
        raise ContractViolation("straight_through_step slope must be positive")
    out = Tensor((a.data > 0.0).astype(a.data.dtype))
    pre = slope * a.data
    inside = (pre > -1.0) & (pre < 1.0)

    def vjp(g):
        return (g * (0.5 * slope) * inside,)

    record((out,), (a,), vjp)
    return out


def dropout(x, rate, training, rng):
    """Inverted dropout: scaling happens at train time, inference is identity."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    mask = Tensor(keep * (1.0 / (1.0 - rate)))
    return mul(x, mask)
