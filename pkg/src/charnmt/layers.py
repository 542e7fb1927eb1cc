"""Parameter registry and the recurrent building blocks.

All layers operate batched: a sequence is a [T, B, d] tensor or a list of
[B, d] step tensors. The LSTM cell is a single fused tape primitive with a
hand-written backward, which keeps the tape short enough to train at
interactive speed in numpy.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, record


class ParamSet:
    """Named trainable tensors, insertion-ordered for stable serialization."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def new(self, name, *shape, dtype=np.float32):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def tensors(self):
        return list(self._params.values())

    def count(self):
        return sum(p.data.size for p in self._params.values())


def zeros_like_state(batch, dim, dtype=np.float32):
    return Tensor(np.zeros((batch, dim), dtype=dtype))


def masked_update(new, prev, mask_col):
    """Per-row blend: rows with mask 1 take ``new``, rows with 0 keep ``prev``.

    mask_col is a constant [B, 1] float array of zeros/ones.
    """
    m = Tensor(mask_col)
    return new * m + prev * (1.0 - mask_col)


def lstm_cell(x, h_prev, c_prev, Wx, Wh, b):
    """One LSTM step, fused into a single tape primitive.

    x: [B, d_in], h_prev/c_prev: [B, H], Wx: [d_in, 4H], Wh: [H, 4H], b: [4H].
    Gate order along the last axis is input, forget, candidate, output.
    Returns (h, c).
    """
    H = h_prev.data.shape[-1]
    pre = np.matmul(x.data, Wx.data) + np.matmul(h_prev.data, Wh.data) + b.data
    i = 1.0 / (1.0 + np.exp(-pre[:, 0 * H:1 * H]))
    f = 1.0 / (1.0 + np.exp(-pre[:, 1 * H:2 * H]))
    g = np.tanh(pre[:, 2 * H:3 * H])
    o = 1.0 / (1.0 + np.exp(-pre[:, 3 * H:4 * H]))
    c_new = f * c_prev.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    h_out = Tensor(h_new)
    c_out = Tensor(c_new)

    def vjp(dh, dc_out):
        dc = dc_out + dh * o * (1.0 - tc * tc)
        dpre = np.empty_like(pre)
        dpre[:, 0 * H:1 * H] = dc * g * i * (1.0 - i)
        dpre[:, 1 * H:2 * H] = dc * c_prev.data * f * (1.0 - f)
        dpre[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dpre[:, 3 * H:4 * H] = dh * tc * o * (1.0 - o)
        dx = np.matmul(dpre, Wx.data.T)
        dh_prev = np.matmul(dpre, Wh.data.T)
        dc_prev = dc * f
        dWx = np.matmul(x.data.T, dpre)
        dWh = np.matmul(h_prev.data.T, dpre)
        db = dpre.sum(axis=0)
        return dx, dh_prev, dc_prev, dWx, dWh, db

    record((h_out, c_out), (x, h_prev, c_prev, Wx, Wh, b), vjp)
    return h_out, c_out


class LSTMCellParams:
    def __init__(self, ps: ParamSet, prefix, d_in, hidden, dtype=np.float32):
        self.d_in = d_in
        self.hidden = hidden
        self.Wx = ps.new(f"{prefix}.Wx", d_in, 4 * hidden, dtype=dtype)
        self.Wh = ps.new(f"{prefix}.Wh", hidden, 4 * hidden, dtype=dtype)
        self.b = ps.new(f"{prefix}.b", 4 * hidden, dtype=dtype)

    def step(self, x, h, c):
        return lstm_cell(x, h, c, self.Wx, self.Wh, self.b)


class Linear:
    def __init__(self, ps: ParamSet, prefix, d_in, d_out, dtype=np.float32):
        self.W = ps.new(f"{prefix}.W", d_in, d_out, dtype=dtype)
        self.b = ps.new(f"{prefix}.b", d_out, dtype=dtype)

    def __call__(self, x):
        return T.matmul(x, self.W) + self.b


class LayerNorm:
    def __init__(self, ps: ParamSet, prefix, dim, eps=1e-6, dtype=np.float32):
        self.gain = ps.new(f"{prefix}.ln_gain", dim, dtype=dtype)
        self.bias = ps.new(f"{prefix}.ln_bias", dim, dtype=dtype)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding:
    def __init__(self, ps: ParamSet, prefix, vocab, dim, dtype=np.float32):
        self.table = ps.new(f"{prefix}.table", vocab, dim, dtype=dtype)

    def __call__(self, ids):
        return T.gather_rows(self.table, ids)
