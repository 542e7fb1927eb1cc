"""Independent numpy re-implementations used as test oracles.

These are deliberately written as plain loops over the textbook formulas,
with no shared code with the package under test.
"""

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_step_ref(x, h, c, Wx, Wh, b):
    """Textbook LSTM with gate order input, forget, candidate, output."""
    H = h.shape[-1]
    pre = x @ Wx + h @ Wh + b
    i = sigmoid(pre[..., 0 * H:1 * H])
    f = sigmoid(pre[..., 1 * H:2 * H])
    g = np.tanh(pre[..., 2 * H:3 * H])
    o = sigmoid(pre[..., 3 * H:4 * H])
    c2 = f * c + i * g
    h2 = o * np.tanh(c2)
    return h2, c2


def stacked_lstm_ref(xs, weights):
    """Plain unidirectional stack: every layer updates at every step.

    xs: [T, B, e]; weights: list of (Wx, Wh, b). Returns [L, T, B, H].
    """
    L = len(weights)
    B = xs.shape[1]
    H = weights[0][1].shape[0]
    h = [np.zeros((B, H), dtype=xs.dtype) for _ in range(L)]
    c = [np.zeros((B, H), dtype=xs.dtype) for _ in range(L)]
    out = np.zeros((L, xs.shape[0], B, H), dtype=xs.dtype)
    for t in range(xs.shape[0]):
        below = xs[t]
        for l, (Wx, Wh, b) in enumerate(weights):
            h[l], c[l] = lstm_step_ref(below, h[l], c[l], Wx, Wh, b)
            out[l, t] = h[l]
            below = h[l]
    return out


def hard_sigmoid_ref(a, slope):
    return np.clip((slope * a + 1.0) * 0.5, 0.0, 1.0)


def hm_stack_ref(xs, weights, gate_weights, slope):
    """Hand simulation of the gated stack for a single sequence (B=1).

    weights: list of (Wx, Wh, b); gate_weights: list of (Wzx, Wzh, bz).
    Update layer 0 every step; layer l+1 updates iff the (locked) gate of
    layer l fired; copies keep (h, c) and lock their own gate at 0.
    Returns (h_states [L, T, H], z [L, T]).
    """
    L = len(weights)
    H = weights[0][1].shape[0]
    Tlen = xs.shape[0]
    h = [np.zeros(H, dtype=xs.dtype) for _ in range(L)]
    c = [np.zeros(H, dtype=xs.dtype) for _ in range(L)]
    hs = np.zeros((L, Tlen, H), dtype=xs.dtype)
    zs = np.zeros((L, Tlen))
    for t in range(Tlen):
        below = xs[t]
        gate = 1.0
        for l in range(L):
            if gate == 1.0:
                Wx, Wh, b = weights[l]
                Wzx, Wzh, bz = gate_weights[l]
                a = below @ Wzx + h[l] @ Wzh + bz
                z = 1.0 if a[0] > 0 else 0.0
                h[l], c[l] = lstm_step_ref(below, h[l], c[l], Wx, Wh, b)
            else:
                z = 0.0
            hs[l, t] = h[l]
            zs[l, t] = z
            below = h[l]
            gate = z
    return hs, zs
