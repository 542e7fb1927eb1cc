"""Deep bidirectional recurrent encoder with optional fixed-stride pooling.

Sequences are time-major [T, B, d] tensors with a float validity mask
[T, B]. Each layer runs forward and backward LSTM passes, concatenates the
two directions per timestep, layer-normalizes, and applies dropout; layers
from ``residual_start_layer`` up add their input when dimensions match
(dimension changes restart the chain above). Pooling layers shrink the
sequence between recurrent layers; per-layer lengths are recorded for the
computation-ratio accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Linear, LSTMCellParams, LayerNorm, ParamSet
from .tensor import ContractViolation, Tensor

POOL_MODES = ("concat", "max", "mean")


@dataclass
class PoolSpec:
    after_layer: int
    stride: int
    mode: str


@dataclass
class EncoderConfig:
    num_bilstm_layers: int = 6
    model_dim: int = 512
    embed_dim: int = 0  # 0 means model_dim
    residual_start_layer: int = 3
    dropout: float = 0.0
    pooling: list[PoolSpec] = field(default_factory=list)
    projection_dim: int = 0  # 0 means model_dim

    def __post_init__(self):
        if self.embed_dim == 0:
            self.embed_dim = self.model_dim
        if self.projection_dim == 0:
            self.projection_dim = self.model_dim
        if self.model_dim % 2:
            raise ContractViolation("model_dim must be even (two directions)")
        if self.residual_start_layer < 2:
            raise ContractViolation("residual connections cannot start below layer 2")
        for p in self.pooling:
            if p.stride < 1:
                raise ContractViolation(f"pool stride must be >= 1, got {p.stride}")
            if p.mode not in POOL_MODES:
                raise ContractViolation(f"unknown pool mode: {p.mode}")
            if not 1 <= p.after_layer <= self.num_bilstm_layers:
                raise ContractViolation(
                    f"pool after_layer {p.after_layer} outside the stack")


@dataclass
class EncoderOutput:
    top_states: Tensor  # [T', B, projection_dim]
    per_layer_lengths: np.ndarray  # [num_layers, B] valid timesteps per layer
    mask: np.ndarray  # [T', B]


def _ones_mask(seq):
    return np.ones(seq.data.shape[:2], dtype=seq.data.dtype)


def _run_direction(cell, seq, mask, reverse):
    Tlen, B = seq.data.shape[0], seq.data.shape[1]
    h = Tensor(np.zeros((B, cell.hidden), dtype=seq.data.dtype))
    c = Tensor(np.zeros((B, cell.hidden), dtype=seq.data.dtype))
    order = range(Tlen - 1, -1, -1) if reverse else range(Tlen)
    outs = [None] * Tlen
    for t in order:
        h_new, c_new = cell.step(seq[t], h, c)
        col = mask[t][:, None]
        if np.all(col == 1.0):
            h, c = h_new, c_new
        else:
            m = Tensor(col)
            h = h_new * m + h * (1.0 - col)
            c = c_new * m + c * (1.0 - col)
        outs[t] = h
    return T.stack(outs, axis=0)


class BiLSTMLayer:
    """One bidirectional layer: concat(forward, backward) then layer norm."""

    def __init__(self, ps: ParamSet, prefix, d_in, model_dim):
        h = model_dim // 2
        self.d_in = d_in
        self.d_out = model_dim
        self.fwd = LSTMCellParams(ps, f"{prefix}.fwd", d_in, h)
        self.bwd = LSTMCellParams(ps, f"{prefix}.bwd", d_in, h)
        self.norm = LayerNorm(ps, prefix, model_dim)

    def __call__(self, seq, mask=None):
        if seq.data.shape[0] < 1:
            raise ContractViolation("bilstm_layer needs a non-empty sequence")
        if mask is None:
            mask = _ones_mask(seq)
        f = _run_direction(self.fwd, seq, mask, reverse=False)
        b = _run_direction(self.bwd, seq, mask, reverse=True)
        return self.norm(T.concat([f, b], axis=-1))


def bilstm_layer(seq, layer, mask=None):
    """Functional wrapper over BiLSTMLayer for a [T, B, d] sequence."""
    return layer(seq, mask)


def _ensure_batched(seq):
    if seq.data.ndim == 2:
        return T.reshape(seq, (seq.data.shape[0], 1, seq.data.shape[1])), True
    return seq, False


def pool_layer(seq, stride, mode, mask=None):
    """Reduce non-overlapping windows of ``stride`` steps to one step.

    mean/max keep the feature dimension; concat multiplies it by the
    stride. A short tail window pools over the steps that remain (concat
    zero-pads). Windows containing any valid position stay valid. Accepts
    [T, d] or [T, B, d]; returns (pooled, pooled_mask).
    """
    if stride < 1:
        raise ContractViolation("pool stride must be >= 1")
    if mode not in POOL_MODES:
        raise ContractViolation(f"unknown pool mode: {mode}")
    seq, squeeze = _ensure_batched(seq)
    Tlen, B, d = seq.data.shape
    if mask is None:
        mask = _ones_mask(seq)
    if stride == 1 and mode != "concat":
        out = seq
        if squeeze:
            out = T.reshape(out, (Tlen, d))
        return out, mask

    n_win = -(-Tlen // stride)
    pad = n_win * stride - Tlen
    mcol = mask[:, :, None]
    x = seq * Tensor(mcol.astype(seq.data.dtype))  # zero out invalid steps
    if pad:
        zeros = Tensor(np.zeros((pad, B, d), dtype=seq.data.dtype))
        x = T.concat([x, zeros], axis=0)
        mask = np.concatenate(
            [mask, np.zeros((pad, B), dtype=mask.dtype)], axis=0)
    win_mask = mask.reshape(n_win, stride, B)
    counts = win_mask.sum(axis=1)  # valid members per window
    new_mask = (counts > 0).astype(seq.data.dtype)

    x = T.reshape(x, (n_win, stride, B, d))
    if mode == "mean":
        denom = np.maximum(counts, 1.0)[:, None, :, None]
        out = T.tsum(x * Tensor((win_mask[:, :, :, None] / denom)
                                .astype(seq.data.dtype)), axis=1)
    elif mode == "max":
        neg = Tensor(((win_mask - 1.0) * 1e30)[:, :, :, None]
                     .astype(seq.data.dtype))
        shifted = x + neg
        out = shifted[:, 0]
        for i in range(1, stride):
            out = T.maximum(out, shifted[:, i])
        out = out * Tensor(new_mask[:, :, None])
    else:  # concat
        out = T.reshape(T.transpose(x, (0, 2, 1, 3)), (n_win, B, stride * d))
    if squeeze:
        out = T.reshape(out, (n_win, out.data.shape[-1]))
    return out, new_mask


class Encoder:
    def __init__(self, ps: ParamSet, cfg: EncoderConfig, prefix="enc"):
        self.cfg = cfg
        self.layers = []
        self.residual = []
        self.pool_after = {p.after_layer: p for p in cfg.pooling}
        d_in = cfg.embed_dim
        for l in range(1, cfg.num_bilstm_layers + 1):
            layer = BiLSTMLayer(ps, f"{prefix}.l{l}", d_in, cfg.model_dim)
            self.layers.append(layer)
            self.residual.append(
                l >= cfg.residual_start_layer and d_in == cfg.model_dim)
            d_in = cfg.model_dim
            p = self.pool_after.get(l)
            if p is not None and p.mode == "concat":
                d_in = cfg.model_dim * p.stride
        self.proj = Linear(ps, f"{prefix}.proj", d_in, cfg.projection_dim)

    def __call__(self, emb, mask=None, training=False, rng=None):
        """Encode [T, B, e] embeddings into EncoderOutput."""
        if emb.data.shape[0] < 1:
            raise ContractViolation("cannot encode an empty sequence")
        x = emb
        if mask is None:
            mask = _ones_mask(emb)
        lengths = []
        for l, layer in enumerate(self.layers, 1):
            lengths.append(mask.sum(axis=0))
            inner = layer(x, mask)
            if self.cfg.dropout and training:
                inner = T.dropout(inner, self.cfg.dropout, training, rng)
            x = inner + x if self.residual[l - 1] else inner
            p = self.pool_after.get(l)
            if p is not None:
                x, mask = pool_layer(x, p.stride, p.mode, mask)
        top = self.proj(x)
        return EncoderOutput(
            top_states=top,
            per_layer_lengths=np.asarray(lengths).astype(np.int64),
            mask=mask,
        )


def encode(emb, encoder, mask=None, training=False, rng=None):
    """Functional wrapper over Encoder.__call__."""
    return encoder(emb, mask=mask, training=training, rng=rng)


def average_computation_ratio(per_layer_lengths, baseline_length):
    """Mean over layers of (layer length / full sequence length)."""
    if baseline_length < 1:
        raise ContractViolation("baseline length must be >= 1")
    lengths = np.asarray(per_layer_lengths, dtype=np.float64)
    if np.any(lengths > baseline_length):
        raise ContractViolation("a layer cannot be longer than the baseline")
    return float(np.mean(lengths / baseline_length))
