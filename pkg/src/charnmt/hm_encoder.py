"""Hierarchical multiscale encoder: learned binary gates skip timesteps.

A stack of unidirectional LSTM layers where layer l emits a binary gate
z[l][t] through a straight-through step. When z[l][t] is 1 the node above
updates from h[l][t]; when 0 it copies its previous state exactly. Gates of
copied nodes are locked to 0 (no gradient through the lock), so upper
layers never update more often than lower ones; there is no flush, the
right neighbor always performs a normal update. Every input position
enters layer 1.

Two output modes:
  * gated-output: mix all layer states per timestep through learned scalar
    gates and attend over the full-length result (small-scale setup);
  * survivors: gather the top layer's surviving timesteps into a shorter
    sequence and run a BiLSTM stack plus projection over it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import BiLSTMLayer, EncoderOutput
from .layers import Linear, LSTMCellParams, ParamSet
from .tensor import ContractViolation, Tensor, record


@dataclass
class CompressionPenaltyConfig:
    alpha1: float = 0.1
    alpha2: float = 0.9
    weight: float = 0.0
    literal: bool = False  # reproduce the published formula verbatim

    def __post_init__(self):
        if not 0.0 <= self.alpha1 < self.alpha2 <= 1.0:
            raise ContractViolation("need 0 <= alpha1 < alpha2 <= 1")
        if self.weight < 0:
            raise ContractViolation("penalty weight must be >= 0")


@dataclass
class SlopeSchedule:
    start: float = 1.0
    end: float = 5.0
    anneal_steps: int = 80000

    def __call__(self, step):
        if self.anneal_steps <= 0 or step >= self.anneal_steps:
            return self.end
        frac = step / self.anneal_steps
        return self.start + (self.end - self.start) * frac


@dataclass
class ZMatrix:
    """Binary gate decisions per layer/timestep/batch element."""

    z: np.ndarray        # [L, T, B] exact zeros/ones
    z_tilde: np.ndarray  # [L, T, B] surrogate activations (0 where locked)
    mask: np.ndarray     # [T, B] source validity

    def counts(self):
        """Z^l = sum_t z[l][t] per batch element -> [L, B]."""
        return self.z.sum(axis=1)

    def seq_lengths(self):
        return self.mask.sum(axis=0)

    def nested(self):
        """True iff z[l][t] = 1 implies z[l-1][t] = 1 for every l >= 2."""
        return bool(np.all(self.z[1:] <= self.z[:-1]))


def binary_blend(gate, new, prev):
    """Exact routed update: rows with gate 1 take ``new``, others ``prev``.

    gate is a [B, 1] tensor of exact zeros/ones. Forward is a bitwise
    select (copies reproduce prev exactly); backward treats the select as
    the blend gate*new + (1-gate)*prev, so gradients reach the gate.
    """
    take = gate.data == 1.0
    out = Tensor(np.where(take, new.data, prev.data))

    def vjp(g):
        dgate = ((new.data - prev.data) * g).sum(axis=-1, keepdims=True)
        return dgate, g * take, g * ~take

    record((out,), (gate, new, prev), vjp)
    return out


class HMCellParams:
    """LSTM cell plus the scalar gate head producing z-tilde."""

    def __init__(self, ps: ParamSet, prefix, d_in, hidden):
        self.cell = LSTMCellParams(ps, prefix, d_in, hidden)
        self.Wzx = ps.new(f"{prefix}.Wzx", d_in, 1)
        self.Wzh = ps.new(f"{prefix}.Wzh", hidden, 1)
        self.z_bias = ps.new(f"{prefix}.z_bias", 1)
        self.hidden = hidden


def hm_cell_step(x_below, h_prev, c_prev, params: HMCellParams, slope):
    """One node: normal LSTM update plus its gate, or an exact copy.

    With input from below, returns (h, c, z, z_tilde) where z is the
    straight-through binarization of the gate preactivation. With
    x_below=None the node is a copy: states pass through unchanged and the
    gate is a locked constant 0.
    """
    if x_below is None:
        zero = Tensor(np.zeros((h_prev.data.shape[0], 1),
                               dtype=h_prev.data.dtype))
        return h_prev, c_prev, zero, zero
    h, c = params.cell.step(x_below, h_prev, c_prev)
    a = x_below @ params.Wzx + h_prev @ params.Wzh + params.z_bias
    z_tilde = T.hard_sigmoid(a, slope)
    z = T.straight_through_step(a, slope)
    return h, c, z, z_tilde


@dataclass
class HMForward:
    """States and differentiable gate records from one stack pass."""

    h_out: list     # [L] lists of [T] tensors [B, H] (post-dropout outputs)
    z_steps: list   # [L] lists of [T] tensors [B, 1] (locked gates)
    zmatrix: ZMatrix
    z_counts: list  # [L] tensors [B, 1]: differentiable Z^l


def hm_stack_forward(emb, hm_cells, slope, mask=None, dropout=0.0,
                     training=False, rng=None):
    """Run the gated stack left to right over [T, B, e] embeddings."""
    Tlen, B, _ = emb.data.shape
    L = len(hm_cells)
    if Tlen < 1 or L < 1:
        raise ContractViolation("need at least one timestep and one layer")
    dt = emb.data.dtype
    if mask is None:
        mask = np.ones((Tlen, B), dtype=dt)
    h = [Tensor(np.zeros((B, cell.hidden), dtype=dt)) for cell in hm_cells]
    c = [Tensor(np.zeros((B, cell.hidden), dtype=dt)) for cell in hm_cells]
    out_state = list(h)  # dropped outputs feeding upward
    h_out = [[] for _ in range(L)]
    z_steps = [[] for _ in range(L)]
    zmat = np.zeros((L, Tlen, B), dtype=dt)
    ztil = np.zeros((L, Tlen, B), dtype=dt)
    z_accum = [None] * L
    use_dropout = dropout > 0.0 and training
    for t in range(Tlen):
        below = emb[t]
        gate = Tensor(mask[t][:, None].astype(dt))  # constant source mask
        for l, cell in enumerate(hm_cells):
            h_new, c_new, z_raw, zt_raw = hm_cell_step(
                below, h[l], c[l], cell, slope)
            h[l] = binary_blend(gate, h_new, h[l])
            c[l] = binary_blend(gate, c_new, c[l])
            if use_dropout:
                out_new = T.dropout(h_new, dropout, training, rng)
                out_state[l] = binary_blend(gate, out_new, out_state[l])
            else:
                out_state[l] = h[l]
            # lock: copied nodes keep z = 0 with no gradient through the lock
            lock = gate.data
            z_eff = z_raw * Tensor(lock)
            zmat[l, t] = z_eff.data[:, 0]
            ztil[l, t] = zt_raw.data[:, 0] * lock[:, 0]
            z_accum[l] = z_eff if z_accum[l] is None else z_accum[l] + z_eff
            h_out[l].append(out_state[l])
            z_steps[l].append(z_eff)
            below = out_state[l]
            gate = z_eff
    zmatrix = ZMatrix(z=zmat, z_tilde=ztil, mask=mask.copy())
    return HMForward(h_out=h_out, z_steps=z_steps, zmatrix=zmatrix,
                     z_counts=z_accum)


class GatedOutput:
    """Scalar-gated mix of per-layer states into one representation."""

    def __init__(self, ps: ParamSet, prefix, hidden, n_layers, out_dim):
        self.n_layers = n_layers
        self.gate_w = ps.new(f"{prefix}.gate_w", hidden * n_layers, n_layers)
        self.gate_b = ps.new(f"{prefix}.gate_b", n_layers)
        self.proj = [ps.new(f"{prefix}.W{l + 1}", hidden, out_dim)
                     for l in range(n_layers)]

    def __call__(self, h_layers):
        gates = T.sigmoid(T.concat(h_layers, axis=-1) @ self.gate_w
                          + self.gate_b)  # [B, L]
        mix = None
        for l, hl in enumerate(h_layers):
            term = (hl @ self.proj[l]) * gates[:, l:l + 1]
            mix = term if mix is None else mix + term
        return T.relu(mix)


def gated_output(h_layers, module: GatedOutput):
    return module(h_layers)


def compression_loss(z_counts, seq_len, cfg: CompressionPenaltyConfig):
    """Penalty on gate-open rates outside [alpha1, alpha2], summed over layers.

    The corrected form max(0, alpha1*T - Z, Z - alpha2*T) is zero exactly
    when every layer's rate lies inside the band. cfg.literal switches to
    the published form max(0, Z - alpha1*T, alpha2*T - Z). Scalar counts
    are accepted for accounting; tensors keep gradients. Returns a scalar
    tensor: cfg.weight times the batch-mean penalty.
    """
    total = None
    for zc in z_counts:
        if not isinstance(zc, Tensor):
            zc = Tensor(np.asarray([[float(zc)]], dtype=np.float64))
        seq = np.asarray(seq_len, dtype=zc.data.dtype)
        if seq.ndim == 1 and zc.data.ndim == 2:
            seq = seq[:, None]
        if np.any(zc.data > seq + 1e-9):
            raise ContractViolation("layer gate count exceeds sequence length")
        lo = Tensor(np.broadcast_to(cfg.alpha1 * seq, zc.data.shape).copy())
        hi = Tensor(np.broadcast_to(cfg.alpha2 * seq, zc.data.shape).copy())
        zero = Tensor(np.zeros_like(zc.data))
        if cfg.literal:
            term = T.maximum(T.maximum(zero, zc - lo), hi - zc)
        else:
            term = T.maximum(T.maximum(zero, lo - zc), zc - hi)
        total = term if total is None else total + term
    return T.tmean(total) * cfg.weight


def computation_ratio(zmatrix: ZMatrix):
    """Mean over layers of performed updates relative to full length.

    Layer 1 updates at every valid timestep (fraction 1); layer l+1
    updates Z^l times. Batch elements aggregate by summed counts.
    """
    lengths = zmatrix.seq_lengths()
    total_len = float(lengths.sum())
    if total_len <= 0:
        raise ContractViolation("empty source batch")
    counts = zmatrix.counts()  # [L, B]
    L = counts.shape[0]
    fractions = [1.0]
    for l in range(L - 1):
        fractions.append(float(counts[l].sum()) / total_len)
    return float(np.mean(fractions))


def gate_trace_lines(zmatrix: ZMatrix, element=0):
    """Per-sentence dump: one "layer<TAB>t<TAB>z" line per valid node."""
    lines = []
    L, Tlen, _ = zmatrix.z.shape
    for l in range(L):
        for t in range(Tlen):
            if zmatrix.mask[t, element] > 0:
                lines.append(f"{l + 1}\t{t + 1}\t{int(zmatrix.z[l, t, element])}")
    return lines


def survivor_indices(zmatrix: ZMatrix):
    """Per-element indices of top-layer survivors, padded to a batch.

    Falls back to the final valid timestep when a column keeps nothing, so
    downstream layers always see at least one state. Returns (idx [T', B],
    mask [T', B]); padded rows repeat the last survivor. Indices are
    strictly increasing within the valid region.
    """
    z_top = zmatrix.z[-1]  # [T, B]
    Tlen, B = z_top.shape
    cols = []
    for b in range(B):
        keep = np.flatnonzero(z_top[:, b] > 0)
        if keep.size == 0:
            valid = np.flatnonzero(zmatrix.mask[:, b] > 0)
            last = valid[-1] if valid.size else 0
            keep = np.array([last])
        cols.append(keep)
    Tp = max(len(kc) for kc in cols)
    idx = np.zeros((Tp, B), dtype=np.int64)
    mask = np.zeros((Tp, B), dtype=zmatrix.mask.dtype)
    for b, keep in enumerate(cols):
        idx[:len(keep), b] = keep
        idx[len(keep):, b] = keep[-1]
        mask[:len(keep), b] = 1.0
    return idx, mask


@dataclass
class HMEncoderConfig:
    num_hm_layers: int = 2
    num_bilstm_layers: int = 5  # 0 selects gated-output mode
    model_dim: int = 512
    embed_dim: int = 0
    residual_start_layer: int = 3  # global depth, counting HM layers
    dropout: float = 0.0
    projection_dim: int = 0
    penalty: CompressionPenaltyConfig = field(
        default_factory=CompressionPenaltyConfig)
    slope: SlopeSchedule = field(default_factory=SlopeSchedule)

    def __post_init__(self):
        if self.embed_dim == 0:
            self.embed_dim = self.model_dim
        if self.projection_dim == 0:
            self.projection_dim = self.model_dim
        if self.num_hm_layers < 1:
            raise ContractViolation("need at least one gated layer")


class HMEncoder:
    def __init__(self, ps: ParamSet, cfg: HMEncoderConfig, prefix="enc"):
        self.cfg = cfg
        d_in = cfg.embed_dim
        self.hm_cells = []
        for l in range(1, cfg.num_hm_layers + 1):
            self.hm_cells.append(
                HMCellParams(ps, f"{prefix}.hm{l}", d_in, cfg.model_dim))
            d_in = cfg.model_dim
        self.gated = None
        self.bilstm = []
        self.residual = []
        if cfg.num_bilstm_layers == 0:
            self.gated = GatedOutput(ps, f"{prefix}.gated", cfg.model_dim,
                                     cfg.num_hm_layers, cfg.model_dim)
        else:
            for i in range(1, cfg.num_bilstm_layers + 1):
                depth = cfg.num_hm_layers + i
                self.bilstm.append(
                    BiLSTMLayer(ps, f"{prefix}.l{depth}", d_in, cfg.model_dim))
                self.residual.append(depth >= cfg.residual_start_layer
                                     and d_in == cfg.model_dim)
                d_in = cfg.model_dim
        self.proj = Linear(ps, f"{prefix}.proj", d_in, cfg.projection_dim)

    def __call__(self, emb, mask=None, slope=1.0, training=False, rng=None):
        """Encode [T, B, e]; returns (EncoderOutput, HMForward)."""
        cfg = self.cfg
        Tlen, B, _ = emb.data.shape
        if mask is None:
            mask = np.ones((Tlen, B), dtype=emb.data.dtype)
        fwd = hm_stack_forward(emb, self.hm_cells, slope, mask=mask,
                               dropout=cfg.dropout, training=training, rng=rng)
        zm = fwd.zmatrix
        lengths = [mask.sum(axis=0)]
        counts = zm.counts()
        for l in range(cfg.num_hm_layers - 1):
            lengths.append(counts[l])

        if self.gated is not None:
            steps = [self.gated([fwd.h_out[l][t]
                                 for l in range(cfg.num_hm_layers)])
                     for t in range(Tlen)]
            top = self.proj(T.stack(steps, axis=0))
            out_mask = mask
        else:
            idx, surv_mask = survivor_indices(zm)
            h_top = T.stack(fwd.h_out[-1], axis=0)    # [T, B, H]
            z_top = T.stack(fwd.z_steps[-1], axis=0)  # [T, B, 1]
            g_h = T.gather_time(h_top, idx)
            g_z = T.gather_time(z_top, idx)
            # multiplier is exactly 1 in forward; routes gradient to the
            # top-layer gates that selected these survivors
            mult = g_z + Tensor(1.0 - g_z.data)
            x = g_h * mult
            for i, layer in enumerate(self.bilstm):
                lengths.append(surv_mask.sum(axis=0))
                inner = layer(x, surv_mask)
                if cfg.dropout and training:
                    inner = T.dropout(inner, cfg.dropout, training, rng)
                x = inner + x if self.residual[i] else inner
            top = self.proj(x)
            out_mask = surv_mask
        out = EncoderOutput(top_states=top,
                            per_layer_lengths=np.asarray(lengths)
                            .astype(np.int64),
                            mask=out_mask)
        return out, fwd


def hm_encode(emb, hm_encoder, mask=None, slope=1.0, training=False, rng=None):
    """Functional wrapper over HMEncoder.__call__."""
    return hm_encoder(emb, mask=mask, slope=slope, training=training, rng=rng)
