"""Unidirectional attention decoder and beam-search inference.

The bottom decoder layer drives a single additive attention computation per
step; the resulting context vector is concatenated to the input of every
layer above the bottom. Layer norm and dropout follow each layer, residual
connections start at the third layer, and the context never feeds the
output projection directly.

Beam search is length-synchronous with pruning on cumulative model
log-probability; finished hypotheses are rescored with length
normalization (5+|Y|)^a / 6^a and an attention-coverage bonus
b * sum_j log(min(mass_j, 1)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Embedding, LayerNorm, Linear, LSTMCellParams, ParamSet
from .tensor import ContractViolation, Tensor


@dataclass
class DecoderConfig:
    num_layers: int = 8
    model_dim: int = 512
    embed_dim: int = 0
    attention_dim: int = 0
    dropout: float = 0.0
    residual_start_layer: int = 3
    beam_size: int = 8
    coverage_penalty: float = 0.2
    length_norm: float = 0.2
    max_output_factor: float = 3.0

    def __post_init__(self):
        if self.embed_dim == 0:
            self.embed_dim = self.model_dim
        if self.attention_dim == 0:
            self.attention_dim = self.model_dim
        if self.beam_size < 1:
            raise ContractViolation("beam size must be >= 1")
        if self.coverage_penalty < 0 or self.length_norm < 0:
            raise ContractViolation("penalties must be >= 0")


class AdditiveAttention:
    """score_j = v . tanh(Wq q + Wk k_j); masked softmax over positions."""

    def __init__(self, ps: ParamSet, prefix, query_dim, key_dim, att_dim):
        self.Wq = ps.new(f"{prefix}.Wq", query_dim, att_dim)
        self.Wk = ps.new(f"{prefix}.Wk", key_dim, att_dim)
        self.v = ps.new(f"{prefix}.v", att_dim, 1)

    def project_keys(self, keys):
        """Precompute Wk k_j once per source sequence: [T', B, a]."""
        return T.matmul(keys, self.Wk)

    def __call__(self, query, keys_proj, values, mask=None):
        """query [B, d]; keys_proj [T', B, a]; values [T', B, d_v].

        Returns (context [B, d_v], weights [T', B]). Weights of masked
        positions are exactly zero; a fully masked column is an error.
        """
        Tp = keys_proj.data.shape[0]
        B = query.data.shape[0]
        if Tp < 1:
            raise ContractViolation("attention needs at least one position")
        if mask is not None:
            if np.any(mask.sum(axis=0) == 0):
                raise ContractViolation("every source position is masked")
        q = T.matmul(query, self.Wq)  # [B, a]
        scores = T.reshape(T.matmul(T.tanh(keys_proj + q), self.v), (Tp, B))
        if mask is not None and not np.all(mask == 1.0):
            scores = scores + Tensor(((mask - 1.0) * 1e9)
                                     .astype(scores.data.dtype))
        weights = T.softmax(scores, axis=0)
        context = T.tsum(values * T.reshape(weights, (Tp, B, 1)), axis=0)
        return context, weights


def additive_attention(query, keys, values, attention, mask=None):
    """Functional form; projects keys on the fly."""
    return attention(query, attention.project_keys(keys), values, mask)


@dataclass
class DecoderState:
    h: list  # [L] tensors [B, H]
    c: list  # [L] tensors [B, H]
    keys_proj: Tensor
    values: Tensor
    src_mask: np.ndarray

    def select(self, rows):
        """Reindex the recurrent state to hypothesis rows (inference only)."""
        return DecoderState(
            h=[Tensor(t.data[rows]) for t in self.h],
            c=[Tensor(t.data[rows]) for t in self.c],
            keys_proj=self.keys_proj,
            values=self.values,
            src_mask=self.src_mask,
        )


class Decoder:
    def __init__(self, ps: ParamSet, cfg: DecoderConfig, vocab_size,
                 enc_dim=None, prefix="dec"):
        self.cfg = cfg
        enc_dim = enc_dim or cfg.model_dim
        self.emb = Embedding(ps, f"{prefix}.emb", vocab_size, cfg.embed_dim)
        self.attention = AdditiveAttention(ps, f"{prefix}.att", cfg.model_dim,
                                           enc_dim, cfg.attention_dim)
        self.cells = []
        self.norms = []
        for l in range(1, cfg.num_layers + 1):
            d_in = cfg.embed_dim if l == 1 else cfg.model_dim + enc_dim
            self.cells.append(
                LSTMCellParams(ps, f"{prefix}.l{l}", d_in, cfg.model_dim))
            self.norms.append(LayerNorm(ps, f"{prefix}.l{l}", cfg.model_dim))
        self.out_proj = Linear(ps, f"{prefix}.out", cfg.model_dim, vocab_size)
        self.vocab_size = vocab_size

    def init_state(self, enc_out, batch, dtype=np.float32):
        zeros = [Tensor(np.zeros((batch, self.cfg.model_dim), dtype=dtype))
                 for _ in self.cells]
        return DecoderState(
            h=list(zeros),
            c=[Tensor(np.zeros((batch, self.cfg.model_dim), dtype=dtype))
               for _ in self.cells],
            keys_proj=self.attention.project_keys(enc_out.top_states),
            values=enc_out.top_states,
            src_mask=enc_out.mask,
        )

    def step_body(self, prev_ids, state, training=False, rng=None):
        """Shared per-step computation up to the pre-logit output.

        Returns (top_output [B, d], new_state, attention weights [T', B]).
        """
        cfg = self.cfg
        x = self.emb(np.asarray(prev_ids))
        if cfg.dropout and training:
            x = T.dropout(x, cfg.dropout, training, rng)
        new_h, new_c = [], []
        h, c = self.cells[0].step(x, state.h[0], state.c[0])
        new_h.append(h)
        new_c.append(c)
        out = self.norms[0](h)
        if cfg.dropout and training:
            out = T.dropout(out, cfg.dropout, training, rng)
        context, weights = self.attention(out, state.keys_proj, state.values,
                                          state.src_mask)
        prev_out = out
        for l in range(1, len(self.cells)):
            x_l = T.concat([prev_out, context], axis=-1)
            h, c = self.cells[l].step(x_l, state.h[l], state.c[l])
            new_h.append(h)
            new_c.append(c)
            inner = self.norms[l](h)
            if cfg.dropout and training:
                inner = T.dropout(inner, cfg.dropout, training, rng)
            prev_out = inner + prev_out if (l + 1) >= cfg.residual_start_layer \
                else inner
        new_state = DecoderState(h=new_h, c=new_c, keys_proj=state.keys_proj,
                                 values=state.values, src_mask=state.src_mask)
        return prev_out, new_state, weights

    def decode_step(self, prev_ids, state, training=False, rng=None):
        """One step: returns (logits [B, V], new_state, weights [T', B])."""
        top, new_state, weights = self.step_body(prev_ids, state,
                                                 training, rng)
        return self.out_proj(top), new_state, weights

    def teacher_forced_outputs(self, prev_ids_seq, state, training=False,
                               rng=None):
        """Run all steps of a [Tt, B] teacher-forcing input.

        Returns (logits [Tt, B, V], weights list of [T', B]).
        """
        tops = []
        all_weights = []
        for t in range(prev_ids_seq.shape[0]):
            top, state, weights = self.step_body(prev_ids_seq[t], state,
                                                 training, rng)
            tops.append(top)
            all_weights.append(weights)
        logits = self.out_proj(T.stack(tops, axis=0))
        return logits, all_weights


def length_penalty(n_tokens, alpha):
    return ((5.0 + n_tokens) ** alpha) / (6.0 ** alpha)


def coverage_penalty(att_mass, src_mask_col, beta):
    """beta * sum_j log(min(mass_j, 1)) over valid source positions."""
    if beta == 0.0:
        return 0.0
    valid = src_mask_col > 0
    mass = np.minimum(att_mass[valid], 1.0)
    mass = np.maximum(mass, 1e-12)
    return beta * float(np.log(mass).sum())


def rescore(logp, n_tokens, att_mass, src_mask_col, cfg):
    lp = length_penalty(n_tokens, cfg.length_norm)
    cp = coverage_penalty(att_mass, src_mask_col, cfg.coverage_penalty)
    return logp / lp + cp


@dataclass
class BeamHypothesis:
    tokens: list          # emitted ids, EOS included when finished
    logp: float           # sum of token log-probabilities
    att_mass: np.ndarray  # accumulated attention mass per source position
    score: float = 0.0
    finished: bool = True


@dataclass
class BeamResult:
    tokens: list
    logp: float
    score: float
    finished: list  # every finished BeamHypothesis, for introspection
    reached_end: bool  # False when no hypothesis finished within max_len
    att_mass: np.ndarray = None


def _log_softmax_np(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def beam_search(decoder, enc_out, bos, eos, max_len, cfg=None):
    """Length-synchronous beam search over one sentence.

    enc_out must hold a single sentence (batch 1); the beam dimension is
    run as the batch. Hypotheses are pruned on cumulative log-probability
    (ties break toward the earlier hypothesis index); hypotheses emitting
    EOS move to the finished pool and stop expanding. Finished hypotheses
    are rescored with the length and coverage terms; the best one wins.
    """
    cfg = cfg or decoder.cfg
    k = cfg.beam_size
    Tp = enc_out.top_states.data.shape[0]
    if Tp < 1:
        raise ContractViolation("empty encoder output")
    src_mask_col = enc_out.mask[:, 0]

    state = decoder.init_state(_tile_encoding(enc_out, 1), 1)
    prev = np.array([bos])
    logps = np.zeros(1)
    beams_tokens = [[]]
    att_mass = np.zeros((1, Tp))
    finished: list[BeamHypothesis] = []

    for _ in range(max_len):
        logits, state, weights = decoder.decode_step(prev, state)
        logp = _log_softmax_np(logits.data)  # [n, V]
        n, V = logp.shape
        total = logps[:, None] + logp
        flat = total.ravel()
        order = np.argsort(-flat, kind="stable")[:k]
        masses = att_mass + weights.data.T  # [n, Tp]
        next_rows, next_prev, next_logps, next_tokens, next_mass = \
            [], [], [], [], []
        for cand in order:
            row, tok = divmod(int(cand), V)
            toks = beams_tokens[row] + [tok]
            if tok == eos:
                finished.append(BeamHypothesis(
                    tokens=toks, logp=float(flat[cand]),
                    att_mass=masses[row].copy()))
            else:
                next_rows.append(row)
                next_prev.append(tok)
                next_logps.append(float(flat[cand]))
                next_tokens.append(toks)
                next_mass.append(masses[row])
        if not next_rows:
            break
        rows = np.array(next_rows)
        state = state.select(rows)
        prev = np.array(next_prev)
        logps = np.array(next_logps)
        beams_tokens = next_tokens
        att_mass = np.array(next_mass)

    for hyp in finished:
        hyp.score = rescore(hyp.logp, len(hyp.tokens), hyp.att_mass,
                            src_mask_col, cfg)
    if finished:
        best = max(range(len(finished)), key=lambda i: (finished[i].score, -i))
        hyp = finished[best]
        return BeamResult(tokens=hyp.tokens, logp=hyp.logp, score=hyp.score,
                          finished=finished, reached_end=True,
                          att_mass=hyp.att_mass)
    # nothing finished: fall back to the best live hypothesis, flagged
    best = int(np.argmax(logps))
    score = rescore(float(logps[best]), len(beams_tokens[best]),
                    att_mass[best], src_mask_col, cfg)
    return BeamResult(tokens=beams_tokens[best], logp=float(logps[best]),
                      score=score, finished=[], reached_end=False,
                      att_mass=att_mass[best])


def _tile_encoding(enc_out, n):
    if n == 1:
        return enc_out
    from .encoder import EncoderOutput
    reps = (1, n, 1)
    return EncoderOutput(
        top_states=Tensor(np.tile(enc_out.top_states.data, reps)),
        per_layer_lengths=enc_out.per_layer_lengths,
        mask=np.tile(enc_out.mask, (1, n)),
    )


def greedy_decode_batch(decoder, enc_out, bos, eos, max_len):
    """Vectorized greedy decoding over a batch; returns lists of token ids."""
    B = enc_out.top_states.data.shape[1]
    state = decoder.init_state(enc_out, B)
    prev = np.full(B, bos, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    outputs = [[] for _ in range(B)]
    for _ in range(max_len):
        logits, state, _ = decoder.decode_step(prev, state)
        nxt = logits.data.argmax(axis=-1)
        for b in range(B):
            if not done[b]:
                tok = int(nxt[b])
                if tok == eos:
                    done[b] = True
                else:
                    outputs[b].append(tok)
        if done.all():
            break
        prev = np.where(done, eos, nxt)
    return outputs
