"""Full sequence-to-sequence model: embeddings, encoder variant, decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import Decoder, DecoderConfig, beam_search, greedy_decode_batch
from .encoder import Encoder, EncoderConfig
from .hm_encoder import HMEncoder, HMEncoderConfig
from .layers import Embedding, ParamSet
from .tensor import Tensor

BILSTM, HM = "bilstm", "hm"


@dataclass
class ModelConfig:
    vocab_size: int
    encoder_type: str = BILSTM
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hm: HMEncoderConfig = field(default_factory=HMEncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def encoder_dropout(self):
        return (self.encoder if self.encoder_type == BILSTM else self.hm).dropout


class Seq2SeqModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.ps = ParamSet()
        enc_cfg = cfg.encoder if cfg.encoder_type == BILSTM else cfg.hm
        self.src_emb = Embedding(self.ps, "src.emb", cfg.vocab_size,
                                 enc_cfg.embed_dim)
        if cfg.encoder_type == BILSTM:
            self.encoder = Encoder(self.ps, cfg.encoder)
        elif cfg.encoder_type == HM:
            self.encoder = HMEncoder(self.ps, cfg.hm)
        else:
            raise ValueError(f"unknown encoder type: {cfg.encoder_type}")
        self.decoder = Decoder(self.ps, cfg.decoder, cfg.vocab_size,
                               enc_dim=enc_cfg.projection_dim)

    @property
    def is_hm(self):
        return self.cfg.encoder_type == HM

    def total_layers(self):
        """Encoder plus decoder recurrent layer count (timing reports)."""
        if self.is_hm:
            enc = self.cfg.hm.num_hm_layers + self.cfg.hm.num_bilstm_layers
        else:
            enc = self.cfg.encoder.num_bilstm_layers
        return enc + self.cfg.decoder.num_layers

    def encode(self, src_ids, src_mask=None, slope=1.0, training=False,
               rng=None):
        """src_ids [T, B] ints -> (EncoderOutput, HMForward or None)."""
        emb = self.src_emb(np.asarray(src_ids))
        drop = self.cfg.encoder_dropout()
        if drop and training:
            emb = T.dropout(emb, drop, training, rng)
        if self.is_hm:
            return self.encoder(emb, mask=src_mask, slope=slope,
                                training=training, rng=rng)
        return self.encoder(emb, mask=src_mask, training=training,
                            rng=rng), None

    def teacher_forced_logits(self, src_ids, src_mask, tgt_in, slope=1.0,
                              training=False, rng=None):
        """Returns (logits [Tt, B, V], EncoderOutput, HMForward or None)."""
        enc_out, hm_fwd = self.encode(src_ids, src_mask, slope, training, rng)
        state = self.decoder.init_state(enc_out, np.asarray(src_ids).shape[1])
        logits, _ = self.decoder.teacher_forced_outputs(
            np.asarray(tgt_in), state, training=training, rng=rng)
        return logits, enc_out, hm_fwd

    def translate_greedy(self, src_ids, src_mask, bos, eos, max_len,
                         slope=1.0):
        enc_out, _ = self.encode(src_ids, src_mask, slope)
        return greedy_decode_batch(self.decoder, enc_out, bos, eos, max_len)

    def translate_beam(self, src_ids_col, bos, eos, max_len, slope=1.0):
        """Beam-decode a single sentence given as a [T, 1] id column."""
        enc_out, hm_fwd = self.encode(src_ids_col, None, slope)
        res = beam_search(self.decoder, enc_out, bos, eos, max_len)
        return res, enc_out, hm_fwd
