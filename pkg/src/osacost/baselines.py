"""Recurrent encoder-decoder baselines: (Bi)LSTM with or without attention.

The encoder reads the same summed visit embeddings as the Transformer.
The decoder is a unidirectional LSTM whose initial hidden state is a
projection of the final encoder state; the attention variants add an
additive-attention context over all encoder states at every step.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, ops
from .data import InputVocabs, TARGET_SPECIALS
from .nn import Embedding, Linear, Module, VisitEmbedding, key_padding_bias, xavier
from .transformer import Seq2SeqModel

VARIANTS = {
    "lstm": (False, False),
    "lstm_attn": (False, True),
    "bilstm": (True, False),
    "bilstm_attn": (True, True),
}


@dataclass
class RecurrentConfig:
    vocab_sizes: dict = field(default_factory=dict)
    target_size: int = 0
    hidden_dim: int = 64
    embed_dim: int = 64
    attn_dim: int = 64
    n_layers: int = 1
    bidirectional: bool = False
    attention: bool = False
    dropout: float = 0.1
    max_target_len: int = 32
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        missing = set(InputVocabs.VARIABLES) - set(self.vocab_sizes)
        if missing:
            raise ValueError(f"vocab sizes missing for {sorted(missing)}")
        if self.target_size <= len(TARGET_SPECIALS):
            raise ValueError("target vocabulary has no cost types")
        if self.n_layers != 1:
            raise ValueError("only single-layer recurrent baselines are implemented")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def variant(cls, name, **kwargs):
        if name not in VARIANTS:
            raise KeyError(f"unknown baseline {name!r}; choose from {sorted(VARIANTS)}")
        bi, attn = VARIANTS[name]
        return cls(bidirectional=bi, attention=attn, **kwargs)

    def to_dict(self):
        return asdict(self)


class LSTMLayer(Module):
    def __init__(self, rng, d_in, hidden):
        super().__init__()
        self.hidden = hidden
        self.wx = self.param("wx", xavier(rng, d_in, 4 * hidden))
        self.wh = self.param("wh", xavier(rng, hidden, 4 * hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget gate starts open
        self.b = self.param("b", bias)

    def __call__(self, x, mask, h0=None, c0=None):
        return ops.lstm(ops.linear(x, self.wx, self.b), self.wh, mask, h0, c0)


@dataclass
class RecurrentEncoded:
    memory: Tensor  # [B, L, enc_dim]
    final: Tensor  # [B, enc_dim]
    mask: np.ndarray


class RecurrentSeq2Seq(Seq2SeqModel):
    kind = "recurrent"

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.max_target_len = config.max_target_len
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x157]))
        self.dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD0]))
        H, E = config.hidden_dim, config.embed_dim
        self.enc_dim = 2 * H if config.bidirectional else H
        self.embed = self.child("embed", VisitEmbedding(rng, config.vocab_sizes, E))
        self.fwd = self.child("fwd", LSTMLayer(rng, E, H))
        self.bwd = self.child("bwd", LSTMLayer(rng, E, H)) if config.bidirectional else None
        self.bridge = self.child("bridge", Linear(rng, self.enc_dim, H))
        self.tgt_embed = self.child("tgt_embed", Embedding(rng, config.target_size, E))
        self.dec = self.child("dec", LSTMLayer(rng, E, H))
        if config.attention:
            A = config.attn_dim
            self.attn_enc = self.child("attn_enc", Linear(rng, self.enc_dim, A, bias=False))
            self.attn_dec = self.child("attn_dec", Linear(rng, H, A))
            self.attn_v = self.child("attn_v", Linear(rng, A, 1, bias=False))
            self.head = self.child("head", Linear(rng, H + self.enc_dim, config.target_size))
        else:
            self.head = self.child("head", Linear(rng, H, config.target_size))

    def _drop(self, x, training):
        return ops.dropout(x, self.config.dropout, self.dropout_rng, training)

    def encode(self, batch, training=False):
        mask = np.asarray(batch.mask)
        x = self._drop(self.embed(batch.tokens), training)
        hs = self.fwd(x, mask)
        final = hs[:, -1, :]  # padding carries the last real state forward
        if self.bwd is not None:
            hb = ops.flip(self.bwd(ops.flip(x, 1), mask[:, ::-1]), 1)
            hs = ops.concat([hs, hb], axis=-1)
            final = ops.concat([final, hb[:, 0, :]], axis=-1)
        return RecurrentEncoded(hs, final, mask)

    def _attend(self, enc, h):
        B, T, _ = h.shape
        L = enc.memory.shape[1]
        A = self.config.attn_dim
        ke = ops.reshape(self.attn_enc(enc.memory), (B, 1, L, A))
        qd = ops.reshape(self.attn_dec(h), (B, T, 1, A))
        scores = ops.reshape(self.attn_v(ops.tanh(ops.add(ke, qd))), (B, T, L))
        bias = key_padding_bias(enc.mask, scores.dtype)[:, 0]  # [B, 1, L]
        weights = ops.softmax(ops.add(scores, Tensor(bias, dtype=scores.dtype)))
        return ops.matmul(weights, enc.memory)  # [B, T, enc_dim]

    def decode(self, enc, dec_in, training=False):
        dec_in = np.asarray(dec_in)
        B, T = dec_in.shape
        if T > self.max_target_len + 1:
            raise ValueError(f"decoder length {T} exceeds {self.max_target_len}")
        h0 = ops.tanh(self.bridge(enc.final))
        y = self._drop(self.tgt_embed(dec_in), training)
        h = self.dec(y, np.ones((B, T)), h0)
        if self.config.attention:
            h = ops.concat([h, self._attend(enc, h)], axis=-1)
        return self.head(self._drop(h, training))


def build_baseline(name, **kwargs):
    return RecurrentSeq2Seq(RecurrentConfig.variant(name, **kwargs))
