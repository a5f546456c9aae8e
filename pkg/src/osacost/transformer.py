"""Encoder-decoder Transformer over summed visit-variable embeddings.

One class serves both roles: ``mode="m1"`` predicts a fixed horizon of
two next visits (used by the augmenter) and ``mode="m2"`` decodes a
variable-length sequence of next-year cost types ended by SEP.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .data import SEP, START, TARGET_SPECIALS, InputVocabs
from .nn import LayerNorm, Linear, Module, VisitEmbedding, causal_bias, key_padding_bias, Embedding

MODES = ("m1", "m2")


@dataclass
class TransformerConfig:
    vocab_sizes: dict = field(default_factory=dict)
    target_size: int = 0
    mode: str = "m2"
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128
    dropout: float = 0.1
    max_input_len: int = 128
    max_target_len: int = 32
    positions: str = "recency"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "m1":
            self.max_target_len = 2
        self.validate()

    def validate(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.mode == "m1" and self.max_target_len != 2:
            raise ValueError("m1 mode has a fixed horizon of 2")
        missing = set(InputVocabs.VARIABLES) - set(self.vocab_sizes)
        if missing:
            raise ValueError(f"vocab sizes missing for {sorted(missing)}")
        if self.target_size <= len(TARGET_SPECIALS):
            raise ValueError("target vocabulary has no cost types")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.positions not in ("absolute", "recency"):
            raise ValueError(f"positions must be absolute or recency, got {self.positions!r}")

    def to_dict(self):
        return asdict(self)


class MultiHeadAttention(Module):
    def __init__(self, rng, dim, n_heads, fused):
        super().__init__()
        self.n_heads = n_heads
        self.fused = fused
        if fused:
            self.qkv = self.child("qkv", Linear(rng, dim, 3 * dim))
        else:
            self.q = self.child("q", Linear(rng, dim, dim))
            self.kv = self.child("kv", Linear(rng, dim, 2 * dim))
        self.out = self.child("out", Linear(rng, dim, dim))

    def _heads(self, x):
        B, L, D = x.shape
        return ops.transpose(ops.reshape(x, (B, L, self.n_heads, D // self.n_heads)), (0, 2, 1, 3))

    def __call__(self, x, memory, bias):
        D = x.shape[-1]
        if self.fused:
            qkv = self.qkv(x)
            q, k, v = qkv[..., :D], qkv[..., D:2 * D], qkv[..., 2 * D:]
        else:
            kv = self.kv(memory)
            q, k, v = self.q(x), kv[..., :D], kv[..., D:]
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(D // self.n_heads))
        attn = ops.softmax(ops.add(scores, Tensor(bias, dtype=scores.dtype)))
        ctx = ops.matmul(attn, v)  # [B, H, Lq, dh]
        B, _, Lq, _ = ctx.shape
        return self.out(ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (B, Lq, D)))


class FeedForward(Module):
    def __init__(self, rng, dim, hidden):
        super().__init__()
        self.up = self.child("up", Linear(rng, dim, hidden))
        self.down = self.child("down", Linear(rng, hidden, dim))

    def __call__(self, x):
        return self.down(ops.relu(self.up(x)))


class EncoderLayer(Module):
    def __init__(self, rng, cfg):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNorm(cfg.model_dim))
        self.attn = self.child("attn", MultiHeadAttention(rng, cfg.model_dim, cfg.n_heads, fused=True))
        self.ln2 = self.child("ln2", LayerNorm(cfg.model_dim))
        self.ffn = self.child("ffn", FeedForward(rng, cfg.model_dim, cfg.ffn_dim))

    def __call__(self, x, bias, drop):
        h = self.ln1(x)
        x = ops.add(x, drop(self.attn(h, h, bias)))
        return ops.add(x, drop(self.ffn(self.ln2(x))))


class DecoderLayer(Module):
    def __init__(self, rng, cfg):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNorm(cfg.model_dim))
        self.self_attn = self.child("self_attn", MultiHeadAttention(rng, cfg.model_dim, cfg.n_heads, fused=True))
        self.ln2 = self.child("ln2", LayerNorm(cfg.model_dim))
        self.cross_attn = self.child("cross_attn", MultiHeadAttention(rng, cfg.model_dim, cfg.n_heads, fused=False))
        self.ln3 = self.child("ln3", LayerNorm(cfg.model_dim))
        self.ffn = self.child("ffn", FeedForward(rng, cfg.model_dim, cfg.ffn_dim))

    def __call__(self, y, memory, self_bias, cross_bias, drop):
        h = self.ln1(y)
        y = ops.add(y, drop(self.self_attn(h, h, self_bias)))
        y = ops.add(y, drop(self.cross_attn(self.ln2(y), memory, cross_bias)))
        return ops.add(y, drop(self.ffn(self.ln3(y))))


@dataclass
class Encoded:
    """Encoder output handed to the decoder."""

    memory: Tensor
    mask: np.ndarray


class Seq2SeqModel(Module):
    """Interface shared with the recurrent baselines."""

    kind = "seq2seq"
    max_target_len = 32

    def encode(self, batch, training=False):
        raise NotImplementedError

    def decode(self, enc, dec_in, training=False):
        raise NotImplementedError

    def forward_logits(self, batch, training=False):
        """Teacher-forced logits [B, T, target_size]."""
        return self.decode(self.encode(batch, training), batch.dec_in, training)

    def decode_step(self, enc, prev_ids):
        """Next-position logits [B, target_size] given ``[START, ...]`` prefixes."""
        prev_ids = np.asarray(prev_ids)
        if prev_ids.shape[1] > self.max_target_len:
            raise ValueError(f"target length {prev_ids.shape[1]} exceeds {self.max_target_len}")
        logits = self.decode(enc, prev_ids, training=False)
        return logits[:, -1, :]


class TransformerModel(Seq2SeqModel):
    kind = "transformer"

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.max_target_len = config.max_target_len
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7F]))
        self.dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD0]))
        d = config.model_dim
        self.embed = self.child("embed", VisitEmbedding(rng, config.vocab_sizes, d, config.max_input_len,
                                                          config.positions))
        self.enc_layers = [self.child(f"enc{i}", EncoderLayer(rng, config)) for i in range(config.n_enc_layers)]
        self.enc_norm = self.child("enc_norm", LayerNorm(d))
        self.tgt_embed = self.child("tgt_embed", Embedding(rng, config.target_size, d))
        self.tgt_pos = self.child("tgt_pos", Embedding(rng, config.max_target_len + 1, d))
        self.dec_layers = [self.child(f"dec{i}", DecoderLayer(rng, config)) for i in range(config.n_dec_layers)]
        self.dec_norm = self.child("dec_norm", LayerNorm(d))
        self.head = self.child("head", Linear(rng, d, config.target_size))

    def _dropper(self, training):
        p = self.config.dropout
        return lambda x: ops.dropout(x, p, self.dropout_rng, training)

    def encode(self, batch, training=False):
        drop = self._dropper(training)
        x = drop(self.embed(batch.tokens, batch.mask))
        bias = key_padding_bias(batch.mask, x.dtype)
        for layer in self.enc_layers:
            x = layer(x, bias, drop)
        return Encoded(self.enc_norm(x), np.asarray(batch.mask))

    def decode(self, enc, dec_in, training=False):
        dec_in = np.asarray(dec_in)
        T = dec_in.shape[1]
        if T > self.max_target_len + 1:
            raise ValueError(f"decoder length {T} exceeds {self.max_target_len}")
        drop = self._dropper(training)
        y = drop(ops.add(self.tgt_embed(dec_in), self.tgt_pos(np.arange(T))))
        dt = y.dtype
        self_bias = causal_bias(T, dt)
        cross_bias = key_padding_bias(enc.mask, dt)
        for layer in self.dec_layers:
            y = layer(y, enc.memory, self_bias, cross_bias, drop)
        return self.head(self.dec_norm(y))


def build_model(config):
    return TransformerModel(config)


# -- inference ------------------------------------------------------------

def _argmax_lowest(scores):
    # np.argmax already returns the first maximal index
    return np.argmax(scores, axis=-1)


def greedy_decode(model, batch, steps, stop_at_sep=True):
    """Free-running greedy decode.

    Returns ``(ids [B, steps], probs [B, steps, C], live [B, steps])`` where
    ``live`` marks steps before (and excluding) the first SEP, when
    ``stop_at_sep`` is set.
    """
    with no_grad():
        enc = model.encode(batch, training=False)
        B = batch.size
        prev = np.full((B, 1), TARGET_SPECIALS.index(START), dtype=np.int64)
        ids, probs = [], []
        for _ in range(steps):
            logits = model.decode_step(enc, prev)
            p = ops.softmax(logits).data.astype(np.float64)
            nxt = _argmax_lowest(p)
            ids.append(nxt)
            probs.append(p)
            prev = np.concatenate([prev, nxt[:, None]], axis=1)
    ids = np.stack(ids, axis=1) if ids else np.zeros((B, 0), dtype=np.int64)
    probs = np.stack(probs, axis=1) if probs else np.zeros((B, 0, 0))
    live = np.ones(ids.shape, dtype=bool)
    if stop_at_sep:
        stopped = np.cumsum(ids < len(TARGET_SPECIALS), axis=1) > 0
        live = ~stopped
    return ids, probs, live


def m1_predict(model, batch, tgt_vocab):
    """Greedy two-step prediction for each row.

    Returns a list of ``(first, second, probs)`` where ``first``/``second``
    are cost types, or None when the model emits a special token, and
    ``probs`` is the [2, C] probability matrix.
    """
    if getattr(model, "config", None) is not None and model.config.mode != "m1":
        raise ValueError("m1_predict needs an m1-mode model")
    if batch.size == 0 or np.any(batch.mask.sum(axis=1) <= 2):
        raise ValueError("m1_predict needs at least one input visit per row")
    ids, probs, _ = greedy_decode(model, batch, 2, stop_at_sep=False)
    n_spec = len(TARGET_SPECIALS)
    out = []
    for row_ids, row_p in zip(ids, probs):
        toks = [tgt_vocab.token(int(i)) if i >= n_spec else None for i in row_ids]
        out.append((toks[0], toks[1], row_p))
    return out


@dataclass
class YearPrediction:
    patient_id: str
    cost_types: tuple
    expected_costs: tuple
    annual_total: float


def m2_predict_year(model, batch, tgt_vocab, cost_vector, max_steps=None):
    """Decode each row until SEP; expected cost per step is sum_c p_c e_c."""
    steps = model.max_target_len if max_steps is None else max_steps
    ids, probs, live = greedy_decode(model, batch, steps, stop_at_sep=True)
    e = np.asarray(cost_vector, dtype=np.float64)
    exp_cost = probs @ e if probs.size else np.zeros(ids.shape)
    out = []
    for b, pid in enumerate(batch.patient_ids):
        n = int(live[b].sum())
        types = tuple(tgt_vocab.token(int(i)) for i in ids[b, :n])
        costs = tuple(float(c) for c in exp_cost[b, :n])
        out.append(YearPrediction(pid, types, costs, float(sum(costs))))
    return out


def sequence_log_prob(model, batch):
    """Teacher-forced log-probability of each row's target sequence."""
    with no_grad():
        logits = model.forward_logits(batch, training=False)
        logp = ops.log_softmax(logits).data.astype(np.float64)
    picked = np.take_along_axis(logp, batch.dec_out[..., None], axis=-1)[..., 0]
    return (picked * batch.dec_mask).sum(axis=1)


SEP_ID = TARGET_SPECIALS.index(SEP)
