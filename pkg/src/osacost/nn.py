"""Parameter containers and layers shared by the sequence models."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, get_default_dtype, ops
from .data import InputVocabs

NEG_INF = -1e9


class Module:
    """Named tree of parameter tensors, registered in creation order."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, values):
        t = Tensor(values, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for name, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def n_parameters(self):
        return int(sum(t.size for t in self.parameters()))

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr


def xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(get_default_dtype())


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        super().__init__()
        self.weight = self.param("weight", xavier(rng, d_in, d_out))
        self.bias = self.param("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, rng, n, dim, std=None):
        super().__init__()
        std = 1.0 / math.sqrt(dim) if std is None else std
        self.weight = self.param("weight", rng.normal(0.0, std, size=(n, dim)))

    def __call__(self, ids):
        return ops.embedding(self.weight, ids)


def position_ids(mask, scheme):
    """Per-token position indices for a left-aligned padded batch.

    ``absolute`` counts from the first token; ``recency`` counts back from
    each row's last real token, so the latest visit always has the same
    index whatever the history length. Padding gets index 0.
    """
    mask = np.asarray(mask) > 0
    L = mask.shape[1]
    if scheme == "absolute":
        return np.broadcast_to(np.arange(L), mask.shape)
    if scheme == "recency":
        lengths = mask.sum(axis=1, keepdims=True)
        return np.where(mask, lengths - 1 - np.arange(L), 0)
    raise ValueError(f"unknown position scheme {scheme!r}")


class VisitEmbedding(Module):
    """Sum of one embedding per visit variable, plus an optional learned position."""

    def __init__(self, rng, vocab_sizes, dim, max_len=0, positions="absolute"):
        super().__init__()
        self.tables = {v: self.child(v, Embedding(rng, vocab_sizes[v], dim)) for v in InputVocabs.VARIABLES}
        self.position = self.child("position", Embedding(rng, max_len, dim)) if max_len else None
        self.scheme = positions

    def __call__(self, tokens, mask=None):
        out = None
        for v, table in self.tables.items():
            e = table(tokens[v])
            out = e if out is None else ops.add(out, e)
        if self.position is not None:
            L = out.shape[1]
            if L > self.position.weight.shape[0]:
                raise ValueError(f"sequence length {L} exceeds positional table {self.position.weight.shape[0]}")
            if mask is None:
                mask = np.ones(out.shape[:2])
            out = ops.add(out, self.position(position_ids(mask, self.scheme)))
        return out


def key_padding_bias(mask, dtype):
    """[B, L] 0/1 mask -> additive bias [B, 1, 1, L]."""
    mask = np.asarray(mask)
    return np.where(mask > 0, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def causal_bias(n, dtype):
    """[1, 1, n, n] additive bias hiding future positions."""
    return np.triu(np.full((n, n), NEG_INF), k=1).astype(dtype)[None, None]
