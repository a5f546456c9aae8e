"""Mini-batch training with validation-based early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, backward, no_grad
from .data import collate, encode_pair
from .metrics import m1_loss, m2_losses

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 64
    patience: int = 10
    clip_norm: float = 5.0
    seed: int = 0
    max_input_len: int = 128


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    stopped_early: bool = False


class PairDataset:
    """Pre-encoded pairs, collated on demand into padded batches."""

    def __init__(self, pairs, vocabs, tgt_vocab, max_len=None, append_sep=True, strict=True):
        self.pairs = list(pairs)
        self.append_sep = append_sep
        self.encoded = [encode_pair(p, vocabs, tgt_vocab, max_len, strict) for p in self.pairs]

    def __len__(self):
        return len(self.encoded)

    def batch(self, idx):
        return collate([self.encoded[i] for i in idx], append_sep=self.append_sep)

    def batches(self, batch_size, rng=None, bucket=8):
        """Yield padded batches.

        With ``rng`` the order is shuffled, then rows are length-sorted
        within windows of ``bucket`` batches to cut padding, and the
        resulting batches are shuffled again.
        """
        n = len(self.encoded)
        if rng is None:
            for start in range(0, n, batch_size):
                yield self.batch(np.arange(start, min(start + batch_size, n)))
            return
        order = rng.permutation(n)
        lengths = np.array([e.ids.shape[0] for e in self.encoded])
        groups = []
        window = batch_size * max(bucket, 1)
        for w in range(0, n, window):
            chunk = order[w:w + window]
            chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
            groups.extend(chunk[s:s + batch_size] for s in range(0, len(chunk), batch_size))
        for i in rng.permutation(len(groups)):
            yield self.batch(groups[i])


def m1_objective(cost_vector=None):
    def fn(model, batch, training):
        loss = m1_loss(model.forward_logits(batch, training), batch)
        return loss, {"l2": float(loss.data)}
    return fn


def m2_objective(cost_vector):
    def fn(model, batch, training):
        l1, l2, total = m2_losses(model.forward_logits(batch, training), batch, cost_vector)
        return total, {"l1": float(l1.data), "l2": float(l2.data)}
    return fn


def evaluate_loss(model, dataset, objective, batch_size):
    """Size-weighted mean of the objective over a dataset (no gradients)."""
    total, n = 0.0, 0
    with no_grad():
        for batch in dataset.batches(batch_size):
            loss, _ = objective(model, batch, False)
            total += float(loss.data) * batch.size
            n += batch.size
    return total / max(n, 1)


def fit(model, train, val, objective, config):
    """Train ``model`` in place and restore the best-validation parameters.

    ``train`` and ``val`` are :class:`PairDataset`. With ``epochs=0`` the
    model is returned untouched.
    """
    result = TrainResult()
    if config.epochs <= 0:
        return result
    params = model.parameters()
    opt = Adam(params, lr=config.lr, clip_norm=config.clip_norm)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBA7C]))
    best_state = model.state_dict()
    bad = 0
    for epoch in range(config.epochs):
        running, seen = 0.0, 0
        for step, batch in enumerate(train.batches(config.batch_size, rng)):
            opt.zero_grad()
            loss, parts = objective(model, batch, True)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} step {step}: {parts}")
            backward(loss)
            opt.step()
            running += value * batch.size
            seen += batch.size
        train_loss = running / max(seen, 1)
        val_loss = evaluate_loss(model, val, objective, config.batch_size) if val is not None and len(val) else train_loss
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if val_loss < result.best_val:
            result.best_val, result.best_epoch = val_loss, epoch
            best_state = model.state_dict()
            bad = 0
        else:
            bad += 1
            if config.patience and bad >= config.patience:
                result.stopped_early = True
                break
    model.load_state_dict(best_state)
    return result
