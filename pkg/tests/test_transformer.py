import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osacost.autodiff import default_dtype, no_grad, ops
from osacost.data import TARGET_SPECIALS, build_m1_pairs, encode_batch
from osacost.nn import position_ids
from osacost.transformer import (
    SEP_ID, TransformerConfig, TransformerModel, greedy_decode, m1_predict, m2_predict_year, sequence_log_prob,
)

from toy import TABLE, input_batch, m2_batch, random_patients, vocabs_for

PATS = random_patients(np.random.default_rng(0), 12)
PAIRS, BATCH, VOCABS, TV = m2_batch(PATS)
COSTS = TABLE.vector(TV)


def tiny(mode="m2", seed=0, **kw):
    cfg = dict(vocab_sizes=VOCABS.sizes(), target_size=len(TV), mode=mode, n_enc_layers=1, n_dec_layers=1,
               n_heads=2, model_dim=8, ffn_dim=16, dropout=0.0, max_input_len=40, seed=seed)
    cfg.update(kw)
    return TransformerModel(TransformerConfig(**cfg))


MODEL = tiny()


def _logits(model, batch, dec_in=None):
    with no_grad():
        enc = model.encode(batch)
        return model.decode(enc, batch.dec_in if dec_in is None else dec_in).data


def _pad(batch, extra, rng):
    """Append ``extra`` padding columns filled with arbitrary token ids."""
    B, L = batch.mask.shape
    tokens = {}
    for v, ids in batch.tokens.items():
        junk = rng.integers(0, VOCABS.sizes()[v], size=(B, L + extra))
        junk[:, :L] = np.where(batch.mask > 0, ids, junk[:, :L])
        tokens[v] = junk
    mask = np.concatenate([batch.mask, np.zeros((B, extra))], axis=1)
    return dataclasses.replace(batch, tokens=tokens, mask=mask)


def _rows(batch, idx):
    n = int(batch.mask[idx].sum())
    return dataclasses.replace(
        batch,
        patient_ids=[batch.patient_ids[i] for i in idx],
        tokens={v: t[idx][:, :n] for v, t in batch.tokens.items()},
        mask=batch.mask[idx][:, :n],
        dec_in=batch.dec_in[idx], dec_out=batch.dec_out[idx], dec_mask=batch.dec_mask[idx],
        visit_mask=batch.visit_mask[idx], target_costs=batch.target_costs[idx], truncated=batch.truncated[idx],
    )


class TestConfig:
    def test_m1_horizon_fixed(self):
        assert tiny("m1").max_target_len == 2

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            tiny(n_heads=3)

    def test_bad_positions(self):
        with pytest.raises(ValueError):
            tiny(positions="sinusoid")

    def test_same_seed_same_weights(self):
        a, b = tiny(seed=3).state_dict(), tiny(seed=3).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = tiny(seed=4).state_dict()
        assert any(not np.array_equal(a[k], c[k]) for k in a)


class TestShapes:
    def test_logits_shape(self):
        out = _logits(MODEL, BATCH)
        assert out.shape == BATCH.dec_in.shape + (len(TV),)

    def test_encoders_of_both_modes_agree_in_shape(self):
        m1, m2 = tiny("m1"), tiny("m2")
        names1 = {k: v.shape for k, v in m1.named_parameters() if k.startswith(("embed", "enc"))}
        names2 = {k: v.shape for k, v in m2.named_parameters() if k.startswith(("embed", "enc"))}
        assert names1 == names2
        with no_grad():
            assert m1.encode(BATCH).memory.shape == m2.encode(BATCH).memory.shape

    def test_input_too_long(self):
        with pytest.raises(ValueError):
            tiny(max_input_len=4).encode(BATCH)

    def test_position_ids(self):
        mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]])
        assert position_ids(mask, "recency").tolist() == [[2, 1, 0, 0], [1, 0, 0, 0]]
        assert position_ids(mask, "absolute").tolist() == [[0, 1, 2, 3], [0, 1, 2, 3]]


@settings(max_examples=500, deadline=None)
@given(seed=st.integers(0, 2**31), j=st.integers(0, 6))
def test_future_targets_do_not_leak(seed, j):
    rng = np.random.default_rng(seed)
    T = 8
    dec = rng.integers(0, len(TV), size=(BATCH.size, T))
    alt = dec.copy()
    alt[:, j + 1:] = rng.integers(0, len(TV), size=(BATCH.size, T - j - 1))
    a, b = _logits(MODEL, BATCH, dec), _logits(MODEL, BATCH, alt)
    np.testing.assert_array_equal(a[:, :j + 1], b[:, :j + 1])


def test_future_change_does_move_later_positions():
    dec = np.ones((BATCH.size, 4), dtype=np.int64)
    alt = dec.copy()
    alt[:, 1] = 5
    a, b = _logits(MODEL, BATCH, dec), _logits(MODEL, BATCH, alt)
    assert not np.allclose(a[:, 1:], b[:, 1:])


@settings(max_examples=500, deadline=None)
@given(seed=st.integers(0, 2**31), extra=st.integers(1, 6))
def test_padding_contents_and_width_ignored(seed, extra):
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(BATCH.size, size=int(rng.integers(1, 5)), replace=False))
    sub = _rows(BATCH, idx)
    base = _logits(MODEL, sub)
    padded = _logits(MODEL, _pad(sub, extra, rng))
    np.testing.assert_allclose(padded, base, rtol=1e-5, atol=1e-5)
    # each row alone, with no padding at all
    i = int(rng.integers(len(idx)))
    alone = _logits(MODEL, _rows(BATCH, idx[i:i + 1]))
    np.testing.assert_allclose(base[i:i + 1], alone, rtol=1e-5, atol=1e-5)


class TestInference:
    def test_m2_expected_cost_is_probability_weighted(self):
        preds = m2_predict_year(MODEL, BATCH, TV, COSTS, max_steps=6)
        ids, probs, live = greedy_decode(MODEL, BATCH, 6)
        for b, p in enumerate(preds):
            n = int(live[b].sum())
            assert len(p.cost_types) == n
            manual = [float(np.dot(probs[b, k], COSTS)) for k in range(n)]
            np.testing.assert_allclose(p.expected_costs, manual, rtol=1e-12)
            assert p.annual_total == pytest.approx(sum(manual))
            assert all(0.0 <= c <= COSTS.max() + 1e-9 for c in p.expected_costs)

    def test_probabilities_sum_to_one(self):
        _, probs, _ = greedy_decode(MODEL, BATCH, 3)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_forced_sep_gives_empty_year(self):
        model = tiny()
        model.head.bias.data[SEP_ID] = 1e4
        for p in m2_predict_year(model, BATCH, TV, COSTS):
            assert p.cost_types == () and p.annual_total == 0.0

    def test_m1_predict(self):
        m1 = tiny("m1")
        pairs, _ = build_m1_pairs(PATS)
        batch = encode_batch(pairs, VOCABS, TV, append_sep=False)
        out = m1_predict(m1, batch, TV)
        assert len(out) == len(pairs)
        for first, second, probs in out:
            assert probs.shape == (2, len(TV))
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
            assert first is None or first in TV
            assert second is None or second in TV

    def test_m1_predict_rejects_m2_model(self):
        with pytest.raises(ValueError):
            m1_predict(MODEL, input_batch(PATS, VOCABS), TV)

    def test_sequence_log_prob_matches_loss_pieces(self):
        lp = sequence_log_prob(MODEL, BATCH)
        with no_grad():
            logp = ops.log_softmax(MODEL.forward_logits(BATCH)).data
        for b in range(BATCH.size):
            manual = sum(float(logp[b, t, BATCH.dec_out[b, t]]) for t in range(BATCH.dec_out.shape[1])
                         if BATCH.dec_mask[b, t])
            assert lp[b] == pytest.approx(manual, rel=1e-5)


def test_dropout_only_in_training():
    model = tiny(dropout=0.5)
    with no_grad():
        a = model.forward_logits(BATCH, training=False).data
        b = model.forward_logits(BATCH, training=False).data
        c = model.forward_logits(BATCH, training=True).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_float64_forward_runs():
    with default_dtype(np.float64):
        model = tiny()
        with no_grad():
            assert model.forward_logits(BATCH).dtype == np.float64
