import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osacost import data
from osacost.data import (
    CLS, PAD, SEP, DataError, PatientHistory, VisitRecord, build_input_vocabs, build_m1_pairs,
    build_m2_pairs, decode_batch, encode_batch, group_patients, load_visits, make_m2_pair,
    split_cohort, target_vocab, train_val_test_split, write_visits,
)

WORKED_DAYS = (0, 30, 70, 248, 690, 810, 1100, 1140)


def visit(pid, day, ctype=1, age=50, gender="M", spec="pulmonology"):
    return VisitRecord(pid, day, age, gender, spec, ctype, 10.0 * ctype)


def history(pid, days, types=None):
    types = types or [1 + (i % 4) for i in range(len(days))]
    return PatientHistory(pid, tuple(visit(pid, d, c) for d, c in zip(days, types)))


CSV = """patient_id,diff_dgn,age,gender,specialist_type,cost_type,cost_value
A,0,51,M,pulmonology,3,120.0
A,40,51,M,pulmonology,5,80.5
B,0,60,F,ent,3,120.0
"""


# -- loading ------------------------------------------------------------------

def test_load_three_rows(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text(CSV)
    recs = load_visits(p)
    assert len(recs) == 3
    assert recs[1] == VisitRecord("A", 40, 51, "M", "pulmonology", 5, 80.5)
    pats = group_patients(recs)
    assert [x.patient_id for x in pats] == ["A", "B"]
    assert pats[0].t == 40


def test_negative_day_reports_line(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text(CSV + "C,-1,40,M,ent,3,120.0\n")
    with pytest.raises(DataError, match="line 5"):
        load_visits(p)


def test_vocab_strict_and_open(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text(CSV)
    vocab = {"cost_type": {3}}
    with pytest.raises(DataError):
        load_visits(p, vocab=vocab, strict=True)
    recs = load_visits(p, vocab=vocab, strict=False)
    assert len(recs) == 3 and 5 in vocab["cost_type"]


def test_csv_jsonl_round_trip(tmp_path):
    recs = [visit("A", 0, 2), visit("A", 9, 3), visit("B", 0, 1)]
    for name in ("x.csv", "x.jsonl"):
        write_visits(recs, tmp_path / name)
        assert load_visits(tmp_path / name) == recs


def test_first_visit_must_be_day_zero():
    with pytest.raises(DataError):
        group_patients([visit("A", 5)])


# -- cohort split and pairs ------------------------------------------------

def test_split_boundary_365_goes_to_long_cohort():
    pats = [history("a", (0, 364)), history("b", (0, 365)), history("c", (0,))]
    sp = split_cohort(pats)
    assert [p.patient_id for p in sp.d1] == ["a", "c"]
    assert [p.patient_id for p in sp.d2] == ["b"]


def test_worked_split_example():
    pair = make_m2_pair(history("f", WORKED_DAYS))
    assert pair.t_input == 690
    assert pair.t_target == 810
    assert [v.diff_dgn for v in pair.targets] == [810, 1100, 1140]
    assert [v.diff_dgn for v in pair.inputs] == [0, 30, 70, 248, 690]


def test_m2_pair_edge_cases():
    p = make_m2_pair(history("a", (0, 400)))
    assert p.t_input == 0 and [v.diff_dgn for v in p.targets] == [400]
    p = make_m2_pair(history("b", (0, 200, 365)))
    assert [v.diff_dgn for v in p.inputs] == [0] and [v.diff_dgn for v in p.targets] == [200, 365]
    pairs, skips = build_m2_pairs([history("c", (0, 100))])
    assert pairs == [] and skips[0]["patient_id"] == "c"


def test_m1_pairs_skip_short_histories():
    pats = [history("a", (0, 10, 20, 30, 40)), history("b", (0, 5, 9)), history("c", (0, 3))]
    pairs, skips = build_m1_pairs(pats)
    assert [p.patient_id for p in pairs] == ["a", "b"]
    assert [v.diff_dgn for v in pairs[0].inputs] == [0, 10, 20]
    assert pairs[0].targets == (pats[0].visits[3].cost_type, pats[0].visits[4].cost_type)
    assert [v.diff_dgn for v in pairs[1].inputs] == [0]
    assert len(skips) == 1 and skips[0]["patient_id"] == "c"


# -- splitting -----------------------------------------------------------------

def test_train_val_test_sizes_and_determinism():
    a = train_val_test_split(list(range(10)), seed=3)
    assert [len(x) for x in a] == [8, 1, 1]
    assert a == train_val_test_split(list(range(10)), seed=3)
    assert sorted(sum(a, [])) == list(range(10))
    tr, va, te = train_val_test_split(list(range(4885)), seed=0)
    assert 3908 <= len(tr) <= 3910
    with pytest.raises(ValueError):
        train_val_test_split([1, 2], seed=0)


# -- encoding --------------------------------------------------------------------

def _vocabs(pats):
    recs = [v for p in pats for v in p.visits]
    return build_input_vocabs(recs)


def test_encode_layout_and_padding():
    pats = [history("a", (0, 10)), history("b", (0, 5, 9, 20, 40))]
    vocabs = _vocabs(pats)
    seqs = [data.InputSequence(p.patient_id, p.visits) for p in pats]
    batch = encode_batch(seqs, vocabs)
    ct = vocabs.cost_type
    row = batch.tokens["cost_type"][0]
    assert list(row) == [ct.index[CLS], ct.id(1), ct.id(2), ct.index[SEP], ct.index[PAD], ct.index[PAD], ct.index[PAD]]
    assert batch.tokens["cost_type"].shape == (2, 7)
    assert list(batch.mask[0]) == [1, 1, 1, 1, 0, 0, 0]


def test_decoder_arrays_for_m2_pair():
    pat = history("f", WORKED_DAYS)
    pair = make_m2_pair(pat)
    vocabs = _vocabs([pat])
    tv = target_vocab({v.cost_type for v in pat.visits})
    b = encode_batch([pair], vocabs, tv)
    ids = [tv.id(c) for c in pair.target_types]
    assert list(b.dec_in[0]) == [1] + ids
    assert list(b.dec_out[0]) == ids + [2]
    assert list(b.visit_mask[0]) == [1, 1, 1, 0]
    assert list(b.dec_mask[0]) == [1, 1, 1, 1]
    assert b.annual_cost[0] == pytest.approx(pair.annual_cost)


def test_truncation_keeps_most_recent():
    pat = history("a", tuple(range(0, 100, 10)))
    vocabs = _vocabs([pat])
    b = encode_batch([data.InputSequence("a", pat.visits)], vocabs, max_len=5)
    assert b.n_truncated == 7
    assert decode_batch(b, vocabs)[0] == tuple(v.cost_type for v in pat.visits[-3:])


def test_unknown_token_strict_and_unk():
    pat = history("a", (0, 10))
    vocabs = _vocabs([pat])
    other = PatientHistory("b", (visit("b", 0, 99),))
    with pytest.raises(KeyError):
        encode_batch([data.InputSequence("b", other.visits)], vocabs)
    b = encode_batch([data.InputSequence("b", other.visits)], vocabs, strict=False)
    assert b.tokens["cost_type"][0, 1] == vocabs.cost_type.index["[UNK]"]


def test_vocab_json_round_trip():
    vocabs = _vocabs([history("a", (0, 10, 20))])
    again = data.InputVocabs.from_json(json.loads(json.dumps(vocabs.to_json())))
    assert again.sizes() == vocabs.sizes()
    assert again.cost_type == vocabs.cost_type


seq_strategy = st.lists(
    st.lists(st.tuples(st.integers(0, 900), st.integers(1, 12), st.sampled_from("MF")), min_size=1, max_size=12),
    min_size=1, max_size=6,
)


@settings(max_examples=500, deadline=None)
@given(seq_strategy)
def test_encode_decode_round_trip(rows):
    pats = []
    for i, r in enumerate(rows):
        days = sorted({0} | {d for d, _, _ in r})
        types = [c for _, c, _ in r] + [1] * len(days)
        pid = f"p{i}"
        pats.append(PatientHistory(pid, tuple(
            VisitRecord(pid, d, 40 + d // 365, r[0][2], "ent", types[j], 1.0) for j, d in enumerate(days))))
    vocabs = _vocabs(pats)
    seqs = [data.InputSequence(p.patient_id, p.visits) for p in pats]
    batch = encode_batch(seqs, vocabs)
    assert decode_batch(batch, vocabs) == [tuple(v.cost_type for v in p.visits) for p in pats]
    lengths = batch.mask.sum(axis=1)
    assert list(lengths) == [p.s + 2 for p in pats]
    assert batch.tokens["cost_type"].shape[1] == max(p.s for p in pats) + 2
    # padding rows are all PAD for every variable
    for var, arr in batch.tokens.items():
        assert np.all(arr[batch.mask == 0] == 0)


def test_day_and_age_bins():
    assert [data.day_bin(d) for d in (0, 1, 7, 8, 30, 31, 365, 366, 730, 731, 5000)] == [0, 1, 1, 2, 2, 3, 5, 6, 6, 7, 7]
    assert data.age_bin(4) == 0 and data.age_bin(5) == 1 and data.age_bin(200) == data.AGE_BINS - 1
