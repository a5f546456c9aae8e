import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osacost import augmentation as aug
from osacost.augmentation import (
    AugmentationConfig, AugmentationError, NextVisitPrediction, aggregate_size, augment_random,
    augment_with_m1, fill_injected_fields, touchable,
)
from osacost.data import CostTable, PatientHistory, VisitRecord, YEAR_DAYS

TABLE = CostTable({c: 10.0 * c for c in range(1, 10)})
V2 = {1, 2, 3, 4, 5}


def visit(pid, day, ctype, age=50):
    return VisitRecord(pid, day, age, "M", "ent", ctype, TABLE[ctype])


def history(pid, days, types):
    return PatientHistory(pid, tuple(visit(pid, d, c) for d, c in zip(days, types)))


class LookupM1:
    """Predictions keyed by the cost types of the prefix."""

    cost_types = list(range(1, 10))

    def __init__(self, table):
        self.table = table
        self.calls = []

    def __call__(self, prefixes):
        out = []
        for p in prefixes:
            key = tuple(v.cost_type for v in p)
            self.calls.append(key)
            first, second, scores = self.table[key]
            out.append(NextVisitPrediction(first, second, scores))
        return out


class ConstantM1:
    cost_types = list(range(1, 10))

    def __init__(self, rule):
        self.rule = rule

    def __call__(self, prefixes):
        return [self.rule(p) for p in prefixes]


def scores(**kw):
    s = {c: 0.0 for c in range(1, 10)}
    s.update({int(k[1:]): v for k, v in kw.items()})
    return s


# -- hand-traced fixture ----------------------------------------------------------
#
# A: days 0,20,60,200,500 types 1,2,3,4,5. Follow-up 500 -> cutoff 136, so
#    visits at 20 and 60 are rewritable.
#    k=1 prefix (1,): predicts 2 (correct), then 3 -> inject 3 at (20+60)//2 = 40
#    k=2 prefix (1,2): predicts 9, not a cost-model type -> delete day 60
# B: days 0,100,300,700,900 types 1,4,2,3,4. Cutoff 536 -> limit 365, so
#    visits at 100 and 300 are rewritable. Median gap 200.
#    k=1 prefix (1,): predicts 2 but truth is 4 -> replace with best in V2 = 2
#    k=2 prefix (1,4): predicts 2 (correct), then 5 -> inject 5 after day 300;
#    next visit (700) is past the limit, so day = min(300 + 200, 364) = 364

FIXTURE = [
    history("A", (0, 20, 60, 200, 500), (1, 2, 3, 4, 5)),
    history("B", (0, 100, 300, 700, 900), (1, 4, 2, 3, 4)),
]
LOOKUP = {
    (1,): (2, 3, scores(c2=0.5, c9=0.3, c4=0.2)),
    (1, 2): (9, 1, scores(c9=0.7, c1=0.3)),
    (1, 4): (2, 5, scores(c2=0.9, c5=0.1)),
}


def rows(p):
    return [(v.patient_id, v.diff_dgn, v.cost_type, v.cost_value, v.provenance) for v in p.visits]


def test_hand_traced_fixture():
    m1 = LookupM1(LOOKUP)
    res = augment_with_m1(m1, FIXTURE, V2, TABLE, AugmentationConfig(sample_ratio=1.0, n_iterations=1))
    out = {p.patient_id: p for p in res.patients}
    assert list(out) == ["A", "B", "A#aug1", "B#aug1"]
    assert out["A"] == FIXTURE[0] and out["B"] == FIXTURE[1]
    assert rows(out["A#aug1"]) == [
        ("A#aug1", 0, 1, 10.0, "original"),
        ("A#aug1", 20, 2, 20.0, "original"),
        ("A#aug1", 40, 3, 30.0, "injected"),
        ("A#aug1", 200, 4, 40.0, "original"),
        ("A#aug1", 500, 5, 50.0, "original"),
    ]
    assert rows(out["B#aug1"]) == [
        ("B#aug1", 0, 1, 10.0, "original"),
        ("B#aug1", 100, 2, 20.0, "replaced"),
        ("B#aug1", 300, 2, 20.0, "original"),
        ("B#aug1", 364, 5, 50.0, "injected"),
        ("B#aug1", 700, 3, 30.0, "original"),
        ("B#aug1", 900, 4, 40.0, "original"),
    ]
    r = res.report
    assert (r.injected, r.replaced, r.deleted, r.unchanged) == (2, 1, 1, 0)
    assert r.processed == 4
    assert r.sample_sizes == [2] and r.aggregate_patients == 4
    # predictions condition on the untouched prefix
    assert sorted(m1.calls) == [(1,), (1,), (1, 2), (1, 4)]


def test_touchable_excludes_anchor_and_late_visits():
    assert touchable(FIXTURE[0]) == [1, 2]
    assert touchable(FIXTURE[1]) == [1, 2]
    p = history("C", (0, 50, 364, 365, 800), (1, 1, 1, 1, 1))
    assert touchable(p) == [1, 2]  # limit is min(365, 800 - 364)


def test_forced_injection_grows_each_processed_visit():
    pats = [history(f"P{i}", (0, 10, 40, 90, 700, 800), (1, 2, 3, 4, 5, 1)) for i in range(6)]

    def correct(prefix, patients=pats):
        # the visit being predicted is the next one in the source history
        k = len(prefix)
        true = patients[0].visits[k].cost_type
        return NextVisitPrediction(true, 5, scores())

    m1 = ConstantM1(correct)
    res = augment_with_m1(m1, pats, V2, TABLE, AugmentationConfig(sample_ratio=0.5, n_iterations=2, seed=1))
    base = {p.patient_id: p for p in pats}
    for p in res.patients[len(pats):]:
        src = base[p.patient_id.split("#")[0]]
        assert p.s == src.s + len(touchable(src))
    assert res.report.injected == res.report.processed == 2 * 3 * 3


def test_forced_deletion():
    pats = [history(f"P{i}", (0, 10, 40, 90, 700, 800), (1, 2, 3, 4, 5, 1)) for i in range(4)]
    m1 = ConstantM1(lambda p: NextVisitPrediction(9, 1, scores(c9=1.0)))
    res = augment_with_m1(m1, pats, V2, TABLE, AugmentationConfig(sample_ratio=1.0, n_iterations=1))
    assert res.report.deleted == res.report.processed == 4 * 3
    for p in res.patients[4:]:
        assert p.days == [0, 700, 800]


def test_large_cohort_size_accounting():
    assert aug.sample_size(3910, 0.55) == 2150
    assert aggregate_size(3910, 0.55, 3) == 3910 + 3 * 2150 == 10360


def test_fill_injected_fields_examples():
    prev = visit("X", 30, 1, age=60)
    nxt = visit("X", 70, 2)
    v = fill_injected_fields(prev, nxt, 365, 40, 3, TABLE)
    assert (v.diff_dgn, v.cost_type, v.cost_value, v.provenance) == (50, 3, 30.0, "injected")
    end = visit("X", 300, 1, age=60)
    v = fill_injected_fields(end, None, 365, 40, 4, TABLE)
    assert v.diff_dgn == 340 and v.age == 60
    v = fill_injected_fields(end, None, 365, 400, 4, TABLE)
    assert v.diff_dgn == 364


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 363), st.integers(1, 800), st.integers(1, 500), st.booleans(), st.integers(1, 365))
def test_injected_record_invariants(prev_day, delta, gap, has_next, limit_raw):
    limit = max(limit_raw, prev_day + 1)
    prev = visit("X", prev_day, 2, age=40)
    nxt = visit("X", prev_day + delta, 3) if has_next else None
    v = fill_injected_fields(prev, nxt, limit, gap, 4, TABLE)
    assert isinstance(v, VisitRecord)
    assert prev_day <= v.diff_dgn < limit
    if nxt is not None:
        assert v.diff_dgn <= nxt.diff_dgn
    assert v.age == 40 + (v.diff_dgn - prev_day) // YEAR_DAYS
    assert (v.gender, v.specialist_type) == (prev.gender, prev.specialist_type)
    assert v.cost_value == TABLE[4]


def test_errors():
    with pytest.raises(AugmentationError):
        augment_with_m1(LookupM1(LOOKUP), FIXTURE, V2, TABLE, AugmentationConfig(sample_ratio=0.2))
    with pytest.raises(AugmentationError):
        augment_with_m1(LookupM1(LOOKUP), [], V2, TABLE, AugmentationConfig())
    stranger = LookupM1(LOOKUP)
    stranger.cost_types = [7, 8]
    with pytest.raises(AugmentationError):
        augment_with_m1(stranger, FIXTURE, V2, TABLE, AugmentationConfig(sample_ratio=1.0))
    with pytest.raises(ValueError):
        AugmentationConfig(sample_ratio=0.0)


def _random_cohort(rng, n):
    pats = []
    for i in range(n):
        s = int(rng.integers(2, 10))
        days = sorted({0} | set(rng.integers(1, 1200, size=s - 1).tolist()))
        if days[-1] < 365:
            days.append(400 + int(rng.integers(0, 300)))
        types = rng.integers(1, 6, size=len(days)).tolist()
        pats.append(history(f"P{i}", days, types))
    return pats


@settings(max_examples=500, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_closure_over_v2(seed):
    rng = np.random.default_rng(seed)
    pats = _random_cohort(rng, int(rng.integers(4, 9)))

    def noisy(prefix):
        r = np.random.default_rng(len(prefix) * 7919 + prefix[-1].diff_dgn)
        s = {c: float(x) for c, x in zip(range(1, 10), r.random(9))}
        first = int(r.integers(1, 10)) if r.random() < 0.8 else None
        second = int(r.integers(1, 10)) if r.random() < 0.7 else None
        return NextVisitPrediction(first, second, s)

    cfg = AugmentationConfig(sample_ratio=float(rng.uniform(0.3, 1.0)), n_iterations=int(rng.integers(1, 4)), seed=seed)
    res = augment_with_m1(ConstantM1(noisy), pats, V2, TABLE, cfg)
    rnd = augment_random(pats, V2, TABLE, cfg, {"injected": 0.3, "replaced": 0.3, "deleted": 0.2, "unchanged": 0.2})
    for r in (res, rnd):
        assert all(v.cost_type in V2 for p in r.patients for v in p.visits)
        assert len(r.patients) == aggregate_size(len(pats), cfg.sample_ratio, cfg.n_iterations)
        assert r.patients[:len(pats)] == pats
        for p in r.patients:
            assert p.days == sorted(p.days) and p.days[0] == 0
        rep = r.report
        assert rep.processed == rep.injected + rep.replaced + rep.deleted + rep.unchanged
        # visit count bookkeeping
        grown = sum(p.s for p in r.patients[len(pats):])
        src = {p.patient_id: p for p in pats}
        base = sum(src[p.patient_id.split("#")[0]].s for p in r.patients[len(pats):])
        assert grown - base == rep.injected - rep.deleted


def test_random_arm_determinism_and_matched_size():
    pats = _random_cohort(np.random.default_rng(0), 20)
    cfg = AugmentationConfig(sample_ratio=0.55, n_iterations=3, seed=4)
    freqs = {"injected": 0.5, "replaced": 0.5}
    a = augment_random(pats, V2, TABLE, cfg, freqs)
    b = augment_random(pats, V2, TABLE, cfg, freqs)
    assert a.patients == b.patients
    m1 = augment_with_m1(ConstantM1(lambda p: NextVisitPrediction(1, 2, scores(c1=1.0))), pats, V2, TABLE, cfg)
    assert len(a.patients) == len(m1.patients)
    assert a.report.deleted == 0 and a.report.unchanged == 0


def test_report_frequencies_and_notes():
    res = augment_with_m1(LookupM1(LOOKUP), FIXTURE, V2, TABLE, AugmentationConfig(sample_ratio=1.0, n_iterations=1))
    f = res.report.frequencies()
    assert f == {"injected": 0.5, "replaced": 0.25, "deleted": 0.25, "unchanged": 0.0}
    d = res.report.to_dict()
    assert d["processed"] == 4 and d["notes"]
