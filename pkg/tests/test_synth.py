import pytest

from osacost import synth
from osacost.data import group_patients, write_visits
from osacost.synth import CohortConfig, describe, generate


@pytest.fixture(scope="module")
def default_cohort():
    return generate(CohortConfig(n_patients=2000, seed=0))


def test_default_cohort_matches_calibration(default_cohort):
    records, table = default_cohort
    d = describe(records)
    assert d["n_patients"] == 2000
    assert abs(d["d1_fraction"] - 0.30) <= 0.05
    assert abs(d["d1_visits_mean"] - 10) <= 2.0
    assert d["n_cost_types_d2"] >= 10
    assert all(c in table for c in d["cost_type_histogram"])


def test_all_short_when_everyone_drops_out():
    records, _ = generate(CohortConfig(n_patients=200, dropout=1.0, seed=1))
    d = describe(records)
    assert d["d1_fraction"] == 1.0 and d["d2_patients"] == 0


def test_mostly_long_without_dropout():
    cfg = CohortConfig(n_patients=300, dropout=0.0, early_phase_days=0, gap_mu=4.1, max_visits=20,
                       followup_min=2000, followup_max=3000, seed=2)
    d = describe(generate(cfg)[0])
    assert d["d2_patients"] / d["n_patients"] >= 0.95


def test_histories_are_valid(default_cohort):
    records, table = default_cohort
    for p in group_patients(records[:3000]):
        days = p.days
        assert days[0] == 0 and days == sorted(days)
        assert len(set(days)) == len(days)
        for v in p.visits:
            assert v.cost_value == table[v.cost_type]
            assert v.gender in "MF"
            assert v.age >= 18


def test_describe_edge_cases():
    d = describe([])
    assert d["n_patients"] == 0 and d["d1_fraction"] == 0.0
    records, _ = generate(CohortConfig(n_patients=1, max_visits=3, dropout=0.0, seed=4))
    d = describe(records)
    assert d["n_patients"] == 1 and d["n_visits"] == 3


def test_same_seed_same_bytes(tmp_path):
    cfg = CohortConfig(n_patients=150, seed=9)
    write_visits(generate(cfg)[0], tmp_path / "a.csv")
    write_visits(generate(CohortConfig(n_patients=150, seed=9))[0], tmp_path / "b.csv")
    write_visits(generate(CohortConfig(n_patients=150, seed=10))[0], tmp_path / "c.csv")
    a, b, c = ((tmp_path / n).read_bytes() for n in ("a.csv", "b.csv", "c.csv"))
    assert a == b and a != c


def test_config_validation_and_mapping():
    with pytest.raises(ValueError):
        CohortConfig(dropout=1.5)
    with pytest.raises(ValueError):
        CohortConfig(n_cost_types=1)
    cfg = CohortConfig.from_mapping({"n_patients": "12", "dropout": "0.5"})
    assert cfg.n_patients == 12 and cfg.dropout == 0.5
    with pytest.raises(KeyError):
        CohortConfig.from_mapping({"bogus": "1"})
    assert len(synth.SPECIALISTS) == 5
