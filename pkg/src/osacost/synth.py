"""Synthetic chronic-care cohorts shaped like sleep-apnea visit data.

Each patient starts at day 0 with a diagnostic visit. Inter-visit gaps are
log-normal, denser during an initial treatment phase. Cost types follow a
per-patient Markov chain (one of a few treatment profiles), with an annual
control visit near each anniversary. A configurable share of patients
stops treatment within the first year.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .data import YEAR_DAYS, CostTable, VisitRecord, group_patients, split_cohort

SPECIALISTS = ("pulmonology", "neurology", "ent", "sleep_nurse", "physiology_lab")


@dataclass
class CohortConfig:
    n_patients: int = 2000
    seed: int = 0
    # maintenance-phase gaps: log-normal with these log-day parameters
    gap_mu: float = math.log(75.0) - 0.5 * 0.6 ** 2
    gap_sigma: float = 0.6
    # initial treatment phase with denser visits
    early_phase_days: int = 90
    early_gap_mu: float = math.log(10.0) - 0.5 * 0.5 ** 2
    early_gap_sigma: float = 0.5
    patient_gap_sd: float = 0.25
    dropout: float = 0.30
    followup_min: int = 450
    followup_max: int = 1500
    max_visits: int = 0  # 0 = unbounded
    n_cost_types: int = 24
    n_profiles: int = 3
    transition_concentration: float = 0.3
    annual_control_prob: float = 0.8
    annual_window: int = 45
    cost_min: float = 30.0
    cost_max: float = 600.0
    age_mean: float = 55.0
    age_sd: float = 12.0
    male_fraction: float = 0.65
    specialist_fidelity: float = 0.85

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError(f"dropout must be in [0, 1], got {self.dropout}")
        if self.n_cost_types < 2:
            raise ValueError("need at least 2 cost types")
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if self.gap_sigma <= 0 or self.early_gap_sigma <= 0:
            raise ValueError("log-normal sigma must be > 0")
        if not 0 < self.cost_min <= self.cost_max:
            raise ValueError("need 0 < cost_min <= cost_max")
        if self.followup_min > self.followup_max or self.followup_min < 0:
            raise ValueError("need 0 <= followup_min <= followup_max")
        if self.n_profiles < 1 or self.max_visits < 0:
            raise ValueError("n_profiles >= 1 and max_visits >= 0 required")
        if not 0.0 <= self.male_fraction <= 1.0 or not 0.0 <= self.specialist_fidelity <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string-valued key/value pairs (config files)."""
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in kinds:
                raise KeyError(f"unknown synth option {key!r}")
            kind = kinds[key]
            kwargs[key] = int(raw) if kind in ("int", int) else float(raw)
        return cls(**kwargs)


@dataclass
class _World:
    """Structural parameters shared by all patients of a cohort."""

    cost_table: CostTable
    initial: np.ndarray  # [C]
    early: np.ndarray  # [P, C, C]
    late: np.ndarray  # [P, C, C]
    control_type: int
    specialist_of: np.ndarray  # [C]


def _world(cfg):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC057]))
    C = cfg.n_cost_types
    costs = np.round(rng.uniform(cfg.cost_min, cfg.cost_max, size=C))
    # a few types dominate; the tail is rare
    popularity = 1.0 / np.arange(1, C + 1) ** 1.1
    popularity = popularity[rng.permutation(C)]

    def chain():
        alpha = cfg.transition_concentration * popularity / popularity.mean()
        return np.stack([rng.dirichlet(alpha) for _ in range(C)])

    early = np.stack([chain() for _ in range(cfg.n_profiles)])
    late = np.stack([chain() for _ in range(cfg.n_profiles)])
    initial = rng.dirichlet(np.full(C, 0.5))
    control = int(np.argmax(popularity))
    specialist_of = rng.integers(0, len(SPECIALISTS), size=C)
    table = CostTable({c + 1: float(costs[c]) for c in range(C)})
    return _World(table, initial, early, late, control, specialist_of)


def _patient(cfg, world, index):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    pid = f"P{index:06d}"
    age0 = int(np.clip(round(rng.normal(cfg.age_mean, cfg.age_sd)), 18, 90))
    gender = "M" if rng.random() < cfg.male_fraction else "F"
    profile = int(rng.integers(cfg.n_profiles))
    frailty = math.exp(rng.normal(0.0, cfg.patient_gap_sd))
    if rng.random() < cfg.dropout:
        horizon = int(rng.integers(0, YEAR_DAYS))
    else:
        horizon = int(rng.integers(cfg.followup_min, cfg.followup_max + 1))

    C = cfg.n_cost_types
    day, state = 0, int(rng.choice(C, p=world.initial))
    last_control_year = 0
    visits = []
    while True:
        year = day // YEAR_DAYS
        near_anniversary = day >= YEAR_DAYS - cfg.annual_window and (
            (day % YEAR_DAYS) <= cfg.annual_window or (day % YEAR_DAYS) >= YEAR_DAYS - cfg.annual_window
        )
        anniversary = (day + cfg.annual_window) // YEAR_DAYS
        if visits and near_anniversary and anniversary > last_control_year and rng.random() < cfg.annual_control_prob:
            state = world.control_type
            last_control_year = anniversary
        spec = world.specialist_of[state] if rng.random() < cfg.specialist_fidelity else rng.integers(len(SPECIALISTS))
        c = state + 1
        visits.append(VisitRecord(
            patient_id=pid,
            diff_dgn=day,
            age=age0 + year,
            gender=gender,
            specialist_type=SPECIALISTS[int(spec)],
            cost_type=c,
            cost_value=world.cost_table[c],
        ))
        if cfg.max_visits and len(visits) >= cfg.max_visits:
            break
        if day < cfg.early_phase_days:
            gap = rng.lognormal(cfg.early_gap_mu, cfg.early_gap_sigma)
            trans = world.early[profile]
        else:
            gap = rng.lognormal(cfg.gap_mu, cfg.gap_sigma)
            trans = world.late[profile]
        day += max(1, int(round(gap * frailty)))
        if day > horizon:
            break
        state = int(rng.choice(C, p=trans[state]))
    return visits


def generate(config):
    """Generate a cohort; returns ``(records, cost_table)``.

    Deterministic in ``config``: patient ``i`` draws from its own stream
    seeded by ``(seed, i)``.
    """
    config.validate()
    world = _world(config)
    records = []
    for i in range(config.n_patients):
        records.extend(_patient(config, world, i))
    return records, world.cost_table


def describe(records):
    """Summary statistics of a cohort (all zeros when empty)."""
    patients = group_patients(records) if records else []
    n = len(patients)
    counts = np.array([p.s for p in patients]) if n else np.zeros(0)
    follow = np.array([p.t for p in patients]) if n else np.zeros(0)
    split = split_cohort(patients)
    hist = {}
    for r in records:
        hist[r.cost_type] = hist.get(r.cost_type, 0) + 1

    def q(a, p):
        return float(np.quantile(a, p)) if a.size else 0.0

    d1_counts = [p.s for p in split.d1]
    d2_counts = [p.s for p in split.d2]
    return {
        "n_patients": n,
        "n_visits": len(records),
        "visits_per_patient_mean": float(counts.mean()) if n else 0.0,
        "followup_days": {"min": q(follow, 0), "q25": q(follow, 0.25), "median": q(follow, 0.5),
                          "q75": q(follow, 0.75), "max": q(follow, 1)},
        "d1_patients": len(split.d1),
        "d2_patients": len(split.d2),
        "d1_fraction": len(split.d1) / n if n else 0.0,
        "d1_visits_mean": float(np.mean(d1_counts)) if d1_counts else 0.0,
        "d2_visits_mean": float(np.mean(d2_counts)) if d2_counts else 0.0,
        "n_cost_types_d1": len(split.v1),
        "n_cost_types_d2": len(split.v2),
        "cost_type_histogram": {int(k): hist[k] for k in sorted(hist)},
    }
