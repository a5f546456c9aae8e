"""Model-driven augmentation of long-follow-up training histories.

Each iteration samples a share of the training patients and rewrites
their first-year visits using the next-visit model (M1):

* first prediction outside the cost-model vocabulary: delete the visit;
* first prediction correct and a usable second prediction: keep the
  visit and inject the second prediction right after it;
* otherwise: replace the visit's cost type with the most likely type
  that the cost model knows.

The rewritten copies are added to the untouched originals. A random arm
uses the same skeleton with uniformly drawn cost types.
"""

from __future__ import annotations

import math
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import (
    YEAR_DAYS,
    InputSequence,
    PatientHistory,
    TARGET_SPECIALS,
    collate,
    encode_pair,
    input_cutoff,
    with_cost_type,
)
from .transformer import greedy_decode

BRANCHES = ("injected", "replaced", "deleted", "unchanged")
DEFAULT_GAP = 30
LABEL_NOISE_NOTE = (
    "replacement overwrites the recorded cost type with the model's prediction; "
    "replaced visits are label noise relative to the source records"
)


class AugmentationError(ValueError):
    pass


@dataclass
class AugmentationConfig:
    sample_ratio: float = 0.55
    n_iterations: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.sample_ratio <= 1.0:
            raise ValueError(f"sample_ratio must be in (0, 1], got {self.sample_ratio}")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")


@dataclass
class AugmentationReport:
    arm: str = "m1"
    injected: int = 0
    replaced: int = 0
    deleted: int = 0
    unchanged: int = 0
    sample_sizes: list = field(default_factory=list)
    dropped_patients: int = 0
    original_patients: int = 0
    aggregate_patients: int = 0
    notes: list = field(default_factory=list)

    @property
    def processed(self):
        return self.injected + self.replaced + self.deleted + self.unchanged

    def count(self, branch):
        setattr(self, branch, getattr(self, branch) + 1)

    def frequencies(self):
        n = self.processed
        if not n:
            raise AugmentationError("no processed visits to take branch frequencies from")
        return {b: getattr(self, b) / n for b in BRANCHES}

    def to_dict(self):
        d = asdict(self)
        d["processed"] = self.processed
        return d


@dataclass
class AugmentationResult:
    patients: list
    report: AugmentationReport


def sample_size(n_patients, ratio):
    return int(math.floor(n_patients * ratio + 1e-9))


def aggregate_size(n_train, ratio, n_iterations, dropped=0):
    """Patients in the aggregate: originals plus every surviving sampled copy."""
    return n_train + n_iterations * sample_size(n_train, ratio) - dropped


def touchable(patient):
    """Indices of visits eligible for rewriting.

    The diagnostic visit (index 0) is kept as the anchor; the rest must lie
    in the first year and before the final-year cutoff.
    """
    limit = touch_limit(patient)
    return [k for k, v in enumerate(patient.visits) if k >= 1 and v.diff_dgn < limit]


def touch_limit(patient):
    return min(YEAR_DAYS, input_cutoff(patient.t))


def median_gap(patient):
    days = patient.days
    gaps = [b - a for a, b in zip(days, days[1:]) if b > a]
    if not gaps:
        return DEFAULT_GAP
    return max(1, int(round(statistics.median(gaps))))


def fill_injected_fields(prev, next_visit, limit, gap, cost_type, cost_table, patient_id=None):
    """Build the injected visit that follows ``prev``.

    Between two rewritable visits it sits at the midpoint; otherwise it
    follows ``prev`` by the patient's median gap, kept below ``limit``.
    """
    if next_visit is not None and next_visit.diff_dgn < limit:
        day = (prev.diff_dgn + next_visit.diff_dgn) // 2
    else:
        day = min(prev.diff_dgn + gap, limit - 1)
    day = max(day, prev.diff_dgn)
    return replace(
        prev,
        patient_id=prev.patient_id if patient_id is None else patient_id,
        diff_dgn=int(day),
        age=prev.age + (day - prev.diff_dgn) // YEAR_DAYS,
        cost_type=cost_type,
        cost_value=float(cost_table[cost_type]),
        provenance="injected",
    )


@dataclass(frozen=True)
class NextVisitPrediction:
    first: object  # cost type or None
    second: object
    scores: dict  # first-step probability per cost type, in id order


class M1Predictor:
    """Batched greedy two-step predictions from a trained next-visit model."""

    def __init__(self, model, vocabs, tgt_vocab, max_len=None, batch_size=256):
        cfg = getattr(model, "config", None)
        if cfg is not None:
            if getattr(cfg, "mode", "m1") != "m1":
                raise AugmentationError("augmentation needs an m1-mode model")
            if cfg.target_size != len(tgt_vocab):
                raise AugmentationError(f"model emits {cfg.target_size} classes, vocabulary has {len(tgt_vocab)}")
            if cfg.vocab_sizes != vocabs.sizes():
                raise AugmentationError("model input vocabulary sizes differ from the data vocabularies")
        self.model = model
        self.vocabs = vocabs
        self.tgt_vocab = tgt_vocab
        self.max_len = max_len or getattr(cfg, "max_input_len", None)
        self.batch_size = batch_size

    @property
    def cost_types(self):
        return [t for t in self.tgt_vocab.tokens if t not in TARGET_SPECIALS]

    def __call__(self, prefixes):
        out = []
        n_spec = len(TARGET_SPECIALS)
        types = self.tgt_vocab.tokens[n_spec:]
        for s in range(0, len(prefixes), self.batch_size):
            chunk = prefixes[s:s + self.batch_size]
            enc = [encode_pair(InputSequence("", tuple(p)), self.vocabs, None, self.max_len, strict=False)
                   for p in chunk]
            ids, probs, _ = greedy_decode(self.model, collate(enc), 2, stop_at_sep=False)
            for row_ids, row_p in zip(ids, probs):
                first, second = (self.tgt_vocab.token(int(i)) if i >= n_spec else None for i in row_ids)
                out.append(NextVisitPrediction(first, second, dict(zip(types, row_p[0, n_spec:].tolist()))))
        return out


def _best_in(scores, allowed):
    best, best_p = None, -math.inf
    for c, p in scores.items():  # id order, so ties keep the lowest id
        if c in allowed and p > best_p:
            best, best_p = c, p
    return best


def _sample(n, ratio, seed, iteration):
    k = sample_size(n, ratio)
    if k == 0:
        raise AugmentationError(f"sample of {n} patients at ratio {ratio} is empty")
    rng = np.random.default_rng(np.random.SeedSequence([seed, iteration, 0x5A]))
    return sorted(rng.choice(n, size=k, replace=False).tolist())


def _rewrite(patient, new_id, decide, cost_table, report):
    """Apply per-visit decisions; ``decide(k)`` returns (branch, cost_type)."""
    limit = touch_limit(patient)
    gap = median_gap(patient)
    eligible = set(touchable(patient))
    visits = patient.visits
    out = []
    for k, v in enumerate(visits):
        v = replace(v, patient_id=new_id)
        if k not in eligible:
            out.append(v)
            continue
        branch, ctype = decide(k)
        report.count(branch)
        if branch == "deleted":
            continue
        if branch == "replaced":
            out.append(with_cost_type(v, ctype, cost_table, "replaced"))
        elif branch == "injected":
            out.append(v)
            nxt = visits[k + 1] if k + 1 < len(visits) else None
            out.append(fill_injected_fields(v, nxt, limit, gap, ctype, cost_table, new_id))
        else:
            out.append(v)
    if not any(x.diff_dgn < limit for x in out):
        return None
    return PatientHistory(new_id, tuple(out))


def _aggregate(train, ratio, config, per_patient, report):
    if not train:
        raise AugmentationError("empty training set")
    patients = list(train)
    report.original_patients = len(patients)
    for it in range(1, config.n_iterations + 1):
        picked = _sample(len(train), ratio, config.seed, it)
        report.sample_sizes.append(len(picked))
        for idx in picked:
            new = per_patient(train[idx], idx, it)
            if new is None:
                report.dropped_patients += 1
            else:
                patients.append(new)
    report.aggregate_patients = len(patients)
    return patients


def augment_with_m1(predictor, train, v2, cost_table, config):
    """Rewrite sampled first-year visits with next-visit predictions.

    ``predictor`` maps a list of visit prefixes to
    :class:`NextVisitPrediction` (an :class:`M1Predictor` or any stand-in).
    The prediction for visit ``k`` uses the unmodified visits before it.
    """
    v2 = frozenset(v2)
    allowed = v2 & frozenset(getattr(predictor, "cost_types", v2))
    if not allowed:
        raise AugmentationError("next-visit model shares no cost types with the cost-model vocabulary")
    report = AugmentationReport(arm="m1", notes=[LABEL_NOISE_NOTE])
    cache = {}

    def predictions(idx, patient):
        if idx not in cache:
            ks = touchable(patient)
            preds = predictor([patient.visits[:k] for k in ks]) if ks else []
            cache[idx] = dict(zip(ks, preds))
        return cache[idx]

    def per_patient(patient, idx, it):
        preds = predictions(idx, patient)

        def decide(k):
            p = preds[k]
            true = patient.visits[k].cost_type
            if p.first is None or p.first not in v2:
                return "deleted", None
            if p.first == true and p.second is not None and p.second in v2:
                return "injected", p.second
            best = _best_in(p.scores, allowed)
            return ("unchanged", None) if best == true else ("replaced", best)

        return _rewrite(patient, f"{patient.patient_id}#aug{it}", decide, cost_table, report)

    patients = _aggregate(list(train), config.sample_ratio, config, per_patient, report)
    return AugmentationResult(patients, report)


def augment_random(train, v2, cost_table, config, frequencies):
    """Random arm: same sampling, branches drawn with ``frequencies``.

    Replacement and injected cost types are uniform over ``v2`` (a
    replacement never redraws the visit's own type).
    """
    types = sorted(v2)
    if not types:
        raise AugmentationError("empty cost-type vocabulary")
    probs = np.array([frequencies.get(b, 0.0) for b in BRANCHES], dtype=np.float64)
    if probs.sum() <= 0:
        raise AugmentationError("branch frequencies sum to zero")
    probs /= probs.sum()
    report = AugmentationReport(arm="random")

    def per_patient(patient, idx, it):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, it, idx, 0x7A]))

        def decide(k):
            branch = BRANCHES[int(rng.choice(len(BRANCHES), p=probs))]
            if branch == "injected":
                return branch, types[int(rng.integers(len(types)))]
            if branch == "replaced":
                others = [c for c in types if c != patient.visits[k].cost_type]
                if not others:
                    return "unchanged", None
                return branch, others[int(rng.integers(len(others)))]
            return branch, None

        return _rewrite(patient, f"{patient.patient_id}#aug{it}", decide, cost_table, report)

    patients = _aggregate(list(train), config.sample_ratio, config, per_patient, report)
    return AugmentationResult(patients, report)


def provenance_counts(patients):
    return dict(Counter(v.provenance for p in patients for v in p.visits))
