"""Visit records, cohort splitting, pair construction and batch encoding.

A patient's history is the list of visits ordered by ``diff_dgn`` (days
since first diagnosis). Patients whose last visit falls before day 365 go
to the short-follow-up cohort (D1), the rest to the long-follow-up cohort
(D2). D1 patients yield next-two-visit pairs for the augmentation model;
D2 patients yield (history, final-year) pairs for the cost model.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

YEAR_DAYS = 365
FIELDS = ("patient_id", "diff_dgn", "age", "gender", "specialist_type", "cost_type", "cost_value")
CATEGORICAL = ("gender", "specialist_type", "cost_type")

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
START = "[START]"
INPUT_SPECIALS = (PAD, CLS, SEP, UNK)
TARGET_SPECIALS = (PAD, START, SEP)

# log-spaced day bins: 0, 1-7, 8-30, 31-90, 91-180, 181-365, 366-730, 731+
DAY_BIN_EDGES = (0, 7, 30, 90, 180, 365, 730)
AGE_BIN_YEARS = 5
AGE_BINS = 25


class DataError(ValueError):
    """Input rows violate the visit-record schema or invariants."""


class PatientSkipped(Exception):
    def __init__(self, patient_id, reason):
        super().__init__(f"{patient_id}: {reason}")
        self.patient_id = patient_id
        self.reason = reason


@dataclass(frozen=True, slots=True)
class VisitRecord:
    patient_id: str
    diff_dgn: int
    age: int
    gender: str
    specialist_type: str
    cost_type: int
    cost_value: float
    provenance: str = "original"


@dataclass(frozen=True)
class PatientHistory:
    patient_id: str
    visits: tuple

    @property
    def t(self):
        """Follow-up duration: diff_dgn of the last visit."""
        return self.visits[-1].diff_dgn

    @property
    def s(self):
        return len(self.visits)

    @property
    def days(self):
        return [v.diff_dgn for v in self.visits]


@dataclass
class CohortSplit:
    d1: list
    d2: list
    v1: frozenset
    v2: frozenset


@dataclass(frozen=True)
class M1Pair:
    patient_id: str
    inputs: tuple
    targets: tuple  # cost types of the last two visits

    @property
    def target_types(self):
        return self.targets

    @property
    def target_costs(self):
        return (0.0,) * len(self.targets)


@dataclass(frozen=True)
class M2Pair:
    patient_id: str
    inputs: tuple
    targets: tuple  # VisitRecords of the final year
    t_input: int
    t_target: int

    @property
    def target_types(self):
        return tuple(v.cost_type for v in self.targets)

    @property
    def target_costs(self):
        return tuple(v.cost_value for v in self.targets)

    @property
    def annual_cost(self):
        return float(sum(v.cost_value for v in self.targets))


@dataclass(frozen=True)
class InputSequence:
    """Visits to encode without any decoder targets (inference)."""

    patient_id: str
    inputs: tuple
    target_types: tuple = ()
    target_costs: tuple = ()


class CostTable(dict):
    """Map cost type -> euro cost of one visit of that type."""

    def __init__(self, items=()):
        super().__init__(items)
        for c, e in self.items():
            if e < 0:
                raise DataError(f"negative cost {e} for cost type {c}")

    def total(self, cost_types):
        return float(sum(self[c] for c in cost_types))

    def vector(self, target_vocab):
        """Per-class costs aligned with ``target_vocab`` ids (specials cost 0)."""
        return np.array([self.get(tok, 0.0) if not _is_special(tok) else 0.0
                         for tok in target_vocab.tokens], dtype=np.float64)


def _is_special(tok):
    return isinstance(tok, str) and tok.startswith("[") and tok.endswith("]")


# -- IO -------------------------------------------------------------------

def _detect_format(path, fmt):
    if fmt:
        return fmt.lower()
    suffix = Path(path).suffix.lower()
    return "jsonl" if suffix in (".jsonl", ".json", ".ndjson") else "csv"


def _iter_rows(path, fmt):
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [f for f in FIELDS if f not in (reader.fieldnames or ())]
            if missing:
                raise DataError(f"{path}: header missing columns {missing}")
            for lineno, row in enumerate(reader, start=2):
                yield lineno, row
    elif fmt == "jsonl":
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
                yield lineno, row
    else:
        raise DataError(f"unknown format {fmt!r}")


def _parse_row(row, lineno):
    missing = [f for f in FIELDS if row.get(f) in (None, "")]
    if missing:
        raise DataError(f"line {lineno}: missing {missing}")
    try:
        rec = VisitRecord(
            patient_id=str(row["patient_id"]),
            diff_dgn=int(row["diff_dgn"]),
            age=int(row["age"]),
            gender=str(row["gender"]),
            specialist_type=str(row["specialist_type"]),
            cost_type=int(row["cost_type"]),
            cost_value=float(row["cost_value"]),
            provenance=str(row.get("provenance") or "original"),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    if rec.diff_dgn < 0:
        raise DataError(f"line {lineno}: diff_dgn {rec.diff_dgn} < 0")
    if rec.cost_value < 0:
        raise DataError(f"line {lineno}: cost_value {rec.cost_value} < 0")
    if rec.age < 0:
        raise DataError(f"line {lineno}: age {rec.age} < 0")
    return rec


def load_visits(path, fmt=None, *, cost_table=None, vocab=None, strict=True):
    """Read and validate visit records from CSV or JSON lines.

    Args:
        path: Input file.
        fmt: ``"csv"`` or ``"jsonl"``; inferred from the suffix when omitted.
        cost_table: When given, every ``cost_value`` must equal the table
            entry for its ``cost_type``.
        vocab: Optional ``{column: set}`` of declared categorical values.
            Unknown values raise in strict mode; otherwise the sets are
            extended in place.
        strict: See ``vocab``.

    Raises:
        DataError: listing every offending line.
    """
    fmt = _detect_format(path, fmt)
    records, problems = [], []
    for lineno, row in _iter_rows(path, fmt):
        try:
            rec = _parse_row(row, lineno)
        except DataError as exc:
            problems.append(str(exc))
            continue
        if cost_table is not None:
            if rec.cost_type not in cost_table:
                problems.append(f"line {lineno}: cost_type {rec.cost_type} not in cost table")
                continue
            if not math.isclose(rec.cost_value, cost_table[rec.cost_type], rel_tol=1e-9, abs_tol=1e-6):
                problems.append(f"line {lineno}: cost_value {rec.cost_value} != table {cost_table[rec.cost_type]}")
                continue
        if vocab is not None:
            bad = False
            for col in CATEGORICAL:
                if col not in vocab:
                    continue
                val = getattr(rec, col)
                if val not in vocab[col]:
                    if strict:
                        problems.append(f"line {lineno}: {col} {val!r} outside declared vocabulary")
                        bad = True
                    else:
                        vocab[col].add(val)
            if bad:
                continue
        records.append(rec)
    if problems:
        head = "; ".join(problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        raise DataError(f"{path}: {len(problems)} invalid rows: {head}{more}")
    return records


def write_visits(records, path, fmt=None, provenance=False):
    fmt = _detect_format(path, fmt)
    cols = FIELDS + (("provenance",) if provenance else ())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in records:
                w.writerow([_fmt_cell(getattr(r, c)) for c in cols])
    else:
        with open(path, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps({c: getattr(r, c) for c in cols}, sort_keys=False) + "\n")
    return Path(path)


def _fmt_cell(v):
    if isinstance(v, float):
        return f"{v:.2f}"
    return v


def load_cost_table(path):
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"cost_type", "cost_value"}:
            raise DataError(f"{path}: cost table needs columns cost_type,cost_value")
        for lineno, row in enumerate(reader, start=2):
            try:
                table[int(row["cost_type"])] = float(row["cost_value"])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: bad cost table row {row}") from None
    return CostTable(table)


def write_cost_table(table, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cost_type", "cost_value"])
        for c in sorted(table):
            w.writerow([c, f"{table[c]:.2f}"])
    return Path(path)


def write_jsonl(rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return Path(path)


# -- cohorts --------------------------------------------------------------

def group_patients(records):
    """Group records into histories sorted by diff_dgn (ties keep input order)."""
    by_id = {}
    for r in records:
        by_id.setdefault(r.patient_id, []).append(r)
    patients = []
    for pid, visits in by_id.items():
        visits = sorted(visits, key=lambda v: v.diff_dgn)  # stable
        if visits[0].diff_dgn != 0:
            raise DataError(f"patient {pid}: first visit at day {visits[0].diff_dgn}, expected 0")
        patients.append(PatientHistory(pid, tuple(visits)))
    return patients


def split_cohort(patients):
    """Partition by follow-up: t < 365 -> D1, t >= 365 -> D2."""
    d1 = [p for p in patients if p.t < YEAR_DAYS]
    d2 = [p for p in patients if p.t >= YEAR_DAYS]
    v1 = frozenset(v.cost_type for p in d1 for v in p.visits)
    v2 = frozenset(v.cost_type for p in d2 for v in p.visits)
    return CohortSplit(d1=d1, d2=d2, v1=v1, v2=v2)


def make_m1_pair(patient):
    """Inputs are visits 1..s-2; targets the cost types of the last two."""
    if patient.s < 3:
        raise PatientSkipped(patient.patient_id, f"needs >= 3 visits, has {patient.s}")
    v = patient.visits
    return M1Pair(patient.patient_id, tuple(v[:-2]), (v[-2].cost_type, v[-1].cost_type))


def input_cutoff(t):
    """First day of the target year for follow-up ``t``."""
    return t - (YEAR_DAYS - 1)


def make_m2_pair(patient):
    """Split a D2 history around the final-year cutoff ``t - 364``.

    t' is the last visit day strictly before the cutoff, t'' the first day
    at or after it; inputs are visits up to t', targets those from t''.
    """
    t = patient.t
    if t < YEAR_DAYS:
        raise PatientSkipped(patient.patient_id, f"follow-up {t} < {YEAR_DAYS} days")
    cut = input_cutoff(t)
    days = patient.days
    before = [x for x in days if 0 <= x < cut]
    after = [x for x in days if cut <= x <= t]
    if not before:
        raise PatientSkipped(patient.patient_id, "no visit before the final-year cutoff")
    t_in, t_out = max(before), min(after)
    inputs = tuple(v for v in patient.visits if v.diff_dgn <= t_in)
    targets = tuple(v for v in patient.visits if v.diff_dgn >= t_out)
    return M2Pair(patient.patient_id, inputs, targets, t_in, t_out)


def _collect(fn, patients, stage):
    pairs, skips = [], []
    for p in patients:
        try:
            pairs.append(fn(p))
        except PatientSkipped as exc:
            skips.append({"patient_id": exc.patient_id, "reason": exc.reason, "stage": stage})
    return pairs, skips


def build_m1_pairs(patients):
    return _collect(make_m1_pair, patients, "m1")


def build_m2_pairs(patients):
    return _collect(make_m2_pair, patients, "m2")


def train_val_test_split(items, ratios=(0.8, 0.1, 0.1), seed=0):
    """Seeded patient-level split; train and val sizes are floored."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be 3 non-negative numbers summing to 1, got {ratios}")
    n = len(items)
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) == 0:
        raise ValueError(f"empty split for n={n} with ratios {ratios}: {(n_train, n_val, n_test)}")
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: [items[i] for i in sorted(idx)]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


# -- vocabularies ---------------------------------------------------------

class Vocab:
    """Token <-> id map with special tokens first."""

    def __init__(self, values=(), specials=INPUT_SPECIALS):
        self.specials = tuple(specials)
        self.tokens = list(self.specials) + sorted(set(values), key=lambda x: (str(type(x)), x))
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, tok, strict=True):
        try:
            return self.index[tok]
        except KeyError:
            if strict or UNK not in self.index:
                raise KeyError(f"{tok!r} not in vocabulary") from None
            return self.index[UNK]

    def token(self, i):
        return self.tokens[i]

    @property
    def n_special(self):
        return len(self.specials)

    def to_json(self):
        return {"specials": list(self.specials), "values": self.tokens[len(self.specials):]}

    @classmethod
    def from_json(cls, obj):
        v = cls((), obj["specials"])
        v.tokens = list(obj["specials"]) + list(obj["values"])
        v.index = {tok: i for i, tok in enumerate(v.tokens)}
        return v


def day_bin(d):
    for i, edge in enumerate(DAY_BIN_EDGES):
        if d <= edge:
            return i
    return len(DAY_BIN_EDGES)


def age_bin(age):
    return min(int(age) // AGE_BIN_YEARS, AGE_BINS - 1)


@dataclass
class InputVocabs:
    gender: Vocab
    specialist_type: Vocab
    cost_type: Vocab
    diff_dgn: Vocab = field(default_factory=lambda: Vocab(range(len(DAY_BIN_EDGES) + 1)))
    age: Vocab = field(default_factory=lambda: Vocab(range(AGE_BINS)))

    VARIABLES = ("diff_dgn", "age", "gender", "specialist_type", "cost_type")

    def sizes(self):
        return {k: len(getattr(self, k)) for k in self.VARIABLES}

    def to_json(self):
        return {k: getattr(self, k).to_json() for k in self.VARIABLES}

    @classmethod
    def from_json(cls, obj):
        return cls(**{k: Vocab.from_json(obj[k]) for k in cls.VARIABLES})


def build_input_vocabs(records):
    return InputVocabs(
        gender=Vocab({r.gender for r in records}),
        specialist_type=Vocab({r.specialist_type for r in records}),
        cost_type=Vocab({r.cost_type for r in records}),
    )


def target_vocab(cost_types):
    return Vocab(cost_types, TARGET_SPECIALS)


# -- encoding -------------------------------------------------------------

@dataclass
class EncodedBatch:
    """Padded model inputs and decoder targets.

    ``tokens[var]`` rows are ``[CLS, v1..vn, SEP, PAD...]``. Decoder input
    is ``[START, c1..cK]`` and output ``[c1..cK, (SEP)]``; ``dec_mask``
    marks scored decoder positions, ``visit_mask`` only the real visits.
    """

    patient_ids: list
    tokens: dict
    mask: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray
    dec_mask: np.ndarray
    visit_mask: np.ndarray
    target_costs: np.ndarray
    truncated: np.ndarray

    @property
    def size(self):
        return self.mask.shape[0]

    @property
    def annual_cost(self):
        return self.target_costs.sum(axis=1)

    @property
    def n_truncated(self):
        return int(self.truncated.sum())


@dataclass(frozen=True)
class EncodedPair:
    patient_id: str
    ids: np.ndarray  # [n_visits + 2, 5]
    targets: np.ndarray  # target-vocab ids
    costs: np.ndarray
    truncated: int


def encode_pair(pair, vocabs, tgt_vocab=None, max_len=None, strict=True):
    visits = list(pair.inputs)
    truncated = 0
    if max_len is not None and len(visits) + 2 > max_len:
        keep = max_len - 2
        if keep < 1:
            raise ValueError(f"max_len {max_len} leaves no room for visits")
        truncated = len(visits) - keep
        visits = visits[-keep:]
    n_var = len(InputVocabs.VARIABLES)
    ids = np.empty((len(visits) + 2, n_var), dtype=np.int64)
    ids[0] = vocabs.diff_dgn.index[CLS]
    ids[-1] = vocabs.diff_dgn.index[SEP]
    for j, v in enumerate(visits, start=1):
        ids[j, 0] = vocabs.diff_dgn.index[day_bin(v.diff_dgn)]
        ids[j, 1] = vocabs.age.index[age_bin(v.age)]
        ids[j, 2] = vocabs.gender.id(v.gender, strict)
        ids[j, 3] = vocabs.specialist_type.id(v.specialist_type, strict)
        ids[j, 4] = vocabs.cost_type.id(v.cost_type, strict)
    types = tuple(pair.target_types)
    if tgt_vocab is not None and types:
        targets = np.array([tgt_vocab.id(c) for c in types], dtype=np.int64)
    else:
        targets = np.zeros(0, dtype=np.int64)
    costs = np.asarray(pair.target_costs, dtype=np.float64)[: len(targets)]
    return EncodedPair(pair.patient_id, ids, targets, costs, truncated)


def collate(encoded, append_sep=True, sep_id=2, start_id=1):
    B = len(encoded)
    L = max(e.ids.shape[0] for e in encoded)
    K = max(len(e.targets) for e in encoded)
    T = K + (1 if append_sep else 0)
    n_var = len(InputVocabs.VARIABLES)
    ids = np.zeros((B, L, n_var), dtype=np.int64)
    mask = np.zeros((B, L))
    dec_in = np.zeros((B, T), dtype=np.int64)
    dec_out = np.zeros((B, T), dtype=np.int64)
    dec_mask = np.zeros((B, T))
    visit_mask = np.zeros((B, T))
    costs = np.zeros((B, T))
    for b, e in enumerate(encoded):
        n = e.ids.shape[0]
        ids[b, :n] = e.ids
        mask[b, :n] = 1
        k = len(e.targets)
        if T:
            dec_in[b, 0] = start_id
            n_in = min(k, T - 1)
            dec_in[b, 1:1 + n_in] = e.targets[:n_in]
            dec_out[b, :k] = e.targets
            visit_mask[b, :k] = 1
            costs[b, :k] = e.costs
            dec_mask[b, :k] = 1
            if append_sep:
                dec_out[b, k] = sep_id
                dec_mask[b, k] = 1
    tokens = {var: ids[:, :, j] for j, var in enumerate(InputVocabs.VARIABLES)}
    return EncodedBatch(
        patient_ids=[e.patient_id for e in encoded],
        tokens=tokens,
        mask=mask,
        dec_in=dec_in,
        dec_out=dec_out,
        dec_mask=dec_mask,
        visit_mask=visit_mask,
        target_costs=costs,
        truncated=np.array([e.truncated for e in encoded], dtype=np.int64),
    )


def encode_batch(pairs, vocabs, tgt_vocab=None, max_len=None, append_sep=True, strict=True):
    """Tokenise, pad and mask a list of pairs (see :class:`EncodedBatch`)."""
    if not pairs:
        raise ValueError("empty batch")
    enc = [encode_pair(p, vocabs, tgt_vocab, max_len, strict) for p in pairs]
    return collate(enc, append_sep=append_sep)


def decode_batch(batch, vocabs):
    """Recover each row's input cost-type sequence from an encoded batch."""
    out = []
    sep = vocabs.cost_type.index[SEP]
    for row, m in zip(batch.tokens["cost_type"], batch.mask):
        seq = []
        for tok, live in zip(row[1:], m[1:]):
            if not live or tok == sep:
                break
            seq.append(vocabs.cost_type.token(int(tok)))
        out.append(tuple(seq))
    return out


def with_cost_type(visit, cost_type, cost_table, provenance):
    return replace(visit, cost_type=cost_type, cost_value=float(cost_table[cost_type]), provenance=provenance)
