"""End-to-end experiment: data, next-visit model, augmentation arms, cost models, report.

Every stage reads its inputs from and writes its outputs to the run
directory, so stages can run one at a time from the command line or all
together with :meth:`Experiment.run`.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .augmentation import AugmentationConfig, M1Predictor, augment_random, augment_with_m1
from .baselines import VARIANTS, RecurrentConfig, RecurrentSeq2Seq
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    InputVocabs, Vocab, build_input_vocabs, build_m1_pairs, build_m2_pairs, group_patients,
    load_cost_table, load_visits, split_cohort, target_vocab, train_val_test_split, write_cost_table,
    write_jsonl, write_visits,
)
from .evaluation import evaluate_m1, evaluate_m2
from .report import build_report, render_table
from .synth import CohortConfig, describe, generate
from .training import PairDataset, TrainConfig, fit, m1_objective, m2_objective
from .transformer import TransformerConfig, TransformerModel

log = logging.getLogger(__name__)

ARMS = ("original", "random", "m1")
MODELS = ("transformer",) + tuple(VARIANTS)
SPLITS = ("train", "val", "test")


class PipelineError(RuntimeError):
    pass


def derive_seed(seed, *names):
    """Stable child seed for a named purpose."""
    keys = [zlib.crc32(n.encode()) for n in names]
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# -- configuration ------------------------------------------------------------

_TRANSFORMER_KEYS = ("n_enc_layers", "n_dec_layers", "n_heads", "model_dim", "ffn_dim", "dropout",
                     "max_input_len", "max_target_len")
_BASELINE_KEYS = ("hidden_dim", "embed_dim", "attn_dim", "dropout")


@dataclass
class ExperimentConfig:
    seed: int = 0
    data_path: str = ""
    cost_table_path: str = ""
    synth: CohortConfig = field(default_factory=CohortConfig)
    split_ratios: tuple = (0.8, 0.1, 0.1)
    m1: dict = field(default_factory=dict)
    m2: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_m1: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100))
    arms: tuple = ARMS
    models: tuple = MODELS

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self), default=list))


def _coerce(value, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def _dataclass_from(section, proto, name):
    values = {}
    fields = {f.name: getattr(proto, f.name) for f in dataclasses.fields(proto)}
    for key, raw in section.items():
        if key not in fields:
            raise PipelineError(f"[{name}] unknown option {key!r}")
        values[key] = _coerce(raw, fields[key])
    return dataclasses.replace(proto, **values)


def _dims(section, allowed, name):
    out = {}
    for key, raw in section.items():
        if key not in allowed:
            raise PipelineError(f"[{name}] unknown option {key!r}")
        out[key] = float(raw) if key == "dropout" else int(raw)
    return out


def _names(raw, allowed, what):
    names = tuple(x.strip() for x in raw.split(",") if x.strip())
    bad = [x for x in names if x not in allowed]
    if bad:
        raise PipelineError(f"unknown {what}: {bad}; choose from {list(allowed)}")
    return names


def load_config(path=None, seed=None):
    """Read an INI experiment file; missing sections keep their defaults."""
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise PipelineError(f"cannot read config {path}")
        known = {"experiment", "data", "synth", "split", "m1", "m2", "baseline", "augment", "train", "train_m1"}
        unknown = set(parser.sections()) - known
        if unknown:
            raise PipelineError(f"unknown config sections {sorted(unknown)}")
        if parser.has_section("experiment"):
            sec = dict(parser["experiment"])
            cfg.seed = int(sec.pop("seed", cfg.seed))
            if "arms" in sec:
                cfg.arms = _names(sec.pop("arms"), ARMS, "arms")
            if "models" in sec:
                cfg.models = _names(sec.pop("models"), MODELS, "models")
            if sec:
                raise PipelineError(f"[experiment] unknown options {sorted(sec)}")
        if parser.has_section("data"):
            sec = dict(parser["data"])
            cfg.data_path = sec.pop("visits", "")
            cfg.cost_table_path = sec.pop("cost_table", "")
            if sec:
                raise PipelineError(f"[data] unknown options {sorted(sec)}")
            base = Path(path).parent
            if cfg.data_path:
                cfg.data_path = str((base / cfg.data_path).resolve())
                cfg.cost_table_path = str((base / cfg.cost_table_path).resolve()) if cfg.cost_table_path else ""
                if not Path(cfg.data_path).exists():
                    raise PipelineError(f"visits file {cfg.data_path} does not exist")
        if parser.has_section("synth"):
            cfg.synth = CohortConfig.from_mapping(dict(parser["synth"]))
        if parser.has_section("split"):
            sec = dict(parser["split"])
            if "ratios" in sec:
                cfg.split_ratios = tuple(float(x) for x in sec.pop("ratios").split(","))
            if sec:
                raise PipelineError(f"[split] unknown options {sorted(sec)}")
        for name in ("m1", "m2"):
            if parser.has_section(name):
                cfg.__dict__[name] = _dims(parser[name], _TRANSFORMER_KEYS, name)
        if parser.has_section("baseline"):
            cfg.baseline = _dims(parser["baseline"], _BASELINE_KEYS, "baseline")
        if parser.has_section("augment"):
            cfg.augment = _dataclass_from(parser["augment"], cfg.augment, "augment")
        for name in ("train", "train_m1"):
            if parser.has_section(name):
                setattr(cfg, name, _dataclass_from(parser[name], getattr(cfg, name), name))
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


DEFAULT_CONFIG = """\
# Experiment configuration (INI). Every option is optional.
[experiment]
seed = 0
arms = original,random,m1
models = transformer,lstm,lstm_attn,bilstm,bilstm_attn

[data]
# visits = visits.csv        ; use a real extract instead of a synthetic cohort
# cost_table = costs.csv

[synth]
n_patients = 2000
seed = 0

[split]
ratios = 0.8,0.1,0.1

[m1]
model_dim = 64
n_heads = 4

[m2]
model_dim = 64
n_heads = 4

[baseline]
hidden_dim = 64

[augment]
sample_ratio = 0.55
n_iterations = 3

[train]
epochs = 60
lr = 0.001
batch_size = 64
patience = 10

[train_m1]
epochs = 100
"""


# -- helpers ----------------------------------------------------------------

def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _read_json(path):
    return json.loads(Path(path).read_text())


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Prepared:
    records: list
    cost_table: dict
    vocabs: InputVocabs
    tv1: Vocab
    tv2: Vocab
    patients: dict
    m1_pairs: dict
    m2_pairs: dict
    m2_patients: dict


class Experiment:
    def __init__(self, config, out_dir):
        self.config = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._prepared = None

    # paths
    def path(self, *parts):
        return self.out.joinpath(*parts)

    def _record(self, stage, outputs, started):
        mpath = self.path("manifest.json")
        manifest = _read_json(mpath) if mpath.exists() else {"version": __version__, "stages": {}}
        manifest["config"] = self.config.to_dict()
        manifest["stages"][stage] = {
            "outputs": {str(Path(p).relative_to(self.out)): _sha256(p) for p in outputs},
            "seconds": round(time.perf_counter() - started, 2),
        }
        _write_json(mpath, manifest)

    # -- stages -------------------------------------------------------------

    def synth(self):
        t0 = time.perf_counter()
        records, table = generate(self.config.synth)
        outs = [
            write_visits(records, self.path("data", "visits.csv")),
            write_cost_table(table, self.path("data", "cost_table.csv")),
            _write_json(self.path("data", "cohort.json"), describe(records)),
        ]
        self._record("synth", outs, t0)
        return outs

    def _sources(self):
        if self.config.data_path:
            if not self.config.cost_table_path:
                raise PipelineError("[data] visits needs a matching cost_table")
            return Path(self.config.data_path), Path(self.config.cost_table_path)
        visits = self.path("data", "visits.csv")
        if not visits.exists():
            raise PipelineError(f"{visits} missing: run `synth` first or set [data] visits")
        return visits, self.path("data", "cost_table.csv")

    def prepare(self):
        t0 = time.perf_counter()
        visits_path, table_path = self._sources()
        table = load_cost_table(table_path)
        records = load_visits(visits_path, cost_table=table)
        patients = group_patients(records)
        split = split_cohort(patients)
        m1_pairs, skip1 = build_m1_pairs(split.d1)
        m2_pairs, skip2 = build_m2_pairs(split.d2)
        seed = self.config.seed
        ratios = self.config.split_ratios
        if len(m1_pairs) < 10:
            raise PipelineError(f"only {len(m1_pairs)} usable short-follow-up patients; need >= 10")
        s1 = train_val_test_split([p.patient_id for p in m1_pairs], ratios, derive_seed(seed, "split-m1"))
        s2 = train_val_test_split([p.patient_id for p in m2_pairs], ratios, derive_seed(seed, "split-m2"))
        prepared = {
            "m1": dict(zip(SPLITS, s1)),
            "m2": dict(zip(SPLITS, s2)),
            "input_vocabs": build_input_vocabs(records).to_json(),
            "v1": sorted(split.v1),
            "v2": sorted(split.v2),
            "counts": {"patients": len(patients), "d1": len(split.d1), "d2": len(split.d2),
                       "m1_pairs": len(m1_pairs), "m2_pairs": len(m2_pairs)},
            "sources": {"visits": _sha256(visits_path), "cost_table": _sha256(table_path)},
        }
        outs = [_write_json(self.path("prepared", "split.json"), prepared)]
        outs.append(write_jsonl(skip1 + skip2, self.path("prepared", "skipped.jsonl")))
        self._prepared = None
        self._record("prepare", outs, t0)
        return outs

    def load_prepared(self):
        if self._prepared is not None:
            return self._prepared
        split_path = self.path("prepared", "split.json")
        if not split_path.exists():
            raise PipelineError("run `prepare` first")
        meta = _read_json(split_path)
        visits_path, table_path = self._sources()
        table = load_cost_table(table_path)
        records = load_visits(visits_path, cost_table=table)
        patients = {p.patient_id: p for p in group_patients(records)}
        split = split_cohort(list(patients.values()))
        m1_all = {p.patient_id: p for p in build_m1_pairs(split.d1)[0]}
        m2_all = {p.patient_id: p for p in build_m2_pairs(split.d2)[0]}
        self._prepared = Prepared(
            records=records,
            cost_table=table,
            vocabs=InputVocabs.from_json(meta["input_vocabs"]),
            tv1=target_vocab(meta["v1"]),
            tv2=target_vocab(meta["v2"]),
            patients=patients,
            m1_pairs={s: [m1_all[i] for i in meta["m1"][s]] for s in SPLITS},
            m2_pairs={s: [m2_all[i] for i in meta["m2"][s]] for s in SPLITS},
            m2_patients={s: [patients[i] for i in meta["m2"][s]] for s in SPLITS},
        )
        return self._prepared

    def _transformer_config(self, mode, prep, seed):
        dims = self.config.m1 if mode == "m1" else self.config.m2
        tv = prep.tv1 if mode == "m1" else prep.tv2
        return TransformerConfig(vocab_sizes=prep.vocabs.sizes(), target_size=len(tv), mode=mode, seed=seed, **dims)

    def train_m1(self):
        t0 = time.perf_counter()
        prep = self.load_prepared()
        seed = derive_seed(self.config.seed, "m1")
        cfg = self._transformer_config("m1", prep, seed)
        model = TransformerModel(cfg)
        ds = {s: PairDataset(prep.m1_pairs[s], prep.vocabs, prep.tv1, cfg.max_input_len, append_sep=False)
              for s in SPLITS}
        tc = dataclasses.replace(self.config.train_m1, seed=seed)
        result = fit(model, ds["train"], ds["val"], m1_objective(), tc)
        report = {s: evaluate_m1(model, ds[s]) for s in SPLITS}
        report["best_epoch"] = result.best_epoch
        outs = [
            save_checkpoint(self.path("m1", "model.ccf"), model, prep.vocabs, prep.tv1, {"role": "m1"}),
            _write_json(self.path("m1", "report.json"), report),
            _write_json(self.path("m1", "history.json"), result.history),
        ]
        self._record("train-m1", outs, t0)
        return report

    def augment(self, arm):
        if arm not in ("m1", "random"):
            raise PipelineError(f"augmentation arm must be m1 or random, got {arm!r}")
        t0 = time.perf_counter()
        prep = self.load_prepared()
        report_path = self.path("m1", "report.json")
        if not report_path.exists() or not self.path("m1", "model.ccf").exists():
            raise PipelineError("augmentation needs a trained and evaluated next-visit model: run `train-m1`")
        acfg = dataclasses.replace(self.config.augment, seed=derive_seed(self.config.seed, "augment"))
        train = prep.m2_patients["train"]
        v2 = set(prep.tv2.tokens[prep.tv2.n_special:])
        if arm == "m1":
            model, vocabs, tv1, _ = load_checkpoint(self.path("m1", "model.ccf"))
            predictor = M1Predictor(model, vocabs, tv1)
            result = augment_with_m1(predictor, train, v2, prep.cost_table, acfg)
        else:
            m1_report = self.path("augment", "m1", "report.json")
            if not m1_report.exists():
                raise PipelineError("the random arm mirrors the m1 arm's branch frequencies: run `augment --arm m1` first")
            stats = _read_json(m1_report)
            freqs = {b: stats[b] / max(stats["processed"], 1) for b in ("injected", "replaced", "deleted", "unchanged")}
            result = augment_random(train, v2, prep.cost_table, acfg, freqs)
        records = [v for p in result.patients for v in p.visits]
        outs = [
            write_visits(records, self.path("augment", arm, "visits.csv"), provenance=True),
            _write_json(self.path("augment", arm, "report.json"), result.report.to_dict()),
        ]
        self._record(f"augment-{arm}", outs, t0)
        return result.report

    def _train_pairs(self, arm, prep):
        if arm == "original":
            return prep.m2_pairs["train"]
        path = self.path("augment", arm, "visits.csv")
        if not path.exists():
            raise PipelineError(f"run `augment --arm {arm}` first")
        patients = group_patients(load_visits(path, cost_table=prep.cost_table))
        pairs, skips = build_m2_pairs(patients)
        if skips:
            log.warning("%d augmented patients lost their input window", len(skips))
        return pairs

    def build_model(self, name, prep, seed):
        if name == "transformer":
            return TransformerModel(self._transformer_config("m2", prep, seed))
        if name not in VARIANTS:
            raise PipelineError(f"unknown model {name!r}; choose from {list(MODELS)}")
        max_t = self.config.m2.get("max_target_len", TransformerConfig.max_target_len)
        cfg = RecurrentConfig.variant(name, vocab_sizes=prep.vocabs.sizes(), target_size=len(prep.tv2),
                                      seed=seed, max_target_len=max_t, **self.config.baseline)
        return RecurrentSeq2Seq(cfg)

    def _datasets(self, arm, prep, max_len):
        return {
            "train": PairDataset(self._train_pairs(arm, prep), prep.vocabs, prep.tv2, max_len),
            "val": PairDataset(prep.m2_pairs["val"], prep.vocabs, prep.tv2, max_len),
            "test": PairDataset(prep.m2_pairs["test"], prep.vocabs, prep.tv2, max_len),
        }

    def train_m2(self, model_name, arm):
        if arm not in ARMS:
            raise PipelineError(f"unknown arm {arm!r}")
        t0 = time.perf_counter()
        prep = self.load_prepared()
        seed = derive_seed(self.config.seed, "m2", model_name)
        model = self.build_model(model_name, prep, seed)
        max_len = self.config.m2.get("max_input_len", TransformerConfig.max_input_len)
        ds = self._datasets(arm, prep, max_len)
        cv = prep.cost_table.vector(prep.tv2)
        tc = dataclasses.replace(self.config.train, seed=seed)
        result = fit(model, ds["train"], ds["val"], m2_objective(cv), tc)
        cell = self.path("m2", arm, model_name)
        outs = [
            save_checkpoint(cell / "model.ccf", model, prep.vocabs, prep.tv2, {"role": "m2", "arm": arm}),
            _write_json(cell / "history.json", {"history": result.history, "best_epoch": result.best_epoch,
                                                "stopped_early": result.stopped_early}),
        ]
        outs.append(self._evaluate(model, ds, prep, cell))
        self._record(f"train-m2/{arm}/{model_name}", outs, t0)
        return _read_json(outs[-1])

    def _evaluate(self, model, ds, prep, cell):
        cv = prep.cost_table.vector(prep.tv2)
        metrics = {s: evaluate_m2(model, ds[s], cv, prep.tv2, free_running=(s == "test")) for s in SPLITS}
        return _write_json(cell / "metrics.json", metrics)

    def evaluate(self, model_name, arm):
        t0 = time.perf_counter()
        prep = self.load_prepared()
        cell = self.path("m2", arm, model_name)
        if not (cell / "model.ccf").exists():
            raise PipelineError(f"no checkpoint for {model_name} on arm {arm}: run `train-m2` first")
        model, *_ = load_checkpoint(cell / "model.ccf")
        max_len = self.config.m2.get("max_input_len", TransformerConfig.max_input_len)
        out = self._evaluate(model, self._datasets(arm, prep, max_len), prep, cell)
        self._record(f"evaluate/{arm}/{model_name}", [out], t0)
        return _read_json(out)

    def report(self):
        t0 = time.perf_counter()
        cells = {}
        for arm in ARMS:
            for name in MODELS:
                p = self.path("m2", arm, name, "metrics.json")
                cells[(arm, name)] = _read_json(p) if p.exists() else None
        m1 = self.path("m1", "report.json")
        rep = build_report(cells, _read_json(m1) if m1.exists() else None)
        outs = [
            _write_json(self.path("report.json"), rep),
            self.path("report.txt"),
        ]
        outs[1].write_text(render_table(rep))
        self._record("report", outs, t0)
        return rep

    def run(self, arms=None, models=None):
        arms = tuple(arms or self.config.arms)
        models = tuple(models or self.config.models)
        if not self.config.data_path:
            self.synth()
        self.prepare()
        self.train_m1()
        if "m1" in arms or "random" in arms:
            self.augment("m1")
        if "random" in arms:
            self.augment("random")
        for arm in arms:
            for name in models:
                log.info("training %s on %s arm", name, arm)
                self.train_m2(name, arm)
        return self.report()
