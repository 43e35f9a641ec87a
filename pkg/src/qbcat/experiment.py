"""Experiment grid: seeds x samplers, each run for T increments.

Per seed, a pre-trained model (head classes only) and an offline model
(all train data) are built once and shared by every sampler. Each
(seed, sampler) cell checkpoints after every increment and resumes from
there when rerun with the same configuration.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .metrics import CSV_HEADER, OMEGA_HEADER, IncrementReport, evaluate, omega_table
from .model import load_checkpoint, save_checkpoint
from .sampler import Oracle, SamplerKind, classic_select, fulfil, qbcat_select
from .schema import Dataset
from .synthgen import SynthConfig, generate
from .trainer import (LearnerState, Protocol, TrainConfig, TrainData, new_model, pretrain,
                      run_increment, train_offline)

log = logging.getLogger(__name__)

WORKERS_ENV = "QBCAT_WORKERS"
PRETRAIN_LABEL = "PreTrain"
OFFLINE_LABEL = "Offline"


class ConfigError(ValueError):
    pass


class ResumeMismatch(RuntimeError):
    pass


# --- configuration -----------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    samplers: list[str]
    seeds: list[int]
    increments: int = 10
    per_qtype: int = 100
    synthetic: SynthConfig | None = field(default_factory=SynthConfig)
    data_dir: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    rebalanced_batches: bool = True
    bias_correction: bool = True
    tail_only_pool: bool = False
    output: str = "results"
    checkpoint: bool = True

    def validate(self) -> "ExperimentConfig":
        if self.increments < 1:
            raise ConfigError("increments must be >= 1")
        if self.per_qtype < 1:
            raise ConfigError("per_qtype must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.samplers:
            raise ConfigError("samplers must be non-empty")
        for s in self.samplers:
            try:
                SamplerKind.parse(s)
            except ValueError as e:
                raise ConfigError(str(e)) from None
        if (self.synthetic is None) == (self.data_dir is None):
            raise ConfigError("give exactly one of data.synthetic and data.directory")
        try:
            self.train.validate()
            if self.synthetic is not None:
                self.synthetic.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    @property
    def sampler_kinds(self) -> list[SamplerKind]:
        return [SamplerKind.parse(s) for s in self.samplers]

    @property
    def protocol(self) -> Protocol:
        return Protocol(rebalanced=self.rebalanced_batches, bias_correction=self.bias_correction)

    def to_dict(self) -> dict:
        data = ({"synthetic": self.synthetic.to_dict()} if self.synthetic is not None
                else {"directory": self.data_dir})
        return {
            "data": data,
            "samplers": [k.value for k in self.sampler_kinds],
            "seeds": list(self.seeds),
            "increments": self.increments,
            "per_qtype": self.per_qtype,
            "train": self.train.to_dict(),
            "toggles": {"rebalanced_batches": self.rebalanced_batches,
                        "bias_correction": self.bias_correction,
                        "tail_only_pool": self.tail_only_pool},
            "output": self.output,
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        d = copy.deepcopy(d)
        known = {"data", "samplers", "seeds", "increments", "per_qtype", "train", "toggles",
                 "output", "checkpoint"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = d.get("data") or {"synthetic": {}}
        if not isinstance(data, dict) or set(data) - {"synthetic", "directory"}:
            raise ConfigError("data must contain 'synthetic' or 'directory'")
        toggles = d.get("toggles") or {}
        bad = set(toggles) - {"rebalanced_batches", "bias_correction", "tail_only_pool"}
        if bad:
            raise ConfigError(f"unknown toggles: {sorted(bad)}")
        try:
            synth = SynthConfig.from_dict(data["synthetic"] or {}) if "synthetic" in data else None
            train = TrainConfig(**(d.get("train") or {}))
            cfg = cls(
                samplers=list(d.get("samplers", [])),
                seeds=[int(s) for s in d.get("seeds", [])],
                increments=int(d.get("increments", 10)),
                per_qtype=int(d.get("per_qtype", 100)),
                synthetic=synth,
                data_dir=data.get("directory"),
                train=train,
                rebalanced_batches=bool(toggles.get("rebalanced_batches", True)),
                bias_correction=bool(toggles.get("bias_correction", True)),
                tail_only_pool=bool(toggles.get("tail_only_pool", False)),
                output=str(d.get("output", "results")),
                checkpoint=bool(d.get("checkpoint", True)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return cfg.validate()

    @classmethod
    def load(cls, path, overrides: list[str] = ()) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        try:
            d = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        for item in overrides:
            apply_override(d, item)
        return cls.from_dict(d)

    def fingerprint(self) -> str:
        """Hash of everything that affects results (output location excluded)."""
        d = self.to_dict()
        d.pop("output")
        d.pop("checkpoint")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def apply_override(d: dict, item: str):
    """``a.b.c=value`` with ``value`` parsed as a YAML scalar."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {item!r}: {e}") from None
    if isinstance(value, (dict, list)):
        raise ConfigError(f"override {item!r}: only scalar values can be overridden")
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {p} is not a mapping")
    node[parts[-1]] = value


# --- data & rng ----------------------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_dir is not None:
        return Dataset.load(cfg.data_dir)
    return generate(cfg.synthetic)


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256(np.ascontiguousarray(ds.features).tobytes())
    for split in (ds.train, ds.val, ds.test):
        t = split.questions
        for arr in (t.qtype, t.subj, t.pred, t.target, t.image):
            h.update(arr.tobytes())
    h.update("|".join(ds.dictionary.attributes + ds.dictionary.predicates).encode())
    return h.hexdigest()[:16]


def rng_for(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *tags]))


def sampler_tag(kind: SamplerKind) -> int:
    return zlib.crc32(kind.value.encode())


INIT_TAG, PRETRAIN_TAG, OFFLINE_TAG = 0, 1, 2


# --- per-seed baselines ---------------------------------------------------------------------

@dataclass
class Baselines:
    pretrained: dict[str, np.ndarray]
    replay: list[int]
    pretrain_report: IncrementReport
    offline_report: IncrementReport


_BASELINES: dict[tuple, Baselines] = {}


def _evaluate(model, ds: Dataset, bias, increment, seed, sampler) -> IncrementReport:
    return evaluate(model, ds.test, ds.dictionary, ds.features, bias, increment, seed, sampler)


def baselines(ds: Dataset, train: TrainConfig, seed: int) -> Baselines:
    """Pre-trained and offline models for one seed (memoised per process)."""
    key = (dataset_fingerprint(ds), json.dumps(train.to_dict(), sort_keys=True), int(seed))
    if key in _BASELINES:
        return _BASELINES[key]
    data = TrainData.from_split(ds.train, ds.features, ds.dictionary)
    model = new_model(data, train, rng_for(seed, INIT_TAG))
    replay = pretrain(model, data, train, rng_for(seed, PRETRAIN_TAG))
    pre = _evaluate(model, ds, None, 0, seed, PRETRAIN_LABEL)
    offline = train_offline(data, train, rng_for(seed, INIT_TAG), rng_for(seed, OFFLINE_TAG))
    off = _evaluate(offline, ds, None, 0, seed, OFFLINE_LABEL)
    _BASELINES[key] = Baselines(model.snapshot(), replay, pre, off)
    return _BASELINES[key]


# --- one (seed, sampler) cell -----------------------------------------------------------------

@dataclass
class CellResult:
    seed: int
    sampler: str
    reports: list[IncrementReport]
    audit: list[dict]
    best_epochs: list[int]


def _report_to_json(r: IncrementReport) -> dict:
    return {"increment": r.increment, "seed": r.seed, "sampler": r.sampler,
            "values": [[*k, v] for k, v in r.values.items()]}


def _report_from_json(d: dict) -> IncrementReport:
    return IncrementReport(d["increment"], d["seed"], d["sampler"],
                           {tuple(v[:3]): float(v[3]) for v in d["values"]})


def _cell_dir(cfg: ExperimentConfig, seed: int, kind: SamplerKind) -> Path:
    return Path(cfg.output) / "checkpoints" / f"seed{seed}_{kind.value}"


def _save_cell(path: Path, fingerprint: str, state: LearnerState, rng_seq, result: CellResult):
    path.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path / "model.qbcf", state.model)
    doc = {"config": fingerprint, "increment": state.increment, "replay": state.replay,
           "rng": state.rng.bit_generator.state, "select_rng": rng_seq.bit_generator.state,
           "reports": [_report_to_json(r) for r in result.reports], "audit": result.audit,
           "best_epochs": result.best_epochs}
    tmp = path / "state.json.tmp"
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    os.replace(tmp, path / "state.json")


def run_cell(cfg: ExperimentConfig, ds: Dataset, seed: int, kind: SamplerKind,
             on_batch=None) -> CellResult:
    data = TrainData.from_split(ds.train, ds.features, ds.dictionary)
    base = baselines(ds, cfg.train, seed)
    model = new_model(data, cfg.train, 0)
    model.restore(base.pretrained)
    train_rng = rng_for(seed, sampler_tag(kind), 0)
    select_rng = rng_for(seed, sampler_tag(kind), 1)
    state = LearnerState(model, list(base.replay), train_rng)
    result = CellResult(seed, kind.value, [], [], [])
    oracle = Oracle(data.table, np.setdiff1d(np.arange(len(data.table)), base.replay))
    fp = cfg.fingerprint()
    cdir = _cell_dir(cfg, seed, kind)

    if cfg.checkpoint and (cdir / "state.json").exists():
        doc = json.loads((cdir / "state.json").read_text(encoding="utf-8"))
        if doc["config"] != fp:
            raise ResumeMismatch(f"checkpoint in {cdir} was written by a different configuration")
        saved, _ = load_checkpoint(cdir / "model.qbcf")
        model.restore(saved.state_dict())
        state.replay = list(doc["replay"])
        state.increment = int(doc["increment"])
        state.rng.bit_generator.state = doc["rng"]
        select_rng.bit_generator.state = doc["select_rng"]
        result.reports = [_report_from_json(r) for r in doc["reports"]]
        result.audit = list(doc["audit"])
        result.best_epochs = list(doc["best_epochs"])
        for entry in result.audit:
            oracle._remove(int(entry["provided"]))
        oracle.audit = list(result.audit)
        log.info("resuming seed %d %s at increment %d", seed, kind.value, state.increment)

    tail = data.table.tail_mask(ds.dictionary)
    protocol = cfg.protocol
    protocol.on_batch = on_batch
    while state.increment < cfg.increments:
        t = state.increment + 1
        oracle.increment = t
        if kind.is_qbcat:
            plan = qbcat_select(kind, ds.dictionary, cfg.per_qtype, select_rng)
        else:
            pool = oracle.unlabeled_ids()
            if cfg.tail_only_pool:
                pool = pool[tail[pool]]
            plan = classic_select(kind, model, data.table, pool, data.features, data.image_boxes,
                                  cfg.per_qtype, select_rng)
        new = fulfil(plan, oracle, select_rng)

        def ev(m, bias, t=t):
            return _evaluate(m, ds, bias, t, seed, kind.value)

        out = run_increment(state, data, new, cfg.train, ev, protocol)
        result.reports.append(out.report)
        result.best_epochs.append(out.best_epoch)
        result.audit = list(oracle.audit)
        log.info("seed %d %s increment %d/%d: best epoch %d", seed, kind.value, t,
                 cfg.increments, out.best_epoch)
        if cfg.checkpoint:
            _save_cell(cdir, fp, state, select_rng, result)
    return result


# --- the whole grid ----------------------------------------------------------------------------

def _run_cell_job(args):
    cfg_dict, seed, kind_value = args
    logging.basicConfig(level=logging.WARNING)
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ds = load_dataset(cfg)
    return run_cell(cfg, ds, seed, SamplerKind.parse(kind_value))


def n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


@dataclass
class GridResult:
    cells: list[CellResult]
    baselines: dict[int, Baselines]

    def reports(self) -> list[IncrementReport]:
        out = []
        for seed, b in self.baselines.items():
            out += [b.pretrain_report, b.offline_report]
        for c in self.cells:
            out += c.reports
        return out


def run_experiment(cfg: ExperimentConfig, ds: Dataset | None = None, workers: int | None = None,
                   on_batch=None) -> GridResult:
    ds = ds if ds is not None else load_dataset(cfg)
    workers = workers or n_workers()
    kinds = cfg.sampler_kinds
    jobs = [(seed, k) for seed in cfg.seeds for k in kinds]
    if workers > 1 and on_batch is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            base = dict(zip(cfg.seeds, pool.map(baselines, [ds] * len(cfg.seeds),
                                                [cfg.train] * len(cfg.seeds), cfg.seeds)))
        for seed, b in base.items():
            key = (dataset_fingerprint(ds), json.dumps(cfg.train.to_dict(), sort_keys=True), seed)
            _BASELINES[key] = b
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell_worker, [(cfg, ds, s, k) for s, k in jobs]))
    else:
        base = {seed: baselines(ds, cfg.train, seed) for seed in cfg.seeds}
        cells = [run_cell(cfg, ds, s, k, on_batch) for s, k in jobs]
    return GridResult(cells, base)


def _run_cell_worker(args):
    cfg, ds, seed, kind = args
    baselines(ds, cfg.train, seed)  # cheap when the parent's cache was inherited
    return run_cell(cfg, ds, seed, kind)


def write_results(cfg: ExperimentConfig, result: GridResult) -> dict[str, Path]:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "omega": out / "omega.csv", "config": out / "config.yaml"}
    order = {k.value: i for i, k in enumerate(cfg.sampler_kinds)}
    order.update({PRETRAIN_LABEL: -2, OFFLINE_LABEL: -1})
    reports = sorted(result.reports(), key=lambda r: (r.seed, order[r.sampler], r.increment))
    with open(paths["metrics"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in reports:
            for row in r.rows():
                w.writerow(row[:-1] + [repr(float(row[-1]))])
    with open(paths["omega"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OMEGA_HEADER)
        for seed, b in result.baselines.items():
            for c in (c for c in result.cells if c.seed == seed):
                for row in omega_table(c.reports, b.offline_report):
                    w.writerow(row[:-1] + [repr(float(row[-1]))])
    audit_dir = out / "audit"
    audit_dir.mkdir(exist_ok=True)
    for c in result.cells:
        p = audit_dir / f"seed{c.seed}_{c.sampler}.jsonl"
        with open(p, "w", encoding="utf-8") as fh:
            for entry in c.audit:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    paths["config"].write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    return paths
