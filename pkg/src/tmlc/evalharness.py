"""Metrics, experiment configuration, transfer grids and run reports.

An experiment is described by one JSON document (see ``ExperimentConfig``).
For every seed ``s`` in ``seeds`` the data, noise and test seeds are offset by
``s`` and the model, shuffle and corrector seeds are ``s`` itself, so a seed
list fully determines a set of runs.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import ABLATIONS, MethodSpec, run_ablation, run_method
from .basemodel import OptimizerConfig, predict
from .corrector import hard_labels, snapshot_dumps, snapshot_load, snapshot_loads, snapshot_save
from .datagen import (ConfigError, NoiseSpec, NoisyDataset, gen_blobs, gen_rings, gen_two_moons, inject_noise,
                      load_idx, load_jsonl, split_support_query)
from .metaloop import MetaConfig, SnapshotSet, meta_test, meta_train
from .runlog import LOG_COLUMNS, read_csv
from .training import TrainConfig

log = logging.getLogger(__name__)


class EmptyInputError(ValueError):
    """A metric was asked for on zero samples."""


# ---------------------------------------------------------------- metrics

def _check_pair(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in length")
    if preds.size == 0:
        raise EmptyInputError("metric over an empty set")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float(np.mean(preds == labels))


def macro_f1(preds, labels, num_classes: int) -> float:
    """Mean of per-class F1 over all ``num_classes`` classes.

    A class with no true positives (including one absent from ``labels``)
    scores 0.
    """
    preds, labels = _check_pair(preds, labels)
    scores = []
    for k in range(num_classes):
        tp = np.sum((preds == k) & (labels == k))
        fp = np.sum((preds == k) & (labels != k))
        fn = np.sum((preds != k) & (labels == k))
        scores.append(0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


def correction_metrics(y_hat, noisy_labels, true_labels) -> dict:
    """Corrector quality over argmax decisions.

    A sample counts as corrected when ``argmax y_hat`` differs from its noisy
    label. Precision is the share of corrections that hit the true label;
    recall is the share of corrupted samples corrected to their true label.
    Ratios with an empty denominator are ``None``.
    """
    decided = hard_labels(np.asarray(y_hat))
    noisy, true = np.asarray(noisy_labels), np.asarray(true_labels)
    corrected = decided != noisy
    corrupted = noisy != true
    hit = decided == true
    return {
        "correction_precision": float(np.mean(hit[corrected])) if corrected.any() else None,
        "correction_recall": float(np.mean(hit[corrupted])) if corrupted.any() else None,
        "corrected_label_accuracy": float(np.mean(hit)) if hit.size else None,
    }


METRIC_NAMES = ("accuracy", "macro_f1", "corrected_label_accuracy", "correction_precision",
                "correction_recall", "mean_kl")
_RATES = METRIC_NAMES[:5]


@dataclass
class MetricsReport:
    """Per-seed metric values plus mean and (population) std over the seeds
    that have a value. Missing or undefined values are ``None``, never NaN."""

    seeds: list = field(default_factory=list)
    values: dict = field(default_factory=lambda: {k: [] for k in METRIC_NAMES})

    def add(self, seed: int, **metrics) -> None:
        unknown = set(metrics) - set(METRIC_NAMES)
        if unknown:
            raise KeyError(f"unknown metrics {sorted(unknown)}")
        for k in METRIC_NAMES:
            v = metrics.get(k)
            if v is not None:
                v = float(v)
                if not np.isfinite(v):
                    raise ValueError(f"{k} is not finite")
                if k in _RATES and not 0.0 <= v <= 1.0:
                    raise ValueError(f"{k}={v} is not a rate in [0, 1]")
            self.values[k].append(v)
        self.seeds.append(int(seed))

    def mean(self, name: str):
        vals = [v for v in self.values[name] if v is not None]
        return float(np.mean(vals)) if vals else None

    def std(self, name: str):
        vals = [v for v in self.values[name] if v is not None]
        return float(np.std(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "macro_f1_definition": "mean of per-class F1, classes without true positives score 0",
            **{k: {"mean": self.mean(k), "std": self.std(k), "per_seed": list(self.values[k])} for k in METRIC_NAMES},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        report = cls()
        for i, seed in enumerate(doc["seeds"]):
            report.add(seed, **{k: doc[k]["per_seed"][i] for k in METRIC_NAMES})
        return report


def evaluate_model(model, test: NoisyDataset | None) -> dict:
    if test is None:
        return {}
    pred = predict(model, test.features)
    return {"accuracy": accuracy(pred, test.true_labels),
            "macro_f1": macro_f1(pred, test.true_labels, test.num_classes)}


# ---------------------------------------------------------------- configuration

DATASET_KEYS = {
    "blobs": {"kind", "num_classes", "per_class", "dim", "spread", "seed", "test_per_class", "test_seed"},
    "two_moons": {"kind", "n", "noise_std", "seed", "test_n", "test_seed"},
    "rings": {"kind", "n", "seed", "test_n", "test_seed"},
    "idx": {"kind", "images", "labels", "test_images", "test_labels", "num_classes"},
    "jsonl": {"kind", "path", "test_path", "num_classes"},
}
SECTION_KEYS = {
    "noise": {"kind", "rate", "pair_map", "seed"},
    "model": {"hidden", "epochs", "batch_size", "optimizer"},
    "optimizer": set(OptimizerConfig.__dataclass_fields__),
    "method": {"kind", "epsilon", "lam", "q_source", "q_matrix"},
    "meta": set(MetaConfig.__dataclass_fields__) - {"seed"},
    "meta_test": {"epochs", "warmup_epochs", "epsilon", "snapshot_dir"},
    "transfer": {"sources", "targets"},
    "task": {"name", "dataset", "noise"},
}
TOP_KEYS = {"experiment_id", "dataset", "noise", "model", "method", "meta", "meta_test", "transfer",
            "seeds", "out", "ablations"}
DEFAULTS = {
    "experiment_id": "experiment",
    "dataset": {"kind": "blobs", "num_classes": 3, "per_class": 1000, "dim": 2, "spread": 0.5, "seed": 0,
                "test_per_class": 1000, "test_seed": 1000},
    "noise": {"kind": "symmetric", "rate": 0.4, "pair_map": None, "seed": 100},
    "model": {"hidden": [32], "epochs": 60, "batch_size": 64, "optimizer": {"kind": "sgd_momentum",
                                                                            "learning_rate": 0.05}},
    "method": {"kind": "ce"},
    "meta": {},
    "meta_test": {"epochs": None, "warmup_epochs": 5, "epsilon": 0.1, "snapshot_dir": None},
    "transfer": {"sources": [], "targets": []},
    "seeds": [0],
    "out": "runs",
    "ablations": sorted(ABLATIONS),
}


def _reject_unknown(section: str, doc: dict, allowed: set) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected an object, got {type(doc).__name__}")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def _check_dataset(section: str, doc: dict) -> None:
    kind = doc.get("kind")
    if kind not in DATASET_KEYS:
        raise ConfigError(f"{section}.kind: unknown dataset kind {kind!r}; expected one of {sorted(DATASET_KEYS)}")
    _reject_unknown(section, doc, DATASET_KEYS[kind])


@dataclass
class ExperimentConfig:
    """Validated experiment description. Build with :meth:`from_dict` or
    :meth:`from_file`; every section is checked before any compute runs."""

    doc: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        _reject_unknown("config", doc, TOP_KEYS)
        for name in ("noise", "model", "method", "meta", "meta_test", "transfer"):
            if name in doc:
                _reject_unknown(name, doc[name], SECTION_KEYS[name])
        if "optimizer" in doc.get("model", {}):
            _reject_unknown("model.optimizer", doc["model"]["optimizer"], SECTION_KEYS["optimizer"])
        base = copy.deepcopy(DEFAULTS)
        if "dataset" in doc:
            if doc["dataset"].get("kind", "blobs") != "blobs":
                base["dataset"] = {}
            _check_dataset("dataset", {"kind": "blobs", **doc["dataset"]})
        full = _merge(base, doc)
        cfg = cls(full)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        d = self.doc
        _check_dataset("dataset", d["dataset"])
        seeds = d["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds: expected a non-empty list of integers")
        self.noise_spec(0)
        self.train_config(0)
        self.meta_config(0)
        self.method_spec()
        unknown = set(d["ablations"]) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"ablations: unknown kinds {sorted(unknown)}")
        for role in ("sources", "targets"):
            for i, task in enumerate(d["transfer"][role]):
                _reject_unknown(f"transfer.{role}[{i}]", task, SECTION_KEYS["task"])
                if "noise" in task:
                    _reject_unknown(f"transfer.{role}[{i}].noise", task["noise"], SECTION_KEYS["noise"])
                    NoiseSpec(**{**d["noise"], **task["noise"]})
                if "dataset" in task:
                    _check_dataset(f"transfer.{role}[{i}].dataset", task_dataset(d["dataset"], task))

    # -- accessors --------------------------------------------------------

    @property
    def experiment_id(self) -> str:
        return str(self.doc["experiment_id"])

    @property
    def seeds(self) -> list[int]:
        return list(self.doc["seeds"])

    @property
    def out(self) -> Path:
        return Path(self.doc["out"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.doc, sort_keys=True).encode()).hexdigest()

    def override(self, **changes) -> "ExperimentConfig":
        """A new validated config with top-level or ``section.key`` fields replaced."""
        doc = copy.deepcopy(self.doc)
        for key, value in changes.items():
            target = doc
            *path, last = key.split(".")
            for part in path:
                target = target.setdefault(part, {})
            target[last] = value
        return ExperimentConfig.from_dict(doc)

    def noise_spec(self, seed: int, noise: dict | None = None) -> NoiseSpec:
        n = dict(noise or self.doc["noise"])
        n["seed"] = int(n.get("seed", 0)) + seed
        return NoiseSpec(**n)

    def train_config(self, seed: int) -> TrainConfig:
        m = self.doc["model"]
        return TrainConfig(hidden=tuple(m["hidden"]), epochs=m["epochs"], batch_size=m["batch_size"],
                           optimizer=OptimizerConfig(**m["optimizer"]), seed=seed, shuffle_seed=seed)

    def meta_config(self, seed: int) -> MetaConfig:
        return MetaConfig(**{**self.doc["meta"], "seed": seed})

    def method_spec(self) -> MethodSpec:
        return MethodSpec(**self.doc["method"])

    def task(self, seed: int, dataset: dict | None = None, noise: dict | None = None):
        """(noisy training set, clean test set or None) for one seed."""
        ds = dict(dataset or self.doc["dataset"])
        train, test = _load_dataset(ds, seed)
        return inject_noise(train, self.noise_spec(seed, noise)), test


def _load_dataset(ds: dict, seed: int):
    kind = ds["kind"]
    if kind == "blobs":
        args = (ds.get("num_classes", 3), ds.get("dim", 2), ds.get("spread", 0.5))
        train = gen_blobs(args[0], ds.get("per_class", 1000), args[1], args[2], seed=ds.get("seed", 0) + seed)
        test = gen_blobs(args[0], ds.get("test_per_class", ds.get("per_class", 1000)), args[1], args[2],
                         seed=ds.get("test_seed", 1000) + seed)
        return train, test
    if kind in ("two_moons", "rings"):
        def make(n, s):
            return gen_two_moons(n, ds.get("noise_std", 0.1), s) if kind == "two_moons" else gen_rings(n, s)
        n = ds.get("n", 2000)
        return make(n, ds.get("seed", 0) + seed), make(ds.get("test_n", n), ds.get("test_seed", 1000) + seed)
    if kind == "idx":
        train = load_idx(ds["images"], ds["labels"], ds.get("num_classes"))
        test = None
        if ds.get("test_images"):
            test = load_idx(ds["test_images"], ds["test_labels"], train.num_classes)
        return train, test
    train = load_jsonl(ds["path"], ds.get("num_classes"))
    test = load_jsonl(ds["test_path"], train.num_classes) if ds.get("test_path") else None
    return train, test


# ---------------------------------------------------------------- runs

def _seed_dir(out: Path, seed: int) -> Path:
    path = out / f"seed_{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def save_snapshots(snapshots: SnapshotSet, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for snap in snapshots:
        path = directory / f"phi_e{snap.epoch_tag:04d}.json"
        snapshot_save(snap, path)
        paths.append(path)
    return paths


def load_snapshots(directory) -> SnapshotSet:
    directory = Path(directory)
    files = sorted(directory.glob("phi_e*.json"))
    if not files:
        raise ConfigError(f"no snapshot files (phi_e*.json) in {directory}")
    snaps = sorted((snapshot_load(p) for p in files), key=lambda s: s.epoch_tag)
    out = SnapshotSet()
    for s in snaps:
        out.add(s)
    return out


def meta_train_seed(cfg: ExperimentConfig, seed: int, out: Path | None = None):
    """One meta-train run; returns (MetaTrainResult, metrics dict)."""
    train, test = cfg.task(seed)
    meta_cfg = cfg.meta_config(seed)
    split = split_support_query(train, meta_cfg.query_fraction, seed)
    result = meta_train(train, split, cfg.train_config(seed), meta_cfg, test_set=test)
    support = train.subset(split.support_indices)
    metrics = {**evaluate_model(result.model, test),
               **correction_metrics(result.corrected_labels, support.noisy_labels, support.true_labels),
               "mean_kl": result.log.last("kl_meta")}
    if out is not None:
        d = _seed_dir(out, seed)
        result.log.write(d / f"{result.log.method}.csv")
        save_snapshots(result.snapshots, d / "snapshots")
    return result, metrics


def meta_test_seed(cfg: ExperimentConfig, seed: int, snapshots: SnapshotSet, out: Path | None = None,
                   dataset: dict | None = None, noise: dict | None = None):
    train, test = cfg.task(seed, dataset, noise)
    mt = cfg.doc["meta_test"]
    result = meta_test(train, cfg.train_config(seed), snapshots, epochs=mt["epochs"], test_set=test,
                       warmup_epochs=mt["warmup_epochs"], epsilon=mt["epsilon"])
    metrics = {**evaluate_model(result.model, test),
               **correction_metrics(result.corrected_labels, train.noisy_labels, train.true_labels)}
    if out is not None:
        result.log.write(_seed_dir(out, seed) / "tmlc_meta_test.csv")
    return result, metrics


def baseline_seed(cfg: ExperimentConfig, seed: int, out: Path | None = None, dataset: dict | None = None,
                  noise: dict | None = None, spec: MethodSpec | None = None):
    train, test = cfg.task(seed, dataset, noise)
    spec = spec or cfg.method_spec()
    result = run_method(spec, train, cfg.train_config(seed), cfg.meta_config(seed), test_set=test)
    runlog = getattr(result, "log", result)
    model = result.model
    metrics = evaluate_model(model, test)
    if out is not None:
        runlog.write(_seed_dir(out, seed) / f"{runlog.method}.csv")
    return runlog, metrics


def ablation_seed(cfg: ExperimentConfig, seed: int, kind: str, out: Path | None = None):
    train, test = cfg.task(seed)
    meta_cfg = cfg.meta_config(seed)
    split = split_support_query(train, meta_cfg.query_fraction, seed)
    result = run_ablation(kind, train, cfg.train_config(seed), meta_cfg, split=split, test_set=test)
    support = train.subset(split.support_indices)
    metrics = {**evaluate_model(result.model, test),
               **correction_metrics(result.corrected_labels, support.noisy_labels, support.true_labels),
               "mean_kl": result.log.last("kl_meta")}
    if out is not None:
        result.log.write(_seed_dir(out, seed) / f"{kind}.csv")
    return result, metrics


def write_summary(cfg: ExperimentConfig, report, out: Path, started: float, name: str = "summary.json",
                  extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    metrics = report.to_dict() if isinstance(report, MetricsReport) else report
    doc = {"experiment_id": cfg.experiment_id, "config_hash": cfg.config_hash(), "metrics": metrics,
           "wallclock_s": time.perf_counter() - started, **(extra or {})}
    path = out / name
    path.write_text(json.dumps(doc, sort_keys=True, indent=2))
    return path


# ---------------------------------------------------------------- transfer grid

@dataclass
class TransferGrid:
    sources: list
    targets: list
    cells: dict          # (i, j) -> MetricsReport or {"skipped": reason}
    ce_reference: dict   # j -> MetricsReport

    def shape(self) -> tuple[int, int]:
        return len(self.sources), len(self.targets)

    def to_dict(self) -> dict:
        def cell(v):
            return v.to_dict() if isinstance(v, MetricsReport) else v
        return {
            "sources": self.sources, "targets": self.targets,
            "cells": [[cell(self.cells[(i, j)]) for j in range(len(self.targets))] for i in range(len(self.sources))],
            "ce_reference": [self.ce_reference[j].to_dict() for j in range(len(self.targets))],
        }

    def accuracy_table(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["source"] + self.targets)
        for i, s in enumerate(self.sources):
            row = []
            for j in range(len(self.targets)):
                v = self.cells[(i, j)]
                row.append(repr(v.mean("accuracy")) if isinstance(v, MetricsReport) else "skipped")
            writer.writerow([s] + row)
        writer.writerow(["ce_reference"] + [repr(self.ce_reference[j].mean("accuracy"))
                                            for j in range(len(self.targets))])
        return buf.getvalue()


def _task_name(task: dict, k: int) -> str:
    return str(task.get("name", f"task{k}"))


def _source_job(args):
    doc, task, seed, out = args
    cfg = ExperimentConfig.from_dict(doc)
    result, metrics = meta_train_seed_task(cfg, seed, task, Path(out) if out else None)
    return [snapshot_dumps(s) for s in result.snapshots], metrics


def task_dataset(base: dict, task: dict) -> dict:
    """A task's dataset section: overrides merge into the base unless they change the kind."""
    override = task.get("dataset", {})
    if override.get("kind", base["kind"]) != base["kind"]:
        return copy.deepcopy(override)
    return _merge(base, override)


def meta_train_seed_task(cfg: ExperimentConfig, seed: int, task: dict, out: Path | None):
    sub = cfg.override(dataset=task_dataset(cfg.doc["dataset"], task),
                       noise=_merge(cfg.doc["noise"], task.get("noise", {})))
    return meta_train_seed(sub, seed, out)


def _cell_job(args):
    doc, snap_docs, task, seed, out = args
    cfg = ExperimentConfig.from_dict(doc)
    snaps = SnapshotSet()
    for text in snap_docs:
        snaps.add(snapshot_loads(text))
    dataset = task_dataset(cfg.doc["dataset"], task)
    noise = _merge(cfg.doc["noise"], task.get("noise", {}))
    _, metrics = meta_test_seed(cfg, seed, snaps, Path(out) if out else None, dataset, noise)
    return metrics


def _ce_job(args):
    doc, task, seed, out = args
    cfg = ExperimentConfig.from_dict(doc)
    dataset = task_dataset(cfg.doc["dataset"], task)
    noise = _merge(cfg.doc["noise"], task.get("noise", {}))
    _, metrics = baseline_seed(cfg, seed, Path(out) if out else None, dataset, noise, MethodSpec("ce"))
    return metrics


def _map(fn, jobs_args, jobs: int):
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args))


def _incompatible(cfg: ExperimentConfig, src: dict, tgt: dict) -> str | None:
    """Reason a source snapshot cannot serve a target task, else None."""
    src_c = _num_classes(task_dataset(cfg.doc["dataset"], src))
    tgt_c = _num_classes(task_dataset(cfg.doc["dataset"], tgt))
    mode = cfg.doc["meta"].get("mode", "standard")
    if mode == "standard" and src_c != tgt_c:
        return f"standard-mode corrector decodes {src_c} classes but the target has {tgt_c}; use agnostic mode"
    return None


def _num_classes(ds: dict) -> int | None:
    if ds["kind"] == "blobs":
        return ds.get("num_classes", 3)
    if ds["kind"] in ("two_moons", "rings"):
        return 2
    return ds.get("num_classes")


def transfer_grid(cfg: ExperimentConfig, jobs: int = 1, out: Path | None = None) -> TransferGrid:
    """Meta-train once per (source, seed), meta-test every compatible
    (source, target, seed) cell with frozen snapshots, and train a CE
    reference per (target, seed). Cells run in up to ``jobs`` processes, each
    with its own RNGs and output directory."""
    sources, targets = cfg.doc["transfer"]["sources"], cfg.doc["transfer"]["targets"]
    if not sources or not targets:
        raise ConfigError("transfer: need at least one source and one target task")
    doc = cfg.to_dict()
    src_names = [_task_name(t, k) for k, t in enumerate(sources)]
    tgt_names = [_task_name(t, k) for k, t in enumerate(targets)]

    def sub(*parts):
        return str(out.joinpath(*parts)) if out is not None else None

    src_args = [(doc, sources[i], s, sub("sources", src_names[i])) for i in range(len(sources)) for s in cfg.seeds]
    src_results = dict(zip([(i, s) for i in range(len(sources)) for s in cfg.seeds], _map(_source_job, src_args, jobs)))

    cell_keys, cell_args, cells = [], [], {}
    for i, src in enumerate(sources):
        for j, tgt in enumerate(targets):
            reason = _incompatible(cfg, src, tgt)
            if reason:
                cells[(i, j)] = {"skipped": reason}
                continue
            for s in cfg.seeds:
                cell_keys.append((i, j, s))
                cell_args.append((doc, src_results[(i, s)][0], tgt, s, sub("cells", f"{src_names[i]}__{tgt_names[j]}")))
    for (i, j, s), metrics in zip(cell_keys, _map(_cell_job, cell_args, jobs)):
        report = cells.setdefault((i, j), MetricsReport())
        report.add(s, **metrics)

    ce_args = [(doc, targets[j], s, sub("ce_reference", tgt_names[j])) for j in range(len(targets)) for s in cfg.seeds]
    ce = {}
    for (j, s), metrics in zip([(j, s) for j in range(len(targets)) for s in cfg.seeds], _map(_ce_job, ce_args, jobs)):
        ce.setdefault(j, MetricsReport()).add(s, **metrics)
    return TransferGrid(src_names, tgt_names, cells, ce)


# ---------------------------------------------------------------- reports

REPORT_COLUMNS = ("acc_test", "acc_train_true", "acc_train_noisy", "corrected_label_acc", "kl_meta")


def report(directory) -> tuple[str, str]:
    """Aggregate every run CSV under ``directory`` (final epoch of each file)
    into mean and std per method. Returns (csv text, human-readable table).

    A pure function of the log files: files are visited in sorted order and
    nothing is written.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"report directory not found: {directory}")
    groups: dict[str, list[dict]] = {}
    for path in sorted(directory.rglob("*.csv")):
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if header is None or tuple(header) != LOG_COLUMNS:
            continue
        rows = read_csv(path)
        if not rows:
            continue
        meta_path = path.with_suffix(".meta.json")
        method = json.loads(meta_path.read_text()).get("method", path.stem) if meta_path.exists() else path.stem
        groups.setdefault(method, []).append(rows[-1])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "runs"] + [f"{c}_{s}" for c in REPORT_COLUMNS for s in ("mean", "std")])
    lines = [f"{'method':<22}{'runs':>5}  " + "  ".join(f"{c:>22}" for c in REPORT_COLUMNS)]
    for method in sorted(groups):
        finals = groups[method]
        row, text = [method, len(finals)], []
        for c in REPORT_COLUMNS:
            vals = [r[c] for r in finals if r[c] is not None]
            if vals:
                m, s = float(np.mean(vals)), float(np.std(vals))
                row += [repr(m), repr(s)]
                text.append(f"{m:>12.4f} ± {s:<7.4f}")
            else:
                row += ["", ""]
                text.append(f"{'-':>22}")
        writer.writerow(row)
        lines.append((f"{method:<22}{len(finals):>5}  " + "  ".join(text)).rstrip())
    return buf.getvalue(), "\n".join(lines) + "\n"
