"""Summary tables from a results directory: Omega per sampler, learning
curves with standard errors, and histograms of the classes each sampler
obtained from the oracle."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .metrics import METRICS, SPLITS, omega
from .schema import REPORTED_QTYPES

BASELINE_LABELS = ("PreTrain", "Offline")


class ReportError(ValueError):
    pass


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, r in enumerate(csv.DictReader(fh), start=2):
            try:
                r["seed"] = int(r["seed"])
                r["increment"] = int(r["increment"])
                r["value"] = float(r["value"])
            except (KeyError, ValueError) as e:
                raise ReportError(f"{path}:{i}: bad row ({e})") from None
            rows.append(r)
    return rows


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def omega_cells(rows: list[dict]) -> dict[tuple, float]:
    """(seed, sampler, qtype, split, metric) -> Omega."""
    offline, curves = {}, defaultdict(list)
    for r in rows:
        key = (r["question_type"], r["split"], r["metric"])
        if r["sampler"] == "Offline":
            offline[(r["seed"],) + key] = r["value"]
        elif r["sampler"] != "PreTrain":
            curves[(r["seed"], r["sampler"]) + key].append((r["increment"], r["value"]))
    out = {}
    for k, pts in curves.items():
        ref = offline.get((k[0],) + k[2:])
        if ref is None:
            raise ReportError(f"no offline row for seed {k[0]} {'/'.join(k[2:])}; Omega is undefined")
        out[k] = omega([v for _, v in sorted(pts)], ref)
    return out


def _samplers(rows):
    seen = []
    for r in rows:
        if r["sampler"] not in BASELINE_LABELS and r["sampler"] not in seen:
            seen.append(r["sampler"])
    return seen


def omega_summary(rows: list[dict]) -> list[list]:
    """Omega averaged over the reported question types, then over seeds."""
    cells = omega_cells(rows)
    qtypes = [q.name for q in REPORTED_QTYPES]
    seeds = sorted({k[0] for k in cells})
    out = []
    for s in _samplers(rows):
        for sp in SPLITS:
            for me in METRICS:
                per_seed = []
                for seed in seeds:
                    vals = [cells[(seed, s, q, sp, me)] for q in qtypes if (seed, s, q, sp, me) in cells]
                    if vals:
                        per_seed.append(float(np.mean(vals)))
                if per_seed:
                    out.append([s, sp, me, *mean_se(per_seed), len(per_seed)])
    return out


def omega_by_qtype(rows: list[dict]) -> list[list]:
    cells = omega_cells(rows)
    groups = defaultdict(list)
    for (seed, s, q, sp, me), v in cells.items():
        groups[(s, q, sp, me)].append(v)
    order = {s: i for i, s in enumerate(_samplers(rows))}
    return [[*k, *mean_se(v), len(v)] for k, v in
            sorted(groups.items(), key=lambda kv: (order[kv[0][0]],) + kv[0][1:])]


def learning_curves(rows: list[dict]) -> list[list]:
    groups = defaultdict(list)
    for r in rows:
        if r["sampler"] == "Offline":
            continue
        groups[(r["sampler"], r["question_type"], r["split"], r["metric"], r["increment"])].append(r["value"])
    order = {s: i for i, s in enumerate(["PreTrain"] + _samplers(rows))}
    keys = sorted(groups, key=lambda k: (order[k[0]],) + k[1:])
    return [[*k, *mean_se(groups[k]), len(groups[k])] for k in keys]


def class_histograms(audit_dir) -> list[list]:
    """Counts of the class of every question the oracle handed out."""
    counts = defaultdict(int)
    files = sorted(Path(audit_dir).glob("*.jsonl"))
    for f in files:
        for i, line in enumerate(f.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                e = json.loads(line)
                key = (e["kind"], int(f.stem.split("_")[0][4:]), e["qtype"], int(e["class"]))
            except (ValueError, KeyError) as err:
                raise ReportError(f"{f}:{i}: bad audit entry ({err})") from None
            counts[key] += 1
    return [[*k, v] for k, v in sorted(counts.items())]


def _write(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


def write_report(results_dir) -> dict[str, Path]:
    d = Path(results_dir)
    metrics = d / "metrics.csv"
    if not metrics.exists():
        raise ReportError(f"{metrics} not found")
    rows = read_metrics(metrics)
    if not any(r["sampler"] == "Offline" for r in rows):
        raise ReportError("metrics.csv has no Offline rows; Omega is undefined")
    out = d / "report"
    out.mkdir(exist_ok=True)
    paths = {
        "omega_summary": out / "omega_summary.csv",
        "omega_by_qtype": out / "omega_by_qtype.csv",
        "learning_curves": out / "learning_curves.csv",
        "class_histogram": out / "class_histogram.csv",
    }
    _write(paths["omega_summary"], ["sampler", "split", "metric", "omega_mean", "omega_se", "n_seeds"],
           omega_summary(rows))
    _write(paths["omega_by_qtype"],
           ["sampler", "question_type", "split", "metric", "omega_mean", "omega_se", "n_seeds"],
           omega_by_qtype(rows))
    _write(paths["learning_curves"],
           ["sampler", "question_type", "split", "metric", "increment", "mean", "se", "n_seeds"],
           learning_curves(rows))
    hist = class_histograms(d / "audit") if (d / "audit").exists() else []
    _write(paths["class_histogram"], ["sampler", "seed", "question_type", "class_id", "count"], hist)
    return paths
