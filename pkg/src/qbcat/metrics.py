"""AUROC / AP in micro and sample-wise flavours, the Omega summary, and
per-increment evaluation reports.

Scores for a batch of questions are padded matrices: ``-inf`` marks padding
and ``answer`` holds the column of the correct candidate.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .model import ScoredBatch, TripleModel, score_questions
from .schema import REPORTED_QTYPES, ClassDictionary, QuestionType, SceneSplit, TargetKind, take

SPLITS = ("Full", "Tail")
METRICS = ("AUROC", "mAP")
CSV_HEADER = ["seed", "sampler", "increment", "question_type", "split", "metric", "value"]
OMEGA_HEADER = ["seed", "sampler", "question_type", "split", "metric", "omega"]


class MetricError(ValueError):
    pass


def auroc_micro(scores, labels) -> float | None:
    """P(positive outranks negative) + P(tie)/2 over flattened pairs.
    ``None`` when the labels are all one class."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=bool).reshape(-1)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float | None:
    """Non-interpolated AP; equal scores keep their original order."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=bool).reshape(-1)
    if not y.any():
        return None
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


ap_micro = average_precision


def _eligible(scores: np.ndarray, answer: np.ndarray) -> np.ndarray:
    valid = np.isfinite(scores)
    return (valid.sum(axis=1) >= 2) & (answer >= 0) & (answer < scores.shape[1])


def samplewise_parts(scores, answer):
    """Per-question AUROC and AP for padded scores with one positive each.
    Returns ``(auroc, ap, eligible_mask)``."""
    scores = np.asarray(scores, dtype=np.float64)
    answer = np.asarray(answer, dtype=np.int64)
    ok = _eligible(scores, answer)
    valid = np.isfinite(scores)
    safe_answer = np.where(ok, answer, 0)
    pos = scores[np.arange(len(scores)), safe_answer]
    ok &= np.isfinite(pos)
    n_neg = valid.sum(axis=1) - 1
    higher = ((scores > pos[:, None]) & valid).sum(axis=1)
    ties = ((scores == pos[:, None]) & valid).sum(axis=1) - 1
    lower = n_neg - higher - ties
    cols = np.arange(scores.shape[1])[None, :]
    ties_before = ((scores == pos[:, None]) & valid & (cols < safe_answer[:, None])).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        auroc = (lower + 0.5 * ties) / n_neg
        ap = 1.0 / (1 + higher + ties_before)
    return auroc, ap, ok


def _samplewise(which: int, scores, answer) -> float:
    parts = samplewise_parts(scores, answer)
    ok = parts[2]
    if not ok.any():
        raise MetricError("no question has >= 2 candidates and a single answer")
    return float(parts[which][ok].mean())


def _pad(vectors) -> np.ndarray:
    width = max((len(v) for v in vectors), default=0)
    out = np.full((len(vectors), max(width, 1)), -np.inf)
    for i, v in enumerate(vectors):
        out[i, : len(v)] = v
    return out


def auroc_samplewise(score_vectors, answers) -> float:
    """Mean one-vs-rest AUROC over questions. ``score_vectors`` is a padded
    matrix or a list of 1-d arrays; ``answers`` the column of the positive."""
    s = score_vectors if isinstance(score_vectors, np.ndarray) else _pad(score_vectors)
    return _samplewise(0, s, answers)


def ap_samplewise(score_vectors, answers) -> float:
    s = score_vectors if isinstance(score_vectors, np.ndarray) else _pad(score_vectors)
    return _samplewise(1, s, answers)


def count_skipped(score_vectors, answers) -> int:
    s = score_vectors if isinstance(score_vectors, np.ndarray) else _pad(score_vectors)
    return int((~samplewise_parts(s, answers)[2]).sum())


def omega(gammas, gamma_offline: float) -> float:
    g = np.asarray(list(gammas), dtype=np.float64)
    if g.size == 0:
        raise MetricError("omega needs at least one increment")
    return float(np.mean(1.0 - (gamma_offline - g)))


# --- evaluation --------------------------------------------------------------------

@dataclass
class BiasParams:
    """Per-class affine score correction ``alpha * s + beta``."""

    pred_alpha: np.ndarray
    pred_beta: np.ndarray
    attr_alpha: np.ndarray
    attr_beta: np.ndarray

    @classmethod
    def identity(cls, n_pred: int, n_attr: int) -> "BiasParams":
        return cls(np.ones(n_pred), np.zeros(n_pred), np.ones(n_attr), np.zeros(n_attr))

    def apply(self, kind: TargetKind, scores: np.ndarray) -> np.ndarray:
        if kind is TargetKind.PREDICATE:
            a, b = self.pred_alpha, self.pred_beta
        else:
            a, b = self.attr_alpha, self.attr_beta
        return scores * a[None, : scores.shape[1]] + b[None, : scores.shape[1]]


@dataclass
class IncrementReport:
    increment: int
    seed: int
    sampler: str
    values: dict[tuple[str, str, str], float] = field(default_factory=dict)

    def rows(self):
        for (qt, sp, me), v in self.values.items():
            yield [self.seed, self.sampler, self.increment, qt, sp, me, v]


def _answer_columns(sb: ScoredBatch, target: np.ndarray) -> np.ndarray:
    hit = sb.candidates == target[:, None]
    return np.where(hit.any(axis=1), hit.argmax(axis=1), -1)


def evaluate(model: TripleModel, split: SceneSplit, dictionary: ClassDictionary,
             features: np.ndarray, bias: BiasParams | None = None, increment: int = 0,
             seed: int = 0, sampler: str = "") -> IncrementReport:
    """Full and tail-split AUROC/mAP for every reported question type.
    Bias correction, when given, only touches SPOP and SPAA scores."""
    table = split.questions
    tail = table.tail_mask(dictionary)
    report = IncrementReport(increment, seed, sampler)
    for qt in REPORTED_QTYPES:
        idx = np.flatnonzero(table.qtype == qt)
        if idx.size == 0:
            continue
        qa = take(table, idx)
        sb = score_questions(model, qa, features, split.image_boxes)
        kind = QuestionType(qt).target_kind
        scores = sb.scores
        if bias is not None and kind is not TargetKind.BOX:
            scores = bias.apply(kind, scores)
        answer = _answer_columns(sb, qa.target)
        for sp in SPLITS:
            rows = np.ones(idx.size, bool) if sp == "Full" else tail[idx]
            if not rows.any():
                continue
            s, a = scores[rows], answer[rows]
            if kind is TargetKind.BOX:
                parts = samplewise_parts(s, a)
                ok = parts[2]
                if not ok.any():
                    continue
                vals = {"AUROC": float(parts[0][ok].mean()), "mAP": float(parts[1][ok].mean())}
            else:
                labels = np.zeros(s.shape, bool)
                labels[np.arange(len(a)), a] = True
                valid = np.isfinite(s)
                vals = {"AUROC": auroc_micro(s[valid], labels[valid]),
                        "mAP": average_precision(s[valid], labels[valid])}
            for me in METRICS:
                if vals[me] is not None and math.isfinite(vals[me]):
                    report.values[(QuestionType(qt).name, sp, me)] = vals[me]
    return report


def reports_to_csv(reports, fh=None) -> str:
    buf = fh or io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        for row in r.rows():
            w.writerow(row[:-1] + [repr(float(row[-1]))])
    return buf.getvalue() if fh is None else ""


def omega_table(reports: list[IncrementReport], offline: IncrementReport) -> list[list]:
    """One row per (seed, sampler, qtype, split, metric) cell."""
    cells: dict[tuple, list[float]] = {}
    meta = {}
    for r in sorted(reports, key=lambda r: r.increment):
        for key, v in r.values.items():
            cells.setdefault((r.seed, r.sampler) + key, []).append(v)
            meta[(r.seed, r.sampler) + key] = key
    rows = []
    for k, gammas in cells.items():
        key = meta[k]
        if key not in offline.values:
            continue
        rows.append([k[0], k[1], *key, omega(gammas, offline.values[key])])
    return rows
