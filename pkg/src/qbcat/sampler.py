"""Active sampling.

Classical samplers weight unlabeled *questions* by model uncertainty and ask
the oracle to label the chosen ones. Query-by-category samplers weight
*classes* and ask the oracle for examples of the chosen classes. The oracle
is simulated: it holds the hidden targets of the unlabeled pool.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .model import TripleModel, score_questions
from .schema import ClassDictionary, Question, QuestionTable, QuestionType, TargetKind, take

log = logging.getLogger(__name__)


class SamplerKind(enum.Enum):
    RANDOM = "Random"
    LEAST_CONFIDENT = "LeastConfident"
    MIN_MARGIN = "MinMargin"
    MAX_ENTROPY = "MaxEntropy"
    QBCAT_TAIL = "QBCatTail"
    QBCAT_TAIL_FREQ = "QBCatTailFreq"

    @property
    def is_qbcat(self) -> bool:
        return self in (SamplerKind.QBCAT_TAIL, SamplerKind.QBCAT_TAIL_FREQ)

    @classmethod
    def parse(cls, name: str) -> "SamplerKind":
        aliases = {"confidence": cls.LEAST_CONFIDENT, "margin": cls.MIN_MARGIN,
                   "entropy": cls.MAX_ENTROPY}
        for k in cls:
            if k.value.lower() == name.lower() or k.name.lower() == name.lower():
                return k
        if name.lower() in aliases:
            return aliases[name.lower()]
        raise ValueError(f"unknown sampler {name!r}")


class SamplingError(RuntimeError):
    pass


def class_vocabulary(qtype: QuestionType) -> TargetKind:
    """Which class vocabulary a question type is attributed to."""
    return TargetKind.ATTRIBUTE if QuestionType(qtype).is_attribute else TargetKind.PREDICATE


# --- classical ------------------------------------------------------------------------

def uncertainty_weights(kind: SamplerKind, scores: np.ndarray) -> np.ndarray:
    """Per-question weights from padded score rows (``-inf`` = padding).
    Larger weight means more uncertain. Rows with a single candidate get the
    smallest weight of the others."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[None, :]
    valid = np.isfinite(scores)
    n_valid = valid.sum(axis=1)
    if np.any(n_valid == 0):
        raise SamplingError("empty score vector")
    if kind is SamplerKind.RANDOM:
        return np.ones(len(scores))
    if kind is SamplerKind.LEAST_CONFIDENT:
        w = -scores.max(axis=1)
    elif kind is SamplerKind.MIN_MARGIN:
        top2 = -np.sort(-np.where(valid, scores, -np.inf), axis=1)[:, :2]
        if top2.shape[1] < 2:
            top2 = np.concatenate([top2, np.full((len(top2), 1), -np.inf)], axis=1)
        with np.errstate(invalid="ignore"):
            w = -(top2[:, 0] - top2[:, 1])
    elif kind is SamplerKind.MAX_ENTROPY:
        lp = np.where(valid, log_softmax(np.where(valid, scores, -np.inf), axis=1), 0.0)
        w = -(np.exp(lp) * lp * valid).sum(axis=1)
    else:
        raise ValueError(f"{kind} does not weight questions")
    single = n_valid < 2
    if single.any():
        w[single] = w[~single].min() if (~single).any() else 0.0
    if not np.all(np.isfinite(w)):
        raise SamplingError("non-finite uncertainty weight")
    return w


def shift_and_normalize(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-empty")
    w = w + (1.0 - w.min())
    return w / w.sum()


def weighted_sample_without_replacement(p: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct indices, distributed as sequential draws proportional
    to ``p`` with renormalisation (exponential-key method)."""
    p = np.asarray(p, dtype=np.float64)
    k = min(k, int(np.count_nonzero(p > 0)))
    keys = np.full(p.shape, -np.inf)
    pos = p > 0
    keys[pos] = np.log(rng.random(pos.sum())) / p[pos]
    return np.argsort(-keys, kind="stable")[:k]


@dataclass
class SamplingPlan:
    """Per question type: question ids to label, or class ids to request
    together with the class distribution they were drawn from."""

    kind: SamplerKind
    ids: dict[QuestionType, np.ndarray] = field(default_factory=dict)
    classes: dict[QuestionType, np.ndarray] = field(default_factory=dict)
    class_probs: dict[QuestionType, np.ndarray] = field(default_factory=dict)


def classic_select(kind: SamplerKind, model: TripleModel, table: QuestionTable, pool: np.ndarray,
                   features: np.ndarray, image_boxes, per_qtype: int,
                   rng: np.random.Generator) -> SamplingPlan:
    """Weighted sampling without replacement of ``per_qtype`` unlabeled
    questions of each type from ``pool`` (question ids of ``table``)."""
    pool = np.asarray(pool, dtype=np.int64)
    plan = SamplingPlan(kind)
    for qt in QuestionType:
        ids = np.sort(pool[table.qtype[pool] == qt])
        if ids.size == 0:
            raise SamplingError(f"no unlabeled {qt.name} questions left")
        if ids.size <= per_qtype:
            plan.ids[qt] = ids
            continue
        if kind is SamplerKind.RANDOM:
            w = np.ones(ids.size)
        else:
            sb = score_questions(model, take(table, ids), features, image_boxes)
            w = uncertainty_weights(kind, sb.scores)
        chosen = weighted_sample_without_replacement(shift_and_normalize(w), per_qtype, rng)
        plan.ids[qt] = ids[np.sort(chosen)]
    return plan


# --- query by category --------------------------------------------------------------------

def qbcat_class_scores(kind: SamplerKind, dictionary: ClassDictionary, vocab: TargetKind) -> np.ndarray:
    tail = ~dictionary.head_mask(vocab)
    if not tail.any():
        raise SamplingError(f"no tail classes in the {vocab.name.lower()} vocabulary")
    if kind is SamplerKind.QBCAT_TAIL:
        return tail.astype(np.float64)
    if kind is SamplerKind.QBCAT_TAIL_FREQ:
        counts = dictionary.counts(vocab).astype(np.float64)
        return np.where(tail, counts / counts.sum(), 0.0)
    raise ValueError(f"{kind} is not a query-by-category sampler")


def qbcat_select(kind: SamplerKind, dictionary: ClassDictionary, per_qtype: int,
                 rng: np.random.Generator) -> SamplingPlan:
    """``per_qtype`` class requests per question type, drawn with replacement."""
    plan = SamplingPlan(kind)
    for qt in QuestionType:
        w = qbcat_class_scores(kind, dictionary, class_vocabulary(qt))
        if w.sum() <= 0:
            raise SamplingError(f"tail classes for {qt.name} carry no weight")
        p = w / w.sum()
        plan.classes[qt] = rng.choice(len(p), size=per_qtype, replace=True, p=p)
        plan.class_probs[qt] = p
    return plan


# --- oracle ------------------------------------------------------------------------------

class Oracle:
    """Owns the unlabeled pool and its hidden targets.

    Questions leave the pool only through :meth:`label` and :meth:`provide`.
    Every transaction is appended to :attr:`audit`.
    """

    def __init__(self, table: QuestionTable, unlabeled):
        self._table = table
        self._unlabeled = np.zeros(len(table), dtype=bool)
        self._unlabeled[np.asarray(list(unlabeled), dtype=np.int64)] = True
        self._buckets: dict[tuple[int, int], list[int]] = {}
        self._where: dict[int, int] = {}
        for i in np.flatnonzero(self._unlabeled):
            key = (int(table.qtype[i]), int(table.cls[i]))
            b = self._buckets.setdefault(key, [])
            self._where[int(i)] = len(b)
            b.append(int(i))
        self.visits: dict[tuple[str, int], int] = {}
        self.audit: list[dict] = []
        self.increment = 0

    def __len__(self) -> int:
        return int(self._unlabeled.sum())

    def unlabeled_ids(self) -> np.ndarray:
        return np.flatnonzero(self._unlabeled)

    def available(self, qtype: QuestionType, cls: int) -> int:
        return len(self._buckets.get((int(qtype), int(cls)), ()))

    def _remove(self, i: int):
        key = (int(self._table.qtype[i]), int(self._table.cls[i]))
        b = self._buckets[key]
        pos = self._where.pop(i)
        last = b.pop()
        if last != i:
            b[pos] = last
            self._where[last] = pos
        self._unlabeled[i] = False
        vocab = class_vocabulary(QuestionType(key[0])).name.lower()
        self.visits[(vocab, key[1])] = self.visits.get((vocab, key[1]), 0) + 1

    def _question(self, i: int) -> Question:
        return self._table.question(i)

    def label(self, ids, sampler: str = "") -> list[Question]:
        ids = [int(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise KeyError("duplicate ids in a labeling request")
        for i in ids:
            if not 0 <= i < len(self._unlabeled) or not self._unlabeled[i]:
                raise KeyError(f"question {i} is unknown or already labeled")
        out = []
        for i in ids:
            self._remove(i)
            q = self._question(i)
            out.append(q)
            self.audit.append({"increment": self.increment, "qtype": q.qtype.name, "kind": sampler,
                               "request": "id", "value": i, "provided": i,
                               "class": int(self._table.cls[i]), "outcome": "labeled"})
        return out

    def provide(self, cls: int, qtype: QuestionType, rng: np.random.Generator,
                class_probs: np.ndarray | None = None, sampler: str = "") -> int:
        """Id of a uniformly chosen unlabeled ``qtype`` question of class
        ``cls``. An exhausted class is replaced by a fresh draw from
        ``class_probs`` over the classes that still have examples."""
        qtype = QuestionType(qtype)
        requested = int(cls)
        cls = requested
        outcome = "ok"
        if self.available(qtype, cls) == 0:
            if class_probs is None:
                raise SamplingError(f"class {cls} exhausted for {qtype.name}")
            avail = np.array([self.available(qtype, c) > 0 for c in range(len(class_probs))])
            p = np.where(avail, class_probs, 0.0)
            if p.sum() <= 0:
                raise SamplingError(f"all requestable classes exhausted for {qtype.name}")
            cls = int(rng.choice(len(p), p=p / p.sum()))
            outcome = "fallback"
            log.info("class %d exhausted for %s; substituted class %d", requested, qtype.name, cls)
        bucket = self._buckets[(int(qtype), cls)]
        i = bucket[int(rng.integers(len(bucket)))]
        self._remove(i)
        self.audit.append({"increment": self.increment, "qtype": qtype.name, "kind": sampler,
                           "request": "class", "value": requested, "provided": i,
                           "class": cls, "outcome": outcome})
        return i


def fulfil(plan: SamplingPlan, oracle: Oracle, rng: np.random.Generator) -> np.ndarray:
    """Run a plan against the oracle; returns newly labeled question ids."""
    out = []
    name = plan.kind.value
    for qt in QuestionType:
        if qt in plan.ids:
            out.extend(q_id for q_id in plan.ids[qt].tolist())
            oracle.label(plan.ids[qt], sampler=name)
        if qt in plan.classes:
            for c in plan.classes[qt]:
                out.append(oracle.provide(int(c), qt, rng, plan.class_probs.get(qt), sampler=name))
    return np.asarray(out, dtype=np.int64)
