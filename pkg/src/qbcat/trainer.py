"""Incremental training protocol.

One increment: snapshot the model, pick an epoch count by cross-validation,
restore, train that many epochs on replay + new data, optionally fit a bias
correction for evaluation, then grow the replay buffer.

Re-balanced batches hold ``M/2`` new samples and ``M/2`` old ones. The old
half is made of ``M/4`` (question, wrong candidate) hard-negative pairs: the
question contributes a positive row and the wrong candidate a row that only
adds repulsive mass to the loss denominator.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np
from scipy.special import log_softmax, softmax

from .metrics import BiasParams, IncrementReport
from .model import TrainBatch, TripleModel, batch_loss_and_grads, score_questions
from .numerics import CosineAnneal, Mode, OptimKind, OptimState, adam_step, sgd_momentum_step
from .schema import (ClassDictionary, QuestionTable, QuestionType, SceneSplit, TargetKind,
                     take)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_M: int = 512
    mining_pool: int = 800
    top_l: int = 3
    cv_k: int = 5
    cv_patience: int = 10
    max_epochs: int = 100
    pretrain_per_class: int = 2500
    pretrain_epochs: int = 1
    offline_epochs: int = 25
    bias_stage1_epochs: int = 10
    bias_stage1_lr: float = 0.01
    bias_stage2_iters: int = 500
    bias_stage2_lr: float = 0.01
    standard_batch: int = 256
    embed_dim: int = 128
    hidden: int = 256

    def validate(self):
        if self.batch_M < 4 or self.batch_M % 4:
            raise ValueError("batch_M must be a positive multiple of 4")
        if self.cv_k < 2:
            raise ValueError("cv_k must be >= 2")
        if self.standard_batch < 2:
            raise ValueError("standard_batch must be >= 2")
        if min(self.lr, self.bias_stage1_lr, self.bias_stage2_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.mining_pool, self.top_l, self.cv_patience, self.max_epochs,
               self.pretrain_per_class, self.embed_dim, self.hidden) < 1:
            raise ValueError("counts and sizes must be >= 1")
        if min(self.pretrain_epochs, self.offline_epochs, self.bias_stage1_epochs,
               self.bias_stage2_iters) < 0:
            raise ValueError("epoch/iteration counts must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainData:
    """The labeled-side view of one split that training code works on."""

    table: QuestionTable
    features: np.ndarray
    image_boxes: dict[int, np.ndarray]
    dictionary: ClassDictionary

    @classmethod
    def from_split(cls, split: SceneSplit, features, dictionary) -> "TrainData":
        return cls(split.questions, features, split.image_boxes, dictionary)


def new_model(data: TrainData, cfg: TrainConfig, seed) -> TripleModel:
    d = data.dictionary
    return TripleModel(d.n_attr, d.n_pred, data.features.shape[1], cfg.embed_dim, cfg.hidden, seed=seed)


# --- optimisation steps ------------------------------------------------------------

def make_batch(data: TrainData, pos_ids, neg_src=(), neg_cand=()) -> TrainBatch:
    """Positive rows for ``pos_ids``; negative row ``j`` reuses positive row
    ``neg_src[j]`` against candidate ``neg_cand[j]``."""
    pos_ids = np.asarray(pos_ids, dtype=np.int64)
    neg_src = np.asarray(neg_src, dtype=np.int64)
    q = take(data.table, pos_ids)
    kind = q.target_kind[neg_src] if neg_src.size else np.zeros(0, np.int64)
    return TrainBatch(q, neg_src, np.asarray(kind, np.int64), np.asarray(neg_cand, dtype=np.int64))


def sgd_state() -> OptimState:
    return OptimState(OptimKind.SGD_MOMENTUM)


def sgd_step(model: TripleModel, data: TrainData, batch: TrainBatch, cfg: TrainConfig,
             state: OptimState) -> float:
    loss, grads = batch_loss_and_grads(model, batch, data.features, Mode.TRAIN)
    sgd_momentum_step(model.parameters(), grads, state, cfg.lr, cfg.momentum, cfg.weight_decay,
                      decay=model.decay_names())
    return loss


def standard_batches(ids: np.ndarray, size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One shuffled pass over ``ids`` in chunks of ``size``."""
    ids = np.asarray(ids, dtype=np.int64)
    perm = ids[rng.permutation(ids.size)]
    for s in range(0, perm.size, size):
        yield perm[s:s + size]


def n_standard_batches(n: int, size: int) -> int:
    return math.ceil(n / size)


def train_standard(model: TripleModel, data: TrainData, ids, epochs: int, cfg: TrainConfig,
                   rng: np.random.Generator, state: OptimState | None = None) -> OptimState:
    """Uniform mini-batches of ``cfg.standard_batch`` with SGD + momentum."""
    state = state or sgd_state()
    for _ in range(epochs):
        for b in standard_batches(ids, cfg.standard_batch, rng):
            sgd_step(model, data, make_batch(data, b), cfg, state)
    return state


# --- pre-training --------------------------------------------------------------------

def pretrain_ids(data: TrainData, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``cap`` questions per head class, drawn without replacement.

    Attribute classes collect attribute questions with that attribute;
    predicate classes (``has attribute`` excluded) collect relation questions
    with that predicate."""
    d, t = data.dictionary, data.table
    groups = []
    for c in np.flatnonzero(d.attribute_head):
        groups.append(np.flatnonzero(t.is_attr & (t.attr == c)))
    ha = d.has_attribute_id
    for c in np.flatnonzero(d.predicate_head):
        if c != ha:
            groups.append(np.flatnonzero(~t.is_attr & (t.pred == c)))
    if not groups:
        raise ValueError("no head classes to pre-train on")
    out = [g if g.size <= cap else np.sort(rng.choice(g, size=cap, replace=False)) for g in groups]
    return np.concatenate(out).astype(np.int64)


def pretrain(model: TripleModel, data: TrainData, cfg: TrainConfig,
             rng: np.random.Generator) -> list[int]:
    """Train on the head-class seed data; returns it as the initial replay buffer."""
    ids = pretrain_ids(data, cfg.pretrain_per_class, rng)
    train_standard(model, data, ids, cfg.pretrain_epochs, cfg, rng)
    return ids.tolist()


def train_offline(data: TrainData, cfg: TrainConfig, seed, rng: np.random.Generator) -> TripleModel:
    """Upper bound: every train question, standard batches, no bias correction."""
    model = new_model(data, cfg, seed)
    train_standard(model, data, np.arange(len(data.table)), cfg.offline_epochs, cfg, rng)
    return model


# --- hard negatives ------------------------------------------------------------------

class HardNegativeBuffer:
    """Insertion-ordered set of (question id, wrong candidate) pairs."""

    def __init__(self):
        self._pairs: dict[tuple[int, int], None] = {}

    def __len__(self) -> int:
        return len(self._pairs)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self._pairs

    def add(self, pairs):
        for q, c in pairs:
            self._pairs[(int(q), int(c))] = None

    def pairs(self) -> list[tuple[int, int]]:
        return list(self._pairs)

    def sample(self, k: int, rng: np.random.Generator) -> list[tuple[int, int]]:
        """``min(k, len)`` distinct pairs, uniformly."""
        pairs = self.pairs()
        if k >= len(pairs):
            return pairs
        return [pairs[i] for i in np.sort(rng.choice(len(pairs), size=k, replace=False))]

    def clear(self):
        self._pairs.clear()


def hard_negatives_from_scores(candidates: np.ndarray, scores: np.ndarray, answers: np.ndarray,
                               top_l: int) -> list[tuple[int, int]]:
    """Row indices and top wrong candidate for rows whose answer ranks below
    ``top_l``. Rank is one plus the number of strictly higher scores."""
    hit = candidates == answers[:, None]
    found = hit.any(axis=1)
    col = hit.argmax(axis=1)
    rows = np.arange(len(scores))
    ans_score = scores[rows, col]
    rank = 1 + (scores > ans_score[:, None]).sum(axis=1)
    wrong = np.where(hit, -np.inf, scores)
    best = wrong.argmax(axis=1)
    ok = found & (rank > top_l) & np.isfinite(wrong[rows, best])
    return [(int(r), int(candidates[r, best[r]])) for r in np.flatnonzero(ok)]


def mine_hard_negatives(model: TripleModel, data: TrainData, ids, top_l: int) -> list[tuple[int, int]]:
    """(question id, top wrong candidate) for every question in ``ids``
    whose answer falls outside the model's top-``top_l`` candidates."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return []
    sb = score_questions(model, take(data.table, ids), data.features, data.image_boxes)
    found = hard_negatives_from_scores(sb.candidates, sb.scores, data.table.target[ids], top_l)
    return [(int(ids[r]), c) for r, c in found]


# --- re-balanced batches --------------------------------------------------------------

class _Stream:
    """Endless reshuffled passes over ``ids``."""

    def __init__(self, ids, rng: np.random.Generator):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.rng = rng
        self._buf = np.zeros(0, np.int64)

    def take(self, k: int) -> np.ndarray:
        if self.ids.size == 0:
            raise ValueError("cannot draw from an empty stream")
        parts, need = [], k
        while need > 0:
            if self._buf.size == 0:
                self._buf = self.ids[self.rng.permutation(self.ids.size)]
            got = self._buf[:need]
            self._buf = self._buf[need:]
            parts.append(got)
            need -= got.size
        return np.concatenate(parts)


@dataclass
class RebalancedBatch:
    new: np.ndarray
    pair_questions: np.ndarray
    pair_candidates: np.ndarray
    fills: np.ndarray

    @property
    def n_old(self) -> int:
        return 2 * self.pair_questions.size + self.fills.size

    def to_train_batch(self, data: TrainData) -> TrainBatch:
        pos = np.concatenate([self.new, self.pair_questions, self.fills])
        src = self.new.size + np.arange(self.pair_questions.size)
        return make_batch(data, pos, src, self.pair_candidates)


class RebalancedBatcher:
    """Half new data, half replay data with mined hard negatives.

    An epoch has ``ceil(n_new / (M/2))`` batches drawn from an endless
    stream of reshuffled passes over the new data, so when ``M/2`` divides
    ``n_new`` every new sample appears exactly once per epoch.
    """

    def __init__(self, data: TrainData, new_ids, replay_ids, cfg: TrainConfig,
                 rng: np.random.Generator, buffer: HardNegativeBuffer | None = None,
                 model: TripleModel | None = None):
        new_ids = np.asarray(new_ids, dtype=np.int64)
        if new_ids.size == 0:
            raise ValueError("re-balanced batches need new data")
        if cfg.batch_M % 4:
            raise ValueError("batch_M must be divisible by 4")
        self.data, self.cfg, self.rng = data, cfg, rng
        self.replay = np.asarray(replay_ids, dtype=np.int64)
        self.half = cfg.batch_M // 2
        self.n_new = new_ids.size
        self._new = _Stream(new_ids, rng)
        self._mine = _Stream(self.replay, rng) if self.replay.size else None
        self.buffer = buffer if buffer is not None else HardNegativeBuffer()
        self.model = model

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.n_new / self.half)

    def next_batch(self) -> RebalancedBatch:
        new = self._new.take(self.half)
        n_pairs = self.cfg.batch_M // 4
        pairs: list[tuple[int, int]] = []
        if self.model is not None and self._mine is not None:
            pool = self._mine.take(min(self.cfg.mining_pool, self.replay.size))
            self.buffer.add(mine_hard_negatives(self.model, self.data, pool, self.cfg.top_l))
            pairs = self.buffer.sample(n_pairs, self.rng)
        shortfall = 2 * (n_pairs - len(pairs))
        source = self.replay if self.replay.size else self._new.ids
        fills = (self.rng.choice(source, size=shortfall, replace=shortfall > source.size)
                 if shortfall else np.zeros(0, np.int64))
        pairs_q = np.array([p[0] for p in pairs], np.int64)
        pairs_c = np.array([p[1] for p in pairs], np.int64)
        return RebalancedBatch(new, pairs_q, pairs_c, np.asarray(fills, np.int64))

    def epoch(self) -> Iterator[RebalancedBatch]:
        for _ in range(self.batches_per_epoch):
            yield self.next_batch()


BatchHook = Callable[[RebalancedBatch], None]


def train_rebalanced(model: TripleModel, data: TrainData, new_ids, replay_ids, epochs: int,
                     cfg: TrainConfig, rng: np.random.Generator, buffer: HardNegativeBuffer,
                     state: OptimState | None = None, on_batch: BatchHook | None = None):
    batcher = RebalancedBatcher(data, new_ids, replay_ids, cfg, rng, buffer, model)
    state = state or sgd_state()
    for _ in range(epochs):
        for b in batcher.epoch():
            if on_batch:
                on_batch(b)
            sgd_step(model, data, b.to_train_batch(data), cfg, state)
    return state


# --- cross-validation ----------------------------------------------------------------

def select_epoch(run_epoch: Callable[[int], float], patience: int, max_epochs: int):
    """Call ``run_epoch(e)`` for e = 1, 2, ... until the loss has not improved
    for ``patience`` epochs or ``max_epochs`` is reached. Returns the
    1-based epoch of the lowest loss (earliest on ties) and all losses."""
    losses: list[float] = []
    best, best_loss = 0, math.inf
    for e in range(1, max_epochs + 1):
        loss = float(run_epoch(e))
        losses.append(loss)
        if loss < best_loss:
            best, best_loss = e, loss
        elif e - best >= patience:
            break
    return best, losses


def strata_keys(table: QuestionTable, ids) -> np.ndarray:
    """Stratum per question: (qtype, class) for class targets, qtype for boxes."""
    ids = np.asarray(ids, dtype=np.int64)
    qt = table.qtype[ids]
    boxy = table.target_kind[ids] == TargetKind.BOX
    cls = np.where(boxy, -1, table.target[ids])
    return qt * 1_000_003 + cls + 1


def stratified_folds(keys, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold index per element; members of each stratum are dealt round-robin
    after a shuffle, continuing the deal where the previous stratum ended."""
    keys = np.asarray(keys)
    folds = np.empty(keys.size, dtype=np.int64)
    nxt = 0
    for key in np.unique(keys):
        members = np.flatnonzero(keys == key)
        members = members[rng.permutation(members.size)]
        folds[members] = (nxt + np.arange(members.size)) % k
        nxt = (nxt + members.size) % k
    return folds


def _split_fold(data: TrainData, ids, k: int, rng) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(ids, dtype=np.int64)
    folds = stratified_folds(strata_keys(data.table, ids), k, rng)
    if np.bincount(folds, minlength=k).min() == 0:
        raise ValueError(f"cannot split {ids.size} samples into {k} non-empty folds")
    return ids[folds != 0], ids[folds == 0]


def validation_batches(new_val, old_val, half: int, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed (new, old) id arrays of ``half`` each, covering ``new_val`` once."""
    new_s, old_s = _Stream(new_val, rng), _Stream(old_val if len(old_val) else new_val, rng)
    return [(new_s.take(half), old_s.take(half)) for _ in range(math.ceil(len(new_val) / half))]


def validation_loss(model: TripleModel, data: TrainData, batches) -> float:
    losses = [batch_loss_and_grads(model, make_batch(data, np.concatenate(b)), data.features,
                                   Mode.EVAL, need_grads=False)[0] for b in batches]
    return float(np.mean(losses))


def cross_validate(model: TripleModel, data: TrainData, replay_ids, new_ids, cfg: TrainConfig,
                   rng: np.random.Generator, rebalanced: bool = True,
                   on_batch: BatchHook | None = None) -> tuple[int, list[float]]:
    """Best epoch count from a single train/validation round. Mutates
    ``model``; callers snapshot and restore around it."""
    new_tr, new_va = _split_fold(data, new_ids, cfg.cv_k, rng)
    rep_tr, rep_va = (_split_fold(data, replay_ids, cfg.cv_k, rng) if len(replay_ids)
                      else (np.zeros(0, np.int64),) * 2)
    state = sgd_state()
    if rebalanced:
        batches = validation_batches(new_va, rep_va, cfg.batch_M // 2, rng)
        batcher = RebalancedBatcher(data, new_tr, rep_tr, cfg, rng, HardNegativeBuffer(), model)

        def run_epoch(_):
            for b in batcher.epoch():
                if on_batch:
                    on_batch(b)
                sgd_step(model, data, b.to_train_batch(data), cfg, state)
            return validation_loss(model, data, batches)
    else:
        train_ids = np.concatenate([rep_tr, new_tr])
        val_ids = np.concatenate([rep_va, new_va])
        batches = [(c, np.zeros(0, np.int64)) for c in standard_batches(val_ids, cfg.standard_batch, rng)]

        def run_epoch(_):
            train_standard(model, data, train_ids, 1, cfg, rng, state)
            return validation_loss(model, data, batches)

    return select_epoch(run_epoch, cfg.cv_patience, cfg.max_epochs)


# --- bias correction -------------------------------------------------------------------

def fit_bias_stage2(scores: np.ndarray, labels: np.ndarray, iters: int, lr: float):
    """Per-class (alpha, beta) minimising the mean cross-entropy of
    ``softmax(alpha * s + beta)`` by full-batch gradient descent. Classes
    without any example keep (1, 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, c = s.shape
    alpha, beta = np.ones(c), np.zeros(c)
    if n == 0:
        return alpha, beta
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    seen = onehot.any(axis=0)
    for _ in range(iters):
        p = softmax(alpha * s + beta, axis=1)
        r = (p - onehot) / n
        alpha -= lr * np.where(seen, (r * s).sum(axis=0), 0.0)
        beta -= lr * np.where(seen, r.sum(axis=0), 0.0)
    return alpha, beta


def bias_cross_entropy(scores, labels, alpha, beta) -> float:
    lp = log_softmax(np.asarray(scores, np.float64) * alpha + beta, axis=1)
    return float(-lp[np.arange(len(labels)), labels].mean())


def fit_bias(model: TripleModel, data: TrainData, replay_ids, cfg: TrainConfig) -> BiasParams:
    d = data.dictionary
    bias = BiasParams.identity(d.n_pred, d.n_attr)
    replay_ids = np.asarray(replay_ids, dtype=np.int64)
    for qt, kind in ((QuestionType.SPOP, TargetKind.PREDICATE), (QuestionType.SPAA, TargetKind.ATTRIBUTE)):
        ids = replay_ids[data.table.qtype[replay_ids] == qt]
        if ids.size == 0:
            continue
        sb = score_questions(model, take(data.table, ids), data.features, data.image_boxes)
        n_cls = d.n_pred if kind is TargetKind.PREDICATE else d.n_attr
        a, b = fit_bias_stage2(sb.scores[:, :n_cls], data.table.target[ids], cfg.bias_stage2_iters,
                               cfg.bias_stage2_lr)
        if kind is TargetKind.PREDICATE:
            bias.pred_alpha, bias.pred_beta = a, b
        else:
            bias.attr_alpha, bias.attr_beta = a, b
    return bias


@contextlib.contextmanager
def bias_corrected(model: TripleModel, data: TrainData, replay_ids, cfg: TrainConfig,
                   rng: np.random.Generator):
    """Fine-tune on the replay buffer (Adam, cosine schedule), fit per-class
    score calibration, and yield it. On exit the model is restored exactly."""
    replay_ids = np.asarray(replay_ids, dtype=np.int64)
    if replay_ids.size == 0:
        raise ValueError("bias correction needs a non-empty replay buffer")
    snap = model.snapshot()
    before = model.tensor_hash()
    try:
        per_epoch = n_standard_batches(replay_ids.size, cfg.standard_batch)
        total = max(1, cfg.bias_stage1_epochs * per_epoch)
        sched = CosineAnneal(total)
        state = OptimState(OptimKind.ADAM)
        for _ in range(cfg.bias_stage1_epochs):
            for b in standard_batches(replay_ids, cfg.standard_batch, rng):
                _, grads = batch_loss_and_grads(model, make_batch(data, b), data.features, Mode.TRAIN)
                adam_step(model.parameters(), grads, state, cfg.bias_stage1_lr, sched)
        yield fit_bias(model, data, replay_ids, cfg)
    finally:
        model.restore(snap)
        assert model.tensor_hash() == before, "parameter reset failed"


# --- increments ------------------------------------------------------------------------

@dataclass
class Protocol:
    """Ablation toggles and observation hooks for an increment."""

    rebalanced: bool = True
    bias_correction: bool = True
    on_batch: BatchHook | None = None


@dataclass
class LearnerState:
    model: TripleModel
    replay: list[int]
    rng: np.random.Generator
    buffer: HardNegativeBuffer = field(default_factory=HardNegativeBuffer)
    increment: int = 0


@dataclass
class IncrementOutcome:
    best_epoch: int
    cv_losses: list[float]
    bias: BiasParams | None
    report: IncrementReport | None


Evaluator = Callable[[TripleModel, "BiasParams | None"], IncrementReport]


def run_increment(state: LearnerState, data: TrainData, new_ids, cfg: TrainConfig,
                  evaluate: Evaluator | None = None, protocol: Protocol | None = None) -> IncrementOutcome:
    protocol = protocol or Protocol()
    new_ids = np.asarray(new_ids, dtype=np.int64)
    if new_ids.size == 0:
        raise ValueError("an increment needs newly labeled data")
    model, rng = state.model, state.rng
    snap = model.snapshot()
    best, losses = cross_validate(model, data, state.replay, new_ids, cfg, rng,
                                  protocol.rebalanced, protocol.on_batch)
    model.restore(snap)
    log.debug("increment %d: best epoch %d of %d", state.increment + 1, best, len(losses))
    if protocol.rebalanced:
        train_rebalanced(model, data, new_ids, state.replay, best, cfg, rng, state.buffer,
                         on_batch=protocol.on_batch)
    else:
        all_ids = np.concatenate([np.asarray(state.replay, np.int64), new_ids])
        train_standard(model, data, all_ids, best, cfg, rng)
    # drawn unconditionally so the training stream is the same with or without correction
    bias_rng = np.random.default_rng(int(rng.integers(2**63)))
    bias, report = None, None
    if protocol.bias_correction:
        with bias_corrected(model, data, np.concatenate([np.asarray(state.replay, np.int64), new_ids]),
                            cfg, bias_rng) as bias:
            report = evaluate(model, bias) if evaluate else None
    elif evaluate:
        report = evaluate(model, None)
    state.replay.extend(new_ids.tolist())
    state.buffer.clear()
    state.increment += 1
    return IncrementOutcome(best, losses, bias, report)
