"""Triple-completion network and the NCA-style metric loss.

Layout (names used as parameter prefixes)::

    box_net            F_O   box feature -> R^d        (2-layer MLP)
    box_target_net     F_OT  box feature -> R^d        (2-layer MLP)
    fusion_net         G     [subject; predicate; object] in R^3d -> R^d
    attr_embed         F_A   attribute lookup table
    pred_embed         F_P   predicate lookup table
    attr_target_embed  F_AT
    pred_target_embed  F_PT
    null_box / null_pred / null_attr   trainable placeholders for the masked slot

A question embeds its two known elements, drops the matching null vector in
the masked slot, concatenates, and runs the fusion net. Candidates are
scored by negative squared Euclidean distance to their target embedding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import MLP, Mode, check_finite
from .schema import (QuestionArrays, QuestionType, SchemaError, TargetKind, load_feature_store,
                     save_feature_store)

Q = QuestionType


class TripleModel:
    def __init__(self, n_attr: int, n_pred: int, feat_dim: int, dim: int = 128, hidden: int = 256,
                 seed: int | np.random.Generator = 0, dtype=np.float32):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.n_attr, self.n_pred, self.feat_dim, self.dim = n_attr, n_pred, feat_dim, dim
        self.dtype = np.dtype(dtype)
        self.box_net = MLP([feat_dim, hidden, dim], rng, dtype)
        self.box_target_net = MLP([feat_dim, hidden, dim], rng, dtype)
        self.fusion_net = MLP([3 * dim, hidden, dim], rng, dtype)

        def table(n):
            return rng.uniform(-0.05, 0.05, size=(n, dim)).astype(dtype)

        self.attr_embed = table(n_attr)
        self.pred_embed = table(n_pred)
        self.attr_target_embed = table(n_attr)
        self.pred_target_embed = table(n_pred)
        self.null_box = table(1)[0]
        self.null_pred = table(1)[0]
        self.null_attr = table(1)[0]

    # --- parameter bookkeeping ---------------------------------------------------

    _TABLES = ("attr_embed", "pred_embed", "attr_target_embed", "pred_target_embed",
               "null_box", "null_pred", "null_attr")
    _NETS = ("box_net", "box_target_net", "fusion_net")

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self._NETS:
            out.update(getattr(self, n).parameters(prefix=f"{n}."))
        for n in self._TABLES:
            out[n] = getattr(self, n)
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self._NETS:
            out.update(getattr(self, n).buffers(prefix=f"{n}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def decay_names(self) -> set[str]:
        """Parameters that receive weight decay: dense weights and lookup tables."""
        names = {k for k in self.parameters() if k.endswith(".weight")}
        return names | {"attr_embed", "pred_embed", "attr_target_embed", "pred_target_embed"}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_dict().items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for k, v in self.state_dict().items():
            np.copyto(v, snap[k])

    def tensor_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def copy(self) -> "TripleModel":
        new = object.__new__(TripleModel)
        new.__dict__.update({k: v for k, v in self.__dict__.items()})
        for n in self._NETS:
            src = getattr(self, n)
            net = object.__new__(MLP)
            net.layers = [type(l)(**{f: (getattr(l, f).copy() if isinstance(getattr(l, f), np.ndarray)
                                         else getattr(l, f)) for f in l.__dataclass_fields__})
                          for l in src.layers]
            setattr(new, n, net)
        for n in self._TABLES:
            setattr(new, n, getattr(self, n).copy())
        return new

    # --- forward passes ---------------------------------------------------------

    def _run(self, net: MLP, x: np.ndarray, mode: Mode):
        if x.shape[0] == 0:
            return np.zeros((0, self.dim), self.dtype), None
        # a lone row cannot produce batch statistics; fall back to running stats
        m = Mode.EVAL if (mode is Mode.TRAIN and x.shape[0] < 2) else mode
        return net.forward(x.astype(self.dtype, copy=False), m)

    def embed_questions(self, q: QuestionArrays, features: np.ndarray, mode: Mode = Mode.EVAL):
        """Returns ``(embeddings (n, d), tape)``."""
        qt = q.qtype
        if np.any((q.attr >= self.n_attr) | (q.pred >= self.n_pred)):
            raise IndexError("class id out of range")
        d = self.dim
        is_attr = q.attr >= 0
        subj_known = ~np.isin(qt, (Q.SPOS, Q.SPAS))
        pred_known = ~np.isin(qt, (Q.SPOP, Q.SPAP))
        objbox_known = ~is_attr & (qt != Q.SPOO)
        attr_known = is_attr & (qt != Q.SPAA)
        obj_null_box = ~is_attr & (qt == Q.SPOO)
        obj_null_attr = is_attr & (qt == Q.SPAA)

        ns = int(subj_known.sum())
        boxes = np.concatenate([q.subj[subj_known], q.obj_box[objbox_known]])
        B, box_cache = self._run(self.box_net, features[boxes], mode)

        h = np.empty((len(qt), 3 * d), self.dtype)
        h[:, :d] = self.null_box
        h[subj_known, :d] = B[:ns]
        h[:, d:2 * d] = self.null_pred
        h[pred_known, d:2 * d] = self.pred_embed[q.pred[pred_known]]
        h[obj_null_box, 2 * d:] = self.null_box
        h[obj_null_attr, 2 * d:] = self.null_attr
        h[objbox_known, 2 * d:] = B[ns:]
        h[attr_known, 2 * d:] = self.attr_embed[q.attr[attr_known]]
        E, fusion_cache = self.fusion_net.forward(h, mode)
        tape = dict(kind="question", q=q, masks=(subj_known, pred_known, objbox_known, attr_known,
                                                obj_null_box, obj_null_attr),
                    ns=ns, box_cache=box_cache, fusion_cache=fusion_cache)
        return E, tape

    def embed_targets(self, kind: np.ndarray, ids: np.ndarray, features: np.ndarray,
                      mode: Mode = Mode.EVAL):
        kind = np.asarray(kind)
        ids = np.asarray(ids, dtype=np.int64)
        out = np.empty((len(ids), self.dim), self.dtype)
        bm = kind == TargetKind.BOX
        pm = kind == TargetKind.PREDICATE
        am = kind == TargetKind.ATTRIBUTE
        if np.any(ids[pm] >= self.n_pred) or np.any(ids[am] >= self.n_attr) or np.any(ids < 0):
            raise IndexError("target id out of range")
        T, box_cache = self._run(self.box_target_net, features[ids[bm]], mode)
        out[bm] = T
        out[pm] = self.pred_target_embed[ids[pm]]
        out[am] = self.attr_target_embed[ids[am]]
        return out, dict(kind="target", masks=(bm, pm, am), ids=ids, box_cache=box_cache)

    # --- backward ----------------------------------------------------------------

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.parameters().items()}

    def backward_questions(self, dE: np.ndarray, tape: dict, grads: dict):
        if tape is None or tape.get("kind") != "question":
            raise RuntimeError("backward_questions needs the tape of a matching forward pass")
        d = self.dim
        q = tape["q"]
        subj_known, pred_known, objbox_known, attr_known, obj_null_box, obj_null_attr = tape["masks"]
        dh, g = self.fusion_net.backward(dE, tape["fusion_cache"], prefix="fusion_net.")
        _accumulate(grads, g)
        grads["null_box"] += dh[~subj_known, :d].sum(axis=0) + dh[obj_null_box, 2 * d:].sum(axis=0)
        grads["null_pred"] += dh[~pred_known, d:2 * d].sum(axis=0)
        grads["null_attr"] += dh[obj_null_attr, 2 * d:].sum(axis=0)
        np.add.at(grads["pred_embed"], q.pred[pred_known], dh[pred_known, d:2 * d])
        np.add.at(grads["attr_embed"], q.attr[attr_known], dh[attr_known, 2 * d:])
        dB = np.concatenate([dh[subj_known, :d], dh[objbox_known, 2 * d:]])
        if tape["box_cache"] is not None:
            _, g = self.box_net.backward(dB, tape["box_cache"], prefix="box_net.")
            _accumulate(grads, g)

    def backward_targets(self, dT: np.ndarray, tape: dict, grads: dict):
        if tape is None or tape.get("kind") != "target":
            raise RuntimeError("backward_targets needs the tape of a matching forward pass")
        bm, pm, am = tape["masks"]
        ids = tape["ids"]
        np.add.at(grads["pred_target_embed"], ids[pm], dT[pm])
        np.add.at(grads["attr_target_embed"], ids[am], dT[am])
        if tape["box_cache"] is not None:
            _, g = self.box_target_net.backward(dT[bm], tape["box_cache"], prefix="box_target_net.")
            _accumulate(grads, g)


def _accumulate(grads: dict, g: dict):
    for k, v in g.items():
        grads[k] += v


# --- loss --------------------------------------------------------------------------

def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def nca_loss(pred: np.ndarray, targ: np.ndarray, n_pos: int | None = None):
    """Metric loss over a batch.

    Row ``i`` of ``pred`` pairs with row ``i`` of ``targ``. The first
    ``n_pos`` rows (all rows by default) are positives; every row and column
    feeds the shared denominator, which sums ``exp(-D[u, v])`` over all
    pairs. Returns ``(loss, dpred, dtarg)`` where loss is the mean per-row
    loss over the positives.
    """
    if pred.ndim != 2 or pred.shape != targ.shape:
        raise ValueError(f"pred/targ shape mismatch: {pred.shape} vs {targ.shape}")
    m = pred.shape[0]
    if m < 1:
        raise ValueError("empty batch")
    n_pos = m if n_pos is None else n_pos
    if not 1 <= n_pos <= m:
        raise ValueError("n_pos must be in [1, M]")
    D = pairwise_sqdist(pred, targ)
    neg = -D
    top = neg.max()
    ex = np.exp(neg - top)
    Z = ex.sum()
    log_z = np.log(Z) + top
    diag = np.diagonal(D)[:n_pos]
    loss = float(diag.mean() + log_z)
    # dL/dD = I_pos / n_pos - softmax(-D)
    G = -(ex / Z)
    idx = np.arange(n_pos)
    G[idx, idx] += 1.0 / n_pos
    row = G.sum(axis=1)
    col = G.sum(axis=0)
    dpred = 2.0 * (pred * row[:, None] - G @ targ)
    dtarg = 2.0 * (targ * col[:, None] - G.T @ pred)
    check_finite(np.array(loss), "nca loss")
    return loss, dpred.astype(pred.dtype, copy=False), dtarg.astype(targ.dtype, copy=False)


@dataclass
class TrainBatch:
    """Positive rows plus extra negative rows.

    ``neg_src[j]`` is the positive row whose question embedding is reused by
    negative row ``j``; ``neg_kind``/``neg_id`` name the wrong candidate.
    """

    questions: QuestionArrays
    neg_src: np.ndarray
    neg_kind: np.ndarray
    neg_id: np.ndarray


def batch_loss_and_grads(model: TripleModel, batch: TrainBatch, features: np.ndarray,
                         mode: Mode = Mode.TRAIN, need_grads: bool = True):
    q = batch.questions
    E, qtape = model.embed_questions(q, features, mode)
    kinds = np.concatenate([q.target_kind, batch.neg_kind]).astype(np.int64)
    ids = np.concatenate([q.target, batch.neg_id]).astype(np.int64)
    T, ttape = model.embed_targets(kinds, ids, features, mode)
    P = np.concatenate([E, E[batch.neg_src]])
    loss, dP, dT = nca_loss(P, T, n_pos=len(q))
    if not need_grads:
        return loss, None
    grads = model.zero_grads()
    dE = dP[: len(q)].copy()
    np.add.at(dE, batch.neg_src, dP[len(q):])
    model.backward_questions(dE, qtape, grads)
    model.backward_targets(dT, ttape, grads)
    return loss, grads


# --- scoring ------------------------------------------------------------------------

@dataclass
class ScoreVector:
    candidates: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if len(self.candidates) != len(self.scores):
            raise ValueError("candidate/score length mismatch")


@dataclass
class ScoredBatch:
    """Padded candidate ids (-1 = padding) and scores (-inf on padding)."""

    candidates: np.ndarray
    scores: np.ndarray

    def vector(self, i: int) -> ScoreVector:
        m = self.candidates[i] >= 0
        return ScoreVector(self.candidates[i][m], self.scores[i][m])


def score_questions(model: TripleModel, q: QuestionArrays, features: np.ndarray,
                    image_boxes: dict[int, np.ndarray], chunk: int = 4096) -> ScoredBatch:
    """Eval-mode scores of every candidate for every question.

    Box targets are scored against the boxes of the question's image;
    predicate and attribute targets against the whole vocabulary.
    """
    n = len(q)
    kinds = q.target_kind
    widths = [1]
    if np.any(kinds == TargetKind.PREDICATE):
        widths.append(model.n_pred)
    if np.any(kinds == TargetKind.ATTRIBUTE):
        widths.append(model.n_attr)
    box_q = kinds == TargetKind.BOX
    if np.any(box_q):
        widths.append(max(len(image_boxes[int(i)]) for i in np.unique(q.image[box_q])))
    width = max(widths)
    cand = np.full((n, width), -1, dtype=np.int64)
    scores = np.full((n, width), -np.inf, dtype=np.float64)
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        sub = QuestionArrays(*(getattr(q, f)[sl] for f in q.__dataclass_fields__))
        E, _ = model.embed_questions(sub, features, Mode.EVAL)
        k = kinds[sl]
        for kind, table, size in ((TargetKind.PREDICATE, model.pred_target_embed, model.n_pred),
                                  (TargetKind.ATTRIBUTE, model.attr_target_embed, model.n_attr)):
            m = np.flatnonzero(k == kind)
            if m.size:
                rows = start + m
                cand[rows, :size] = np.arange(size)
                scores[rows, :size] = -pairwise_sqdist(E[m], table)
        m = np.flatnonzero(k == TargetKind.BOX)
        if m.size:
            imgs = sub.image[m]
            lists = [image_boxes[int(i)] for i in imgs]
            uniq = np.unique(np.concatenate(lists))
            T, _ = model.embed_targets(np.zeros(len(uniq), np.int64), uniq, features, Mode.EVAL)
            w = max(len(b) for b in lists)
            boxes = np.full((len(lists), w), -1, dtype=np.int64)
            for r, b in enumerate(lists):
                boxes[r, : len(b)] = b
            valid = boxes >= 0
            diff = T[np.searchsorted(uniq, np.where(valid, boxes, uniq[0]))] - E[m][:, None, :]
            s = -(diff * diff).sum(axis=2)
            cand[start + m, :w] = boxes
            scores[start + m, :w] = np.where(valid, s, -np.inf)
    return ScoredBatch(cand, scores)


def score_question(model: TripleModel, q: QuestionArrays, features: np.ndarray,
                   candidates: np.ndarray) -> ScoreVector:
    """Scores for a single question (``len(q) == 1``) against explicit candidates."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("empty candidate set")
    E, _ = model.embed_questions(q, features, Mode.EVAL)
    kind = np.full(len(candidates), int(q.target_kind[0]))
    T, _ = model.embed_targets(kind, candidates, features, Mode.EVAL)
    return ScoreVector(candidates, -pairwise_sqdist(E[:1], T)[0].astype(np.float64))


# --- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, model: TripleModel, extra: dict[str, np.ndarray] | None = None):
    """Writes ``path`` (QBCF, one column) and ``path.manifest.json``."""
    tensors = {**model.state_dict(), **(extra or {})}
    manifest = {"dims": {"n_attr": model.n_attr, "n_pred": model.n_pred,
                         "feat_dim": model.feat_dim, "dim": model.dim,
                         "hidden": model.fusion_net.layers[0].n_out},
                "tensors": []}
    flat = []
    offset = 0
    for name in sorted(tensors):
        v = np.asarray(tensors[name], dtype=np.float32)
        manifest["tensors"].append({"name": name, "shape": list(v.shape), "offset": offset})
        flat.append(v.reshape(-1))
        offset += v.size
    save_feature_store(path, np.concatenate(flat).reshape(-1, 1))
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_checkpoint(path) -> tuple[TripleModel, dict[str, np.ndarray]]:
    manifest = json.loads(Path(str(path) + ".manifest.json").read_text(encoding="utf-8"))
    flat = load_feature_store(path).reshape(-1)
    dims = manifest["dims"]
    model = TripleModel(dims["n_attr"], dims["n_pred"], dims["feat_dim"], dims["dim"], dims["hidden"])
    state = model.state_dict()
    extra = {}
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        v = flat[t["offset"]: t["offset"] + size].reshape(t["shape"])
        if t["name"] in state:
            if state[t["name"]].shape != v.shape:
                raise SchemaError(f"checkpoint tensor {t['name']} has shape {v.shape}")
            np.copyto(state[t["name"]], v)
        else:
            extra[t["name"]] = v.copy()
    missing = set(state) - {t["name"] for t in manifest["tensors"]}
    if missing:
        raise SchemaError(f"checkpoint is missing tensors: {sorted(missing)}")
    return model, extra
