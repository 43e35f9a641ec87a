"""Triples, questions, the class dictionary and the on-disk formats.

Files
-----
``*.qbcf``
    Binary float matrix: ``b"QBCF"``, then little-endian u32 version (1),
    u32 rows, u32 dim, then ``rows*dim`` little-endian float32, row-major.
triples (``*.jsonl``)
    One flat JSON object per line with keys ``image_id``, ``subject_box``,
    ``kind`` (``"relation"`` or ``"attribute"``), ``predicate`` and either
    ``object_box`` or ``attribute``. Class fields hold class *names*.
dictionary (``*.txt``)
    ``[attributes]`` and ``[predicates]`` sections, one ``name<TAB>count``
    line per class, in class-id order.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HAS_ATTRIBUTE = "has attribute"
QBCF_MAGIC = b"QBCF"
QBCF_VERSION = 1


class SchemaError(ValueError):
    pass


class QuestionType(enum.IntEnum):
    SPOS = 0  # (?, p, o)
    SPAS = 1  # (?, p, a)
    SPOP = 2  # (s, ?, o)
    SPAP = 3  # (s, ?, a)
    SPOO = 4  # (s, p, ?)
    SPAA = 5  # (s, p, a?)

    @property
    def is_attribute(self) -> bool:
        return self in (QuestionType.SPAS, QuestionType.SPAP, QuestionType.SPAA)

    @property
    def target_kind(self) -> "TargetKind":
        if self in (QuestionType.SPOP, QuestionType.SPAP):
            return TargetKind.PREDICATE
        if self is QuestionType.SPAA:
            return TargetKind.ATTRIBUTE
        return TargetKind.BOX


RELATION_QTYPES = (QuestionType.SPOS, QuestionType.SPOP, QuestionType.SPOO)
ATTRIBUTE_QTYPES = (QuestionType.SPAS, QuestionType.SPAP, QuestionType.SPAA)
# SPAP only asks for "has attribute", so it is trained on but never reported.
REPORTED_QTYPES = (QuestionType.SPOS, QuestionType.SPAS, QuestionType.SPOP,
                   QuestionType.SPOO, QuestionType.SPAA)


class TargetKind(enum.IntEnum):
    BOX = 0
    PREDICATE = 1
    ATTRIBUTE = 2


class TripleKind(enum.Enum):
    RELATION = "relation"
    ATTRIBUTE = "attribute"


@dataclass(frozen=True)
class BoxEntity:
    image_id: int
    box_id: int
    feature: np.ndarray


@dataclass(frozen=True)
class Triple:
    """``obj`` is a box row for relations and an attribute id for attributes."""

    image_id: int
    subject: int
    predicate: int
    obj: int
    kind: TripleKind


@dataclass(frozen=True)
class Question:
    triple_id: int
    qtype: QuestionType
    target: int

    @property
    def qid(self) -> tuple[int, QuestionType]:
        return (self.triple_id, self.qtype)


def _target_of(t: Triple, qtype: QuestionType) -> int:
    if qtype in (QuestionType.SPOS, QuestionType.SPAS):
        return t.subject
    if qtype in (QuestionType.SPOP, QuestionType.SPAP):
        return t.predicate
    return t.obj


def build_questions(triples: list[Triple]) -> list[Question]:
    out = []
    for i, t in enumerate(triples):
        qtypes = ATTRIBUTE_QTYPES if t.kind is TripleKind.ATTRIBUTE else RELATION_QTYPES
        out.extend(Question(i, q, _target_of(t, q)) for q in qtypes)
    return out


# --- class dictionary ---------------------------------------------------------

@dataclass(frozen=True)
class Mean:
    pass


@dataclass(frozen=True)
class Fixed:
    n: float


def head_tail_split(counts, rule: Mean | Fixed = Mean()) -> np.ndarray:
    """Boolean head mask: a class is head iff its count is strictly above the
    threshold (the arithmetic mean of ``counts`` for ``Mean``)."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise SchemaError("head_tail_split needs at least one class")
    if np.any(counts < 0):
        raise SchemaError("class counts must be non-negative")
    threshold = counts.mean() if isinstance(rule, Mean) else float(rule.n)
    return counts > threshold


@dataclass
class ClassDictionary:
    attributes: list[str]
    attribute_counts: np.ndarray
    predicates: list[str]
    predicate_counts: np.ndarray
    attribute_head: np.ndarray = field(default=None)
    predicate_head: np.ndarray = field(default=None)

    def __post_init__(self):
        self.attribute_counts = np.asarray(self.attribute_counts, dtype=np.int64)
        self.predicate_counts = np.asarray(self.predicate_counts, dtype=np.int64)
        if HAS_ATTRIBUTE not in self.predicates:
            raise SchemaError(f"predicate vocabulary must contain {HAS_ATTRIBUTE!r}")
        if len(set(self.attributes)) != len(self.attributes) or len(set(self.predicates)) != len(self.predicates):
            raise SchemaError("duplicate class names")
        if self.attribute_head is None or self.predicate_head is None:
            self.partition(Mean(), Mean())

    @property
    def has_attribute_id(self) -> int:
        return self.predicates.index(HAS_ATTRIBUTE)

    @property
    def n_attr(self) -> int:
        return len(self.attributes)

    @property
    def n_pred(self) -> int:
        return len(self.predicates)

    def partition(self, attr_rule: Mean | Fixed = Mean(), pred_rule: Mean | Fixed = Mean()):
        """Recompute head flags. "has attribute" is always head and is left
        out of the predicate threshold."""
        self.attribute_head = head_tail_split(self.attribute_counts, attr_rule)
        ha = self.has_attribute_id
        rel = np.delete(self.predicate_counts, ha)
        head = np.ones(self.n_pred, dtype=bool)
        if rel.size:
            head[np.arange(self.n_pred) != ha] = head_tail_split(rel, pred_rule)
        self.predicate_head = head
        return self

    def head_mask(self, kind: TargetKind) -> np.ndarray:
        return self.attribute_head if kind is TargetKind.ATTRIBUTE else self.predicate_head

    def counts(self, kind: TargetKind) -> np.ndarray:
        return self.attribute_counts if kind is TargetKind.ATTRIBUTE else self.predicate_counts

    def save(self, path):
        lines = ["[attributes]"]
        lines += [f"{n}\t{c}" for n, c in zip(self.attributes, self.attribute_counts)]
        lines.append("[predicates]")
        lines += [f"{n}\t{c}" for n, c in zip(self.predicates, self.predicate_counts)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ClassDictionary":
        sections: dict[str, list[tuple[str, int]]] = {}
        current = None
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.rstrip("\r")
            if not line.strip():
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                if current not in ("attributes", "predicates"):
                    raise SchemaError(f"{path}:{lineno}: unknown section {current!r}")
                sections[current] = []
                continue
            if current is None:
                raise SchemaError(f"{path}:{lineno}: entry outside a section")
            name, sep, count = line.rpartition("\t")
            if not sep:
                raise SchemaError(f"{path}:{lineno}: expected 'name<TAB>count'")
            try:
                n = int(count)
            except ValueError:
                raise SchemaError(f"{path}:{lineno}: bad count {count!r}") from None
            if n < 0:
                raise SchemaError(f"{path}:{lineno}: negative count")
            sections[current].append((name, n))
        for s in ("attributes", "predicates"):
            if not sections.get(s):
                raise SchemaError(f"{path}: missing or empty [{s}] section")
        a, p = sections["attributes"], sections["predicates"]
        return cls([n for n, _ in a], [c for _, c in a], [n for n, _ in p], [c for _, c in p])


# --- QBCF feature store -----------------------------------------------------------

def save_feature_store(path, matrix: np.ndarray):
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2 or m.shape[1] == 0:
        raise SchemaError("feature store must be a 2-d matrix with dim > 0")
    with open(path, "wb") as f:
        f.write(QBCF_MAGIC)
        f.write(struct.pack("<III", QBCF_VERSION, m.shape[0], m.shape[1]))
        f.write(m.tobytes())


def load_feature_store(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != QBCF_MAGIC:
        raise SchemaError(f"{path}: not a QBCF file")
    version, rows, dim = struct.unpack_from("<III", data, 4)
    if version != QBCF_VERSION:
        raise SchemaError(f"{path}: unsupported QBCF version {version}")
    if dim == 0:
        raise SchemaError(f"{path}: dim must be > 0")
    need = 16 + 4 * rows * dim
    if len(data) < need:
        raise SchemaError(f"{path}: truncated payload ({len(data)} of {need} bytes)")
    if len(data) > need:
        raise SchemaError(f"{path}: trailing bytes after payload")
    return np.frombuffer(data, dtype="<f4", offset=16, count=rows * dim).reshape(rows, dim).astype(np.float32)


# --- triples ----------------------------------------------------------------------

def triple_to_record(t: Triple, dictionary: ClassDictionary) -> dict:
    rec = {"image_id": int(t.image_id), "subject_box": int(t.subject), "kind": t.kind.value,
           "predicate": dictionary.predicates[t.predicate]}
    if t.kind is TripleKind.RELATION:
        rec["object_box"] = int(t.obj)
    else:
        rec["attribute"] = dictionary.attributes[t.obj]
    return rec


def save_triples(path, triples: list[Triple], dictionary: ClassDictionary):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in triples:
            f.write(json.dumps(triple_to_record(t, dictionary), sort_keys=True) + "\n")


def load_triples(path, features: np.ndarray, dictionary: ClassDictionary) -> list[Triple]:
    attr_ids = {n: i for i, n in enumerate(dictionary.attributes)}
    pred_ids = {n: i for i, n in enumerate(dictionary.predicates)}
    n_rows = features.shape[0]
    out = []

    def box(rec, key, lineno):
        v = rec.get(key)
        if not isinstance(v, int) or isinstance(v, bool):
            raise SchemaError(f"{path}:{lineno}: {key} must be an integer")
        if not 0 <= v < n_rows:
            raise IndexError(f"{path}:{lineno}: {key} {v} out of range for {n_rows} feature rows")
        return v

    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: {e.msg}") from None
            try:
                kind = TripleKind(rec["kind"])
                pname = rec["predicate"]
                image = rec["image_id"]
            except (KeyError, ValueError) as e:
                raise SchemaError(f"{path}:{lineno}: bad or missing field ({e})") from None
            if pname not in pred_ids:
                raise SchemaError(f"{path}:{lineno}: unknown predicate {pname!r}")
            subj = box(rec, "subject_box", lineno)
            if kind is TripleKind.ATTRIBUTE:
                if pname != HAS_ATTRIBUTE:
                    raise SchemaError(f"{path}:{lineno}: attribute triple with predicate {pname!r}")
                aname = rec.get("attribute")
                if aname not in attr_ids:
                    raise SchemaError(f"{path}:{lineno}: unknown attribute {aname!r}")
                obj = attr_ids[aname]
            else:
                if pname == HAS_ATTRIBUTE:
                    raise SchemaError(f"{path}:{lineno}: relation triple uses {HAS_ATTRIBUTE!r}")
                obj = box(rec, "object_box", lineno)
            out.append(Triple(int(image), subj, pred_ids[pname], obj, kind))
    return out


# --- vectorised question table -------------------------------------------------------

class QuestionTable:
    """Column arrays for every question of a list of triples, in
    ``build_questions`` order. Row ``i`` is question id ``i``; ``qid(i)``
    gives the (triple id, qtype) pair."""

    def __init__(self, triples: list[Triple]):
        n = len(triples)
        is_attr = np.array([t.kind is TripleKind.ATTRIBUTE for t in triples], dtype=bool)
        self.n_triples = n
        self.triple = np.repeat(np.arange(n), 3)
        order_rel = np.array(RELATION_QTYPES)
        order_att = np.array(ATTRIBUTE_QTYPES)
        qt = np.where(is_attr[:, None], order_att[None, :], order_rel[None, :]).reshape(-1)
        self.qtype = qt.astype(np.int64)
        image = np.array([t.image_id for t in triples], dtype=np.int64)
        subj = np.array([t.subject for t in triples], dtype=np.int64)
        pred = np.array([t.predicate for t in triples], dtype=np.int64)
        obj = np.array([t.obj for t in triples], dtype=np.int64)
        self.image = np.repeat(image, 3)
        self.subj = np.repeat(subj, 3)
        self.pred = np.repeat(pred, 3)
        rep_attr = np.repeat(is_attr, 3)
        self.is_attr = rep_attr
        self.obj_box = np.where(rep_attr, -1, np.repeat(obj, 3))
        self.attr = np.where(rep_attr, np.repeat(obj, 3), -1)
        # class each question is attributed to: attribute for SPA*, predicate for SPO*
        self.cls = np.where(rep_attr, self.attr, self.pred)
        tk = np.array([QuestionType(q).target_kind for q in range(6)])
        self.target_kind = tk[self.qtype].astype(np.int64)
        tgt = np.empty_like(self.qtype)
        m = np.isin(self.qtype, [QuestionType.SPOS, QuestionType.SPAS])
        tgt[m] = self.subj[m]
        m = np.isin(self.qtype, [QuestionType.SPOP, QuestionType.SPAP])
        tgt[m] = self.pred[m]
        m = self.qtype == QuestionType.SPOO
        tgt[m] = self.obj_box[m]
        m = self.qtype == QuestionType.SPAA
        tgt[m] = self.attr[m]
        self.target = tgt

    def __len__(self) -> int:
        return self.qtype.shape[0]

    def qid(self, i: int) -> tuple[int, QuestionType]:
        return int(self.triple[i]), QuestionType(int(self.qtype[i]))

    def question(self, i: int) -> Question:
        return Question(int(self.triple[i]), QuestionType(int(self.qtype[i])), int(self.target[i]))

    def tail_mask(self, dictionary: ClassDictionary) -> np.ndarray:
        attr_tail = ~dictionary.attribute_head
        pred_tail = ~dictionary.predicate_head
        return np.where(self.is_attr, attr_tail[np.maximum(self.attr, 0)], pred_tail[self.pred])


def image_box_table(triples: list[Triple]) -> dict[int, np.ndarray]:
    """Boxes seen in each image (subjects and relation objects), sorted."""
    boxes: dict[int, set] = {}
    for t in triples:
        s = boxes.setdefault(t.image_id, set())
        s.add(t.subject)
        if t.kind is TripleKind.RELATION:
            s.add(t.obj)
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in boxes.items()}


@dataclass
class SceneSplit:
    """One split of a dataset: its triples, question table and image boxes."""

    triples: list[Triple]
    questions: QuestionTable = field(init=False)
    image_boxes: dict[int, np.ndarray] = field(init=False)

    def __post_init__(self):
        self.questions = QuestionTable(self.triples)
        self.image_boxes = image_box_table(self.triples)

    def candidate_matrix(self, images: np.ndarray) -> np.ndarray:
        """Padded (n, max_boxes) box ids for each image; -1 marks padding."""
        lists = [self.image_boxes[int(i)] for i in images]
        width = max((len(b) for b in lists), default=1)
        out = np.full((len(lists), width), -1, dtype=np.int64)
        for r, b in enumerate(lists):
            out[r, : len(b)] = b
        return out


@dataclass
class Dataset:
    features: np.ndarray
    dictionary: ClassDictionary
    train: SceneSplit
    val: SceneSplit
    test: SceneSplit

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_feature_store(d / "features.qbcf", self.features)
        self.dictionary.save(d / "dictionary.txt")
        for name in ("train", "val", "test"):
            save_triples(d / f"triples_{name}.jsonl", getattr(self, name).triples, self.dictionary)

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        features = load_feature_store(d / "features.qbcf")
        dictionary = ClassDictionary.load(d / "dictionary.txt")
        splits = [SceneSplit(load_triples(d / f"triples_{n}.jsonl", features, dictionary))
                  for n in ("train", "val", "test")]
        return cls(features, dictionary, *splits)


@dataclass
class Pools:
    """Labeled replay buffer and unlabeled pool, as question ids of one
    split. The replay buffer only ever grows."""

    replay: list[int]
    unlabeled: set[int]

    def __post_init__(self):
        if self.unlabeled.intersection(self.replay):
            raise SchemaError("a question cannot be both labeled and unlabeled")

    def add_labeled(self, ids):
        ids = list(ids)
        for i in ids:
            if i not in self.unlabeled:
                raise KeyError(f"question {i} is not in the unlabeled pool")
        self.unlabeled.difference_update(ids)
        self.replay.extend(ids)


@dataclass(frozen=True)
class QuestionArrays:
    """Column slice of a QuestionTable; what the model consumes."""

    qtype: np.ndarray
    subj: np.ndarray
    pred: np.ndarray
    obj_box: np.ndarray
    attr: np.ndarray
    target: np.ndarray
    image: np.ndarray

    def __len__(self) -> int:
        return self.qtype.shape[0]

    @property
    def target_kind(self) -> np.ndarray:
        tk = np.array([QuestionType(q).target_kind for q in range(6)])
        return tk[self.qtype]

    @classmethod
    def from_questions(cls, questions: list[Question], triples: list[Triple]) -> "QuestionArrays":
        rows = []
        for q in questions:
            t = triples[q.triple_id]
            rel = t.kind is TripleKind.RELATION
            rows.append((int(q.qtype), t.subject, t.predicate, t.obj if rel else -1,
                         -1 if rel else t.obj, q.target, t.image_id))
        cols = np.array(rows, dtype=np.int64).reshape(-1, 7).T
        return cls(*cols)


def take(table: QuestionTable, idx) -> QuestionArrays:
    idx = np.asarray(idx, dtype=np.int64)
    return QuestionArrays(table.qtype[idx], table.subj[idx], table.pred[idx], table.obj_box[idx],
                          table.attr[idx], table.target[idx], table.image[idx])
