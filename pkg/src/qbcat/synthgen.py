"""Long-tailed synthetic scene graphs with learnable box features.

Every attribute class owns a prototype vector. An object draws its attributes
from a Zipf law and its feature is the mean of those prototypes plus Gaussian
noise. The predicate linking two objects is read from a fixed random table
indexed by the objects' dominant (most frequent) attributes, and candidate
pairs are accepted by rejection so that the predicate marginal follows a
Zipf law as well. After splitting by image, class ids are renumbered by
descending train count so the id order is the frequency order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .schema import (HAS_ATTRIBUTE, ClassDictionary, Dataset, SceneSplit, Triple,
                     TripleKind)


@dataclass(frozen=True)
class SynthConfig:
    n_attr_classes: int = 60
    n_pred_classes: int = 20  # includes "has attribute"
    zipf_exponent: float = 1.3
    n_images: int = 2000
    objects_per_image: tuple[int, int] = (3, 6)
    relations_per_image: tuple[int, int] = (3, 6)
    attributes_per_object: tuple[int, int] = (1, 2)
    feature_dim: int = 32
    prototype_noise_sigma: float = 0.3
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def validate(self):
        if min(self.n_attr_classes, self.n_images, self.feature_dim) < 1:
            raise ValueError("class, image and feature counts must be >= 1")
        if self.n_pred_classes < 2:
            raise ValueError("need 'has attribute' plus at least one relation predicate")
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be > 0")
        if self.prototype_noise_sigma <= 0:
            raise ValueError("prototype_noise_sigma must be > 0")
        for name in ("objects_per_image", "relations_per_image", "attributes_per_object"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name}: bad range ({lo}, {hi})")
        if self.objects_per_image[0] < 1 or self.attributes_per_object[0] < 1:
            raise ValueError("every image needs objects and every object an attribute")
        if self.attributes_per_object[1] > self.n_attr_classes:
            raise ValueError("more attributes per object than attribute classes")
        if self.relations_per_image[1] > 0 and self.objects_per_image[1] < 2:
            raise ValueError("relations requested but images hold fewer than 2 objects")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def zipf_class_weights(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** -s
    return w / w.sum()


def split(image_ids, fractions, seed: int = 0):
    """Partition image ids into (train, val, test) id arrays."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    ids = np.unique(np.asarray(image_ids))
    if len(ids) < np.count_nonzero(fractions):
        raise ValueError("fewer images than non-empty splits")
    ids = np.random.default_rng(seed).permutation(ids)
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    return (np.sort(ids[:n_train]), np.sort(ids[n_train:n_train + n_val]),
            np.sort(ids[n_train + n_val:]))


def _predicate_table(n_attr: int, n_rel: int, attr_p: np.ndarray, pred_p: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    """Random (n_attr, n_attr) table of relation predicates whose mass under
    independent attribute draws roughly tracks ``pred_p``."""
    cells = rng.permutation(n_attr * n_attr)
    mass = np.outer(attr_p, attr_p).reshape(-1)
    deficit = pred_p.copy()
    table = np.empty(n_attr * n_attr, dtype=np.int64)
    for c in cells:
        p = int(np.argmax(deficit))
        table[c] = p
        deficit[p] -= mass[c]
    return table.reshape(n_attr, n_attr)


def generate(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    proto_ss, table_ss, img_ss, split_ss = root.spawn(4)
    n_attr = cfg.n_attr_classes
    n_rel = cfg.n_pred_classes - 1
    attr_p = zipf_class_weights(n_attr, cfg.zipf_exponent)
    pred_p = zipf_class_weights(n_rel, cfg.zipf_exponent)

    prototypes = np.random.default_rng(proto_ss).standard_normal((n_attr, cfg.feature_dim))
    table = _predicate_table(n_attr, n_rel, attr_p, pred_p, np.random.default_rng(table_ss))

    # pass 1: objects
    image_rngs = [np.random.default_rng(s) for s in img_ss.spawn(cfg.n_images)]
    objects = []  # per image: list of (box row, attribute ids)
    feats = []
    row = 0
    for rng in image_rngs:
        n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
        objs = []
        for _ in range(n_obj):
            k = int(rng.integers(cfg.attributes_per_object[0], cfg.attributes_per_object[1] + 1))
            attrs = rng.choice(n_attr, size=k, replace=False, p=attr_p)
            f = prototypes[attrs].mean(axis=0) + cfg.prototype_noise_sigma * rng.standard_normal(cfg.feature_dim)
            feats.append(f)
            objs.append((row, np.sort(attrs)))
            row += 1
        objects.append(objs)

    # marginal of proposed predicates, for the rejection step
    proposed = np.zeros(n_rel)
    for objs in objects:
        dom = [a[0] for _, a in objs]
        for i in range(len(objs)):
            for j in range(len(objs)):
                if i != j:
                    proposed[table[dom[i], dom[j]]] += 1
    ratio = np.where(proposed > 0, pred_p / np.maximum(proposed / max(proposed.sum(), 1), 1e-300), 0.0)
    accept = ratio / ratio.max() if ratio.max() > 0 else ratio

    # pass 2: triples
    triples: list[Triple] = []
    for img, (objs, rng) in enumerate(zip(objects, image_rngs)):
        for box, attrs in objs:
            for a in attrs:
                triples.append(Triple(img, box, -1, int(a), TripleKind.ATTRIBUTE))
        if len(objs) < 2:
            continue
        want = int(rng.integers(cfg.relations_per_image[0], cfg.relations_per_image[1] + 1))
        pairs = [(i, j) for i in range(len(objs)) for j in range(len(objs)) if i != j]
        got = 0
        for k in rng.permutation(len(pairs)):
            if got >= want:
                break
            i, j = pairs[k]
            p = table[objs[i][1][0], objs[j][1][0]]
            if rng.random() < accept[p]:
                triples.append(Triple(img, objs[i][0], int(p), objs[j][0], TripleKind.RELATION))
                got += 1

    train_ids, val_ids, test_ids = split(np.arange(cfg.n_images), cfg.split_fractions,
                                         seed=int(split_ss.generate_state(1)[0]))
    train_set = set(train_ids.tolist())

    # renumber classes by descending train count (ties keep design rank)
    attr_count = np.zeros(n_attr, dtype=np.int64)
    pred_count = np.zeros(n_rel, dtype=np.int64)
    for t in triples:
        if t.image_id in train_set:
            if t.kind is TripleKind.ATTRIBUTE:
                attr_count[t.obj] += 1
            else:
                pred_count[t.predicate] += 1
    attr_order = np.argsort(-attr_count, kind="stable")
    pred_order = np.argsort(-pred_count, kind="stable")
    attr_new = np.empty(n_attr, dtype=np.int64)
    attr_new[attr_order] = np.arange(n_attr)
    # predicate id 0 is "has attribute"; relation predicates follow
    pred_new = np.empty(n_rel, dtype=np.int64)
    pred_new[pred_order] = np.arange(1, n_rel + 1)

    def relabel(t: Triple) -> Triple:
        if t.kind is TripleKind.ATTRIBUTE:
            return Triple(t.image_id, t.subject, 0, int(attr_new[t.obj]), t.kind)
        return Triple(t.image_id, t.subject, int(pred_new[t.predicate]), t.obj, t.kind)

    triples = [relabel(t) for t in triples]
    attr_names = [f"attr_{i:03d}" for i in range(n_attr)]
    pred_names = [HAS_ATTRIBUTE] + [f"pred_{i:03d}" for i in range(1, n_rel + 1)]
    n_has_attr = sum(1 for t in triples if t.kind is TripleKind.ATTRIBUTE and t.image_id in train_set)
    dictionary = ClassDictionary(attr_names, attr_count[attr_order],
                                 pred_names, np.concatenate([[n_has_attr], pred_count[pred_order]]))

    by_split = {0: [], 1: [], 2: []}
    where = np.zeros(cfg.n_images, dtype=np.int64)
    where[val_ids] = 1
    where[test_ids] = 2
    for t in triples:
        by_split[int(where[t.image_id])].append(t)
    features = np.asarray(feats, dtype=np.float32).reshape(-1, cfg.feature_dim)
    return Dataset(features, dictionary, SceneSplit(by_split[0]), SceneSplit(by_split[1]),
                   SceneSplit(by_split[2]))


def class_histogram(dataset: Dataset) -> dict[str, dict[str, int]]:
    """Train-split counts per class name, recomputed from the triples."""
    d = dataset.dictionary
    attrs = dict.fromkeys(d.attributes, 0)
    preds = dict.fromkeys(d.predicates, 0)
    for t in dataset.train.triples:
        preds[d.predicates[t.predicate]] += 1
        if t.kind is TripleKind.ATTRIBUTE:
            attrs[d.attributes[t.obj]] += 1
    return {"attributes": attrs, "predicates": preds}
