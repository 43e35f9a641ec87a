import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbcat.model import TripleModel
from qbcat.sampler import (Oracle, SamplerKind, SamplingError, classic_select, fulfil, qbcat_class_scores,
                           qbcat_select, shift_and_normalize, uncertainty_weights,
                           weighted_sample_without_replacement)
from qbcat.schema import HAS_ATTRIBUTE, ClassDictionary, Fixed, QuestionTable, QuestionType, TargetKind, Triple, TripleKind
from qbcat.synthgen import SynthConfig, generate

Q = QuestionType
K = SamplerKind

# attribute tail: 2, 3, 4; predicate tail: 3, 4, 5 ("has attribute" is id 0)
DICT = ClassDictionary([f"a{i}" for i in range(5)], [100, 50, 3, 2, 1],
                       [HAS_ATTRIBUTE] + [f"p{i}" for i in range(1, 6)], [200, 100, 80, 5, 3, 2])


def toy_triples(per_class=4):
    out, box = [], 0
    for a in range(5):
        for _ in range(per_class):
            out.append(Triple(box, box, 0, a, TripleKind.ATTRIBUTE))
            box += 2
    for p in range(1, 6):
        for _ in range(per_class):
            out.append(Triple(box, box, p, box + 1, TripleKind.RELATION))
            box += 2
    return out


# --- weights ------------------------------------------------------------------------

def test_weight_examples():
    s = np.array([[-1.0, -2.0, -4.0]])
    assert uncertainty_weights(K.LEAST_CONFIDENT, s)[0] == 1.0
    assert uncertainty_weights(K.MIN_MARGIN, s)[0] == -1.0
    assert uncertainty_weights(K.MAX_ENTROPY, np.zeros((1, 4)))[0] == pytest.approx(math.log(4))
    assert uncertainty_weights(K.RANDOM, s).tolist() == [1.0]


def test_padding_and_single_candidates():
    s = np.array([[0.0, 0.0, -np.inf], [0.0, -np.inf, -np.inf], [0.0, -5.0, -np.inf]])
    w = uncertainty_weights(K.MAX_ENTROPY, s)
    assert w[0] == pytest.approx(math.log(2))
    assert w[1] == pytest.approx(w[2])
    m = uncertainty_weights(K.MIN_MARGIN, s)
    assert m.tolist() == [-0.0, -5.0, -5.0]
    with pytest.raises(SamplingError):
        uncertainty_weights(K.LEAST_CONFIDENT, np.full((1, 2), -np.inf))
    with pytest.raises(ValueError):
        uncertainty_weights(K.QBCAT_TAIL, s)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 0), min_size=2, max_size=8), st.floats(-5, 5))
def test_margin_and_entropy_ignore_row_shift(row, c):
    s = np.array([row])
    for kind in (K.MIN_MARGIN, K.MAX_ENTROPY):
        assert uncertainty_weights(kind, s + c)[0] == pytest.approx(uncertainty_weights(kind, s)[0], abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=10), st.floats(-50, 50))
def test_shift_and_normalize(w, c):
    p = shift_and_normalize(w)
    assert p.min() > 0 and p.sum() == pytest.approx(1.0)
    assert np.allclose(p, shift_and_normalize(np.array(w) + c))
    order = np.argsort(w, kind="stable")
    assert np.all(np.diff(p[order]) >= -1e-15)


def test_shift_and_normalize_rejects_bad_input():
    with pytest.raises(ValueError):
        shift_and_normalize([])
    with pytest.raises(ValueError):
        shift_and_normalize([1.0, np.nan])


def test_parse_aliases():
    assert K.parse("entropy") is K.MAX_ENTROPY
    assert K.parse("QBCatTail") is K.QBCAT_TAIL
    assert K.parse("least_confident") is K.LEAST_CONFIDENT
    with pytest.raises(ValueError):
        K.parse("oracle")


# --- weighted sampling without replacement ---------------------------------------------------

def inclusion_oracle(p, k):
    """Exact inclusion probabilities of sequential draws with renormalisation."""
    n = len(p)
    inc = np.zeros(n)
    for seq in itertools.permutations(range(n), k):
        prob, left = 1.0, 1.0
        for i in seq:
            prob *= p[i] / left
            left -= p[i]
        for i in seq:
            inc[i] += prob
    return inc


@pytest.mark.parametrize("k", [1, 2])
def test_weighted_sampling_matches_sequential_draws(k):
    p = np.array([0.5, 0.3, 0.15, 0.05])
    rng = np.random.default_rng(0)
    n = 40_000
    hits = np.zeros(4)
    for _ in range(n):
        hits[weighted_sample_without_replacement(p, k, rng)] += 1
    expect = inclusion_oracle(p, k)
    se = np.sqrt(expect * (1 - expect) / n)
    assert np.all(np.abs(hits / n - expect) < 5 * se + 1e-12)


def test_weighted_sampling_distinct_and_capped():
    rng = np.random.default_rng(1)
    got = weighted_sample_without_replacement(np.array([0.2, 0.0, 0.8]), 5, rng)
    assert sorted(got.tolist()) == [0, 2]


# --- query by category ------------------------------------------------------------------------

def test_class_scores():
    tail = qbcat_class_scores(K.QBCAT_TAIL, DICT, TargetKind.ATTRIBUTE)
    assert tail.tolist() == [0, 0, 1, 1, 1]
    freq = qbcat_class_scores(K.QBCAT_TAIL_FREQ, DICT, TargetKind.PREDICATE)
    assert np.flatnonzero(freq).tolist() == [3, 4, 5]
    assert np.allclose(freq[3:] / freq[3:].sum(), [0.5, 0.3, 0.2])


def test_no_tail_is_an_error():
    flat = ClassDictionary(["a", "b"], [5, 5], [HAS_ATTRIBUTE, "p", "q"], [9, 4, 4]).partition(Fixed(0), Fixed(0))
    with pytest.raises(SamplingError):
        qbcat_select(K.QBCAT_TAIL, flat, 10, np.random.default_rng(0))


def test_uniform_tail_requests_are_balanced():
    plan = qbcat_select(K.QBCAT_TAIL, DICT, 3000, np.random.default_rng(3))
    for qt in Q:
        counts = np.bincount(plan.classes[qt], minlength=6)
        tail = [2, 3, 4] if qt.is_attribute else [3, 4, 5]
        assert counts.sum() == counts[tail].sum() == 3000
        # binomial(3000, 1/3): sd ~ 26
        assert np.all(np.abs(counts[tail] - 1000) < 130)


def test_frequency_weighted_requests():
    plan = qbcat_select(K.QBCAT_TAIL_FREQ, DICT, 6000, np.random.default_rng(4))
    freq = np.bincount(plan.classes[Q.SPOP], minlength=6)[3:] / 6000
    assert np.allclose(freq, [0.5, 0.3, 0.2], atol=0.03)


# --- oracle ------------------------------------------------------------------------------------

@pytest.fixture
def oracle():
    table = QuestionTable(toy_triples())
    return table, Oracle(table, range(len(table)))


def test_provide_returns_requested_class(oracle):
    table, orc = oracle
    rng = np.random.default_rng(0)
    i = orc.provide(3, Q.SPOS, rng)
    assert table.qtype[i] == Q.SPOS and table.cls[i] == 3
    assert orc.available(Q.SPOS, 3) == 3
    assert len(orc) == len(table) - 1


def test_fallback_and_exhaustion(oracle):
    table, orc = oracle
    rng = np.random.default_rng(0)
    p = np.array([0, 0, 0, 0.5, 0.5, 0])
    for _ in range(4):
        orc.provide(3, Q.SPOO, rng, p)
    i = orc.provide(3, Q.SPOO, rng, p)
    assert table.cls[i] == 4
    assert orc.audit[-1]["outcome"] == "fallback" and orc.audit[-1]["value"] == 3
    for _ in range(3):
        orc.provide(4, Q.SPOO, rng, p)
    with pytest.raises(SamplingError):
        orc.provide(3, Q.SPOO, rng, p)
    with pytest.raises(SamplingError):
        orc.provide(3, Q.SPOO, rng)


def test_label_errors(oracle):
    _, orc = oracle
    with pytest.raises(KeyError):
        orc.label([0, 0])
    with pytest.raises(KeyError):
        orc.label([10_000])
    orc.label([5])
    with pytest.raises(KeyError):
        orc.label([5])


def test_pool_shrinks_and_audit_records(oracle):
    table, orc = oracle
    rng = np.random.default_rng(2)
    orc.increment = 4
    plan = qbcat_select(K.QBCAT_TAIL, DICT, 2, rng)
    got = fulfil(plan, orc, rng)
    assert len(got) == len(set(got.tolist())) == 12
    assert len(orc) == len(table) - 12
    assert not np.isin(got, orc.unlabeled_ids()).any()
    for e in orc.audit:
        assert e["increment"] == 4 and e["kind"] == "QBCatTail" and e["request"] == "class"
        assert table.cls[e["provided"]] == e["class"]
    assert sum(orc.visits.values()) == 12


# --- classical selection -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    ds = generate(SynthConfig(n_attr_classes=8, n_pred_classes=5, n_images=60, feature_dim=6, seed=8))
    d = ds.dictionary
    return ds, TripleModel(d.n_attr, d.n_pred, 6, dim=6, hidden=6, seed=0)


@pytest.mark.parametrize("kind", [K.RANDOM, K.LEAST_CONFIDENT, K.MIN_MARGIN, K.MAX_ENTROPY])
def test_classic_select_sizes_and_determinism(small, kind):
    ds, model = small
    table = ds.train.questions
    pool = np.arange(len(table))
    a = classic_select(kind, model, table, pool, ds.features, ds.train.image_boxes, 5, np.random.default_rng(1))
    b = classic_select(kind, model, table, pool, ds.features, ds.train.image_boxes, 5, np.random.default_rng(1))
    for qt in Q:
        assert len(a.ids[qt]) == 5 == len(set(a.ids[qt].tolist()))
        assert np.all(table.qtype[a.ids[qt]] == qt)
        assert np.array_equal(a.ids[qt], b.ids[qt])


def test_small_pool_is_taken_whole(small):
    ds, model = small
    table = ds.train.questions
    pool = np.concatenate([np.flatnonzero(table.qtype == qt)[:3] for qt in Q])
    plan = classic_select(K.MAX_ENTROPY, model, table, pool, ds.features, ds.train.image_boxes, 10,
                          np.random.default_rng(0))
    assert sum(len(v) for v in plan.ids.values()) == 18
    with pytest.raises(SamplingError):
        classic_select(K.RANDOM, model, table, pool[:3], ds.features, ds.train.image_boxes, 1,
                       np.random.default_rng(0))
