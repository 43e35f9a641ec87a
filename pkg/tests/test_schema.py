import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbcat.schema import (HAS_ATTRIBUTE, ClassDictionary, Fixed, Mean, Pools, QuestionTable,
                          QuestionType, SchemaError, Triple, TripleKind, build_questions,
                          head_tail_split, load_feature_store, load_triples, save_feature_store,
                          save_triples, take)

Q = QuestionType


def rel(img, s, p, o):
    return Triple(img, s, p, o, TripleKind.RELATION)


def att(img, s, a):
    return Triple(img, s, 0, a, TripleKind.ATTRIBUTE)


def small_dictionary():
    return ClassDictionary(["red", "big"], [10, 2], [HAS_ATTRIBUTE, "on", "near"], [12, 7, 1])


def test_one_relation_gives_three_questions():
    qs = build_questions([rel(0, 1, 1, 2)])
    assert {q.qtype for q in qs} == {Q.SPOS, Q.SPOP, Q.SPOO}
    assert [q.target for q in qs] == [1, 1, 2]


def test_no_triples_no_questions():
    assert build_questions([]) == []


def test_question_counts_per_type():
    qs = build_questions([rel(0, 0, 1, 1), rel(0, 1, 2, 0), att(0, 0, 1)])
    assert len(qs) == 9
    c = Counter(q.qtype for q in qs)
    assert [c[q] for q in Q] == [2, 1, 2, 1, 2, 1]


def test_question_ids_are_triple_and_type():
    qs = build_questions([att(3, 4, 1)])
    assert [q.qid for q in qs] == [(0, Q.SPAS), (0, Q.SPAP), (0, Q.SPAA)]


def test_question_table_matches_build_questions():
    triples = [rel(0, 0, 1, 1), att(0, 1, 1), rel(1, 2, 2, 3)]
    table = QuestionTable(triples)
    qs = build_questions(triples)
    assert len(table) == len(qs) == 9
    for i, q in enumerate(qs):
        assert table.question(i) == q
    qa = take(table, [1, 5])
    assert list(qa.qtype) == [Q.SPOP, Q.SPAA]
    assert list(qa.target) == [1, 1]


def test_mean_split():
    head = head_tail_split([5, 5, 20, 30], Mean())
    assert head.tolist() == [False, False, True, True]


def test_fixed_rule_rounding_choice():
    counts = np.array([10_900, 10_000, 9_000, 14_000])
    assert counts.mean() > 10_000
    head = head_tail_split(counts, Fixed(10_000))
    assert head.tolist() == [True, False, False, True]
    assert head_tail_split(counts, Mean()).tolist() == [False, False, False, True]


def test_equal_counts_have_empty_head():
    assert not head_tail_split([7, 7, 7]).any()


def test_split_errors():
    with pytest.raises(SchemaError):
        head_tail_split([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=30), st.integers(0, 1000),
       st.data())
def test_fixed_split_is_monotone(counts, threshold, data):
    head = head_tail_split(counts, Fixed(threshold))
    i = data.draw(st.integers(0, len(counts) - 1))
    bumped = list(counts)
    bumped[i] += data.draw(st.integers(0, 500))
    head2 = head_tail_split(bumped, Fixed(threshold))
    assert not (head[i] and not head2[i])
    # exhaustive and disjoint by construction of a boolean mask
    assert head.shape == (len(counts),)


def test_has_attribute_always_head_and_out_of_mean():
    d = ClassDictionary(["a"], [1], [HAS_ATTRIBUTE, "on", "near"], [1, 30, 10])
    assert d.predicate_head.tolist() == [True, True, False]


def test_dictionary_round_trip(tmp_path):
    d = small_dictionary()
    d.save(tmp_path / "d.txt")
    e = ClassDictionary.load(tmp_path / "d.txt")
    assert e.attributes == d.attributes and e.predicates == d.predicates
    assert np.array_equal(e.attribute_counts, d.attribute_counts)


def test_dictionary_diagnostics(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("[attributes]\nred\t3\n[predicates]\nhas attribute\tx\n")
    with pytest.raises(SchemaError, match=":4:"):
        ClassDictionary.load(p)
    p.write_text("[attributes]\nred\t3\n[predicates]\non\t3\n")
    with pytest.raises(SchemaError):
        ClassDictionary.load(p)


def test_feature_store_small_round_trip(tmp_path):
    m = np.array([[0.5, -1.0]], dtype=np.float32)
    save_feature_store(tmp_path / "f.qbcf", m)
    back = load_feature_store(tmp_path / "f.qbcf")
    assert back.tobytes() == m.tobytes() and back.shape == (1, 2)


def test_feature_store_random_round_trip(tmp_path):
    m = np.random.default_rng(0).normal(size=(100, 16)).astype(np.float32)
    save_feature_store(tmp_path / "f.qbcf", m)
    assert load_feature_store(tmp_path / "f.qbcf").tobytes() == m.tobytes()


def test_feature_store_errors(tmp_path):
    p = tmp_path / "f.qbcf"
    save_feature_store(p, np.zeros((2, 3), np.float32))
    data = p.read_bytes()
    p.write_bytes(data[: 16 + 12])
    with pytest.raises(SchemaError, match="truncated"):
        load_feature_store(p)
    p.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(SchemaError):
        load_feature_store(p)
    p.write_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(SchemaError, match="version"):
        load_feature_store(p)
    p.write_bytes(data[:12] + (0).to_bytes(4, "little"))
    with pytest.raises(SchemaError):
        load_feature_store(p)
    with pytest.raises(SchemaError):
        save_feature_store(p, np.zeros((2, 0), np.float32))


def test_triples_round_trip(tmp_path):
    d = small_dictionary()
    feats = np.zeros((5, 2), np.float32)
    triples = [rel(0, 0, 1, 1), att(0, 1, 1), rel(1, 3, 2, 4)]
    save_triples(tmp_path / "t.jsonl", triples, d)
    assert load_triples(tmp_path / "t.jsonl", feats, d) == triples


def test_empty_triples_file(tmp_path):
    (tmp_path / "t.jsonl").write_text("")
    assert load_triples(tmp_path / "t.jsonl", np.zeros((1, 1)), small_dictionary()) == []


@pytest.mark.parametrize("record, err", [
    ({"image_id": 0, "subject_box": 9, "kind": "relation", "predicate": "on", "object_box": 0}, IndexError),
    ({"image_id": 0, "subject_box": 0, "kind": "relation", "predicate": "under", "object_box": 1}, SchemaError),
    ({"image_id": 0, "subject_box": 0, "kind": "attribute", "predicate": "on", "attribute": "red"}, SchemaError),
    ({"image_id": 0, "subject_box": 0, "kind": "attribute", "predicate": HAS_ATTRIBUTE, "attribute": "blue"}, SchemaError),
    ({"image_id": 0, "subject_box": 0, "kind": "relation", "predicate": HAS_ATTRIBUTE, "object_box": 1}, SchemaError),
])
def test_triple_errors(tmp_path, record, err):
    p = tmp_path / "t.jsonl"
    p.write_text(json.dumps(record) + "\n")
    with pytest.raises(err):
        load_triples(p, np.zeros((5, 2), np.float32), small_dictionary())


def test_bad_json_reports_line(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"image_id": 0}\n{oops\n')
    with pytest.raises(SchemaError, match=":1:"):
        load_triples(p, np.zeros((5, 2), np.float32), small_dictionary())


def test_pools_conservation():
    pools = Pools([0, 1], {2, 3, 4})
    total = len(pools.replay) + len(pools.unlabeled)
    pools.add_labeled([3])
    assert len(pools.replay) + len(pools.unlabeled) == total
    assert pools.replay == [0, 1, 3]
    with pytest.raises(KeyError):
        pools.add_labeled([3])
    with pytest.raises(SchemaError):
        Pools([1], {1})


def test_tail_mask():
    d = small_dictionary()
    table = QuestionTable([rel(0, 0, 2, 1), att(0, 1, 1), att(0, 1, 0)])
    assert table.tail_mask(d).tolist() == [True] * 3 + [True] * 3 + [False] * 3
