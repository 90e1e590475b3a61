import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from david.docmodel import (BBox, CollectionSplit, DimensionMismatchError, Document, Entity,
                            InsufficientDocumentsError, Token, compute_relation_matrix, jaccard_similarity,
                            read_corpus, split_collection, write_corpus)
from oracles import brute_relation


def tok(i, x, y, w=10, h=10):
    return Token(i, f"t{i}", BBox.clamped(x - w / 2, y - h / 2, x + w / 2, y + h / 2))


def ent(i, *box):
    return Entity(i, f"e{i}", BBox(*box))


def test_bbox_rejects_out_of_range():
    with pytest.raises(ValueError):
        BBox(0, 0, 1001, 10)
    with pytest.raises(ValueError):
        BBox(10, 0, 5, 10)


def test_single_token_inside_single_entity():
    rel = compute_relation_matrix([tok(0, 50, 50)], [ent(0, 0, 0, 100, 100)])
    assert rel.entries.tolist() == [[1]]


def test_no_entities_gives_empty_matrix():
    rel = compute_relation_matrix([tok(0, 50, 50), tok(1, 60, 60)], [])
    assert rel.entries.shape == (2, 0)


def test_three_tokens_two_entities():
    tokens = [tok(0, 100, 100), tok(1, 500, 500), tok(2, 900, 900)]
    entities = [ent(0, 0, 0, 400, 400), ent(1, 450, 450, 1000, 1000)]
    rel = compute_relation_matrix(tokens, entities)
    assert rel.entries.tolist() == brute_relation(tokens, entities).tolist() == [[1, 0], [0, 1], [0, 1]]


def test_tie_break_prefers_higher_iou_then_lower_id():
    tokens = [tok(0, 50, 50, 20, 20)]
    tight, loose = ent(5, 30, 30, 70, 70), ent(1, 0, 0, 200, 200)
    assert compute_relation_matrix(tokens, [loose, tight]).entries.tolist() == [[0, 1]]
    twin_a, twin_b = ent(7, 30, 30, 70, 70), ent(3, 30, 30, 70, 70)
    assert compute_relation_matrix(tokens, [twin_a, twin_b]).entries.tolist() == [[0, 1]]


def test_duplicate_ids_rejected():
    with pytest.raises(DimensionMismatchError):
        compute_relation_matrix([tok(0, 5, 5), tok(0, 9, 9)], [])


boxes = st.tuples(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000)).map(
    lambda c: BBox(min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]), max(c[1], c[3])))
small_boxes = st.tuples(st.integers(0, 200), st.integers(0, 200), st.integers(0, 200), st.integers(0, 200)).map(
    lambda c: BBox(min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]), max(c[1], c[3])))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.one_of(boxes, small_boxes), max_size=50), st.lists(st.one_of(boxes, small_boxes), max_size=50))
def test_relation_matches_brute_force(tboxes, eboxes):
    tokens = [Token(i, "w", b) for i, b in enumerate(tboxes)]
    entities = [Entity(j * 3 % 101, "e", b) for j, b in enumerate(eboxes)]
    if len({e.id for e in entities}) != len(entities):
        entities = [Entity(j, "e", b) for j, b in enumerate(eboxes)]
    rel = compute_relation_matrix(tokens, entities)
    assert np.array_equal(rel.entries, brute_relation(tokens, entities))
    assert (rel.row_sums() <= 1).all()


def test_jaccard_examples():
    assert jaccard_similarity("Total Price", "total price") == 1.0
    assert jaccard_similarity("", "abc") == 0.0
    # sets {total, price} and {price, total, due}: 2 shared out of 3
    assert jaccard_similarity("total price", "price total due") == pytest.approx(2 / 3)


words = st.lists(st.sampled_from(["a", "B", "c", "dd", "Ee", "f"]), max_size=6).map(" ".join)


@given(words, words)
def test_jaccard_symmetric_and_one_iff_equal_sets(a, b):
    s = jaccard_similarity(a, b)
    assert s == jaccard_similarity(b, a)
    assert 0.0 <= s <= 1.0
    assert (s == 1.0) == (set(a.casefold().split()) == set(b.casefold().split()))


def _bare_docs(n):
    return [Document(f"d{i}", 100, 100, (Token(0, "x", BBox(1, 1, 5, 5), gold_label=0),), ()) for i in range(n)]


def test_split_sizes_and_determinism():
    docs = _bare_docs(1000)
    a = split_collection(docs, 800, 100, 100, seed=7)
    b = split_collection(docs, 800, 100, 100, seed=7)
    assert (len(a.d_n), len(a.d_g), len(a.d_i)) == (800, 100, 100)
    assert [d.id for d in a.d_n] == [d.id for d in b.d_n]
    ids = [d.id for d in a.d_n + a.d_g + a.d_i]
    assert len(set(ids)) == 1000


def test_degenerate_split_all_in_d_n():
    s = split_collection(_bare_docs(10), 10, 0, 0, seed=1)
    assert len(s.d_n) == 10 and not s.d_g and not s.d_i
    assert all(d.annotation_provenance == "synthetic" and not d.entities for d in s.d_n)


def test_split_rejects_too_few_documents():
    with pytest.raises(InsufficientDocumentsError):
        split_collection(_bare_docs(5), 3, 2, 1, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20), st.integers(0, 1000))
def test_split_partitions(n, g, i, seed):
    docs = _bare_docs(60)
    s = split_collection(docs, n, g, i, seed)
    ids = [d.id for d in s.d_n + s.d_g + s.d_i]
    assert len(ids) == len(set(ids)) == n + g + i
    assert set(ids) <= {d.id for d in docs}


def test_split_rejects_overlapping_ids():
    d = _bare_docs(1)[0]
    with pytest.raises(ValueError):
        CollectionSplit((), (d,), (d,))


def test_document_rejects_dangling_parent():
    with pytest.raises(ValueError):
        Document("x", 10, 10, (Token(0, "a", BBox(0, 0, 1, 1), parent_entity=4),), ())


def test_corpus_round_trip(tmp_path, form_docs, tiny_split):
    docs = list(form_docs[:5]) + list(tiny_split.d_n[:3])
    path = tmp_path / "c.jsonl"
    write_corpus(path, docs)
    back = read_corpus(path)
    assert back == docs
    assert all(a.relation_matrix == b.relation_matrix for a, b in zip(docs, back))


def test_read_corpus_reports_malformed_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": "x"}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_corpus(p)
