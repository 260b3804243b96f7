import json
import random

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import random_document
from mtb import corpus, io
from mtb.corpus import Document, Mention, RelationStatement, cap_by_entity, extract_corpus, extract_statements
from mtb.tokens import CLS_ID, SEP_ID, build_vocab


def _vocab(doc):
    return build_vocab(doc.tokens, 1)


def _multiset(stmts):
    return sorted((s.s1, s.s2, s.e1, s.e2, s.x) for s in stmts)


def test_short_doc_one_statement():
    doc = Document("d", [f"t{i}" for i in range(10)], [Mention(1, 2, "A"), Mention(5, 6, "B")])
    v = _vocab(doc)
    (s,) = extract_statements(doc, v, 40)
    assert s.x == (CLS_ID, *v.encode(doc.tokens), SEP_ID)
    assert s.s1 == (2, 3) and s.s2 == (6, 7)
    assert (s.e1, s.e2) == ("A", "B")
    assert s.source == ("d", 0)


def test_mentions_too_far_apart():
    doc = Document("d", [f"t{i}" for i in range(60)], [Mention(1, 2, "A"), Mention(51, 52, "B")])
    assert extract_statements(doc, _vocab(doc), 40) == []


def test_three_mentions_three_statements():
    doc = Document("d", [f"t{i}" for i in range(12)], [Mention(0, 1, "A"), Mention(4, 6, "B"), Mention(9, 10, "C")])
    out = extract_statements(doc, _vocab(doc), 40)
    assert [(s.e1, s.e2) for s in out] == [("A", "B"), ("A", "C"), ("B", "C")]
    assert _multiset(out) == oracles.statements(doc, _vocab(doc), 40)


def test_overlapping_mentions_are_skipped():
    doc = Document("d", ["a", "b", "c", "d"], [Mention(0, 2, "A"), Mention(1, 3, "B"), Mention(3, 4, "C")])
    out = extract_statements(doc, _vocab(doc), 40)
    assert {(s.e1, s.e2) for s in out} == {("A", "C"), ("B", "C")}


def test_same_entity_twice_forms_statement():
    doc = Document("d", ["x", "a", "y", "a"], [Mention(1, 2, "A"), Mention(3, 4, "A")])
    (s,) = extract_statements(doc, _vocab(doc), 40)
    assert s.e1 == s.e2 == "A"


def test_window_is_centred_and_clipped():
    tokens = [f"t{i}" for i in range(100)]
    doc = Document("d", tokens, [Mention(48, 49, "A"), Mention(52, 53, "B")])
    (s,) = extract_statements(doc, _vocab(doc), 10)
    # pair covers [48, 53): midpoint 50.5, window [45, 55)
    assert s.source == ("d", 45) and len(s.x) == 12
    doc = Document("d", tokens, [Mention(0, 1, "A"), Mention(3, 4, "B")])
    (s,) = extract_statements(doc, _vocab(doc), 10)
    assert s.source == ("d", 0)
    doc = Document("d", tokens, [Mention(97, 98, "A"), Mention(99, 100, "B")])
    (s,) = extract_statements(doc, _vocab(doc), 10)
    assert s.source == ("d", 90)


def test_window_must_be_at_least_two():
    doc = Document("d", ["a"], [])
    with pytest.raises(ValueError):
        extract_statements(doc, _vocab(doc), 1)


def test_mention_out_of_bounds():
    with pytest.raises(ValueError):
        Document("d", ["a", "b"], [Mention(1, 3, "A")])


def test_mentions_sorted_on_construction():
    d = Document("d", list("abcdef"), [Mention(4, 5, "B"), Mention(0, 1, "A")])
    assert [m.entity_id for m in d.mentions] == ["A", "B"]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), window=st.integers(2, 30), n_mentions=st.integers(0, 20))
def test_matches_bruteforce_oracle(seed, window, n_mentions):
    doc = random_document(random.Random(seed), n_tokens=50, n_mentions=n_mentions)
    v = _vocab(doc)
    out = extract_statements(doc, v, window)
    assert _multiset(out) == oracles.statements(doc, v, window)
    for s in out:
        corpus.validate_statement(s)
        lo, hi = s.source[1] + s.s1[0] - 1, s.source[1] + s.s2[1] - 1
        assert (hi - 1) - lo < window
        assert s.mention_starts[0] <= s.mention_starts[1]


def test_corpus_order_independent_of_workers():
    rng = random.Random(3)
    docs = [random_document(rng, doc_id=f"d{i:02d}") for i in range(12)]
    v = build_vocab([t for d in docs for t in d.tokens], 1)
    serial = extract_corpus(docs, v, 20, workers=1)
    parallel = extract_corpus(docs, v, 20, workers=3)
    assert serial == parallel
    assert [s.sort_key() for s in serial] == sorted(s.sort_key() for s in serial)


def _stmt(e1, e2, k=0):
    return RelationStatement((CLS_ID, 10, 11, SEP_ID), (1, 2), (2, 3), e1, e2, (f"d{k}", 0), (k, k + 1))


def test_cap_five_statements_same_entity():
    stmts = [_stmt("A", f"B{k}", k) for k in range(5)]
    assert len(cap_by_entity(stmts, 2, seed=0)) == 2


def test_cap_larger_than_counts_is_identity():
    stmts = [_stmt("A", "B", 0), _stmt("C", "D", 1), _stmt("A", "D", 2)]
    assert cap_by_entity(stmts, 10, seed=4) == stmts


def test_cap_deterministic():
    rng = random.Random(0)
    stmts = [_stmt(f"E{rng.randrange(6)}", f"E{rng.randrange(6)}", k) for k in range(80)]
    assert cap_by_entity(stmts, 3, 11) == cap_by_entity(list(stmts), 3, 11)


def test_cap_rejects_zero():
    with pytest.raises(ValueError):
        cap_by_entity([], 0, 0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 1000), cap=st.integers(1, 6), n=st.integers(0, 60))
def test_cap_bound_and_subsequence(seed, cap, n):
    rng = random.Random(seed)
    stmts = [_stmt(f"E{rng.randrange(5)}", f"E{rng.randrange(5)}", k) for k in range(n)]
    kept = cap_by_entity(stmts, cap, seed)
    counts = {}
    for s in kept:
        for e in {s.e1, s.e2}:
            counts[e] = counts.get(e, 0) + 1
    assert all(c <= cap for c in counts.values())
    it = iter(stmts)
    assert all(any(s is t for t in it) for s in kept)  # order-preserving subsequence


def test_cap_single_entity_uniform():
    # every one of 5 statements should be kept about 2/5 of the time
    stmts = [_stmt("A", f"B{k}", k) for k in range(5)]
    hits = [0] * 5
    for seed in range(2000):
        for s in cap_by_entity(stmts, 2, seed):
            hits[s.mention_starts[0]] += 1
    assert all(abs(h / 2000 - 0.4) < 0.05 for h in hits)


def test_document_and_statement_roundtrip(tmp_path):
    rng = random.Random(1)
    docs = [random_document(rng, doc_id=f"d{i}") for i in range(3)]
    corpus.write_documents(tmp_path / "docs.jsonl", docs)
    assert corpus.read_documents(tmp_path / "docs.jsonl") == docs
    v = build_vocab([t for d in docs for t in d.tokens], 1)
    stmts = extract_corpus(docs, v, 30)
    corpus.write_statements(tmp_path / "st.jsonl", stmts)
    assert corpus.read_statements(tmp_path / "st.jsonl") == stmts


def test_documents_without_header(tmp_path):
    p = tmp_path / "docs.jsonl"
    p.write_text(json.dumps({"doc_id": "x", "tokens": ["a", "b"], "mentions": [{"start": 0, "end": 1, "entity_id": "A"}]}) + "\n")
    (d,) = corpus.read_documents(p)
    assert d.mentions == [Mention(0, 1, "A")]


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "docs.jsonl"
    good = json.dumps({"doc_id": "x", "tokens": ["a"], "mentions": []})
    p.write_text(good + "\n" + good + "\n{not json\n")
    with pytest.raises(io.FormatError) as err:
        corpus.read_documents(p)
    assert err.value.line == 3


def test_bad_mention_reports_line_number(tmp_path):
    p = tmp_path / "docs.jsonl"
    p.write_text(json.dumps({"doc_id": "x", "tokens": ["a"], "mentions": [{"start": 0, "end": 5, "entity_id": "A"}]}) + "\n")
    with pytest.raises(io.FormatError) as err:
        corpus.read_documents(p)
    assert err.value.line == 1


def test_statement_file_version_rejected(tmp_path):
    p = tmp_path / "st.jsonl"
    p.write_text('{"format":"mtb.statements","version":99}\n')
    with pytest.raises(io.FormatError, match="version"):
        corpus.read_statements(p)


def test_statement_file_requires_header(tmp_path):
    p = tmp_path / "st.jsonl"
    p.write_text(json.dumps(_stmt("A", "B").to_json()) + "\n")
    with pytest.raises(io.FormatError, match="header"):
        corpus.read_statements(p)


@pytest.mark.parametrize(
    "s1, s2",
    [((0, 1), (2, 3)), ((1, 1), (2, 3)), ((1, 3), (2, 3)), ((1, 2), (3, 5)), ((2, 3), (1, 2))],
)
def test_validator_rejects_bad_spans(s1, s2):
    st_ = RelationStatement((CLS_ID, 10, 11, 12, SEP_ID), s1, s2, "A", "B", ("d", 0))
    with pytest.raises(ValueError):
        corpus.validate_statement(st_)


def test_validator_accepts_adjacent_spans():
    corpus.validate_statement(RelationStatement((CLS_ID, 10, 11, SEP_ID), (1, 2), (2, 3), "A", "B", ("d", 0)))
