import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from llhkg.corpus import (
    Document,
    load_hyperred,
    read_corpus,
    select_exemplars,
    split_dataset,
    write_corpus,
)
from llhkg.errors import ParseError, ValidationError

from conftest import fact


def write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return path


SPAN_RECORD = {
    "tokens": ["T0", "T1", "T2", "T3", "T4", "T5"],
    "relations": [{"head": [0, 2], "tail": [4, 5], "label": "L",
                   "qualifiers": [{"span": [2, 3], "label": "Q"}]}],
}


def test_span_rule(tmp_path):
    (doc,) = load_hyperred(write_jsonl(tmp_path / "d.jsonl", [SPAN_RECORD]))
    assert doc.id == "doc-000000"
    assert doc.text == "T0 T1 T2 T3 T4 T5"
    assert list(doc.gold) == [fact("T0 T1", "L", "T4", ("Q", "T2"))]
    assert doc.gold[0].provenance.doc_id == "doc-000000"


def test_zero_relations(tmp_path):
    (doc,) = load_hyperred(write_jsonl(tmp_path / "d.jsonl", [{"tokens": ["Hi", "."], "relations": []}]))
    assert doc.gold == ()


def test_json_array_autodetect(tmp_path):
    p = tmp_path / "d.json"
    p.write_text(json.dumps([SPAN_RECORD, {"tokens": ["x"], "relations": []}]))
    docs = load_hyperred(p)
    assert [d.id for d in docs] == ["doc-000000", "doc-000001"]


def test_source_id_kept(tmp_path):
    (doc,) = load_hyperred(write_jsonl(tmp_path / "d.jsonl", [{**SPAN_RECORD, "id": "abc"}]))
    assert doc.id == "abc"


def test_malformed_record_names_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps(SPAN_RECORD) + "\n" + json.dumps({"relations": []}) + "\n")
    with pytest.raises(ParseError, match="line 2.*tokens"):
        load_hyperred(p)


def test_out_of_range_span_strict_and_lenient(tmp_path):
    bad = json.loads(json.dumps(SPAN_RECORD))
    bad["relations"][0]["tail"] = [4, 9]
    p = write_jsonl(tmp_path / "d.jsonl", [SPAN_RECORD, bad])
    with pytest.raises(ValidationError, match="line 2"):
        load_hyperred(p)
    docs = load_hyperred(p, lenient=True)
    assert [d.id for d in docs] == ["doc-000000"]


def test_deterministic_load(tmp_path):
    p = write_jsonl(tmp_path / "d.jsonl", [SPAN_RECORD] * 3)
    assert load_hyperred(p) == load_hyperred(p)


def test_interchange_round_trip(tmp_path):
    docs = load_hyperred(write_jsonl(tmp_path / "d.jsonl", [SPAN_RECORD, {"tokens": ["a"], "relations": []}]))
    write_corpus(docs, tmp_path / "c.json")
    assert read_corpus(tmp_path / "c.json") == docs


def test_document_invariants():
    with pytest.raises(ValidationError):
        Document("d", "a  b", ("a", "b"))
    with pytest.raises(ValidationError):
        Document("d", "a b", gold=(fact("a", "r", "b", doc="other"),))


def docs_n(n):
    return [Document(f"doc-{i:06d}", f"text {i}") for i in range(n)]


def test_split_sizes():
    s = split_dataset(docs_n(10), 7, (0.8, 0.1, 0.1))
    assert (len(s.train), len(s.dev), len(s.test)) == (8, 1, 1)
    assert s == split_dataset(docs_n(10), 7, (0.8, 0.1, 0.1))


def test_split_seeds_differ():
    docs = docs_n(100)
    a, b = split_dataset(docs, 7, (0.8, 0.1, 0.1)), split_dataset(docs, 8, (0.8, 0.1, 0.1))
    # frozen from random.Random(seed).shuffle(list(range(100)))
    assert [d.id for d in a.train[:5]] == [f"doc-{i:06d}" for i in (33, 25, 99, 84, 78)]
    assert [d.id for d in b.train[:5]] == [f"doc-{i:06d}" for i in (7, 80, 61, 35, 0)]
    assert {d.id for d in a.train} != {d.id for d in b.train}


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (1.2, -0.1, -0.1), (0.5, 0.5)])
def test_split_bad_fractions(fractions):
    with pytest.raises(ValidationError):
        split_dataset(docs_n(4), 0, fractions)


@given(st.integers(0, 60), st.lists(st.integers(0, 100), min_size=3, max_size=3).filter(lambda x: sum(x) > 0),
       st.integers(0, 2**32))
def test_split_partitions(n, weights, seed):
    fr = [w / sum(weights) for w in weights]
    fr[0] = 1.0 - fr[1] - fr[2]
    docs = docs_n(n)
    s = split_dataset(docs, seed, tuple(max(0.0, f) for f in fr))
    ids = [d.id for part in (s.train, s.dev, s.test) for d in part]
    assert sorted(ids) == [d.id for d in docs]


def qdoc(doc_id, n_quals):
    quals = [(f"k{i}", f"v{i}") for i in range(n_quals)]
    return Document(doc_id, f"text of {doc_id}", gold=(fact("s", "r", "o", *quals, doc=doc_id),))


def test_exemplars():
    train = [Document("z", "no gold"), qdoc("a", 3), qdoc("b", 5), qdoc("c", 5)]
    assert select_exemplars(train, 0) == []
    assert [t for t, _ in select_exemplars(train, 2, "first-k")] == ["text of a", "text of b"]
    assert [t for t, _ in select_exemplars(train, 3, "qualifier-rich")] == ["text of b", "text of c", "text of a"]
    assert len(select_exemplars(train, 10, "first-k")) == 3
    r1 = select_exemplars(train, 2, "seeded-random", seed=5)
    assert r1 == select_exemplars(train, 2, "seeded-random", seed=5)
    assert all(t != "no gold" for t, _ in r1)
