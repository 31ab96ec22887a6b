"""HyperRED ingestion, interchange corpus files, splits and exemplar selection."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .errors import ParseError, ValidationError
from .facts import FORMAT_VERSION, HyperRelationalFact, Qualifier

logger = logging.getLogger(__name__)

EXEMPLAR_STRATEGIES = ("first-k", "seeded-random", "qualifier-rich")


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    tokens: Optional[tuple] = None
    gold: tuple = field(default=())

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValidationError(f"document {self.id!r} has empty text")
        if self.tokens is not None:
            object.__setattr__(self, "tokens", tuple(self.tokens))
            if detokenize(self.tokens) != self.text:
                raise ValidationError(f"document {self.id!r}: text does not match its tokens")
        gold = tuple(self.gold)
        for fact in gold:
            if fact.provenance is None or fact.provenance.doc_id != self.id:
                raise ValidationError(f"document {self.id!r}: gold fact provenance mismatch")
        object.__setattr__(self, "gold", gold)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "tokens": None if self.tokens is None else list(self.tokens),
            "gold": [f.to_dict() for f in self.gold],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Document":
        gold = tuple(HyperRelationalFact.from_dict(f) for f in data.get("gold", []))
        return cls(data["id"], data["text"], data.get("tokens"), gold)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    dev: tuple
    test: tuple

    def ids(self) -> dict:
        return {name: [d.id for d in getattr(self, name)] for name in ("train", "dev", "test")}


def detokenize(tokens: Sequence[str]) -> str:
    # plain space join: gold span strings must stay substrings of the text
    return " ".join(tokens)


def _span(value, n_tokens: int, where: str) -> tuple:
    if (not isinstance(value, (list, tuple)) or len(value) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
        raise ParseError(f"{where}: span must be a [start, end] pair of integers")
    start, end = value
    if not (0 <= start < end <= n_tokens):
        raise ValidationError(f"{where}: span [{start}, {end}) out of range for {n_tokens} tokens")
    return start, end


def _record_to_document(record, index: int, where: str) -> Document:
    if not isinstance(record, dict):
        raise ParseError(f"{where}: record must be a JSON object")
    tokens = record.get("tokens")
    if not isinstance(tokens, list) or not tokens or not all(isinstance(t, str) for t in tokens):
        raise ParseError(f"{where}: field 'tokens' must be a non-empty list of strings")
    doc_id = record.get("id")
    if doc_id is None:
        doc_id = f"doc-{index:06d}"
    elif not isinstance(doc_id, str):
        doc_id = str(doc_id)
    relations = record.get("relations", [])
    if not isinstance(relations, list):
        raise ParseError(f"{where}: field 'relations' must be a list")

    def surface(span):
        return detokenize(tokens[span[0]:span[1]])

    gold = []
    for r_i, rel in enumerate(relations):
        rwhere = f"{where}, relations[{r_i}]"
        if not isinstance(rel, dict):
            raise ParseError(f"{rwhere}: relation must be an object")
        label = rel.get("label")
        if not isinstance(label, str):
            raise ParseError(f"{rwhere}: field 'label' must be a string")
        head = _span(rel.get("head"), len(tokens), f"{rwhere}.head")
        tail = _span(rel.get("tail"), len(tokens), f"{rwhere}.tail")
        quals = rel.get("qualifiers", [])
        if not isinstance(quals, list):
            raise ParseError(f"{rwhere}: field 'qualifiers' must be a list")
        pairs = []
        for q_i, q in enumerate(quals):
            qwhere = f"{rwhere}.qualifiers[{q_i}]"
            if not isinstance(q, dict) or not isinstance(q.get("label"), str):
                raise ParseError(f"{qwhere}: qualifier needs a string 'label'")
            span = _span(q.get("span"), len(tokens), f"{qwhere}.span")
            pairs.append(Qualifier(q["label"], surface(span)))
        try:
            fact = HyperRelationalFact(surface(head), label, surface(tail), tuple(pairs))
        except ValidationError as exc:
            raise ValidationError(f"{rwhere}: {exc}") from None
        gold.append(fact.with_provenance(doc_id, 0))
    return Document(doc_id, detokenize(tokens), tuple(tokens), tuple(gold))


def _iter_records(text: str):
    """Yield (location label, record) from a JSON array or JSON-lines text."""
    if text.lstrip().startswith("["):
        try:
            records = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON array: {exc.msg}", exc.lineno, exc.colno) from None
        for i, rec in enumerate(records):
            yield f"record {i + 1}", rec
        return
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        yield f"line {lineno}", rec


def load_hyperred(path, lenient: bool = False) -> list:
    """Read HyperRED records (JSON lines or one JSON array) into documents.

    Each relation ``{"head": [s, e], "tail": [s, e], "label": ..., "qualifiers":
    [{"span": [s, e], "label": ...}]}`` becomes one fact; spans are half-open
    token ranges. With ``lenient=True`` records failing validation are logged
    and skipped instead of aborting the load.
    """
    text = Path(path).read_text(encoding="utf-8")
    docs, seen = [], set()
    for index, (where, record) in enumerate(_iter_records(text)):
        try:
            doc = _record_to_document(record, index, where)
            if doc.id in seen:
                raise ValidationError(f"{where}: duplicate document id {doc.id!r}")
        except (ParseError, ValidationError) as exc:
            if not lenient:
                raise
            logger.warning("skipping %s", exc)
            continue
        seen.add(doc.id)
        docs.append(doc)
    return docs


def write_corpus(docs: Sequence[Document], path) -> None:
    payload = {"format_version": FORMAT_VERSION, "documents": [d.to_dict() for d in docs]}
    Path(path).write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def read_corpus(path) -> list:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed corpus file: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"{path}: not a version {FORMAT_VERSION} corpus document")
    docs = []
    for i, item in enumerate(payload.get("documents", [])):
        try:
            docs.append(Document.from_dict(item))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: malformed document ({exc})", index=i) from None
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}", index=i) from None
    if len({d.id for d in docs}) != len(docs):
        raise ValidationError(f"{path}: duplicate document ids")
    return docs


def split_dataset(docs: Sequence[Document], seed: int, fractions=(0.8, 0.1, 0.1)) -> DatasetSplit:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must be 3 non-negative numbers summing to 1, got {fractions}")
    order = list(docs)
    random.Random(seed).shuffle(order)
    n = len(order)
    # the epsilon keeps e.g. 10 * 0.7 from flooring to 6
    n_dev = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    n_train = n - n_dev - n_test
    return DatasetSplit(
        train=tuple(order[:n_train]),
        dev=tuple(order[n_train:n_train + n_dev]),
        test=tuple(order[n_train + n_dev:]),
    )


def qualifier_count(doc: Document) -> int:
    return sum(len(f.qualifiers) for f in doc.gold)


def eligible_exemplars(train: Sequence[Document]) -> list:
    return [d for d in train if d.gold]


def select_exemplars(train: Sequence[Document], k: int, strategy: str = "first-k", seed: int = 0) -> list:
    """Pick up to ``k`` (text, gold facts) pairs from documents with gold facts."""
    if strategy not in EXEMPLAR_STRATEGIES:
        raise ValidationError(f"unknown exemplar strategy {strategy!r}")
    if k <= 0:
        return []
    return [(d.text, d.gold) for d in select_exemplar_docs(train, k, strategy, seed)]


def select_exemplar_docs(train, k, strategy, seed=0) -> list:
    pool = eligible_exemplars(train)
    if k <= 0:
        return []
    if strategy == "first-k":
        return pool[:k]
    if strategy == "seeded-random":
        return random.Random(seed).sample(pool, min(k, len(pool)))
    if strategy == "qualifier-rich":
        return sorted(pool, key=lambda d: (-qualifier_count(d), d.id))[:k]
    raise ValidationError(f"unknown exemplar strategy {strategy!r}")
