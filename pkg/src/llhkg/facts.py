"""Hyper-relational fact model, canonical strings, graph assembly and exports."""

from __future__ import annotations

import csv
import io
import json
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import GraphFormatError, ParseError, ValidationError

FORMAT_VERSION = "1"
CANONICAL_VERSION = "1"
GRAPH_FORMATS = ("canonical-json", "flat-tsv")
TSV_HEADER = ("subject", "relation", "object", "qualifier_key", "qualifier_value", "doc_id", "attempt")

_WS = re.compile(r"\s+")


def normalize_text(value: str) -> str:
    """NFC-normalize, trim, and collapse internal whitespace runs to one space."""
    return _WS.sub(" ", unicodedata.normalize("NFC", value)).strip()


def _require(value, name: str) -> str:
    if not isinstance(value, str):
        raise ValidationError(f"{name} must be a string, got {type(value).__name__}")
    text = normalize_text(value)
    if not text:
        raise ValidationError(f"{name} is empty")
    return text


@dataclass(frozen=True, order=True)
class Qualifier:
    key: str
    value: str

    def __post_init__(self):
        object.__setattr__(self, "key", _require(self.key, "qualifier key"))
        object.__setattr__(self, "value", _require(self.value, "qualifier value"))


@dataclass(frozen=True)
class Provenance:
    doc_id: str
    attempt: int = 0

    def __post_init__(self):
        if not isinstance(self.attempt, int) or self.attempt < 0:
            raise ValidationError(f"attempt index must be a non-negative integer, got {self.attempt!r}")


@dataclass(frozen=True)
class HyperRelationalFact:
    """A base triple plus qualifier pairs: one hyperedge of the graph.

    Fields are stored normalized and qualifiers sorted/deduplicated, so
    equality and hashing follow the canonical string. Provenance is carried
    along but never compared.
    """

    subject: str
    relation: str
    object: str
    qualifiers: tuple = ()
    provenance: Optional[Provenance] = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "subject", _require(self.subject, "subject"))
        object.__setattr__(self, "relation", _require(self.relation, "relation"))
        object.__setattr__(self, "object", _require(self.object, "object"))
        quals = []
        for q in self.qualifiers:
            if isinstance(q, Qualifier):
                quals.append(q)
            else:
                key, value = q
                quals.append(Qualifier(key, value))
        object.__setattr__(self, "qualifiers", tuple(sorted(set(quals))))

    @property
    def triple(self) -> tuple:
        return (self.subject, self.relation, self.object)

    def with_provenance(self, doc_id: str, attempt: int = 0) -> "HyperRelationalFact":
        return HyperRelationalFact(self.subject, self.relation, self.object, self.qualifiers,
                                   Provenance(doc_id, attempt))

    def to_dict(self, provenance: bool = True) -> dict:
        out = {
            "subject": self.subject,
            "relation": self.relation,
            "object": self.object,
            "qualifiers": [{"key": q.key, "value": q.value} for q in self.qualifiers],
        }
        if provenance:
            out["provenance"] = (
                None if self.provenance is None
                else {"doc_id": self.provenance.doc_id, "attempt": self.provenance.attempt}
            )
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HyperRelationalFact":
        if not isinstance(data, dict):
            raise ValidationError("fact must be an object")
        for name in ("subject", "relation", "object"):
            if name not in data:
                raise ValidationError(f"missing field {name!r}")
        quals = data.get("qualifiers") or []
        if not isinstance(quals, list):
            raise ValidationError("qualifiers must be a list")
        pairs = []
        for q in quals:
            if not isinstance(q, dict) or "key" not in q or "value" not in q:
                raise ValidationError("qualifier must be an object with key and value")
            pairs.append(Qualifier(q["key"], q["value"]))
        prov = data.get("provenance")
        if prov is not None:
            if not isinstance(prov, dict) or not isinstance(prov.get("doc_id"), str):
                raise ValidationError("provenance must be an object with a string doc_id")
            prov = Provenance(prov["doc_id"], prov.get("attempt", 0))
        return cls(data["subject"], data["relation"], data["object"], tuple(pairs), prov)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("|", "\\|").replace("=", "\\=")


def canonicalize_fact(fact: HyperRelationalFact) -> str:
    parts = [_escape(fact.subject), _escape(fact.relation), _escape(fact.object)]
    parts.extend(f"{_escape(q.key)}={_escape(q.value)}" for q in fact.qualifiers)
    return " | ".join(parts)


def canonical_triple(fact: HyperRelationalFact) -> str:
    return " | ".join(_escape(x) for x in fact.triple)


def _split_unescaped(text: str, sep: str, maxsplit: int = -1) -> list:
    """Split on unescaped ``sep`` and unescape the pieces."""
    pieces, buf, i = [], [], 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            buf.append(text[i + 1])
            i += 2
            continue
        if ch == sep and maxsplit != 0:
            pieces.append("".join(buf))
            buf = []
            maxsplit -= 1
            i += 1
            continue
        if ch == "\\":
            raise ParseError(f"dangling escape in canonical string {text!r}")
        buf.append(ch)
        i += 1
    pieces.append("".join(buf))
    return pieces


def parse_canonical(text: str) -> HyperRelationalFact:
    """Inverse of :func:`canonicalize_fact`."""
    # Fields are split on unescaped '|' with the escapes still in place, so '='
    # inside a qualifier can be located before unescaping.
    raw_fields, buf, i = [], [], 0
    while i < len(text):
        if text[i] == "\\" and i + 1 < len(text):
            buf.append(text[i:i + 2])
            i += 2
        elif text[i] == "|":
            raw_fields.append("".join(buf))
            buf = []
            i += 1
        else:
            buf.append(text[i])
            i += 1
    raw_fields.append("".join(buf))
    raw_fields = [f.strip(" ") for f in raw_fields]
    if len(raw_fields) < 3:
        raise ParseError(f"canonical string needs at least 3 fields: {text!r}")
    s, r, o = (_split_unescaped(f, "|")[0] for f in raw_fields[:3])
    quals = []
    for f in raw_fields[3:]:
        kv = _split_unescaped(f, "=", maxsplit=1)
        if len(kv) != 2:
            raise ParseError(f"qualifier without '=': {f!r}")
        quals.append(Qualifier(kv[0], kv[1]))
    return HyperRelationalFact(s, r, o, tuple(quals))


def fact_equal_strict(a: HyperRelationalFact, b: HyperRelationalFact) -> bool:
    return canonicalize_fact(a) == canonicalize_fact(b)


@dataclass(frozen=True)
class HRKGraph:
    """Immutable set of facts plus the ids of documents that contributed them."""

    facts: frozenset = frozenset()
    source_ids: frozenset = frozenset()

    def __len__(self):
        return len(self.facts)

    def sorted_facts(self) -> list:
        return sorted(self.facts, key=canonicalize_fact)


def graph_insert(graph: HRKGraph, facts: Iterable[HyperRelationalFact]) -> HRKGraph:
    """Return a new graph holding the union; the first-seen provenance wins."""
    kept = set(graph.facts)
    sources = set(graph.source_ids)
    for fact in facts:
        if fact.provenance is not None:
            sources.add(fact.provenance.doc_id)
        if fact not in kept:
            kept.add(fact)
    return HRKGraph(frozenset(kept), frozenset(sources))


def export_graph(graph: HRKGraph, format: str = "canonical-json") -> bytes:
    if format == "canonical-json":
        doc = {
            "format_version": FORMAT_VERSION,
            "source_ids": sorted(graph.source_ids),
            "facts": [f.to_dict() for f in graph.sorted_facts()],
        }
        return (json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=2) + "\n").encode("utf-8")
    if format == "flat-tsv":
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow(TSV_HEADER)
        for f in graph.sorted_facts():
            prov = ("", "") if f.provenance is None else (f.provenance.doc_id, str(f.provenance.attempt))
            if not f.qualifiers:
                writer.writerow((*f.triple, "", "", *prov))
            for q in f.qualifiers:
                writer.writerow((*f.triple, q.key, q.value, *prov))
        return buf.getvalue().encode("utf-8")
    raise GraphFormatError(f"unknown graph format {format!r}; expected one of {GRAPH_FORMATS}")


def import_graph(data: bytes, format: str = "canonical-json") -> HRKGraph:
    if format != "canonical-json":
        raise GraphFormatError(f"import supports only canonical-json, got {format!r}")
    try:
        doc = json.loads(data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data)
    except UnicodeDecodeError as exc:
        raise ParseError(f"graph document is not UTF-8: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed graph document: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise ParseError("graph document must be a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {doc.get('format_version')!r}")
    raw_facts = doc.get("facts")
    if not isinstance(raw_facts, list):
        raise ValidationError("'facts' must be a list")
    facts = []
    for i, item in enumerate(raw_facts):
        try:
            facts.append(HyperRelationalFact.from_dict(item))
        except ValidationError as exc:
            raise ValidationError(str(exc), index=i) from None
    sources = doc.get("source_ids", [])
    if not isinstance(sources, list) or not all(isinstance(s, str) for s in sources):
        raise ValidationError("'source_ids' must be a list of strings")
    return graph_insert(HRKGraph(source_ids=frozenset(sources)), facts)
