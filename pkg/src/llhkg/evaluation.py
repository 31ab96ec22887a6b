"""Fact-level soft (embedding) and strict precision/recall/F1, and corpus reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import ValidationError
from .facts import CANONICAL_VERSION, canonical_triple, canonicalize_fact

REPORT_VERSION = "1"
# Reference row for comparison tables (prior GPT-3.5 scheme).
REFERENCE_ROWS = (("GCLR", "GPT3.5", 0.53, 0.56, 0.53),)
PUBLISHED_LLHKG = (0.52, 0.56, 0.53)


def f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def soft_scores(pred, gold, embed) -> tuple:
    """Greedy max-matching of fact embeddings (BERTScore at fact granularity).

    ``embed`` maps one canonical fact string to a unit vector. Cosines are
    clamped to [0, 1].
    """
    if not pred and not gold:
        return 1.0, 1.0, 1.0
    if not pred or not gold:
        return 0.0, 0.0, 0.0
    P = np.vstack([embed(canonicalize_fact(f)) for f in pred])
    G = np.vstack([embed(canonicalize_fact(f)) for f in gold])
    sim = np.clip(P @ G.T, 0.0, 1.0)
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    return precision, recall, f1(precision, recall)


def _strict_counts(pred, gold, mode: str) -> tuple:
    if mode == "full":
        key = canonicalize_fact
    elif mode == "triple-only":
        key = canonical_triple
    else:
        raise ValidationError(f"unknown strict mode {mode!r}")
    p, g = {key(f) for f in pred}, {key(f) for f in gold}
    return len(p), len(g), len(p & g)


def _ratio_scores(n_pred: int, n_gold: int, matches: int) -> tuple:
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    if n_pred == 0 or n_gold == 0:
        return 0.0, 0.0, 0.0
    p, r = matches / n_pred, matches / n_gold
    return p, r, f1(p, r)


def strict_scores(pred, gold, mode: str = "full") -> tuple:
    return _ratio_scores(*_strict_counts(pred, gold, mode))


def _prf(values) -> dict:
    return {"precision": values[0], "recall": values[1], "f1": values[2]}


@dataclass
class DocScores:
    doc_id: str
    strict: tuple
    strict_triple: tuple
    soft: tuple
    n_pred: int
    n_gold: int
    strict_matches: int
    triple_matches: int = 0

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "strict": _prf(self.strict),
            "strict_triple": _prf(self.strict_triple),
            "soft": _prf(self.soft),
            "counts": {"predicted": self.n_pred, "gold": self.n_gold,
                       "strict_matches": self.strict_matches, "triple_matches": self.triple_matches},
        }


@dataclass
class ScoreReport:
    documents: list
    macro: dict
    micro_strict: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self, normalize: bool = False) -> dict:
        meta = dict(self.metadata)
        if normalize:
            meta.pop("timestamp", None)
        return {
            "format_version": REPORT_VERSION,
            "metadata": meta,
            "macro": self.macro,
            "micro_strict": self.micro_strict,
            "documents": [d.to_dict() for d in self.documents],
        }

    def to_json(self, normalize: bool = False) -> str:
        return json.dumps(self.to_dict(normalize), ensure_ascii=False, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreReport":
        if data.get("format_version") != REPORT_VERSION:
            raise ValidationError("not a version 1 score report")
        docs = []
        for d in data["documents"]:
            t = lambda k: (d[k]["precision"], d[k]["recall"], d[k]["f1"])  # noqa: E731
            c = d["counts"]
            docs.append(DocScores(d["doc_id"], t("strict"), t("strict_triple"), t("soft"),
                                  c["predicted"], c["gold"], c["strict_matches"], c.get("triple_matches", 0)))
        return cls(docs, data["macro"], data["micro_strict"], data.get("metadata", {}))


def score_corpus(results, embedder, metadata=None) -> ScoreReport:
    """Score ``(doc, predicted facts)`` pairs.

    ``embedder`` is a batch callable ``list[str] -> matrix``; every distinct
    canonical string is embedded once per call.
    """
    results = list(results)
    ids = [doc.id for doc, _ in results]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate documents in results: {dupes}")
    texts = sorted({canonicalize_fact(f) for doc, pred in results for f in (*pred, *doc.gold)})
    vectors = {}
    if texts:
        mat = np.asarray(embedder(texts), dtype=float)
        vectors = dict(zip(texts, mat))

    docs = []
    for doc, pred in sorted(results, key=lambda r: r[0].id):
        pred, gold = list(pred), list(doc.gold)
        n_pred, n_gold, matches = _strict_counts(pred, gold, "full")
        tp, tg, tmatches = _strict_counts(pred, gold, "triple-only")
        docs.append(DocScores(
            doc.id,
            _ratio_scores(n_pred, n_gold, matches),
            _ratio_scores(tp, tg, tmatches),
            soft_scores(pred, gold, vectors.__getitem__),
            n_pred, n_gold, matches, tmatches,
        ))

    def mean(attr):
        if not docs:
            return _prf((0.0, 0.0, 0.0))
        arr = np.array([getattr(d, attr) for d in docs], dtype=float)
        return _prf(tuple(float(x) for x in arr.mean(axis=0)))

    micro = {
        "full": _prf(_ratio_scores(sum(d.n_pred for d in docs), sum(d.n_gold for d in docs),
                                   sum(d.strict_matches for d in docs))),
        "triple_only": _prf(_ratio_scores(
            sum(len({canonical_triple(f) for f in p}) for _, p in results),
            sum(len({canonical_triple(f) for f in d.gold}) for d, _ in results),
            sum(d.triple_matches for d in docs))),
    }
    meta = {
        "canonicalization_version": CANONICAL_VERSION,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "n_documents": len(docs),
    }
    meta.update(metadata or {})
    return ScoreReport(docs, {"strict": mean("strict"), "strict_triple": mean("strict_triple"),
                              "soft": mean("soft")}, micro, meta)


def render_table(report: ScoreReport, framework: str = "LLHKG (this run)", model: str = "") -> str:
    """Plain-text comparison table with Framework/Model/Precision/Recall/F1 columns."""
    soft = report.macro["soft"]
    rows = [(fw, m, f"{p:.2f}", f"{r:.2f}", f"{f:.2f}") for fw, m, p, r, f in REFERENCE_ROWS]
    rows.append((framework, model or report.metadata.get("model", ""),
                 f"{soft['precision']:.2f}", f"{soft['recall']:.2f}", f"{soft['f1']:.2f}"))
    header = ("Framework", "Model", "Precision", "Recall", "F1")
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(5)]
    line = "+".join("-" * (w + 2) for w in widths)
    fmt = lambda r: "|".join(f" {str(c):<{w}} " for c, w in zip(r, widths))  # noqa: E731
    out = [line, fmt(header), line, *[fmt(r) for r in rows], line]
    strict = report.macro["strict"]
    out.append(f"soft scores are macro means over {len(report.documents)} documents; "
               f"strict macro P/R/F1 = {strict['precision']:.2f}/{strict['recall']:.2f}/{strict['f1']:.2f}")
    return "\n".join(out)
