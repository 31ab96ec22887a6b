"""Per-document extract(+correct) step shared by the pipeline, optimizer and estimator."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .correction import CorrectionPolicy, correct_facts
from .extraction import extract_document
from .gateway import CORRECTOR, EMBEDDER, EXTRACTOR, EndpointConfig


@dataclass(frozen=True)
class Roles:
    extractor: EndpointConfig = EXTRACTOR
    corrector: EndpointConfig = CORRECTOR
    embedder: EndpointConfig = EMBEDDER


@dataclass
class DocumentResult:
    doc_id: str
    facts: list
    extracted: list
    extract_diag: object
    corrected: Optional[list] = None
    correct_diag: object = None
    timings: dict = field(default_factory=dict)


def process_document(doc, spec, gateway, roles: Roles, policy: CorrectionPolicy,
                     correct: bool = True, max_attempts: int = 2) -> DocumentResult:
    extracted, ediag = extract_document(doc, spec, gateway, roles.extractor, max_attempts)
    result = DocumentResult(doc.id, extracted, extracted, ediag)
    if correct:
        corrected, cdiag = correct_facts(doc, extracted, policy, gateway, roles.corrector)
        result.corrected, result.correct_diag, result.facts = corrected, cdiag, corrected
    return result


def process_many(docs, spec, gateway, roles, policy, correct=True, max_attempts=2, workers=1) -> list:
    """Process documents concurrently; results come back sorted by document id."""
    docs = list(docs)
    if workers <= 1 or len(docs) <= 1:
        results = [process_document(d, spec, gateway, roles, policy, correct, max_attempts) for d in docs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda d: process_document(d, spec, gateway, roles, policy, correct, max_attempts), docs))
    return sorted(results, key=lambda r: r.doc_id)
