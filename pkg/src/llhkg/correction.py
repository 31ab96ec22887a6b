"""Second LLM pass that repairs extracted facts against the source text."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import EmptyResponseError, UnparseableOutputError, ValidationError
from .gateway import ChatRequest, EndpointConfig
from .extraction import parse_llm_output
from .prompting import delimit, facts_to_json

GROUNDING_MODES = ("off", "warn", "strict")

CORRECTION_SYSTEM = (
    "You review hyper-relational facts extracted from a text and correct them. Each fact is "
    "a (subject, relation, object) triple with optional qualifiers (key/value pairs)."
)

CORRECTION_INSTRUCTIONS = (
    "Check every fact against the input text. Fix wrong entities, relations and qualifiers, "
    "fix formatting problems, and remove facts the text does not support. Return the full "
    "corrected list as a JSON array of objects with \"subject\", \"relation\", \"object\" and "
    "\"qualifiers\" ([{\"key\": ..., \"value\": ...}]) fields, and nothing else."
)


@dataclass(frozen=True)
class CorrectionPolicy:
    grounding: str = "warn"
    allow_additions: bool = False
    allow_deletions: bool = True
    edit_heuristic: bool = True

    def __post_init__(self):
        if self.grounding not in GROUNDING_MODES:
            raise ValidationError(f"grounding must be one of {GROUNDING_MODES}, got {self.grounding!r}")


@dataclass
class CorrectionDiagnostics:
    kept: int = 0
    edited: int = 0
    added: int = 0
    dropped_additions: int = 0
    deleted: int = 0
    restored: int = 0
    dropped_ungrounded: int = 0
    grounding_violations: list = field(default_factory=list)
    fail_open: bool = False
    tier: Optional[str] = None
    parse_dropped: dict = field(default_factory=dict)
    error: Optional[str] = None
    exchanges: list = field(default_factory=list)

    @property
    def dropped(self) -> int:
        return self.dropped_additions + self.dropped_ungrounded

    def to_dict(self) -> dict:
        return {
            "kept": self.kept,
            "edited": self.edited,
            "added": self.added,
            "dropped": self.dropped,
            "dropped_additions": self.dropped_additions,
            "dropped_ungrounded": self.dropped_ungrounded,
            "deleted": self.deleted,
            "restored": self.restored,
            "grounding_violations": list(self.grounding_violations),
            "fail_open": self.fail_open,
            "tier": self.tier,
            "parse_dropped": dict(sorted(self.parse_dropped.items())),
            "error": self.error,
        }


def render_correction_prompt(doc, facts, config: Optional[EndpointConfig] = None) -> ChatRequest:
    user = (
        f"Input text:\n{delimit(doc.text)}\n\n"
        f"Extracted facts:\n{facts_to_json(facts)}\n\n"
        f"{CORRECTION_INSTRUCTIONS}\nCorrected facts:"
    )
    return ChatRequest(config or EndpointConfig(), CORRECTION_SYSTEM, user)


def _is_edit_of(fact, other) -> bool:
    return ((fact.subject, fact.relation) == (other.subject, other.relation)
            or (fact.relation, fact.object) == (other.relation, other.object))


def grounded(fact, text: str) -> bool:
    folded = text.casefold()
    return fact.subject.casefold() in folded and fact.object.casefold() in folded


def correct_facts(doc, facts, policy: CorrectionPolicy, gateway, config: EndpointConfig) -> tuple:
    """Run the corrector on ``facts`` and apply ``policy`` to its answer.

    If the corrector's output cannot be parsed the input facts are returned
    unchanged with ``fail_open`` set. Transport errors propagate.
    """
    facts = list(facts)
    diag = CorrectionDiagnostics()
    request = render_correction_prompt(doc, facts, config)
    try:
        raw = gateway.chat(request)
    except EmptyResponseError as exc:
        diag.exchanges.append((request.key, ""))
        diag.fail_open, diag.error = True, str(exc)
        diag.kept = len(facts)
        return facts, diag
    diag.exchanges.append((request.key, raw))
    try:
        corrected, parse_diag = parse_llm_output(raw)
    except UnparseableOutputError as exc:
        diag.fail_open, diag.error = True, str(exc)
        diag.kept = len(facts)
        return facts, diag
    diag.tier = parse_diag.tier
    diag.parse_dropped = dict(parse_diag.dropped)

    input_triples = {f.triple for f in facts}
    output = []
    covered = set()
    for fact in corrected:
        if fact.triple in input_triples:
            covered.update(i for i, f in enumerate(facts) if f.triple == fact.triple)
            if fact in facts:
                diag.kept += 1
            else:
                diag.edited += 1
            output.append(fact)
            continue
        sources = [i for i, f in enumerate(facts) if _is_edit_of(fact, f)] if policy.edit_heuristic else []
        if sources:
            covered.update(sources)
            diag.edited += 1
            output.append(fact)
        elif policy.allow_additions:
            diag.added += 1
            output.append(fact)
        else:
            diag.dropped_additions += 1

    for i, f in enumerate(facts):
        if i in covered:
            continue
        if policy.allow_deletions:
            diag.deleted += 1
        else:
            diag.restored += 1
            output.append(f)

    if policy.grounding != "off":
        kept = []
        for fact in output:
            if grounded(fact, doc.text):
                kept.append(fact)
                continue
            diag.grounding_violations.append(f"{fact.subject} | {fact.relation} | {fact.object}")
            if policy.grounding == "strict":
                diag.dropped_ungrounded += 1
            else:
                kept.append(fact)
        output = kept

    # corrected facts inherit the extraction attempt index of their input
    attempt = facts[0].provenance.attempt if facts and facts[0].provenance else 0
    return [f if f.provenance is not None else f.with_provenance(doc.id, attempt) for f in output], diag
