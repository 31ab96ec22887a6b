"""Extraction prompts, tolerant parsing of LLM output, and the extraction stage."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import EmptyResponseError, UnparseableOutputError, ValidationError
from .facts import FORMAT_VERSION, HyperRelationalFact, Qualifier
from .gateway import ChatRequest, EndpointConfig
from .prompting import delimit, facts_to_json

TIERS = ("none", "fence-strip", "json-repair", "re-ask")

DEFAULT_INSTRUCTION = (
    "You extract hyper-relational facts from text. A fact is a (subject, relation, object) "
    "triple plus optional qualifiers: key/value pairs such as start time, end time, point in "
    "time, location or role that qualify the triple. Use entity strings exactly as they "
    "appear in the input."
)

DEFAULT_SCHEMA_NOTE = (
    "Answer with a JSON array only. Each element is an object with string fields "
    '"subject", "relation", "object" and a "qualifiers" array of {"key": ..., "value": ...} '
    "objects (empty when the fact has none). Return [] when the text states no fact."
)

DEFAULT_USER_TEMPLATE = "{exemplars}Input:\n{input}\nOutput:"

FORMAT_REMINDER = (
    "Your previous answer could not be parsed. Reply with only a JSON array of fact objects "
    'with "subject", "relation", "object" and "qualifiers" fields, no prose.'
)


@dataclass(frozen=True)
class PromptSpec:
    instruction: str = DEFAULT_INSTRUCTION
    schema_note: str = DEFAULT_SCHEMA_NOTE
    exemplars: tuple = ()
    max_facts: int = 16
    template: str = DEFAULT_USER_TEMPLATE

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValidationError("prompt instruction must be non-empty")
        if self.max_facts < 1:
            raise ValidationError("max_facts must be positive")
        object.__setattr__(self, "exemplars", tuple((text, tuple(facts)) for text, facts in self.exemplars))
        for _, facts in self.exemplars:
            for f in facts:
                if not isinstance(f, HyperRelationalFact):
                    raise ValidationError("exemplar facts must be HyperRelationalFact instances")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "instruction": self.instruction,
            "schema_note": self.schema_note,
            "template": self.template,
            "max_facts": self.max_facts,
            "exemplars": [
                {"text": text, "facts": [f.to_dict(provenance=False) for f in facts]}
                for text, facts in self.exemplars
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PromptSpec":
        exemplars = tuple(
            (e["text"], tuple(HyperRelationalFact.from_dict(f) for f in e["facts"]))
            for e in data.get("exemplars", [])
        )
        return cls(
            instruction=data["instruction"],
            schema_note=data.get("schema_note", DEFAULT_SCHEMA_NOTE),
            exemplars=exemplars,
            max_facts=data.get("max_facts", 16),
            template=data.get("template", DEFAULT_USER_TEMPLATE),
        )


def save_prompt_spec(spec: PromptSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_prompt_spec(path) -> PromptSpec:
    return PromptSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_template(directory) -> Optional[str]:
    """User-message template from ``template.txt`` in a prompt bank, if present."""
    path = Path(directory) / "template.txt"
    return path.read_text(encoding="utf-8").rstrip("\n") if path.is_file() else None


def load_prompt_bank(directory) -> list:
    """Instructions from ``*.txt`` files (sorted by name), skipping ``template.txt``."""
    directory = Path(directory)
    return [p.read_text(encoding="utf-8").strip() for p in sorted(directory.glob("*.txt"))
            if p.name != "template.txt" and p.read_text(encoding="utf-8").strip()]


@dataclass
class ParseDiagnostics:
    attempts: int = 1
    tier: str = "none"
    dropped: dict = field(default_factory=dict)
    truncated: int = 0
    failed: bool = False
    error: Optional[str] = None
    exchanges: list = field(default_factory=list)  # (prompt digest, raw text) per attempt

    @property
    def dropped_count(self) -> int:
        return sum(self.dropped.values())

    def to_dict(self) -> dict:
        return {
            "attempts": self.attempts,
            "tier": self.tier,
            "dropped": dict(sorted(self.dropped.items())),
            "truncated": self.truncated,
            "failed": self.failed,
            "error": self.error,
        }


def render_extraction_prompt(spec: PromptSpec, doc, config: Optional[EndpointConfig] = None) -> ChatRequest:
    blocks = []
    for i, (text, facts) in enumerate(spec.exemplars, start=1):
        blocks.append(f"Example {i}\nInput:\n{delimit(text)}\nOutput:\n{facts_to_json(facts)}\n\n")
    user = spec.template.format_map({
        "instruction": spec.instruction,
        "schema": spec.schema_note,
        "exemplars": "".join(blocks),
        "input": delimit(doc.text),
    })
    system = spec.instruction + "\n\n" + spec.schema_note
    return ChatRequest(config or EndpointConfig(), system, user)


_FENCE = re.compile(r"```[^\n`]*\n?(.*?)```", re.S)


def _array_candidates(text: str):
    """Yield each balanced ``[...]`` substring, left to right, string-aware."""
    start = text.find("[")
    while start != -1:
        depth, in_str, esc = 0, False, False
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch in "[{":
                depth += 1
            elif ch in "]}":
                depth -= 1
                if depth == 0:
                    if ch == "]":
                        yield text[start:i + 1]
                    break
        start = text.find("[", start + 1)


def repair_json(text: str) -> str:
    """Remove ``//`` line comments and trailing commas outside string literals."""
    out, i, in_str, esc = [], 0, False, False
    n = len(text)
    while i < n:
        ch = text[i]
        if in_str:
            out.append(ch)
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
            i += 1
            continue
        if ch == '"':
            in_str = True
        elif ch == "/" and text.startswith("//", i):
            while i < n and text[i] != "\n":
                i += 1
            continue
        elif ch == ",":
            j = i + 1
            while j < n and text[j] in " \t\r\n":
                j += 1
            if j < n and text[j] in "]}":
                i += 1
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def _load_array(candidate: str):
    try:
        value = json.loads(candidate)
        return value, False
    except (ValueError, RecursionError):
        pass
    try:
        value = json.loads(repair_json(candidate))
        return value, True
    except (ValueError, RecursionError):
        return None, True


def _locate_array(text: str):
    regions = [("fence-strip", m.group(1)) for m in _FENCE.finditer(text)]
    regions.append(("none", text))
    for tier, region in regions:
        for candidate in _array_candidates(region):
            value, repaired = _load_array(candidate)
            if isinstance(value, list):
                return value, ("json-repair" if repaired else tier)
        # comments may hide the closing bracket from the balance scan
        if "//" in region:
            for candidate in _array_candidates(repair_json(region)):
                value, _ = _load_array(candidate)
                if isinstance(value, list):
                    return value, "json-repair"
    return None, None


def _element_to_fact(item):
    """Return (fact, None) or (None, drop reason)."""
    if not isinstance(item, dict):
        return None, "not-an-object"
    fields = []
    for name in ("subject", "relation", "object"):
        value = item.get(name)
        if not isinstance(value, str):
            return None, f"missing-{name}"
        fields.append(value)
    quals = item.get("qualifiers", [])
    if quals is None:
        quals = []
    if not isinstance(quals, list):
        return None, "bad-qualifiers"
    pairs = []
    for q in quals:
        if not isinstance(q, dict) or not isinstance(q.get("key"), str) or not isinstance(q.get("value"), str):
            return None, "bad-qualifiers"
        pairs.append((q["key"], q["value"]))
    try:
        return HyperRelationalFact(*fields, tuple(Qualifier(k, v) for k, v in pairs)), None
    except ValidationError:
        return None, "empty-field"


def parse_llm_output(text) -> tuple:
    """Recover facts from raw LLM text.

    The first balanced JSON array is taken, looking inside markdown code
    fences before the bare text. Only conservative repairs are made (trailing
    commas, ``//`` comments); elements that do not fit the fact schema are
    dropped and counted. Raises :class:`UnparseableOutputError` when no array
    can be recovered.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    if not isinstance(text, str):
        raise UnparseableOutputError(repr(text))
    array, tier = _locate_array(text)
    if array is None:
        raise UnparseableOutputError(text)
    diag = ParseDiagnostics(tier=tier)
    facts = []
    for item in array:
        fact, reason = _element_to_fact(item)
        if fact is None:
            diag.dropped[reason] = diag.dropped.get(reason, 0) + 1
        else:
            facts.append(fact)
    return facts, diag


def extract_document(doc, spec: PromptSpec, gateway, config: EndpointConfig, max_attempts: int = 2) -> tuple:
    """Run the extractor on one document, re-asking on unparseable output.

    Never raises on bad model output: after ``max_attempts`` failures the
    result is an empty fact list with ``diagnostics.failed`` set. Transport
    errors propagate.
    """
    if max_attempts < 1:
        raise ValidationError("max_attempts must be at least 1")
    base = render_extraction_prompt(spec, doc, config)
    exchanges = []
    last_error = None
    for attempt in range(max_attempts):
        request = base if attempt == 0 else ChatRequest(config, base.system, base.user + "\n\n" + FORMAT_REMINDER)
        try:
            raw = gateway.chat(request)
        except EmptyResponseError as exc:
            exchanges.append((request.key, ""))
            last_error = str(exc)
            continue
        exchanges.append((request.key, raw))
        try:
            facts, diag = parse_llm_output(raw)
        except UnparseableOutputError as exc:
            last_error = str(exc)
            continue
        diag.attempts = attempt + 1
        if attempt > 0:
            diag.tier = "re-ask"
        diag.exchanges = exchanges
        if len(facts) > spec.max_facts:
            diag.truncated = len(facts) - spec.max_facts
            facts = facts[:spec.max_facts]
        return [f.with_provenance(doc.id, attempt) for f in facts], diag
    return [], ParseDiagnostics(attempts=max_attempts, tier="re-ask" if max_attempts > 1 else "none",
                                failed=True, error=last_error, exchanges=exchanges)
