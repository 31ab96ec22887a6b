"""Rendering helpers shared by the extraction and correction prompts."""

from __future__ import annotations

import hashlib
import json
import re
from typing import Iterable, Optional

_BLOCK = re.compile(r"<<<INPUT ([0-9a-f]{12})>>>\n(.*?)\n<<<END INPUT \1>>>", re.S)


def _tag(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def delimit(text: str) -> str:
    """Wrap source text in sentinel lines keyed by a digest of the text itself.

    A document cannot contain its own closing sentinel (short of a hash
    collision), so instructions embedded in the text cannot end the block.
    """
    tag = _tag(text)
    return f"<<<INPUT {tag}>>>\n{text}\n<<<END INPUT {tag}>>>"


def find_delimited(message: str) -> Optional[str]:
    """Return the text of the last sentinel block in a rendered message."""
    last = None
    for m in _BLOCK.finditer(message):
        if _tag(m.group(2)) == m.group(1):
            last = m.group(2)
    return last


def facts_to_json(facts: Iterable) -> str:
    """Render facts as the JSON array the LLM is asked to produce."""
    return json.dumps([f.to_dict(provenance=False) for f in facts], ensure_ascii=False)
