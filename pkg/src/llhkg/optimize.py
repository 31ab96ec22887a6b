"""Budgeted beam search over prompt specs, scored by soft F1 on a dev subset."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import random
from dataclasses import dataclass, field, replace
from typing import Optional

from .corpus import EXEMPLAR_STRATEGIES, eligible_exemplars, select_exemplar_docs
from .errors import OptimizationError, ValidationError
from .evaluation import score_corpus
from .extraction import DEFAULT_INSTRUCTION, DEFAULT_SCHEMA_NOTE, DEFAULT_USER_TEMPLATE, PromptSpec
from .stages import process_many

logger = logging.getLogger(__name__)

DEFAULT_INSTRUCTION_BANK = (
    DEFAULT_INSTRUCTION,
    "Read the input sentence and list every relational fact it states as (subject, relation, "
    "object). Attach qualifiers (time, place, role, quantity and similar key/value details) "
    "to the fact they describe. Copy entity names verbatim from the sentence.",
    "Extract hyper-relational facts. First think briefly about which entities the sentence "
    "mentions and how they are related, then give the final answer. Qualifiers are extra "
    "key/value details attached to a fact. Entity strings must be copied from the input.",
)


@dataclass(frozen=True)
class OptimizerConfig:
    beam_width: int = 3
    max_iterations: int = 4
    dev_subset_size: int = 20
    call_budget: int = 2000
    mutation_seed: int = 0
    instruction_bank: tuple = DEFAULT_INSTRUCTION_BANK
    exemplar_strategies: tuple = EXEMPLAR_STRATEGIES
    exemplar_counts: tuple = (2, 4, 6)
    schema_note: str = DEFAULT_SCHEMA_NOTE
    template: str = DEFAULT_USER_TEMPLATE
    max_facts: int = 16
    max_attempts: int = 2
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "instruction_bank", tuple(self.instruction_bank))
        object.__setattr__(self, "exemplar_strategies", tuple(self.exemplar_strategies))
        object.__setattr__(self, "exemplar_counts", tuple(self.exemplar_counts))
        if self.beam_width < 1:
            raise ValidationError("beam_width must be >= 1")
        if self.call_budget <= 0:
            raise ValidationError("call_budget must be positive")
        if not self.instruction_bank or not self.exemplar_strategies or not self.exemplar_counts:
            raise ValidationError("instruction bank, exemplar strategies and counts must be non-empty")
        for s in self.exemplar_strategies:
            if s not in EXEMPLAR_STRATEGIES:
                raise ValidationError(f"unknown exemplar strategy {s!r}")

    def to_dict(self) -> dict:
        return {
            "beam_width": self.beam_width,
            "max_iterations": self.max_iterations,
            "dev_subset_size": self.dev_subset_size,
            "call_budget": self.call_budget,
            "mutation_seed": self.mutation_seed,
            "instruction_bank": list(self.instruction_bank),
            "exemplar_strategies": list(self.exemplar_strategies),
            "exemplar_counts": list(self.exemplar_counts),
            "schema_note": self.schema_note,
            "template": self.template,
            "max_facts": self.max_facts,
            "max_attempts": self.max_attempts,
            "workers": self.workers,
        }


@dataclass(frozen=True)
class Candidate:
    id: str
    instruction: str
    strategy: str
    count: int
    exemplar_ids: tuple
    parent: Optional[str] = None
    mutation: str = "seed"
    iteration: int = 0
    score: Optional[float] = None

    def spec(self, train_by_id: dict, config: OptimizerConfig) -> PromptSpec:
        exemplars = [(train_by_id[i].text, train_by_id[i].gold) for i in self.exemplar_ids]
        return PromptSpec(self.instruction, config.schema_note, tuple(exemplars), config.max_facts,
                          config.template)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "parent": self.parent,
            "mutation": self.mutation,
            "iteration": self.iteration,
            "score": self.score,
            "strategy": self.strategy,
            "count": self.count,
            "exemplar_ids": list(self.exemplar_ids),
            "instruction": self.instruction,
        }


def _candidate(instruction, strategy, count, exemplar_ids, **lineage) -> Candidate:
    blob = json.dumps([instruction, strategy, count, list(exemplar_ids)], ensure_ascii=False)
    cid = "c-" + hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]
    return Candidate(cid, instruction, strategy, count, tuple(exemplar_ids), **lineage)


def seed_candidates(config: OptimizerConfig, train) -> list:
    """Instruction x strategy x count grid, sampled down to ``4 * beam_width``."""
    train = list(train)
    if not train:
        raise ValidationError("prompt optimization needs a non-empty training split")
    grid = list(itertools.product(config.instruction_bank, config.exemplar_strategies, config.exemplar_counts))
    limit = config.beam_width * 4
    if len(grid) > limit:
        keep = sorted(random.Random(config.mutation_seed).sample(range(len(grid)), limit))
        grid = [grid[i] for i in keep]
    out, seen = [], set()
    for instruction, strategy, count in grid:
        docs = select_exemplar_docs(train, count, strategy, seed=config.mutation_seed)
        cand = _candidate(instruction, strategy, count, [d.id for d in docs])
        if cand.id not in seen:
            seen.add(cand.id)
            out.append(cand)
    return out


def mutate(candidate: Candidate, config: OptimizerConfig, iteration: int, train) -> list:
    """Up to three children: exemplar swap, exemplar count +/-2, instruction swap."""
    rng = random.Random(f"{candidate.id}:{config.mutation_seed}:{iteration}")
    pool = [d.id for d in eligible_exemplars(train)]
    current = list(candidate.exemplar_ids)
    lineage = dict(parent=candidate.id, iteration=iteration)
    children = []

    fresh = [i for i in pool if i not in current]
    if current and fresh:
        swapped = list(current)
        swapped[rng.randrange(len(swapped))] = rng.choice(fresh)
        children.append(_candidate(candidate.instruction, candidate.strategy, candidate.count, swapped,
                                   mutation="exemplar-swap", **lineage))

    lo, hi = min(config.exemplar_counts), max(config.exemplar_counts)
    options = [c for c in (candidate.count + 2, candidate.count - 2) if lo <= c <= hi]
    if options:
        new_count = options[0] if len(options) == 1 else rng.choice(options)
        if new_count > candidate.count:
            ordered = select_exemplar_docs(train, len(pool), candidate.strategy, seed=config.mutation_seed)
            extra = [d.id for d in ordered if d.id not in current][:new_count - len(current)]
            ids = current + extra
        else:
            ids = current[:new_count]
        children.append(_candidate(candidate.instruction, candidate.strategy, new_count, ids,
                                   mutation=f"count{new_count - candidate.count:+d}", **lineage))

    bank = list(config.instruction_bank)
    if len(bank) > 1:
        idx = bank.index(candidate.instruction) if candidate.instruction in bank else -1
        children.append(_candidate(bank[(idx + 1) % len(bank)], candidate.strategy, candidate.count, current,
                                   mutation="instruction-swap", **lineage))
    return children


def _rank_key(c: Candidate):
    return (-c.score, c.id)


@dataclass
class SearchTrace:
    candidates: list = field(default_factory=list)
    best_so_far: list = field(default_factory=list)
    chat_calls: int = 0
    stop_reason: str = ""
    best_id: Optional[str] = None
    dev_ids: list = field(default_factory=list)

    def to_dict(self, config: OptimizerConfig = None) -> dict:
        out = {
            "format_version": "1",
            "candidates": [c.to_dict() for c in self.candidates],
            "best_so_far": self.best_so_far,
            "best_id": self.best_id,
            "chat_calls": self.chat_calls,
            "stop_reason": self.stop_reason,
            "dev_ids": self.dev_ids,
        }
        if config is not None:
            out["config"] = config.to_dict()
        return out

    def to_json(self, config: OptimizerConfig = None) -> str:
        return json.dumps(self.to_dict(config), ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def optimize(train, dev, config: OptimizerConfig, gateway, roles, policy, embedder,
             correct: bool = True) -> tuple:
    """Beam search; returns ``(best PromptSpec, SearchTrace)``.

    A candidate is evaluated only if its worst-case call cost still fits the
    budget, so the gateway never sees more than ``config.call_budget`` chat
    calls from this search.
    """
    train, dev = list(train), list(dev)
    if not dev:
        raise ValidationError("prompt optimization needs a non-empty dev split")
    train_by_id = {d.id: d for d in train}
    subset = sorted(random.Random(config.mutation_seed).sample(dev, min(config.dev_subset_size, len(dev))),
                    key=lambda d: d.id)
    subset_by_id = {d.id: d for d in subset}
    cost = len(subset) * (config.max_attempts + (1 if correct else 0))
    trace = SearchTrace(dev_ids=[d.id for d in subset])
    used = 0

    def evaluate(cands):
        nonlocal used
        scored = []
        for cand in cands:
            if used + cost > config.call_budget:
                trace.stop_reason = "budget"
                break
            before = gateway.chat_calls
            results = process_many(subset, cand.spec(train_by_id, config), gateway, roles, policy,
                                   correct, config.max_attempts, config.workers)
            used += gateway.chat_calls - before
            report = score_corpus([(subset_by_id[r.doc_id], r.facts) for r in results], embedder)
            cand = replace(cand, score=report.macro["soft"]["f1"])
            logger.info("candidate %s (%s) soft F1 %.4f", cand.id, cand.mutation, cand.score)
            trace.candidates.append(cand)
            scored.append(cand)
        return scored

    seen = set()
    seeds = seed_candidates(config, train)
    seen.update(c.id for c in seeds)
    beam = sorted(evaluate(seeds), key=_rank_key)[:config.beam_width]
    best = beam[0] if beam else None
    if best is not None:
        trace.best_so_far.append(best.score)

    for iteration in range(1, config.max_iterations + 1):
        if trace.stop_reason or not beam:
            break
        children = []
        for parent in beam:
            for child in mutate(parent, config, iteration, train):
                if child.id not in seen:
                    seen.add(child.id)
                    children.append(child)
        scored = evaluate(children)
        beam = sorted(beam + scored, key=_rank_key)[:config.beam_width]
        if _rank_key(beam[0]) < _rank_key(best):
            best = beam[0]
        trace.best_so_far.append(best.score)

    if best is None:
        raise OptimizationError(
            f"call budget {config.call_budget} is below the cost of one candidate evaluation ({cost} calls)")
    trace.stop_reason = trace.stop_reason or "max-iterations"
    trace.chat_calls = used
    trace.best_id = best.id
    return best.spec(train_by_id, config), trace

