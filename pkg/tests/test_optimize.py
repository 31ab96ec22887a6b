import threading

import pytest

from llhkg.corpus import read_corpus
from llhkg.correction import CorrectionPolicy
from llhkg.errors import OptimizationError, ValidationError
from llhkg.gateway import EndpointConfig, LLMGateway, MockFixtures, stub_embedder
from llhkg.optimize import OptimizerConfig, mutate, optimize, seed_candidates
from llhkg.prompting import facts_to_json, find_delimited
from llhkg.stages import Roles

from conftest import MOCK_DIR

DOCS = read_corpus(MOCK_DIR / "corpus.json")
TRAIN, DEV = DOCS[:6], DOCS[6:]
ROLES = Roles(EndpointConfig(model="x", mock=True), EndpointConfig(model="c", mock=True),
              EndpointConfig(model="e", mock=True))
BANK = ("Plain instruction.", "Careful instruction.")


class PromptSensitiveGateway:
    """Answers with the gold facts only when the system prompt says "Careful"."""

    def __init__(self):
        self.chat_calls = 0
        self._lock = threading.Lock()
        self._gold = {d.text: d.gold for d in DOCS}

    def chat(self, request):
        with self._lock:
            self.chat_calls += 1
        gold = self._gold[find_delimited(request.user)]
        return facts_to_json(gold if "Careful" in request.system else gold[:0])


def config(**kw):
    base = dict(beam_width=2, max_iterations=2, dev_subset_size=3, call_budget=500, instruction_bank=BANK,
                exemplar_strategies=("first-k",), exemplar_counts=(2, 4), mutation_seed=1)
    base.update(kw)
    return OptimizerConfig(**base)


def run(cfg, gateway=None):
    return optimize(TRAIN, DEV, cfg, gateway or PromptSensitiveGateway(), ROLES, CorrectionPolicy(),
                    stub_embedder, correct=False)


def test_seed_grid_size_and_determinism():
    seeds = seed_candidates(config(), TRAIN)
    assert len(seeds) == 4
    assert {(c.instruction, c.count) for c in seeds} == {(i, n) for i in BANK for n in (2, 4)}
    assert [c.id for c in seeds] == [c.id for c in seed_candidates(config(), TRAIN)]


def test_seed_grid_is_subsampled():
    seeds = seed_candidates(config(beam_width=1), TRAIN)
    assert len(seeds) == 4  # 2 x 1 x 2 grid fits inside 4 * beam_width
    cfg = config(beam_width=1, exemplar_counts=(1, 2, 3))
    assert len(seed_candidates(cfg, TRAIN)) == 4


def test_seed_needs_train():
    with pytest.raises(ValidationError):
        seed_candidates(config(), [])


def test_mutate_respects_count_range_and_bank():
    parent = seed_candidates(config(exemplar_counts=(2, 6)), TRAIN)[0]
    assert parent.count == 2
    kids = mutate(parent, config(exemplar_counts=(2, 6)), 1, TRAIN)
    counts = {k.mutation: k.count for k in kids}
    assert counts["count+2"] == 4
    assert all(k.parent == parent.id and k.iteration == 1 for k in kids)
    assert [k.id for k in kids] == [k.id for k in mutate(parent, config(exemplar_counts=(2, 6)), 1, TRAIN)]
    single = config(instruction_bank=BANK[:1])
    assert "instruction-swap" not in {k.mutation for k in mutate(parent, single, 1, TRAIN)}


def test_finds_the_better_instruction():
    spec, trace = run(config())
    assert spec.instruction == "Careful instruction."
    assert trace.best_so_far[-1] == pytest.approx(1.0)


def test_zero_iterations_returns_best_seed():
    spec, trace = run(config(max_iterations=0))
    assert len(trace.best_so_far) == 1
    assert spec.instruction == "Careful instruction."


def test_monotone_budget_and_repeatable():
    cfg = config(call_budget=20)
    gw = PromptSensitiveGateway()
    _, trace = run(cfg, gw)
    assert trace.best_so_far == sorted(trace.best_so_far)
    assert gw.chat_calls == trace.chat_calls <= 20
    assert trace.stop_reason == "budget"
    _, again = run(cfg)
    assert again.to_json(cfg) == trace.to_json(cfg)


def test_budget_too_small():
    with pytest.raises(OptimizationError):
        run(config(call_budget=2))


def test_mock_gateway_counts_retries_against_budget():
    # every mock response is garbage, so each document costs max_attempts calls
    fx = MockFixtures(script=["not json"] * 1000)
    gw = LLMGateway(fixtures=fx)
    cfg = config(call_budget=13, max_attempts=2)
    _, trace = run(cfg, gw)
    assert gw.chat_calls <= 13 and trace.chat_calls == gw.chat_calls
