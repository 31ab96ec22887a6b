"""Estimator-style wrapper around the extract/correct pipeline.

``fit`` chooses the prompt (beam search on a held-out dev slice, or plain
exemplar selection), ``predict`` extracts facts per document and ``score``
returns the macro soft F1 against the documents' gold facts.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .correction import CorrectionPolicy
from .corpus import Document, select_exemplars, split_dataset
from .evaluation import score_corpus
from .extraction import DEFAULT_INSTRUCTION, DEFAULT_SCHEMA_NOTE, PromptSpec
from .gateway import CORRECTOR, EMBEDDER, EXTRACTOR, LLMGateway, stub_embedder
from .optimize import OptimizerConfig, optimize
from .stages import Roles, process_many


def check_documents(X, require_gold: bool = False) -> list:
    """Validate an iterable of :class:`Document` and return it as a list."""
    if isinstance(X, (str, bytes)):
        raise TypeError("expected an iterable of Document, got a string")
    try:
        docs = list(X)
    except TypeError:
        raise TypeError(f"expected an iterable of Document, got {type(X).__name__}") from None
    for i, d in enumerate(docs):
        if not isinstance(d, Document):
            raise TypeError(f"element {i} is {type(d).__name__}, expected Document")
    ids = [d.id for d in docs]
    if len(set(ids)) != len(ids):
        raise ValueError("document ids must be unique")
    if require_gold and not any(d.gold for d in docs):
        raise ValueError("at least one document needs gold facts")
    return docs


class HyperRelationExtractor(BaseEstimator):
    def __init__(self, extractor=EXTRACTOR, corrector=CORRECTOR, embedder=EMBEDDER, gateway=None,
                 correct=True, policy=None, instruction=DEFAULT_INSTRUCTION, schema_note=DEFAULT_SCHEMA_NOTE,
                 n_exemplars=2, exemplar_strategy="qualifier-rich", optimize_prompt=False,
                 optimizer_config=None, dev_fraction=0.2, max_attempts=2, max_facts=16, n_jobs=1,
                 random_state=0):
        self.extractor = extractor
        self.corrector = corrector
        self.embedder = embedder
        self.gateway = gateway
        self.correct = correct
        self.policy = policy
        self.instruction = instruction
        self.schema_note = schema_note
        self.n_exemplars = n_exemplars
        self.exemplar_strategy = exemplar_strategy
        self.optimize_prompt = optimize_prompt
        self.optimizer_config = optimizer_config
        self.dev_fraction = dev_fraction
        self.max_attempts = max_attempts
        self.max_facts = max_facts
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _roles(self):
        return Roles(self.extractor, self.corrector, self.embedder)

    def _policy(self):
        return self.policy if self.policy is not None else CorrectionPolicy()

    def _embed_fn(self):
        if self.embedder.mock:
            return stub_embedder
        return self.gateway_.embedder(self.embedder)

    def fit(self, X, y=None):
        docs = check_documents(X, require_gold=True)
        self.gateway_ = self.gateway if self.gateway is not None else LLMGateway()
        self.trace_ = None
        if self.optimize_prompt:
            split = split_dataset(docs, self.random_state, (1.0 - self.dev_fraction, self.dev_fraction, 0.0))
            config = self.optimizer_config or OptimizerConfig(
                mutation_seed=self.random_state, max_attempts=self.max_attempts,
                max_facts=self.max_facts, schema_note=self.schema_note, workers=self.n_jobs)
            self.spec_, self.trace_ = optimize(split.train, split.dev, config, self.gateway_, self._roles(),
                                               self._policy(), self._embed_fn(), correct=self.correct)
        else:
            exemplars = select_exemplars(docs, self.n_exemplars, self.exemplar_strategy, self.random_state)
            self.spec_ = PromptSpec(self.instruction, self.schema_note, tuple(exemplars), self.max_facts)
        return self

    def predict_results(self, X) -> list:
        """Per-document results with diagnostics, in input order."""
        check_is_fitted(self, "spec_")
        docs = check_documents(X)
        results = process_many(docs, self.spec_, self.gateway_, self._roles(), self._policy(),
                               self.correct, self.max_attempts, self.n_jobs)
        by_id = {r.doc_id: r for r in results}
        return [by_id[d.id] for d in docs]

    def predict(self, X) -> list:
        return [r.facts for r in self.predict_results(X)]

    def score(self, X, y=None) -> float:
        docs = check_documents(X)
        pred = self.predict(docs)
        report = score_corpus(list(zip(docs, pred)), self._embed_fn())
        return report.macro["soft"]["f1"]
