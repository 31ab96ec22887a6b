"""Hyper-relational knowledge graph construction with lightweight LLMs."""

from .corpus import DatasetSplit, Document, load_hyperred, select_exemplars, split_dataset
from .correction import CorrectionPolicy, correct_facts, render_correction_prompt
from .errors import LLHKGError
from .estimator import HyperRelationExtractor, check_documents
from .evaluation import ScoreReport, score_corpus, soft_scores, strict_scores
from .extraction import PromptSpec, extract_document, parse_llm_output, render_extraction_prompt
from .facts import (
    HRKGraph,
    HyperRelationalFact,
    Qualifier,
    canonicalize_fact,
    export_graph,
    fact_equal_strict,
    graph_insert,
    import_graph,
)
from .gateway import ChatRequest, EndpointConfig, LLMGateway, stub_embed
from .optimize import OptimizerConfig, optimize

__version__ = "0.1.0"
