"""Pipeline configuration, run records and resumable stage orchestration."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .correction import CorrectionPolicy, correct_facts
from .corpus import DatasetSplit, read_corpus, select_exemplars, split_dataset
from .errors import ConfigError, DataError, RunStoreError, ValidationError
from .evaluation import ScoreReport, score_corpus
from .extraction import (
    DEFAULT_INSTRUCTION,
    DEFAULT_SCHEMA_NOTE,
    DEFAULT_USER_TEMPLATE,
    PromptSpec,
    extract_document,
    load_prompt_bank,
    load_prompt_spec,
    load_template,
    render_extraction_prompt,
)
from .facts import FORMAT_VERSION, HRKGraph, HyperRelationalFact, graph_insert
from .gateway import CORRECTOR, EMBEDDER, EXTRACTOR, EndpointConfig, LLMGateway, MockFixtures, stub_embedder
from .optimize import OptimizerConfig
from .stages import Roles

logger = logging.getLogger(__name__)

STAGES = ("extracted", "corrected")
EVAL_SPLITS = ("train", "dev", "test", "all")
STUB_EMBEDDER_ID = "stub-fnv1a-256"

RECORDS_FILE = "records.jsonl"
SPLIT_FILE = "split.json"
REPORT_FILE = "report.json"
PROMPT_FILE = "best_prompt.json"
TRACE_FILE = "trace.json"


def _resolve(base: Path, value) -> Optional[Path]:
    if value in (None, ""):
        return None
    p = Path(value)
    return p if p.is_absolute() else (base / p)


@dataclass
class PipelineConfig:
    corpus: Path
    work_dir: Path
    cache_dir: Path
    hyperred: Optional[Path] = None
    prompt_bank_dir: Optional[Path] = None
    fixtures: Optional[Path] = None
    prompt_file: Optional[Path] = None
    roles: Roles = field(default_factory=Roles)
    split_seed: int = 13
    split_fractions: tuple = (0.8, 0.1, 0.1)
    correction_enabled: bool = True
    policy: CorrectionPolicy = field(default_factory=CorrectionPolicy)
    instruction: str = DEFAULT_INSTRUCTION
    schema_note: str = DEFAULT_SCHEMA_NOTE
    template: str = DEFAULT_USER_TEMPLATE
    n_exemplars: int = 2
    exemplar_strategy: str = "qualifier-rich"
    exemplar_seed: int = 0
    max_attempts: int = 2
    max_facts: int = 16
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval_split: str = "test"
    concurrency: int = 4
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if Path(self.work_dir).resolve() == Path(self.cache_dir).resolve():
            raise ConfigError("work_dir and cache_dir must be different directories")
        if self.eval_split not in EVAL_SPLITS:
            raise ConfigError(f"evaluation split must be one of {EVAL_SPLITS}")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        for name in ("prompt_bank_dir", "fixtures", "prompt_file"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"configured {name} does not exist: {path}")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data, path.parent)

    @classmethod
    def from_dict(cls, data: dict, base: Path = Path(".")) -> "PipelineConfig":
        try:
            paths = data["paths"]
            roles_raw = data.get("roles", {})
            mock_all = bool(data.get("mock", False))

            def role(name, default):
                cfg = EndpointConfig.from_dict({**default.to_dict(), **roles_raw.get(name, {})})
                return replace(cfg, mock=True) if mock_all else cfg

            roles = Roles(role("extractor", EXTRACTOR), role("corrector", CORRECTOR), role("embedder", EMBEDDER))
            split = data.get("split", {})
            corr = dict(data.get("correction", {}))
            enabled = corr.pop("enabled", True)
            ext = data.get("extraction", {})
            opt = dict(data.get("optimizer", {}))
            bank_dir = _resolve(base, paths.get("prompt_bank_dir"))
            if bank_dir is not None and bank_dir.is_dir() and "instruction_bank" not in opt:
                bank = load_prompt_bank(bank_dir)
                if bank:
                    opt["instruction_bank"] = bank
            template = ext.get("template")
            if template is None and bank_dir is not None and bank_dir.is_dir():
                template = load_template(bank_dir)
            template = template or DEFAULT_USER_TEMPLATE
            opt.setdefault("template", template)
            opt.setdefault("max_attempts", ext.get("max_attempts", 2))
            opt.setdefault("max_facts", ext.get("max_facts", 16))
            opt.setdefault("workers", data.get("concurrency", 4))
            return cls(
                corpus=_resolve(base, paths["corpus"]),
                work_dir=_resolve(base, paths["work_dir"]),
                cache_dir=_resolve(base, paths["cache_dir"]),
                hyperred=_resolve(base, paths.get("hyperred")),
                prompt_bank_dir=bank_dir,
                fixtures=_resolve(base, paths.get("fixtures")),
                prompt_file=_resolve(base, paths.get("prompt_file")),
                roles=roles,
                split_seed=int(split.get("seed", 13)),
                split_fractions=tuple(split.get("fractions", (0.8, 0.1, 0.1))),
                correction_enabled=bool(enabled),
                policy=CorrectionPolicy(**corr),
                instruction=ext.get("instruction", DEFAULT_INSTRUCTION),
                schema_note=ext.get("schema_note", DEFAULT_SCHEMA_NOTE),
                template=template,
                n_exemplars=int(ext.get("n_exemplars", 2)),
                exemplar_strategy=ext.get("exemplar_strategy", "qualifier-rich"),
                exemplar_seed=int(ext.get("exemplar_seed", 0)),
                max_attempts=int(ext.get("max_attempts", 2)),
                max_facts=int(ext.get("max_facts", 16)),
                optimizer=OptimizerConfig(**opt),
                eval_split=data.get("evaluation", {}).get("split", "test"),
                concurrency=int(data.get("concurrency", 4)),
                raw=data,
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc}") from None
        except (TypeError, ValidationError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None

    def digest(self) -> str:
        """SHA-256 over the settings that influence results (paths and secrets excluded)."""
        payload = {
            "roles": {
                "extractor": self.roles.extractor.to_dict(),
                "corrector": self.roles.corrector.to_dict(),
                "embedder": self.roles.embedder.to_dict(),
            },
            "split": [self.split_seed, list(self.split_fractions)],
            "correction": [self.correction_enabled, asdict(self.policy)],
            "extraction": [self.instruction, self.schema_note, self.template, self.n_exemplars, self.exemplar_strategy,
                           self.exemplar_seed, self.max_attempts, self.max_facts],
            "optimizer": self.optimizer.to_dict(),
            "eval_split": self.eval_split,
        }
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def final_stage(self) -> str:
        return "corrected" if self.correction_enabled else "extracted"


@dataclass
class RunRecord:
    doc_id: str
    stage: str
    prompt_digest: str
    raw_text: str
    facts: list
    diagnostics: dict
    wall_time: float = 0.0
    exchanges: list = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"unknown run record stage {self.stage!r}")

    def to_json(self) -> str:
        return json.dumps({
            "doc_id": self.doc_id,
            "stage": self.stage,
            "prompt_digest": self.prompt_digest,
            "raw_text": self.raw_text,
            "facts": [f.to_dict() for f in self.facts],
            "diagnostics": self.diagnostics,
            "wall_time": round(self.wall_time, 6),
            "exchanges": [{"prompt_digest": k, "raw_text": t} for k, t in self.exchanges],
        }, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(
            doc_id=data["doc_id"],
            stage=data["stage"],
            prompt_digest=data.get("prompt_digest", ""),
            raw_text=data.get("raw_text", ""),
            facts=[HyperRelationalFact.from_dict(f) for f in data.get("facts", [])],
            diagnostics=data.get("diagnostics", {}),
            wall_time=data.get("wall_time", 0.0),
            exchanges=[(e["prompt_digest"], e["raw_text"]) for e in data.get("exchanges", [])],
        )


class RunStore:
    """Append-only JSONL stream of run records with a single serialized writer."""

    def __init__(self, work_dir):
        self.work_dir = Path(work_dir)
        self.path = self.work_dir / RECORDS_FILE
        self._lock = threading.Lock()

    def load(self) -> list:
        if not self.path.exists():
            return []
        data = self.path.read_bytes()
        lines = data.split(b"\n")
        records, offset = [], 0
        for lineno, line in enumerate(lines, start=1):
            is_last = lineno == len(lines) or (lineno == len(lines) - 1 and lines[-1] == b"")
            torn = lineno == len(lines) and line != b""  # no terminating newline
            if not line.strip():
                offset += len(line) + 1
                continue
            try:
                if torn:
                    raise ValueError("unterminated line")
                records.append(RunRecord.from_dict(json.loads(line.decode("utf-8"))))
            except (ValueError, KeyError, TypeError, DataError) as exc:
                if is_last:
                    logger.warning("%s: truncating torn final line %d (%s)", self.path, lineno, exc)
                    with open(self.path, "r+b") as fh:
                        fh.truncate(offset)
                    break
                raise RunStoreError(f"{self.path}: corrupted record at line {lineno}: {exc}") from None
            offset += len(line) + 1
        return records

    def append(self, record: RunRecord) -> None:
        line = record.to_json() + "\n"
        with self._lock:
            self.work_dir.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def latest(self, stage: str) -> dict:
        out = {}
        for rec in self.load():
            if rec.stage == stage:
                out[rec.doc_id] = rec
        return out


def resume_run(work_dir, final_stage: str = "corrected") -> set:
    """Ids of documents that already have a record for ``final_stage``."""
    if not Path(work_dir).exists():
        return set()
    return set(RunStore(work_dir).latest(final_stage))


# ---------------------------------------------------------------- orchestration


def build_gateway(config: PipelineConfig) -> LLMGateway:
    fixtures = None
    roles = config.roles
    if roles.extractor.mock or roles.corrector.mock:
        if config.fixtures is None:
            raise ConfigError("mock mode needs paths.fixtures in the config")
        fixtures = MockFixtures.load(config.fixtures)
    return LLMGateway(cache_dir=config.cache_dir, fixtures=fixtures, max_in_flight=config.concurrency)


def make_embedder(config: PipelineConfig, gateway: LLMGateway):
    if config.roles.embedder.mock:
        return stub_embedder, STUB_EMBEDDER_ID
    return gateway.embedder(config.roles.embedder), config.roles.embedder.model


def load_documents(config: PipelineConfig) -> list:
    if not config.corpus.exists():
        raise DataError(f"corpus file not found: {config.corpus} (run `ingest` first)")
    return read_corpus(config.corpus)


def load_split(config: PipelineConfig, docs) -> DatasetSplit:
    """Use the saved split if present, otherwise derive it from the configured seed."""
    path = config.work_dir / SPLIT_FILE
    if path.exists():
        saved = json.loads(path.read_text(encoding="utf-8"))
        by_id = {d.id: d for d in docs}
        try:
            return DatasetSplit(*(tuple(by_id[i] for i in saved[name]) for name in ("train", "dev", "test")))
        except KeyError as exc:
            raise DataError(f"{path}: document {exc} is not in the corpus") from None
    return split_dataset(docs, config.split_seed, config.split_fractions)


def save_split(config: PipelineConfig, split: DatasetSplit) -> Path:
    config.work_dir.mkdir(parents=True, exist_ok=True)
    path = config.work_dir / SPLIT_FILE
    payload = {"format_version": FORMAT_VERSION, "seed": config.split_seed,
               "fractions": list(config.split_fractions), **split.ids()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def eval_documents(config: PipelineConfig, docs, split: DatasetSplit, limit: Optional[int] = None) -> list:
    if config.eval_split == "all":
        chosen = list(docs)
    else:
        ids = {d.id for d in getattr(split, config.eval_split)}
        chosen = [d for d in docs if d.id in ids]
    return chosen if limit is None else chosen[:limit]


def resolve_prompt(config: PipelineConfig, split: DatasetSplit) -> PromptSpec:
    if config.prompt_file is not None:
        return load_prompt_spec(config.prompt_file)
    optimized = config.work_dir / PROMPT_FILE
    if optimized.exists():
        return load_prompt_spec(optimized)
    exemplars = select_exemplars(split.train, config.n_exemplars, config.exemplar_strategy, config.exemplar_seed)
    return PromptSpec(config.instruction, config.schema_note, tuple(exemplars), config.max_facts, config.template)


def _extract_record(doc, spec, gateway, config) -> RunRecord:
    start = time.perf_counter()
    facts, diag = extract_document(doc, spec, gateway, config.roles.extractor, config.max_attempts)
    digest, raw = diag.exchanges[-1] if diag.exchanges else (render_extraction_prompt(spec, doc).key, "")
    return RunRecord(doc.id, "extracted", digest, raw, facts, diag.to_dict(),
                     time.perf_counter() - start, list(diag.exchanges))


def _correct_record(doc, facts, gateway, config) -> RunRecord:
    start = time.perf_counter()
    corrected, diag = correct_facts(doc, facts, config.policy, gateway, config.roles.corrector)
    digest, raw = diag.exchanges[-1]
    return RunRecord(doc.id, "corrected", digest, raw, corrected, diag.to_dict(),
                     time.perf_counter() - start, list(diag.exchanges))


def run_stages(config: PipelineConfig, docs, spec: PromptSpec, gateway, store: RunStore,
               extract: bool = True, correct: bool = True) -> list:
    """Run the requested stages for every document still missing them.

    Returns the ids processed in this call. Records are appended as each
    document finishes, so an interrupted run resumes where it stopped.
    """
    extracted = store.latest("extracted")
    corrected = store.latest("corrected") if correct else {}
    todo = []
    for doc in docs:
        need_extract = extract and doc.id not in extracted
        need_correct = correct and doc.id not in corrected
        if need_extract or need_correct:
            todo.append(doc)
    if correct and not extract:
        missing = [d.id for d in todo if d.id not in extracted]
        if missing:
            raise DataError(f"no extraction records for {len(missing)} documents (first: {missing[0]}); "
                            "run `extract` first")

    def work(doc):
        rec = extracted.get(doc.id)
        if rec is None:
            rec = _extract_record(doc, spec, gateway, config)
            store.append(rec)
        if correct:
            store.append(_correct_record(doc, rec.facts, gateway, config))
        return doc.id

    if config.concurrency <= 1 or len(todo) <= 1:
        done = [work(d) for d in todo]
    else:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            done = list(pool.map(work, todo))
    return sorted(done)


def final_results(config: PipelineConfig, docs, store: RunStore, correct: bool = True) -> list:
    stage = "corrected" if correct else "extracted"
    records = store.latest(stage)
    if not records:
        raise DataError(f"{store.path}: no {stage} records to evaluate")
    missing = [d.id for d in docs if d.id not in records]
    if missing:
        raise DataError(f"{len(missing)} documents lack a {stage} record (first: {missing[0]})")
    return [(d, records[d.id].facts) for d in sorted(docs, key=lambda d: d.id)]


def evaluate_run(config: PipelineConfig, docs, store: RunStore, embedder, embedder_id: str,
                 correct: bool = True) -> ScoreReport:
    results = final_results(config, docs, store, correct)
    meta = {
        "embedder": embedder_id,
        "extractor": config.roles.extractor.model,
        "corrector": config.roles.corrector.model if correct else None,
        "model": config.roles.extractor.model + (f"&{config.roles.corrector.model}" if correct else ""),
        "correction": correct,
        "config_digest": config.digest(),
    }
    return score_corpus(results, embedder, meta)


def build_graph(results) -> HRKGraph:
    graph = HRKGraph()
    for _, facts in results:
        graph = graph_insert(graph, facts)
    return graph
