import json

import pytest

from llhkg.cli import main
from llhkg.errors import ConfigError, RunStoreError
from llhkg.facts import import_graph
from llhkg.gateway import EndpointConfig
from llhkg.pipeline import PipelineConfig, RunRecord, RunStore, resume_run

from conftest import fact


def cli(ws, *args):
    return main([args[0], "--config", str(ws / "config.json"), *args[1:]])


def work_dir(ws):
    return PipelineConfig.load(ws / "config.json").work_dir


def normalized_report(ws):
    data = json.loads((work_dir(ws) / "report.json").read_text())
    data["metadata"].pop("timestamp", None)
    return data


def test_run_writes_report(mock_workspace, capsys):
    assert cli(mock_workspace, "run", "--format", "json") == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["documents"]) == 10
    assert out["metadata"]["model"] == "llama3.1:8b&qwen2.5:7b"
    assert (work_dir(mock_workspace) / "report.json").exists()


def test_run_is_deterministic(mock_workspace):
    assert cli(mock_workspace, "run") == 0
    first = normalized_report(mock_workspace)
    (work_dir(mock_workspace) / "records.jsonl").unlink()
    assert cli(mock_workspace, "run") == 0
    assert normalized_report(mock_workspace) == first


def test_resume_after_partial_run(mock_workspace):
    assert cli(mock_workspace, "run", "--limit", "4") == 0
    wd = work_dir(mock_workspace)
    assert len(resume_run(wd)) == 4
    assert cli(mock_workspace, "run") == 0
    assert len(resume_run(wd)) == 10
    stages = [json.loads(line)["stage"] for line in (wd / "records.jsonl").read_text().splitlines()]
    assert stages.count("extracted") == 10 and stages.count("corrected") == 10


def test_no_correct_and_stagewise(mock_workspace):
    assert cli(mock_workspace, "extract") == 0
    assert cli(mock_workspace, "correct") == 0
    assert cli(mock_workspace, "evaluate", "--format", "json") == 0
    staged = json.loads((work_dir(mock_workspace) / "report.json").read_text())
    assert cli(mock_workspace, "evaluate", "--no-correct", "--format", "json") == 0
    raw = json.loads((work_dir(mock_workspace) / "report.json").read_text())
    assert raw["metadata"]["correction"] is False and staged["metadata"]["correction"] is True


def test_missing_config_exit_1(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 1


def test_bad_usage_exit_1():
    assert main(["run"]) == 1
    assert main(["frobnicate", "--config", "x"]) == 1


def test_evaluate_without_records_exit_2(mock_workspace):
    assert cli(mock_workspace, "evaluate") == 2


def test_ingest_rejects_bad_record(mock_workspace, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"tokens": ["a"], "relations": "oops"}\n')
    assert cli(mock_workspace, "ingest", "--input", str(bad)) == 2
    assert cli(mock_workspace, "ingest", "--input", str(bad), "--lenient") == 0


def test_transport_failure_exit_3(mock_workspace):
    cfg = json.loads((mock_workspace / "config.json").read_text())
    cfg["mock"] = False
    cfg["roles"]["extractor"].update(base_url="http://127.0.0.1:9/v1", max_retries=0, timeout=1)
    (mock_workspace / "config.json").write_text(json.dumps(cfg))
    assert cli(mock_workspace, "extract", "--limit", "1") == 3


def test_export_and_report(mock_workspace, tmp_path, capsys):
    assert cli(mock_workspace, "run") == 0
    out = tmp_path / "g.json"
    assert cli(mock_workspace, "export", "--out", str(out)) == 0
    graph = import_graph(out.read_bytes(), "canonical-json")
    assert graph.facts and graph.source_ids <= {f"doc-{i:06d}" for i in range(10)}
    assert cli(mock_workspace, "export", "--graph-format", "flat-tsv") == 0
    assert (work_dir(mock_workspace) / "graph.tsv").read_text().startswith("subject\trelation")
    capsys.readouterr()
    assert cli(mock_workspace, "report") == 0
    assert "LLHKG" in capsys.readouterr().out


def test_records_are_auditable(mock_workspace):
    assert cli(mock_workspace, "run") == 0
    records = RunStore(work_dir(mock_workspace)).load()
    assert records
    for rec in records:
        assert rec.exchanges and rec.exchanges[-1] == (rec.prompt_digest, rec.raw_text)
        assert all(len(k) == 64 for k, _ in rec.exchanges)


def test_config_rejects_same_dirs(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"paths": {"corpus": "c.json", "work_dir": "w", "cache_dir": "w"}}, tmp_path)


def test_config_rejects_unknown_endpoint_key(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"paths": {"corpus": "c", "work_dir": "w", "cache_dir": "k"},
                                  "roles": {"extractor": {"modle": "x"}}}, tmp_path)


def record(doc_id, stage="extracted"):
    return RunRecord(doc_id, stage, "0" * 64, "[]", [fact("a", "r", "b", doc=doc_id)], {})


def test_runstore_truncates_torn_final_line(tmp_path):
    store = RunStore(tmp_path)
    store.append(record("d1"))
    store.append(record("d2"))
    with open(store.path, "a") as fh:
        fh.write('{"doc_id": "d3", "sta')
    assert [r.doc_id for r in store.load()] == ["d1", "d2"]
    assert store.path.read_text().endswith("\n")
    store.append(record("d3"))
    assert [r.doc_id for r in store.load()] == ["d1", "d2", "d3"]


def test_runstore_corrupt_middle_line(tmp_path):
    store = RunStore(tmp_path)
    store.append(record("d1"))
    with open(store.path, "a") as fh:
        fh.write("garbage\n")
    store.append(record("d2"))
    with pytest.raises(RunStoreError, match="line 2"):
        store.load()


def test_resume_empty_and_stage(tmp_path):
    assert resume_run(tmp_path / "missing") == set()
    store = RunStore(tmp_path)
    store.append(record("d1"))
    store.append(record("d1", "corrected"))
    store.append(record("d2"))
    assert resume_run(tmp_path) == {"d1"}
    assert resume_run(tmp_path, "extracted") == {"d1", "d2"}


def test_record_round_trip():
    rec = record("d1")
    assert RunRecord.from_dict(json.loads(rec.to_json())).to_json() == rec.to_json()


def test_endpoint_config_never_serializes_key():
    assert "api_key" not in EndpointConfig(api_key="secret").to_dict()
