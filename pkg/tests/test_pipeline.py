import json

import pytest

from reges._io import read_jsonl
from reges.config import validate_config
from reges.evaluation import EvalReport
from reges.pipeline import (
    STAGES,
    Pipeline,
    PipelineError,
    merge_reports,
    run_pipeline,
    training_manifest,
    verify_manifest,
)


@pytest.fixture
def config(fixtures):
    return validate_config(fixtures / "pipeline" / "config.yaml")


def _header(path):
    with open(path, encoding="utf-8") as fh:
        return json.loads(fh.readline())["__header__"]


def test_full_run(config, tmp_path):
    manifest = run_pipeline(config, out_dir=tmp_path)
    assert manifest["stages"] == list(STAGES) and manifest["failed"] is None
    summary = next(r for r in read_jsonl(tmp_path / "report.jsonl") if "summary" in r)["summary"]
    assert summary["rec_success_rate"]["value"] == 0.5
    assert summary["hallucination_ratio"]["value"] == 0.25
    assert summary["recall@10"]["value"] == 1.0
    assert "ROUGE-L" in summary
    assert verify_manifest(tmp_path / "run_manifest.json") == []


def test_headers_carry_provenance(config, tmp_path):
    run_pipeline(config, ["ingest", "build-index"], out_dir=tmp_path)
    head = _header(tmp_path / "instances.jsonl")
    assert head["stage"] == "ingest" and head["seed"] == 0 and len(head["config_digest"]) == 64
    meta = json.loads((tmp_path / "index.bin.meta.json").read_text())
    assert meta["header"]["config_digest"] == head["config_digest"] and meta["count"] == 60


def test_missing_prerequisite_names_stage(config, tmp_path):
    run_pipeline(config, ["ingest"], out_dir=tmp_path)
    with pytest.raises(PipelineError, match="retrieve requires build-index"):
        run_pipeline(config, ["retrieve"], out_dir=tmp_path)
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["stages"] == [] and manifest["failed"]["stage"] == "retrieve"


def test_ingest_only_manifest(config, tmp_path):
    manifest = run_pipeline(config, ["ingest"], out_dir=tmp_path)
    assert manifest["stages"] == ["ingest"]
    assert set(manifest["artifacts"]) == {"instances.jsonl", "skip_report.json"}
    assert {"train.jsonl", "test.jsonl", "catalog.jsonl"} <= set(manifest["inputs"])
    assert manifest["config"]["k"] == 10


def test_verify_manifest_detects_edits(config, tmp_path):
    run_pipeline(config, ["ingest"], out_dir=tmp_path)
    with open(tmp_path / "instances.jsonl", "a", encoding="utf-8") as fh:
        fh.write("\n")
    assert verify_manifest(tmp_path / "run_manifest.json") == ["instances.jsonl"]


def test_training_files_have_sidecar_manifests(config, tmp_path):
    run_pipeline(config, ["ingest", "build-index", "gen-qr-data", "reformulate", "gen-g-data"], out_dir=tmp_path)
    for name, kind in [("qr_train", "qr"), ("g_train", "g")]:
        first = json.loads((tmp_path / f"{name}.jsonl").read_text().splitlines()[0])
        assert "__header__" not in first and set(first) >= {"prompt", "completion"}
        side = json.loads((tmp_path / f"{name}.manifest.json").read_text())
        assert side["lora"] == training_manifest(kind)["lora"]
        assert side["records"] == 6
    cands = list(read_jsonl(tmp_path / "candidates.jsonl"))
    assert all(len(c["members"]) == 6 for c in cands)


def test_random_negatives_need_no_index(config, tmp_path):
    config.negatives = "random"
    run_pipeline(config, ["ingest", "gen-g-data"], out_dir=tmp_path)
    assert json.loads((tmp_path / "g_train.manifest.json").read_text())["negatives"] == "random"


def test_training_protocol_values():
    small, large = training_manifest("qr"), training_manifest("g")
    assert small["lora"] == {"rank": 8, "alpha": 32, "target_modules": ["q_proj", "v_proj"]}
    assert small["epochs"] == 1 and small["warmup"]["ratio"] == 0.1 and small["optimizer"] == "AdamW"
    assert small["tiers"]["8B"] == {"batch_size": 2, "learning_rate": 1e-4}
    assert small["tiers"]["27B"]["learning_rate"] == 2e-5 and large["tiers"]["27B"]["learning_rate"] == 5e-5
    assert large["tiers"]["27B"]["batch_size"] == 1


def test_evaluate_selected_kinds(config, tmp_path):
    run_pipeline(config, out_dir=tmp_path)
    report = Pipeline(config, tmp_path).evaluate(["recall", "distributions", "forced"], k=5)
    names = {m.name for m in report.metrics}
    assert {"recall@1", "recall@5", "coverage@5", "mean_query_truth_cosine", "item_generation_success_rate"} <= names
    assert "rec_success_rate" not in names
    dist = json.loads((tmp_path / "distributions.json").read_text())
    assert dist["query_truth"]["count"] == 4
    with pytest.raises(PipelineError, match="unknown evaluation"):
        Pipeline(config, tmp_path).evaluate(["vibes"])


def test_unknown_stage(config, tmp_path):
    with pytest.raises(PipelineError, match="unknown stages"):
        run_pipeline(config, ["ingest", "deploy"], out_dir=tmp_path)


def test_merge_reports_rejects_duplicate_metrics():
    a = EvalReport(rows=[{"instance_id": "x", "v": 1}])
    a.add_metric("m", "v")
    b = EvalReport(rows=[{"instance_id": "x", "w": 0}])
    b.add_metric("m", "w")
    with pytest.raises(PipelineError, match="metric 'm'"):
        merge_reports(a, b)
    b.metrics[0].name = "n"
    merged = merge_reports(a, b)
    assert merged.rows == [{"instance_id": "x", "v": 1, "w": 0}] and merged.value("n") == 0
