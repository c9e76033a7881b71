"""Stage runner: ingest → build-index → gen-qr-data → reformulate → retrieve →
gen-g-data → recommend → evaluate, with artifact headers and a run manifest."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Sequence

from reges import __version__
from reges._io import read_jsonl, sha256_file, sha256_text, write_json, write_jsonl, dumps
from reges.config import RunConfig
from reges.corpus import ItemCatalog, RecInstance, extract_instances, load_catalog, parse_dialogues
from reges.embed import Embedder
from reges.evaluation import (
    EvalReport,
    bleu_rouge_report,
    forced_inclusion_eval,
    load_annotations,
    query_truth_similarities,
    recall_report,
    success_report,
    summarize,
)
from reges.index import RankedList, build_index, load_index, save_index
from reges.item_generator import (
    Recommendation,
    build_cot_rationale,
    build_g_training_record,
    mine_hard_negatives,
    recommend,
    sample_random_negatives,
)
from reges.llm_client import ChatClient, ChatPrompt, make_client
from reges.query_expert import (
    QueryMode,
    ReformulatedQuery,
    build_qr_training_set,
    generate_pseudo_queries,
    map_ordered,
    reformulate_all,
)

logger = logging.getLogger(__name__)

EVAL_KINDS = ("success", "recall", "hallucination", "bleu-rouge", "distributions", "forced")
STAGES = ("ingest", "build-index", "gen-qr-data", "reformulate", "retrieve", "gen-g-data", "recommend", "evaluate")

ARTIFACTS = {
    "ingest": ["instances.jsonl", "skip_report.json"],
    "build-index": ["index.bin", "index.bin.meta.json"],
    "gen-qr-data": ["pseudo_queries.jsonl", "qr_failures.json", "qr_train.jsonl", "qr_train.manifest.json"],
    "reformulate": ["queries.jsonl"],
    "retrieve": ["ranked.jsonl"],
    "gen-g-data": ["candidates.jsonl", "g_train.jsonl", "g_train.manifest.json"],
    "recommend": ["recommendations.jsonl"],
    "evaluate": ["report.jsonl", "report.txt", "distributions.json"],
}

# which artifact a stage reads, and the stage that produces it
REQUIRES = {
    "build-index": [],
    "gen-qr-data": ["instances.jsonl"],
    "reformulate": ["instances.jsonl"],
    "retrieve": ["index.bin", "queries.jsonl"],
    "gen-g-data": ["instances.jsonl"],
    "recommend": ["instances.jsonl", "ranked.jsonl"],
    "evaluate": ["instances.jsonl"],
}
PRODUCER = {name: stage for stage, names in ARTIFACTS.items() for name in names}

_LORA = {"rank": 8, "alpha": 32, "target_modules": ["q_proj", "v_proj"]}


def training_manifest(kind: str, header: dict | None = None) -> dict:
    """Fine-tuning protocol for the downstream trainer (qr or g)."""
    lr_large = {"qr": 2e-5, "g": 5e-5}[kind]
    manifest = {
        "kind": kind,
        "epochs": 1,
        "optimizer": "AdamW",
        "tiers": {
            "2B": {"batch_size": 2, "learning_rate": 1e-4},
            "8B": {"batch_size": 2, "learning_rate": 1e-4},
            "27B": {"batch_size": 1, "learning_rate": lr_large},
        },
        "warmup": {"schedule": "linear", "ratio": 0.1},
        "lora": dict(_LORA),
        "max_input_tokens": 4096,
        "inference_temperature": 0.1,
        "loss": "cross_entropy_on_completion",
    }
    if header is not None:
        manifest["header"] = header
    return manifest


class PipelineError(RuntimeError):
    pass


class TemperatureClient(ChatClient):
    """Applies the run's decoding temperature to every prompt."""

    def __init__(self, inner: ChatClient, temperature: float):
        super().__init__(token_budget=inner.token_budget, tokenizer=inner.tokenizer)
        self.inner = inner
        self.temperature = temperature

    def chat(self, prompt: ChatPrompt):
        return self.inner.chat(dataclasses.replace(prompt, temperature=self.temperature))


class Pipeline:
    def __init__(self, config: RunConfig, out_dir: str | Path | None = None, clients: dict | None = None):
        self.config = config
        self.out = Path(out_dir) if out_dir is not None else config.resolve(config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._clients = dict(clients or {})
        self.embedder = Embedder(config.embedder)
        self._catalog: ItemCatalog | None = None
        self.timings: dict[str, float] = {}

    # -- shared state -------------------------------------------------
    def header(self, stage: str) -> dict:
        snap = self.config.snapshot(include_out_dir=False)
        return {
            "tool": "reges",
            "version": __version__,
            "stage": stage,
            "seed": self.config.seed,
            "config_digest": sha256_text(dumps(snap)),
            "config": snap,
        }

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, stage: str) -> None:
        for name in REQUIRES.get(stage, []):
            if name == "index.bin" and self.index_path().exists():
                continue
            if not self.path(name).exists():
                raise PipelineError(f"{stage} requires {PRODUCER[name]} (missing {name})")

    @property
    def catalog(self) -> ItemCatalog:
        if self._catalog is None:
            if not self.config.catalog:
                raise PipelineError("config has no catalog")
            self._catalog = load_catalog(self.config.resolve(self.config.catalog))
        return self._catalog

    def client(self, role: str) -> ChatClient:
        if role not in self._clients:
            ep = self.config.endpoints.get(role)
            if ep is None:
                raise PipelineError(f"no endpoint configured for {role!r}")
            self._clients[role] = make_client(ep, base_dir=self.config.base_dir)
        return TemperatureClient(self._clients[role], self.config.temperature)

    def instances(self) -> list[RecInstance]:
        return [RecInstance.from_dict(r) for r in read_jsonl(self.path("instances.jsonl"))]

    def index_path(self) -> Path:
        """The run's own index if built, else a prebuilt one named in the config."""
        own = self.path("index.bin")
        if own.exists() or not self.config.index:
            return own
        return self.config.resolve(self.config.index)

    def queries(self) -> dict[str, ReformulatedQuery]:
        return {q["instance_id"]: ReformulatedQuery.from_dict(q) for q in read_jsonl(self.path("queries.jsonl"))}

    # -- stages -------------------------------------------------------
    def ingest(self) -> None:
        cfg = self.config
        if not cfg.datasets:
            raise PipelineError("config lists no datasets")
        instances: list[RecInstance] = []
        report = {"datasets": [], "total": 0}
        for spec in cfg.datasets:
            parsed = parse_dialogues(cfg.resolve(spec.path), spec.format)
            found, skips = extract_instances(parsed.dialogues, self.catalog, spec.split)
            instances.extend(found)
            report["datasets"].append({
                "path": spec.path,
                "format": spec.format,
                "split": spec.split,
                "dialogues": len(parsed.dialogues),
                "parse_errors": [str(e) for e in parsed.errors],
                "instances": len(found),
                "skipped": skips.to_dict(),
            })
            report["total"] += skips.total
        ids = [i.instance_id for i in instances]
        if len(set(ids)) != len(ids):
            raise PipelineError("duplicate instance ids across datasets")
        write_jsonl(self.path("instances.jsonl"), [i.to_dict() for i in instances], self.header("ingest"))
        write_json(self.path("skip_report.json"), {"header": self.header("ingest"), **report})

    def build_index(self) -> None:
        index = build_index(self.catalog, self.embedder)
        save_index(index, self.path("index.bin"))
        write_json(self.path("index.bin.meta.json"),
                   {"header": self.header("build-index"), "embedder": self.config.embedder.to_dict(),
                    "count": len(index), "mode": index.mode})

    def gen_qr_data(self) -> None:
        cfg = self.config
        train = [i for i in self.instances() if i.split == "train"]
        pseudo, failures = generate_pseudo_queries(self.client("pseudo"), train, self.catalog,
                                                   cfg.token_budget, cfg.workers)
        write_jsonl(self.path("pseudo_queries.jsonl"), [p.to_dict() for p in pseudo], self.header("gen-qr-data"))
        records, rejected = build_qr_training_set(pseudo, train, self.catalog, cfg.token_budget)
        write_json(self.path("qr_failures.json"),
                   {"header": self.header("gen-qr-data"), "failures": failures, "rejected": rejected})
        write_jsonl(self.path("qr_train.jsonl"), records)
        write_json(self.path("qr_train.manifest.json"),
                   {**training_manifest("qr", self.header("gen-qr-data")), "records": len(records)})

    def reformulate(self) -> None:
        cfg = self.config
        mode = cfg.query_mode
        client = None
        if mode is QueryMode.TRAINED_QR:
            client = self.client("qr")
        elif mode is QueryMode.DIRECT_PROMPT:
            client = self.client("pseudo")
        queries = reformulate_all(client, self.instances(), mode, cfg.token_budget, cfg.workers)
        write_jsonl(self.path("queries.jsonl"), [q.to_dict() for q in queries], self.header("reformulate"))

    def retrieve(self) -> None:
        index = load_index(self.index_path())
        queries = sorted(self.queries().values(), key=lambda q: q.instance_id)
        vecs = self.embedder([q.query_text for q in queries])
        ranked = [index.retrieve(v, self.config.k, q.instance_id) for q, v in zip(queries, vecs)]
        write_jsonl(self.path("ranked.jsonl"), [r.to_dict() for r in ranked], self.header("retrieve"))

    def gen_g_data(self) -> None:
        cfg = self.config
        train = sorted((i for i in self.instances() if i.split == "train"), key=lambda i: i.instance_id)
        if cfg.negatives == "hard":
            for name in ("index.bin", "queries.jsonl"):
                if name == "index.bin" and self.index_path().exists():
                    continue
                if not self.path(name).exists():
                    raise PipelineError(f"gen-g-data requires {PRODUCER[name]} (missing {name})")
            index = load_index(self.index_path())
            queries = self.queries()
            csets = [mine_hard_negatives(index, self.embedder, queries[i.instance_id], i, cfg.k_train, cfg.seed)
                     for i in train]
        else:
            csets = [sample_random_negatives(self.catalog, i, cfg.k_train, cfg.seed) for i in train]
        rationales: list[str | None] = [None] * len(train)
        if cfg.cot:
            client = self.client("pseudo")
            rationales = map_ordered(lambda inst: build_cot_rationale(client, inst, cfg.token_budget),
                                     train, cfg.workers)
        records = [build_g_training_record(i, c, self.catalog, r, cfg.token_budget)
                   for i, c, r in zip(train, csets, rationales)]
        header = self.header("gen-g-data")
        write_jsonl(self.path("candidates.jsonl"), [c.to_dict() for c in csets], header)
        write_jsonl(self.path("g_train.jsonl"), [r.to_dict() for r in records])
        write_json(self.path("g_train.manifest.json"), {
            **training_manifest("g", header),
            "records": len(records),
            "negatives": cfg.negatives,
            "k_train": cfg.k_train,
            "cot": cfg.cot,
        })

    def _eval_instances(self) -> list[RecInstance]:
        out = [i for i in self.instances() if i.split != "train"]
        if not out:
            raise PipelineError("no validation/test instances to recommend for")
        return sorted(out, key=lambda i: i.instance_id)

    def recommend(self) -> None:
        cfg = self.config
        ranked = {r["query_id"]: RankedList.from_dict(r) for r in read_jsonl(self.path("ranked.jsonl"))}
        instances = self._eval_instances()
        missing = [i.instance_id for i in instances if i.instance_id not in ranked]
        if missing:
            raise PipelineError(f"recommend requires retrieve output for {missing[:5]}")
        client = self.client("generator")
        recs = map_ordered(lambda inst: recommend(client, inst, ranked[inst.instance_id], self.catalog,
                                                  cfg.cot, cfg.token_budget), instances, cfg.workers)
        write_jsonl(self.path("recommendations.jsonl"), [r.to_dict() for r in recs], self.header("recommend"))

    def evaluate(self, what: Sequence[str] | None = None, k: int | None = None) -> EvalReport:
        """Write ``report.jsonl`` and ``report.txt`` for the requested analyses.

        The default set is success, recall and hallucination, plus bleu-rouge
        when the config names an annotation file.
        """
        cfg = self.config
        k = k or cfg.k
        if what is None:
            what = ["success", "recall", "hallucination"] + (["bleu-rouge"] if cfg.annotations else [])
        unknown = sorted(set(what) - set(EVAL_KINDS))
        if unknown:
            raise PipelineError(f"unknown evaluation {unknown}; expected one of {EVAL_KINDS}")
        instances = self._eval_instances()
        ids = {i.instance_id for i in instances}
        parts: list[EvalReport] = []

        def need(name: str, what_for: str) -> Path:
            if not self.path(name).exists():
                raise PipelineError(f"evaluate --what {what_for} requires {PRODUCER[name]} (missing {name})")
            return self.path(name)

        if "success" in what or "hallucination" in what:
            recs = [Recommendation.from_dict(r) for r in read_jsonl(need("recommendations.jsonl", "success"))]
            succ = success_report(recs, instances)
            keep = {"success": "rec_success_rate", "hallucination": "hallucination_ratio"}
            succ.metrics = [m for m in succ.metrics if m.name in {keep[w] for w in what if w in keep}]
            parts.append(succ)
        if "recall" in what:
            ranked = [RankedList.from_dict(r) for r in read_jsonl(need("ranked.jsonl", "recall"))]
            ks = sorted({x for x in cfg.recall_ks if x <= k} | {k})
            parts.append(recall_report([r for r in ranked if r.query_id in ids],
                                       {i.instance_id: i.truth_item_id for i in instances}, ks))
        if "bleu-rouge" in what:
            if not cfg.annotations:
                raise PipelineError("evaluate --what bleu-rouge needs an annotations file in the config")
            need("queries.jsonl", "bleu-rouge")
            queries = {q: v.query_text for q, v in self.queries().items()}
            parts.append(bleu_rouge_report(queries, load_annotations(cfg.resolve(cfg.annotations))))
        if "distributions" in what:
            need("queries.jsonl", "distributions")
            queries = self.queries()
            ordered = sorted(instances, key=lambda i: i.instance_id)
            sims = query_truth_similarities([queries[i.instance_id].query_text for i in ordered],
                                            [i.truth_item_id for i in ordered], self.embedder, self.catalog)
            dist = EvalReport(rows=[{"instance_id": i.instance_id, "query_truth_cosine": float(v)}
                                    for i, v in zip(ordered, sims)])
            dist.add_metric("mean_query_truth_cosine", "query_truth_cosine")
            parts.append(dist)
            write_json(self.path("distributions.json"),
                       {"header": self.header("evaluate"), "query_truth": summarize(sims).to_dict()})
        if "forced" in what:
            need("queries.jsonl", "forced")
            queries = {q: v.query_text for q, v in self.queries().items()}
            result = forced_inclusion_eval(instances, load_index(self.index_path()), queries,
                                           self.client("generator"), k, self.catalog, self.embedder,
                                           cfg.seed, cfg.token_budget)
            parts.append(result.report)
        report = merge_reports(*parts)
        write_jsonl(self.path("report.jsonl"), report.records(), self.header("evaluate"))
        self.path("report.txt").write_text(report.table() + "\n", encoding="utf-8")
        return report


def merge_reports(*reports: EvalReport) -> EvalReport:
    """Join per-instance rows by instance_id and recompute every metric."""
    rows: dict[str, dict] = {}
    for rep in reports:
        for row in rep.rows:
            rows.setdefault(row["instance_id"], {}).update(row)
    merged = EvalReport(rows=[rows[k] for k in sorted(rows)])
    for rep in reports:
        for m in rep.metrics:
            if any(x.name == m.name for x in merged.metrics):
                raise PipelineError(f"two reports define metric {m.name!r}")
            merged.add_metric(m.name, m.column)
    return merged


_STAGE_METHODS = {
    "ingest": "ingest",
    "build-index": "build_index",
    "gen-qr-data": "gen_qr_data",
    "reformulate": "reformulate",
    "retrieve": "retrieve",
    "gen-g-data": "gen_g_data",
    "recommend": "recommend",
    "evaluate": "evaluate",
}


def run_pipeline(config: RunConfig, stages: Sequence[str] | None = None, out_dir: str | Path | None = None,
                 clients: dict | None = None, evaluate: Sequence[str] | None = None,
                 eval_k: int | None = None) -> dict:
    """Run ``stages`` in pipeline order and write ``run_manifest.json``.

    A failing stage stops the run; the manifest still records what finished.
    """
    stages = list(stages or STAGES)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise PipelineError(f"unknown stages {unknown}; expected a subset of {STAGES}")
    ordered = [s for s in STAGES if s in stages]
    pipe = Pipeline(config, out_dir, clients)
    completed: list[str] = []
    failed = None
    try:
        for stage in ordered:
            pipe.require(stage)
            start = time.perf_counter()
            logger.info("stage %s", stage)
            if stage == "evaluate":
                pipe.evaluate(evaluate, eval_k)
            else:
                getattr(pipe, _STAGE_METHODS[stage])()
            pipe.timings[stage] = round(time.perf_counter() - start, 6)
            completed.append(stage)
    except Exception as exc:
        failed = {"stage": stage, "error": str(exc)}
        raise
    finally:
        manifest = build_manifest(pipe, completed, failed)
        write_json(pipe.path("run_manifest.json"), manifest)
    return manifest


def build_manifest(pipe: Pipeline, completed: list[str], failed: dict | None) -> dict:
    cfg = pipe.config
    inputs = {}
    for spec in cfg.datasets:
        inputs[spec.path] = sha256_file(cfg.resolve(spec.path))
    if cfg.catalog and cfg.resolve(cfg.catalog).exists():
        inputs[cfg.catalog] = sha256_file(cfg.resolve(cfg.catalog))
    for ep in cfg.endpoints.values():
        if ep.script and cfg.resolve(ep.script).exists():
            inputs[ep.script] = sha256_file(cfg.resolve(ep.script))
    artifacts = {}
    for stage in completed:
        for name in ARTIFACTS[stage]:
            if pipe.path(name).exists():
                artifacts[name] = sha256_file(pipe.path(name))
    return {
        "tool": "reges",
        "version": __version__,
        "config": cfg.snapshot(),
        "seed": cfg.seed,
        "stages": completed,
        "failed": failed,
        "inputs": inputs,
        "artifacts": artifacts,
        "timings": pipe.timings,
    }


def verify_manifest(path: str | Path) -> list[str]:
    """Artifact names whose current digest differs from the manifest."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    bad = []
    for name, digest in manifest["artifacts"].items():
        target = path.parent / name
        if not target.exists() or sha256_file(target) != digest:
            bad.append(name)
    return bad
