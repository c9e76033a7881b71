"""Metrics and analyses: success rate, recall, hallucination, BLEU/ROUGE,
similarity distributions, train/inference divergence, forced inclusion."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from reges.corpus import ItemCatalog, RecInstance
from reges.embed import Embedder, EmbedderConfig
from reges.index import RankedList, VectorIndex
from reges.item_generator import (
    Recommendation,
    instance_rng,
    is_success,
    recommend_from_candidates,
)

HIST_BINS = 50
_TOKEN = re.compile(r"[^\W_]+")


class EvalError(ValueError):
    pass


@dataclass
class MetricEntry:
    name: str
    value: float
    n: int
    column: str


@dataclass
class EvalReport:
    """Per-instance rows plus aggregates, each the mean of one row column
    over the rows that carry it."""

    rows: list[dict] = field(default_factory=list)
    metrics: list[MetricEntry] = field(default_factory=list)

    def add_metric(self, name: str, column: str) -> float:
        values = [float(r[column]) for r in self.rows if column in r]
        value = math.fsum(values) / len(values) if values else 0.0
        self.metrics.append(MetricEntry(name, value, len(values), column))
        return value

    def check(self) -> None:
        """Recount every aggregate from the rows; raise on any disagreement."""
        for m in self.metrics:
            values = [float(r[m.column]) for r in self.rows if m.column in r]
            expected = math.fsum(values) / len(values) if values else 0.0
            if len(values) != m.n or abs(expected - m.value) > 1e-12:
                raise EvalError(f"metric {m.name} ({m.value}) disagrees with its rows ({expected})")

    def value(self, name: str) -> float:
        for m in self.metrics:
            if m.name == name:
                return m.value
        raise KeyError(name)

    def summary(self) -> dict:
        return {m.name: {"value": m.value, "n": m.n, "column": m.column} for m in self.metrics}

    def records(self) -> list[dict]:
        self.check()
        rows = sorted(self.rows, key=lambda r: r["instance_id"])
        return rows + [{"summary": self.summary()}]

    def table(self) -> str:
        width = max([len(m.name) for m in self.metrics] + [6])
        lines = [f"{'metric':<{width}}  {'value':>8}  {'n':>6}"]
        lines += [f"{m.name:<{width}}  {m.value:>8.4f}  {m.n:>6d}" for m in self.metrics]
        return "\n".join(lines)


def _by_id(items, what: str) -> dict:
    out = {}
    for x in items:
        key = x.instance_id if hasattr(x, "instance_id") else x.query_id
        if key in out:
            raise EvalError(f"duplicate {what} for {key!r}")
        out[key] = x
    return out


def success_report(recs: Iterable[Recommendation], instances: Iterable[RecInstance]) -> EvalReport:
    by_rec = _by_id(recs, "recommendation")
    by_inst = _by_id(instances, "instance")
    unmatched = sorted(set(by_rec) ^ set(by_inst))
    if unmatched:
        raise EvalError(f"recommendations and instances do not align: {unmatched[:5]}")
    report = EvalReport()
    for iid in sorted(by_inst):
        rec = by_rec[iid]
        report.rows.append({
            "instance_id": iid,
            "truth_item_id": by_inst[iid].truth_item_id,
            "matched_item_id": rec.matched_item_id,
            "match_kind": rec.match_kind,
            "success": int(is_success(rec, by_inst[iid].truth_item_id)),
            "hallucinated": int(rec.match_kind == "none"),
        })
    report.add_metric("rec_success_rate", "success")
    report.add_metric("hallucination_ratio", "hallucinated")
    return report


def rec_success_rate(recs: Iterable[Recommendation], instances: Iterable[RecInstance]) -> float:
    return success_report(recs, instances).value("rec_success_rate")


def hallucination_ratio(recs: Iterable[Recommendation], catalog: ItemCatalog | None = None) -> float:
    """Share of outputs that resolve to no catalog item."""
    recs = list(recs)
    if not recs:
        return 0.0
    return sum(r.match_kind == "none" for r in recs) / len(recs)


def recall_report(ranked_lists: Iterable[RankedList], truths: Mapping[str, str], ks: Sequence[int]) -> EvalReport:
    lists = _by_id(ranked_lists, "ranked list")
    missing = sorted(set(truths) - set(lists))
    if missing:
        raise EvalError(f"no ranked list for instances {missing[:5]}")
    report = EvalReport()
    for iid in sorted(truths):
        ids = lists[iid].item_ids
        rank = ids.index(truths[iid]) + 1 if truths[iid] in ids else None
        row = {"instance_id": iid, "truth_rank": rank}
        for k in ks:
            row[f"hit@{k}"] = int(rank is not None and rank <= k)
        report.rows.append(row)
    for k in ks:
        report.add_metric(f"recall@{k}", f"hit@{k}")
    return report


def recall_at_k(ranked_lists: Iterable[RankedList], truths: Mapping[str, str], k: int) -> float:
    """Fraction of instances whose truth is within the first ``k`` hits."""
    if k < 1:
        raise EvalError("k must be >= 1")
    return recall_report(ranked_lists, truths, [k]).value(f"recall@{k}")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; whitespace and punctuation both separate."""
    return _TOKEN.findall(text.lower())


def _tokens(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, references, n: int) -> float:
    """Cumulative BLEU-n: geometric mean of clipped 1..n-gram precisions times
    the brevity penalty. No smoothing, so any zero precision gives 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = _tokens(candidate)
    if isinstance(references, str):
        references = [references]
    refs = [_tokens(r) for r in references]
    if len(cand) < n or not refs:
        return 0.0
    log_sum = 0.0
    for m in range(1, n + 1):
        cand_counts = ngrams(cand, m)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in ngrams(r, m).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in cand_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / sum(cand_counts.values()))
    c = len(cand)
    r = min((len(x) for x in refs), key=lambda length: (abs(length - c), length))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_sum / n)


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return 2 * p * r / (p + r)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge(candidate, reference, variant: str = "r1") -> float:
    """ROUGE-1/2 (n-gram overlap) or ROUGE-L (LCS), reported as F1."""
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if not ref:
        return 0.0
    if variant in ("r1", "r2"):
        n = 1 if variant == "r1" else 2
        cc, rc = ngrams(cand, n), ngrams(ref, n)
        overlap = sum(min(c, rc[g]) for g, c in cc.items())
        return _f1(overlap, sum(cc.values()), sum(rc.values()))
    if variant == "rl":
        return _f1(lcs_length(cand, ref), len(cand), len(ref))
    raise ValueError(f"unknown ROUGE variant {variant!r}")


def load_annotations(path) -> dict[str, str]:
    from reges._io import read_jsonl

    return {r["instance_id"]: r["annotated_query"] for r in read_jsonl(path)}


def bleu_rouge_report(queries: Mapping[str, str], annotations: Mapping[str, str]) -> EvalReport:
    """Mean sentence-level BLEU-1..3 and ROUGE-1/2/L against annotated queries."""
    missing = sorted(set(annotations) - set(queries))
    if missing:
        raise EvalError(f"no query for annotated instances {missing[:5]}")
    report = EvalReport()
    for iid in sorted(annotations):
        q, ref = queries[iid], annotations[iid]
        report.rows.append({
            "instance_id": iid,
            "bleu1": bleu_n(q, [ref], 1),
            "bleu2": bleu_n(q, [ref], 2),
            "bleu3": bleu_n(q, [ref], 3),
            "rouge1": rouge(q, ref, "r1"),
            "rouge2": rouge(q, ref, "r2"),
            "rougeL": rouge(q, ref, "rl"),
        })
    for name, col in [("BLEU-1", "bleu1"), ("BLEU-2", "bleu2"), ("BLEU-3", "bleu3"),
                      ("ROUGE-1", "rouge1"), ("ROUGE-2", "rouge2"), ("ROUGE-L", "rougeL")]:
        report.add_metric(name, col)
    return report


@dataclass(frozen=True)
class DistributionSummary:
    count: int
    mean: float
    std: float
    deciles: tuple[float, ...]
    histogram: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "std": self.std,
                "deciles": list(self.deciles), "histogram": list(self.histogram),
                "bin_edges": [-1.0, 1.0, HIST_BINS]}


def summarize(values: Sequence[float]) -> DistributionSummary:
    """Mean, population std, 0..100% deciles and a 50-bin histogram on [-1, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    if v.size == 0:
        raise EvalError("no samples")
    hist, _ = np.histogram(v, bins=HIST_BINS, range=(-1.0, 1.0))
    deciles = np.quantile(v, np.linspace(0.0, 1.0, 11))
    return DistributionSummary(int(v.size), float(v.mean()), float(v.std()),
                               tuple(float(x) for x in deciles), tuple(int(c) for c in hist))


def _embedder(embedder) -> Embedder:
    return Embedder(embedder) if isinstance(embedder, EmbedderConfig) else embedder


def query_truth_similarities(queries: Sequence[str], truth_items: Sequence[str], embedder,
                             catalog: ItemCatalog) -> np.ndarray:
    if len(queries) != len(truth_items):
        raise EvalError("queries and truth items are not aligned")
    emb = _embedder(embedder)
    q = emb(list(queries))
    t = emb([catalog.index_text(i) for i in truth_items])
    sims = np.einsum("ij,ij->i", q, t) / (np.linalg.norm(q, axis=1) * np.linalg.norm(t, axis=1))
    return np.clip(sims, -1.0, 1.0)


def similarity_distribution(queries: Sequence[str], truth_items: Sequence[str], embedder,
                            catalog: ItemCatalog) -> DistributionSummary:
    """Distribution of cosine(query, truth item text) over instances."""
    return summarize(query_truth_similarities(queries, truth_items, embedder, catalog))


def _chordal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = np.clip(a @ b.T, -1.0, 1.0)
    dist = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * cos))
    # sqrt(2 - 2cos) cancels badly for near-duplicates; take those pairs directly
    rows, cols = np.nonzero(cos > 1.0 - 1e-4)
    if rows.size:
        dist[rows, cols] = np.linalg.norm(a[rows] - b[cols], axis=1)
    return dist


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """V-statistic energy distance with chordal distance between unit vectors."""
    value = 2.0 * _chordal(x, y).mean() - _chordal(x, x).mean() - _chordal(y, y).mean()
    return float(max(0.0, value))


def distribution_divergence(train_texts: Sequence[str], inference_texts: Sequence[str], embedder) -> float:
    """Energy distance between embedded training and inference inputs."""
    if not train_texts or not inference_texts:
        raise EvalError("both text sets must be non-empty")
    emb = _embedder(embedder)
    return energy_distance(emb(list(train_texts)), emb(list(inference_texts)))


def mean_cross_cosine(a_texts: Sequence[str], b_texts: Sequence[str], embedder) -> float:
    emb = _embedder(embedder)
    return float((emb(list(a_texts)) @ emb(list(b_texts)).T).mean())


def force_truth(ranked_ids: Sequence[str], truth: str, k: int, rng) -> tuple[list[str], int | None]:
    """Top-``k`` list with the truth guaranteed present exactly once.

    When retrieval missed it, the lowest-ranked hit is dropped and the truth is
    inserted at a random position. Returns the list and the insert position.
    """
    ids = list(ranked_ids[:k])
    if truth in ids:
        return ids, None
    ids = ids[: k - 1] if len(ids) >= k else ids
    pos = rng.randrange(len(ids) + 1)
    ids.insert(pos, truth)
    return ids, pos


@dataclass
class ForcedInclusionResult:
    overall_rate: float
    item_generation_rate: float
    coverage: float
    report: EvalReport

    def __iter__(self):
        return iter((self.overall_rate, self.item_generation_rate))


def forced_inclusion_eval(
    instances: Sequence[RecInstance],
    index: VectorIndex,
    queries: Mapping[str, str],
    client,
    k: int,
    catalog: ItemCatalog,
    embedder,
    seed: int = 0,
    token_budget: int = 4096,
) -> ForcedInclusionResult:
    """Overall success on plain top-k lists vs. success when the truth is forced in."""
    if k < 1:
        raise EvalError("k must be >= 1")
    emb = _embedder(embedder)
    report = EvalReport()
    for inst in sorted(instances, key=lambda i: i.instance_id):
        if inst.instance_id not in queries:
            raise EvalError(f"no query for instance {inst.instance_id!r}")
        vec = emb([queries[inst.instance_id]])[0]
        ranked = index.retrieve(vec, k, query_id=inst.instance_id).item_ids
        overall = recommend_from_candidates(client, inst, ranked, catalog, token_budget=token_budget)
        forced, pos = force_truth(ranked, inst.truth_item_id, k, instance_rng(seed, inst.instance_id, "forced"))
        if pos is None:
            forced_rec = overall
        else:
            forced_rec = recommend_from_candidates(client, inst, forced, catalog, token_budget=token_budget)
        report.rows.append({
            "instance_id": inst.instance_id,
            "retrieved": int(pos is None),
            "insert_position": pos,
            "overall_success": int(is_success(overall, inst.truth_item_id)),
            "forced_success": int(is_success(forced_rec, inst.truth_item_id)),
        })
    coverage = report.add_metric(f"coverage@{k}", "retrieved")
    overall_rate = report.add_metric("overall_rec_success_rate", "overall_success")
    item_rate = report.add_metric("item_generation_success_rate", "forced_success")
    return ForcedInclusionResult(overall_rate, item_rate, coverage, report)


def sign_test(a: Sequence[float], b: Sequence[float]) -> tuple[int, int, float]:
    """Paired two-sided sign test; ties are dropped. Returns (wins, losses, p)."""
    if len(a) != len(b):
        raise EvalError("paired samples differ in length")
    wins = sum(x > y for x, y in zip(a, b))
    losses = sum(x < y for x, y in zip(a, b))
    n = wins + losses
    if n == 0:
        return 0, 0, 1.0
    tail = sum(math.comb(n, i) for i in range(min(wins, losses) + 1)) / 2**n
    return wins, losses, min(1.0, 2 * tail)
