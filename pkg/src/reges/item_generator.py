"""Retrieval-augmented item generation.

Hard-negative mining with the query expert's queries, contrastive (and CoT)
training records for the generator, and candidate-grounded recommendation
with output-to-item matching.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass
from typing import Sequence

from reges import prompts
from reges.corpus import ItemCatalog, RecInstance, normalize_title
from reges.embed import Embedder, EmbedderConfig
from reges.index import RankedList, VectorIndex
from reges.llm_client import (
    DEFAULT_TEMPERATURE,
    MAX_TOKENS_COT,
    MAX_TOKENS_ITEM,
    TOKEN_BUDGET,
    ChatClient,
    ChatPrompt,
)
from reges.query_expert import ReformulatedQuery

logger = logging.getLogger(__name__)

FUZZY_THRESHOLD = 0.9
MATCH_KINDS = ("exact_candidate", "exact_catalog", "fuzzy_candidate", "fuzzy_catalog", "none")
SUCCESS_KINDS = ("exact_candidate", "fuzzy_candidate")

_LIST_MARKER = re.compile(r"^\s*(?:\d+[.)]\s+|[-*•]\s+)")
_ANSWER_LABEL = re.compile(r"^\s*(?:answer|recommendation|movie)\s*:\s*", re.IGNORECASE)


@dataclass(frozen=True)
class CandidateSet:
    instance_id: str
    members: tuple[str, ...]
    truth_position: int | None = None

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "members": list(self.members),
                "truth_position": self.truth_position}


@dataclass(frozen=True)
class GTrainingRecord:
    instance_id: str
    prompt: str
    completion: str
    label_item_id: str
    candidate_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "prompt": self.prompt,
            "completion": self.completion,
            "label_item_id": self.label_item_id,
            "candidate_ids": list(self.candidate_ids),
        }


@dataclass(frozen=True)
class Recommendation:
    instance_id: str
    raw_output: str
    matched_item_id: str | None
    match_kind: str

    def __post_init__(self):
        if self.match_kind not in MATCH_KINDS:
            raise ValueError(f"unknown match kind {self.match_kind!r}")
        if (self.matched_item_id is None) != (self.match_kind == "none"):
            raise ValueError("matched_item_id must be set iff match_kind != 'none'")

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "raw_output": self.raw_output,
            "matched_item_id": self.matched_item_id,
            "match_kind": self.match_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Recommendation":
        return cls(d["instance_id"], d["raw_output"], d["matched_item_id"], d["match_kind"])


class MiningError(ValueError):
    pass


def instance_rng(seed: int, instance_id: str, purpose: str) -> random.Random:
    """Per-instance RNG, independent of processing order."""
    return random.Random(f"{seed}:{purpose}:{instance_id}")


def insert_truth(negatives: Sequence[str], truth: str, rng: random.Random) -> tuple[tuple[str, ...], int]:
    pos = rng.randrange(len(negatives) + 1)
    members = list(negatives)
    members.insert(pos, truth)
    return tuple(members), pos


def _as_embedder(embedder) -> Embedder:
    return Embedder(embedder) if isinstance(embedder, EmbedderConfig) else embedder


def mine_hard_negatives(
    index: VectorIndex,
    embedder,
    qr_query: ReformulatedQuery,
    instance: RecInstance,
    k_train: int,
    seed: int = 0,
) -> CandidateSet:
    """Top ``k_train`` retrieved items other than the truth, plus the truth
    at a seeded-random position."""
    if k_train < 1:
        raise MiningError("k_train must be >= 1")
    if k_train + 1 > len(index):
        raise MiningError(f"catalog of {len(index)} items is smaller than k_train + 1 = {k_train + 1}")
    vec = _as_embedder(embedder)([qr_query.query_text])[0]
    ranked = index.retrieve(vec, k_train + 1, query_id=instance.instance_id)
    negatives = [i for i in ranked.item_ids if i != instance.truth_item_id][:k_train]
    members, pos = insert_truth(negatives, instance.truth_item_id, instance_rng(seed, instance.instance_id, "truth"))
    return CandidateSet(instance.instance_id, members, pos)


def sample_random_negatives(catalog: ItemCatalog, instance: RecInstance, k_train: int, seed: int = 0) -> CandidateSet:
    """Uniform negatives from the whole catalog (the no-hard-negative baseline)."""
    if k_train + 1 > len(catalog):
        raise MiningError(f"catalog of {len(catalog)} items is smaller than k_train + 1 = {k_train + 1}")
    pool = sorted(i for i in catalog.ids() if i != instance.truth_item_id)
    negatives = instance_rng(seed, instance.instance_id, "random-negatives").sample(pool, k_train)
    members, pos = insert_truth(negatives, instance.truth_item_id, instance_rng(seed, instance.instance_id, "truth"))
    return CandidateSet(instance.instance_id, members, pos)


def build_g_prompt(instance: RecInstance, candidate_ids: Sequence[str], catalog: ItemCatalog,
                   cot: bool = False, token_budget: int = TOKEN_BUDGET) -> ChatPrompt:
    missing = [c for c in candidate_ids if c not in catalog]
    if missing:
        raise KeyError(f"candidates not in catalog: {missing}")
    text = prompts.generator_prompt_text(instance.history, candidate_ids, catalog, cot, token_budget)
    return ChatPrompt.user(text, temperature=DEFAULT_TEMPERATURE,
                           max_tokens=MAX_TOKENS_COT if cot else MAX_TOKENS_ITEM)


def build_g_training_record(
    instance: RecInstance,
    cset: CandidateSet,
    catalog: ItemCatalog,
    cot: str | None = None,
    token_budget: int = TOKEN_BUDGET,
) -> GTrainingRecord:
    if instance.truth_item_id not in cset.members:
        raise MiningError(f"truth item missing from candidate set of {instance.instance_id}")
    prompt = build_g_prompt(instance, cset.members, catalog, cot=cot is not None, token_budget=token_budget)
    title = catalog[instance.truth_item_id].title
    completion = f"{cot.strip()}\n{title}" if cot is not None else title
    return GTrainingRecord(instance.instance_id, prompt.messages[-1][1], completion,
                           instance.truth_item_id, cset.members)


def build_cot_rationale(client: ChatClient, instance: RecInstance, token_budget: int = TOKEN_BUDGET) -> str:
    text = prompts.history_prompt_text(prompts.COT_RATIONALE, instance.history, token_budget)
    resp = client.chat(ChatPrompt.user(text, temperature=DEFAULT_TEMPERATURE, max_tokens=MAX_TOKENS_COT))
    rationale = " ".join(resp.content.split())
    if not rationale:
        raise ValueError("empty rationale")
    return rationale


def parse_output(raw: str) -> str:
    """Last non-empty line, minus list markers, labels and wrapping quotes."""
    lines = [ln for ln in raw.splitlines() if ln.strip()]
    if not lines:
        return ""
    line = _ANSWER_LABEL.sub("", _LIST_MARKER.sub("", lines[-1]))
    return line.strip().strip("\"“”*").strip()


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def similarity(a: str, b: str) -> float:
    """``1 - levenshtein / max(len)``; 1.0 for two empty strings."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


def _best_fuzzy(key: str, item_ids, catalog: ItemCatalog) -> tuple[str | None, float]:
    best_id, best_sim = None, -1.0
    for item_id in item_ids:
        for cand in catalog.fuzzy_keys(item_id):
            # length gap alone already caps the similarity
            longest = max(len(cand), len(key))
            if 1.0 - abs(len(cand) - len(key)) / longest < FUZZY_THRESHOLD:
                continue
            sim = similarity(key, cand)
            if sim > best_sim or (sim == best_sim and best_id is not None and item_id < best_id):
                best_id, best_sim = item_id, sim
    if best_sim >= FUZZY_THRESHOLD:
        return best_id, best_sim
    return None, best_sim


def match_output_to_item(text: str, candidates: Sequence[str], catalog: ItemCatalog) -> tuple[str | None, str]:
    """Resolve generated text to an item.

    Cascade: exact in candidates, exact in catalog, fuzzy (normalized edit
    similarity >= 0.9) in candidates, fuzzy in catalog, else ``none``. Ties go
    to the higher similarity, then the smaller item_id.
    """
    key = normalize_title(text)
    if not key:
        return None, "none"
    hits = catalog.find(text)
    exact = sorted(set(hits) & set(candidates))
    if exact:
        return exact[0], "exact_candidate"
    if hits:
        return hits[0], "exact_catalog"
    item_id, _ = _best_fuzzy(key, sorted(set(candidates)), catalog)
    if item_id is not None:
        return item_id, "fuzzy_candidate"
    item_id, _ = _best_fuzzy(key, catalog.ids(), catalog)
    if item_id is not None:
        return item_id, "fuzzy_catalog"
    return None, "none"


def is_success(rec: Recommendation, truth_item_id: str) -> bool:
    return rec.matched_item_id == truth_item_id and rec.match_kind in SUCCESS_KINDS


def recommend_from_candidates(client: ChatClient, instance: RecInstance, candidate_ids: Sequence[str],
                              catalog: ItemCatalog, cot: bool = False,
                              token_budget: int = TOKEN_BUDGET) -> Recommendation:
    if not candidate_ids:
        raise ValueError("recommend needs at least one candidate")
    prompt = build_g_prompt(instance, candidate_ids, catalog, cot=cot, token_budget=token_budget)
    raw = client.chat(prompt).content
    item_id, kind = match_output_to_item(parse_output(raw), candidate_ids, catalog)
    return Recommendation(instance.instance_id, raw, item_id, kind)


def recommend(client: ChatClient, instance: RecInstance, ranked: RankedList, catalog: ItemCatalog,
              cot: bool = False, token_budget: int = TOKEN_BUDGET) -> Recommendation:
    """Ask the generator to pick from the retrieved list (kept in rank order)."""
    return recommend_from_candidates(client, instance, ranked.item_ids, catalog, cot, token_budget)
