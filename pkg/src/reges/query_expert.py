"""Generation-augmented retrieval: pseudo-queries, QR training data, reformulation."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from reges import prompts
from reges.corpus import ItemCatalog, RecInstance, normalize_title, render_history
from reges.llm_client import (
    DEFAULT_TEMPERATURE,
    MAX_TOKENS_QUERY,
    TOKEN_BUDGET,
    ChatClient,
    ChatError,
    ChatPrompt,
)

logger = logging.getLogger(__name__)

_FENCE = re.compile(r"^\s*```[\w-]*\s*$", re.MULTILINE)
_LABEL = re.compile(r"^\s*(?:search\s+query|query)\s*:\s*", re.IGNORECASE)
_QUOTES = [('"', '"'), ("'", "'"), ("“", "”"), ("‘", "’"), ("`", "`")]


class QueryMode(str, Enum):
    ORIGINAL = "original"
    DIRECT_PROMPT = "direct_prompt"
    TRAINED_QR = "trained_qr"

    @classmethod
    def parse(cls, value: "str | QueryMode") -> "QueryMode":
        aliases = {"direct": cls.DIRECT_PROMPT, "qr": cls.TRAINED_QR}
        if isinstance(value, cls):
            return value
        return aliases.get(value) or cls(value)


@dataclass(frozen=True)
class PseudoQuery:
    instance_id: str
    query_text: str
    source_truth_item_id: str

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "query_text": self.query_text,
            "source_truth_item_id": self.source_truth_item_id,
        }


@dataclass(frozen=True)
class ReformulatedQuery:
    instance_id: str
    mode: QueryMode
    query_text: str

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "mode": self.mode.value, "query_text": self.query_text}

    @classmethod
    def from_dict(cls, d: dict) -> "ReformulatedQuery":
        return cls(d["instance_id"], QueryMode.parse(d["mode"]), d["query_text"])


class ReformulationError(RuntimeError):
    def __init__(self, message: str, instance_id: str, mode: QueryMode):
        super().__init__(f"{message} [instance {instance_id}, mode {mode.value}]")
        self.instance_id = instance_id
        self.mode = mode


def clean_query(text: str) -> str:
    """Reduce a model answer to a one-line query.

    Drops code fences, keeps the first paragraph, strips ``Query:`` /
    ``Search query:`` labels and wrapping quotes, collapses whitespace.
    """
    text = _FENCE.sub("", text).strip()
    text = re.split(r"\n\s*\n", text, maxsplit=1)[0]
    text = " ".join(text.split())
    while True:
        before = text
        text = _LABEL.sub("", text).strip()
        for left, right in _QUOTES:
            if len(text) >= 2 and text.startswith(left) and text.endswith(right):
                text = text[len(left) : -len(right)].strip()
        if text == before:
            return text


def truth_text(catalog: ItemCatalog, item_id: str) -> str:
    return prompts.render_item(catalog, item_id)


def build_pseudo_query_prompt(
    instance: RecInstance, catalog: ItemCatalog, token_budget: int = TOKEN_BUDGET
) -> ChatPrompt:
    if not instance.history:
        raise ValueError(f"instance {instance.instance_id} has empty history")
    if instance.truth_item_id not in catalog:
        raise KeyError(f"truth item {instance.truth_item_id!r} not in catalog")
    text = prompts.history_prompt_text(
        prompts.QR_SUPERVISION,
        instance.history,
        token_budget,
        truth=truth_text(catalog, instance.truth_item_id),
    )
    return ChatPrompt.user(text, temperature=DEFAULT_TEMPERATURE, max_tokens=MAX_TOKENS_QUERY)


def build_inference_qr_prompt(instance: RecInstance, token_budget: int = TOKEN_BUDGET) -> ChatPrompt:
    text = prompts.history_prompt_text(prompts.QR_INFERENCE, instance.history, token_budget)
    return ChatPrompt.user(text, temperature=DEFAULT_TEMPERATURE, max_tokens=MAX_TOKENS_QUERY)


def build_direct_prompt(instance: RecInstance, token_budget: int = TOKEN_BUDGET) -> ChatPrompt:
    text = prompts.history_prompt_text(prompts.DIRECT_PROMPT, instance.history, token_budget)
    return ChatPrompt.user(text, temperature=DEFAULT_TEMPERATURE, max_tokens=MAX_TOKENS_QUERY)


def map_ordered(fn, items: Sequence, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally threaded; order is preserved."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def generate_pseudo_queries(
    client: ChatClient,
    instances: Sequence[RecInstance],
    catalog: ItemCatalog,
    token_budget: int = TOKEN_BUDGET,
    workers: int = 1,
) -> tuple[list[PseudoQuery], list[dict]]:
    """Ask the LLM for a truth-guided query per train instance.

    Returns ``(pseudo_queries, failures)``; a failing instance is recorded
    and the run continues. Output is ordered by instance_id.
    """
    def one(inst: RecInstance):
        if inst.split != "train":
            return {"instance_id": inst.instance_id, "error": f"split {inst.split!r} is not train"}
        try:
            resp = client.chat(build_pseudo_query_prompt(inst, catalog, token_budget))
        except (ChatError, ValueError, KeyError) as exc:
            return {"instance_id": inst.instance_id, "error": str(exc)}
        query = clean_query(resp.content)
        if not query:
            return {"instance_id": inst.instance_id, "error": "empty query after post-processing"}
        return PseudoQuery(inst.instance_id, query, inst.truth_item_id)

    results = map_ordered(one, list(instances), workers)
    pseudo = sorted((r for r in results if isinstance(r, PseudoQuery)), key=lambda p: p.instance_id)
    failures = sorted((r for r in results if isinstance(r, dict)), key=lambda f: f["instance_id"])
    for f in failures:
        logger.warning("pseudo-query failed for %s: %s", f["instance_id"], f["error"])
    return pseudo, failures


def mentions_title(text: str, title: str) -> bool:
    """Word-bounded containment of the normalized title in normalized text."""
    key = normalize_title(title)
    return bool(key) and f" {key} " in f" {normalize_title(text)} "


def prompt_scaffold(prompt: str, history_text: str) -> str:
    return prompt.replace(history_text, "", 1)


def build_qr_training_set(
    pseudo: Iterable[PseudoQuery],
    instances: Iterable[RecInstance],
    catalog: ItemCatalog,
    token_budget: int = TOKEN_BUDGET,
) -> tuple[list[dict], list[dict]]:
    """``{instance_id, prompt, completion}`` records for the query expert.

    The prompt is the inference-time instruction (no truth item). Records whose
    instruction scaffold names the truth title are rejected; the history is
    user data and is not scanned.
    """
    by_id = {inst.instance_id: inst for inst in instances}
    records, rejected = [], []
    for pq in sorted(pseudo, key=lambda p: p.instance_id):
        inst = by_id.get(pq.instance_id)
        if inst is None:
            raise KeyError(f"pseudo-query {pq.instance_id!r} has no matching instance")
        prompt = build_inference_qr_prompt(inst, token_budget).messages[-1][1]
        history_text = prompt.split("Conversation history: ", 1)[1]
        title = catalog[inst.truth_item_id].title
        if mentions_title(prompt_scaffold(prompt, history_text), title):
            rejected.append({"instance_id": inst.instance_id, "reason": "truth title in instruction"})
            continue
        records.append({"instance_id": inst.instance_id, "prompt": prompt, "completion": pq.query_text})
    return records, rejected


def reformulate(
    client: ChatClient | None,
    instance: RecInstance,
    mode: QueryMode | str,
    token_budget: int = TOKEN_BUDGET,
) -> ReformulatedQuery:
    mode = QueryMode.parse(mode)
    if mode is QueryMode.ORIGINAL:
        return ReformulatedQuery(instance.instance_id, mode, render_history(instance.history))
    if client is None:
        raise ReformulationError("no client configured", instance.instance_id, mode)
    if mode is QueryMode.DIRECT_PROMPT:
        prompt = build_direct_prompt(instance, token_budget)
    else:
        prompt = build_inference_qr_prompt(instance, token_budget)
    try:
        resp = client.chat(prompt)
    except (ChatError, ValueError) as exc:
        raise ReformulationError(str(exc), instance.instance_id, mode) from exc
    query = clean_query(resp.content)
    if not query:
        raise ReformulationError("empty query after post-processing", instance.instance_id, mode)
    return ReformulatedQuery(instance.instance_id, mode, query)


def reformulate_all(client, instances: Sequence[RecInstance], mode, token_budget: int = TOKEN_BUDGET,
                    workers: int = 1) -> list[ReformulatedQuery]:
    out = map_ordered(lambda inst: reformulate(client, inst, mode, token_budget), list(instances), workers)
    return sorted(out, key=lambda q: q.instance_id)
