"""Frozen prompt templates and token-budget-aware rendering."""

from __future__ import annotations

import re
from typing import Sequence

from reges.corpus import ItemCatalog, Turn, render_history
from reges.llm_client import TOKEN_BUDGET, PromptTooLongError, count_tokens_approx

HISTORY = "<conversation_history>"
TRUTH = "<ground_truth_item>"
CANDIDATES = "<item_1> <item_2>, ..., <item_n>"

QR_SUPERVISION = (
    "Find the common concepts between the conversation history that the seeker reveals and the "
    "ground truth movie, particularly paying attention to actor, producer, genre, topics, etc. "
    "Then, formulate a good natural-language search query for matching introduction of movies the "
    "seeker likes. Only output the query, do not include any explanation.\n"
    "\n"
    "Conversation history: <conversation_history>\n"
    "\n"
    "Ground truth items: <ground_truth_item>"
)

# inference-time query expert prompt: the supervision prompt without the truth item
QR_INFERENCE = (
    "Identify the concepts the seeker reveals, particularly paying attention to actor, producer, "
    "genre, topics, etc. Then, formulate a good natural-language search query for matching "
    "introduction of movies the seeker likes. Only output the query, do not include any "
    "explanation.\n"
    "\n"
    "Conversation history: <conversation_history>"
)

DIRECT_PROMPT = (
    "Rewrite the following conversation into a short search query describing the movie the seeker "
    "wants. Only output the query.\n"
    "\n"
    "<conversation_history>"
)

GENERATOR = (
    "A list of candidate movies and their abstracts are provided. According to the conversation "
    "history between seeker and recommender, select the top movie recommendation for the seeker "
    "from the candidate list. Only output one movie name. Do not generate explanation or anything "
    "else.\n"
    "\n"
    "A list of candidate abstracts: <item_1> <item_2>, ..., <item_n>\n"
    "\n"
    "The corresponding conversation history: <conversation_history>"
)

COT_SENTENCE = "Think step by step."
GENERATOR_COT = GENERATOR.replace("anything else.\n", f"anything else. {COT_SENTENCE}\n", 1)

COT_RATIONALE = (
    "Summarize the seeker's movie preferences revealed in the conversation history step by step, "
    "in a few sentences.\n"
    "\n"
    "Conversation history: <conversation_history>"
)

REGISTRY = {
    "qr_supervision": QR_SUPERVISION,
    "qr_inference": QR_INFERENCE,
    "direct_prompt": DIRECT_PROMPT,
    "generator": GENERATOR,
    "generator_cot": GENERATOR_COT,
    "cot_rationale": COT_RATIONALE,
}

PLACEHOLDERS = (HISTORY, TRUTH, CANDIDATES)
_PLACEHOLDER_RE = re.compile("|".join(re.escape(p) for p in PLACEHOLDERS))

# per-candidate and truth-item cap, in approx tokens
ITEM_TOKEN_CAP = 400


def fill(template: str, **values: str) -> str:
    """Substitute placeholders in a single pass (values are never re-scanned)."""
    mapping = {HISTORY: values.get("history"), TRUTH: values.get("truth"), CANDIDATES: values.get("candidates")}

    def sub(m: re.Match) -> str:
        value = mapping[m.group(0)]
        if value is None:
            raise KeyError(f"no value for placeholder {m.group(0)}")
        return value

    return _PLACEHOLDER_RE.sub(sub, template)


def scaffold_tokens(template: str, tokenizer=None) -> int:
    return count_tokens_approx(_PLACEHOLDER_RE.sub("", template), tokenizer)


def truncate_text(text: str, max_tokens: int) -> str:
    """Cut ``text`` to at most ``max_tokens`` approx tokens on a word boundary."""
    if max_tokens <= 0:
        return ""
    if count_tokens_approx(text) <= max_tokens:
        return text
    limit = max_tokens * 4 - 3
    raw = text.encode("utf-8")[: max(limit, 0)].decode("utf-8", errors="ignore")
    cut = raw.rfind(" ")
    if cut > 0:
        raw = raw[:cut]
    return raw.rstrip() + "..."


def fit_history(turns: Sequence[Turn], max_tokens: int, tokenizer=None) -> tuple[Turn, ...]:
    """Drop whole oldest turns until the rendered history fits."""
    kept: list[Turn] = []
    for turn in reversed(turns):
        trial = [turn] + kept
        if count_tokens_approx(render_history(trial), tokenizer) > max_tokens:
            break
        kept = trial
    if not kept:
        raise PromptTooLongError("most recent turn alone exceeds the history budget")
    return tuple(kept)


def render_item(catalog: ItemCatalog, item_id: str, max_tokens: int = ITEM_TOKEN_CAP) -> str:
    """``TITLE (YEAR): ABSTRACT`` with the abstract trimmed to fit ``max_tokens``."""
    title = catalog.display_title(item_id)
    abstract = catalog[item_id].abstract.strip()
    if not abstract:
        return title
    head = f"{title}: "
    room = max_tokens - count_tokens_approx(head) - 1
    abstract = truncate_text(abstract, room)
    return head + abstract if abstract else title


def render_candidates(catalog: ItemCatalog, item_ids: Sequence[str], budget: int) -> str:
    """Numbered candidate lines sharing ``budget`` tokens."""
    n = len(item_ids)
    share = min(ITEM_TOKEN_CAP, budget // max(n, 1))
    lines = []
    for i, item_id in enumerate(item_ids, start=1):
        prefix = f"{i}. "
        lines.append(prefix + render_item(catalog, item_id, share - count_tokens_approx(prefix) - 1))
    block = "\n".join(lines)
    if count_tokens_approx(block) > budget:
        block = "\n".join(f"{i}. {catalog.display_title(x)}" for i, x in enumerate(item_ids, start=1))
    return block


def generator_prompt_text(
    history: Sequence[Turn],
    candidate_ids: Sequence[str],
    catalog: ItemCatalog,
    cot: bool = False,
    token_budget: int = TOKEN_BUDGET,
    tokenizer=None,
) -> str:
    template = GENERATOR_COT if cot else GENERATOR
    fixed = scaffold_tokens(template, tokenizer)
    turns = fit_history(history, max(token_budget // 4, 1), tokenizer)
    rendered = render_history(turns)
    room = token_budget - fixed - count_tokens_approx(rendered, tokenizer) - 2
    block = render_candidates(catalog, candidate_ids, room)
    text = fill(template, history=rendered, candidates=block)
    if count_tokens_approx(text, tokenizer) > token_budget:
        raise PromptTooLongError(f"generator prompt exceeds {token_budget} tokens")
    return text


def history_prompt_text(template: str, history: Sequence[Turn], token_budget: int = TOKEN_BUDGET,
                        truth: str | None = None, tokenizer=None) -> str:
    """Render a history-bearing template, truncating the history to fit."""
    extra = count_tokens_approx(truth, tokenizer) if truth is not None else 0
    room = token_budget - scaffold_tokens(template, tokenizer) - extra - 2
    turns = fit_history(history, room, tokenizer)
    values = {"history": render_history(turns)}
    if truth is not None:
        values["truth"] = truth
    return fill(template, **values)
