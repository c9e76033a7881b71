import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from reges import prompts
from reges.corpus import Turn
from reges.llm_client import PromptTooLongError, count_tokens_approx


def test_registry_has_frozen_templates():
    assert set(prompts.REGISTRY) == {"qr_supervision", "qr_inference", "direct_prompt", "generator",
                                     "generator_cot", "cot_rationale"}
    assert prompts.QR_SUPERVISION.startswith("Find the common concepts between the conversation history")
    assert "Only output one movie name." in prompts.GENERATOR
    assert prompts.QR_INFERENCE.startswith("Identify the concepts the seeker reveals, particularly")
    assert "<ground_truth_item>" not in prompts.QR_INFERENCE
    assert prompts.GENERATOR_COT.count("Think step by step.") == 1
    assert prompts.GENERATOR_COT.replace(" Think step by step.", "") == prompts.GENERATOR


def test_fill_is_single_pass():
    text = prompts.fill(prompts.QR_INFERENCE, history="Seeker: I typed <ground_truth_item> on purpose")
    assert text.endswith("Seeker: I typed <ground_truth_item> on purpose")


def test_fill_requires_every_placeholder():
    with pytest.raises(KeyError):
        prompts.fill(prompts.QR_SUPERVISION, history="x")


def test_truncate_text():
    assert prompts.truncate_text("short", 10) == "short"
    cut = prompts.truncate_text("word " * 100, 10)
    assert cut.endswith("...") and count_tokens_approx(cut) <= 10
    assert prompts.truncate_text("anything", 0) == ""


@given(st.text(min_size=0, max_size=300), st.integers(1, 40))
def test_truncate_respects_budget(text, budget):
    assert count_tokens_approx(prompts.truncate_text(text, budget)) <= budget


def _turns(n, size=40):
    return [Turn("seeker" if i % 2 == 0 else "recommender", f"turn {i} " + "x" * size, i) for i in range(n)]


def test_fit_history_drops_oldest_whole_turns():
    turns = _turns(10)
    kept = prompts.fit_history(turns, 40)
    assert kept == tuple(turns[-len(kept):])
    assert 0 < len(kept) < 10


def test_fit_history_single_oversized_turn():
    with pytest.raises(PromptTooLongError):
        prompts.fit_history([Turn("seeker", "x" * 400, 0)], 10)


def test_render_item_formats(catalog):
    assert prompts.render_item(catalog, "m5").startswith("Se7en (1995): Two detectives")
    assert prompts.render_item(catalog, "m1").startswith("Heat (1995): A group")
    short = prompts.render_item(catalog, "m1", max_tokens=12)
    assert count_tokens_approx(short) <= 12


def test_generator_prompt_within_budget_for_long_inputs(catalog):
    history = _turns(200, size=200)
    ids = catalog.ids() * 1
    text = prompts.generator_prompt_text(history, ids, catalog, token_budget=600)
    assert count_tokens_approx(text) <= 600
    assert not re.search(r"<item_|<conversation_history>", text)
    # the most recent turn is always kept
    assert history[-1].text in text
