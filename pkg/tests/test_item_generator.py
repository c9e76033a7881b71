import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import levenshtein_recursive
from reges.corpus import Item, ItemCatalog, RecInstance, Turn, extract_instances, normalize_title, parse_dialogues
from reges.embed import EmbedderConfig
from reges.index import RankedList, VectorIndex, build_index, load_index
from reges.item_generator import (
    CandidateSet,
    MiningError,
    Recommendation,
    build_cot_rationale,
    build_g_prompt,
    build_g_training_record,
    is_success,
    levenshtein,
    match_output_to_item,
    mine_hard_negatives,
    parse_output,
    recommend,
    sample_random_negatives,
    similarity,
)
from reges.llm_client import MockChatClient, MockScript
from reges.query_expert import QueryMode, ReformulatedQuery

DIM8 = EmbedderConfig(dim=8)


@pytest.fixture
def instances(fixtures, catalog):
    return extract_instances(parse_dialogues(fixtures / "extraction.jsonl").dialogues, catalog)[0]


def inst(iid="i", truth="m1", split="train"):
    return RecInstance(iid, (Turn("seeker", "Hi, I love heist movies with great shootouts.", 0),), truth, split)


def query(text, iid="i"):
    return ReformulatedQuery(iid, QueryMode.TRAINED_QR, text)


class FixedIndex(VectorIndex):
    """Index whose ranking is fixed regardless of the query."""

    def __init__(self, order):
        super().__init__(order, np.eye(len(order)))
        self.order = order

    def retrieve(self, q, k, query_id=""):
        return RankedList(query_id, tuple((i, 1.0 - n / 100) for n, i in enumerate(self.order[:k])))


def test_truth_ranked_first_negatives_are_next():
    index = FixedIndex(["m1", "m2", "m3", "m4", "m5", "m6"])
    cset = mine_hard_negatives(index, DIM8, query("x"), inst(truth="m1"), 3, seed=0)
    assert sorted(set(cset.members) - {"m1"}) == ["m2", "m3", "m4"]
    assert len(cset.members) == 4 and cset.members[cset.truth_position] == "m1"


def test_truth_absent_negatives_are_top():
    index = FixedIndex(["m2", "m3", "m4", "m5", "m6", "m1"])
    cset = mine_hard_negatives(index, DIM8, query("x"), inst(truth="m1"), 3, seed=0)
    assert [m for m in cset.members if m != "m1"] == ["m2", "m3", "m4"]


def test_catalog_too_small():
    with pytest.raises(MiningError, match="smaller than k_train"):
        mine_hard_negatives(FixedIndex(["m1", "m2", "m3"]), DIM8, query("x"), inst(), 3)


def test_mining_golden_seed7(fixtures):
    index = load_index(fixtures / "golden" / "catalog_dim8.idx")
    for case in json.loads((fixtures / "golden" / "mining_seed7.json").read_text()):
        cset = mine_hard_negatives(index, DIM8, query(case["query"], case["instance_id"]),
                                   inst(case["instance_id"], case["truth"]), case["k_train"], seed=7)
        assert list(cset.members) == case["members"], case["instance_id"]
        assert cset.truth_position == case["truth_position"]


@given(st.integers(1, 40), st.integers(0, 2**63), st.integers(0, 1000), st.booleans())
@settings(max_examples=150, deadline=None)
def test_candidate_set_invariants(k_train, seed, truth_slot, hard):
    m = k_train + 1 + truth_slot % 7
    ids = [f"c{j:03d}" for j in range(m)]
    truth = ids[truth_slot % m]
    cat = ItemCatalog([Item(i, f"Film {i}") for i in ids])
    instance = inst(f"q{truth_slot}", truth)
    if hard:
        index = VectorIndex(ids, np.random.default_rng(seed % 2**32).normal(size=(m, 8)))
        cset = mine_hard_negatives(index, EmbedderConfig(dim=8), query(f"film {seed}"), instance, k_train, seed)
    else:
        cset = sample_random_negatives(cat, instance, k_train, seed)
    assert cset.members.count(truth) == 1
    assert len(cset.members) == k_train + 1 == len(set(cset.members))
    assert cset.members[cset.truth_position] == truth


def test_seeded_determinism(catalog):
    index = build_index(catalog, DIM8)
    a = mine_hard_negatives(index, DIM8, query("heist"), inst(), 4, seed=3)
    b = mine_hard_negatives(index, DIM8, query("heist"), inst(), 4, seed=3)
    assert a == b
    positions = {mine_hard_negatives(index, DIM8, query("heist"), inst(), 4, seed=s).truth_position
                 for s in range(20)}
    assert len(positions) > 1


def test_random_negatives_exclude_truth(catalog):
    cset = sample_random_negatives(catalog, inst(), 7, seed=1)
    assert sorted(cset.members) == sorted(catalog.ids())
    with pytest.raises(MiningError):
        sample_random_negatives(catalog, inst(), 8)


def test_g_record_golden(fixtures, catalog, instances):
    d1 = next(i for i in instances if i.instance_id == "d1-0")
    cset = CandidateSet("d1-0", ("m3", "m1", "m5"), 1)
    rec = build_g_training_record(d1, cset, catalog)
    assert rec.prompt == (fixtures / "golden" / "g_prompt_d1-0.txt").read_text(encoding="utf-8")
    assert rec.completion == "Heat (1995)"
    assert rec.candidate_ids == ("m3", "m1", "m5") and rec.label_item_id == "m1"


def test_g_record_cot(catalog):
    cset = CandidateSet("i", ("m3", "m1"), 1)
    rec = build_g_training_record(inst(), cset, catalog, cot="User likes heist films.")
    assert rec.completion == "User likes heist films.\nHeat (1995)"
    assert "anything else. Think step by step.\n" in rec.prompt
    last = rec.completion.splitlines()[-1]
    assert normalize_title(last) == normalize_title(catalog[rec.label_item_id].title)


def test_g_record_requires_known_candidates_and_truth(catalog):
    with pytest.raises(KeyError):
        build_g_training_record(inst(), CandidateSet("i", ("m1", "ghost"), 0), catalog)
    with pytest.raises(MiningError):
        build_g_training_record(inst(), CandidateSet("i", ("m2", "m3"), None), catalog)


def test_cot_rationale(instances):
    summary = "The seeker enjoys heist films. They want something darker."
    assert build_cot_rationale(MockChatClient(MockScript(fallback=summary)), instances[0]) == summary
    with pytest.raises(ValueError, match="empty rationale"):
        build_cot_rationale(MockChatClient(MockScript(fallback="  \n")), instances[0])


def test_cot_rationales_follow_transcript(instances):
    transcript = [f"Summary {n}: the seeker reveals {len(i.history)} turn(s)." for n, i in enumerate(instances)]
    client = MockChatClient(MockScript(sequence=list(transcript)))
    got = [build_cot_rationale(client, i) for i in instances]
    assert got == transcript and len(got) == 5
    assert all(p.startswith("Summarize the seeker") is False for _, p in client.calls)


@pytest.mark.parametrize("raw, want", [
    ("Heat (1995)", "Heat (1995)"),
    ("The seeker likes heists.\n\nHeat (1995)\n", "Heat (1995)"),
    ("1. The Matrix", "The Matrix"),
    ('Answer: "Se7en"', "Se7en"),
    ("", ""),
])
def test_parse_output(raw, want):
    assert parse_output(raw) == want


def test_match_examples(catalog):
    assert match_output_to_item("the matrix", ["m3", "m1"], catalog) == ("m3", "exact_candidate")
    assert match_output_to_item("Zzyzx Quest 9", ["m3"], catalog) == (None, "none")
    assert match_output_to_item("Léon the Professional", ["m3"], catalog) == ("m4", "exact_catalog")
    assert match_output_to_item("The Matrixx", ["m3"], catalog) == ("m3", "fuzzy_candidate")
    assert match_output_to_item("The Matrxi", ["m3"], catalog) == (None, "none")
    assert match_output_to_item("Se7en.", ["m1"], catalog) == ("m5", "exact_catalog")
    assert match_output_to_item("Toy Storyy", ["m1"], catalog) == ("m6", "fuzzy_catalog")
    assert match_output_to_item("", ["m1"], catalog) == (None, "none")


def test_year_selects_among_shared_titles(catalog):
    assert match_output_to_item("Heat (2013)", ["m1", "m2"], catalog) == ("m2", "exact_candidate")
    assert match_output_to_item("Heat 1995", ["m1", "m2"], catalog) == ("m1", "exact_candidate")
    assert match_output_to_item("Heat (2013)", ["m1"], catalog) == ("m2", "exact_catalog")
    assert match_output_to_item("Heat", ["m2", "m1"], catalog) == ("m1", "exact_candidate")


def test_year_without_parentheses_is_fuzzy_candidate():
    cat = ItemCatalog([Item("h", "Heat (1995)", 1995), Item("s", "Sneakers (1992)", 1992)])
    # "heat 1995" vs key "heat 1995": the year variant gives similarity 1.0
    assert match_output_to_item("Heat 1995", ["h", "s"], cat) == ("h", "fuzzy_candidate")


def test_levenshtein_examples():
    assert levenshtein("kitten", "sitting") == 3
    assert levenshtein("", "abc") == 3
    assert similarity("", "") == 1.0
    assert similarity("the matrxi", "the matrix") == pytest.approx(0.8)


@given(st.text(alphabet="abcd ", max_size=9), st.text(alphabet="abcd ", max_size=9))
def test_levenshtein_matches_recursive_oracle(a, b):
    assert levenshtein(a, b) == levenshtein_recursive(a, b) == levenshtein(b, a)


def test_recommendation_invariant():
    with pytest.raises(ValueError):
        Recommendation("i", "x", None, "exact_catalog")
    with pytest.raises(ValueError):
        Recommendation("i", "x", "m1", "none")
    with pytest.raises(ValueError):
        Recommendation("i", "x", "m1", "close_enough")


def test_success_predicate():
    assert is_success(Recommendation("i", "", "m1", "exact_candidate"), "m1")
    assert is_success(Recommendation("i", "", "m1", "fuzzy_candidate"), "m1")
    assert not is_success(Recommendation("i", "", "m1", "exact_catalog"), "m1")
    assert not is_success(Recommendation("i", "", "m2", "exact_candidate"), "m1")
    assert not is_success(Recommendation("i", "", None, "none"), "m1")


def test_recommend_end_to_end(catalog):
    ranked = RankedList("i", (("m3", 0.9), ("m1", 0.8), ("m5", 0.7)))
    seen = []

    def responder(prompt):
        seen.append(prompt)
        return "I would pick this one.\nHeat (1995)"

    rec = recommend(MockChatClient(responder=responder), inst(), ranked, catalog)
    assert (rec.matched_item_id, rec.match_kind) == ("m1", "exact_candidate")
    assert seen[0].messages[-1][1] == build_g_prompt(inst(), ["m3", "m1", "m5"], catalog).messages[-1][1]
    assert seen[0].max_tokens == 64

    other = recommend(MockChatClient(MockScript(fallback="Aliens")), inst(), ranked, catalog)
    assert (other.matched_item_id, other.match_kind) == ("m8", "exact_catalog")
    assert not is_success(other, "m8")
