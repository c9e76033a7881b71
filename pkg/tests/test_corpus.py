import io
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import title_key
from reges.corpus import (
    DatasetError,
    Dialogue,
    Turn,
    dialogue_to_canonical,
    extract_instances,
    load_catalog,
    normalize_title,
    parse_dialogues,
    render_history,
)


def test_normalize_examples():
    assert normalize_title("The Matrix (1999)") == "the matrix"
    assert normalize_title("  Se7en! ") == "se7en"
    assert normalize_title("Léon: The Professional (1994)") == "leon the professional"
    assert normalize_title("Schindler's List") == "schindlers list"
    assert normalize_title("") == ""
    assert normalize_title("!!!") == ""


@given(st.text(max_size=40))
@settings(max_examples=400)
def test_normalize_idempotent(raw):
    once = normalize_title(raw)
    assert normalize_title(once) == once


@given(st.text(alphabet=st.sampled_from("abcXYZ019 .,:;!?-()'&"), max_size=30))
def test_normalize_matches_ascii_oracle(raw):
    assert normalize_title(raw) == title_key(raw)


def test_catalog_sizes_and_keys(catalog):
    assert len(catalog) == 8
    assert catalog.lookup_key("m1") != catalog.lookup_key("m2")
    assert catalog.find("Heat (1995)") == ["m1"]
    assert catalog.find("heat") == ["m1", "m2"]
    assert catalog.find("the matrix") == ["m3"]
    assert catalog.resolve("m5") == "m5"
    assert catalog.resolve("Alien (1979)") == "m7"
    assert catalog.resolve("nothing like it") is None


def test_catalog_five_records():
    lines = "\n".join(json.dumps({"item_id": f"x{i}", "title": f"T{i}", "year": None, "abstract": ""})
                      for i in range(5))
    assert load_catalog(io.StringIO(lines)).size == 5


def test_catalog_duplicate_id_names_lines():
    recs = [{"item_id": "a", "title": "A"}, {"item_id": "b", "title": "B"},
            {"item_id": "c", "title": "C"}, {"item_id": "b", "title": "B again"}]
    src = io.StringIO("\n".join(json.dumps(r) for r in recs))
    with pytest.raises(DatasetError, match="lines 2 and 4"):
        load_catalog(src)


def test_catalog_empty_title_is_record_error():
    src = io.StringIO('{"item_id": "a", "title": ""}\n{"item_id": "b", "title": "B"}\nnot json\n')
    cat = load_catalog(src)
    assert cat.ids() == ["b"]
    assert [e.line for e in cat.errors] == [1, 3]


def test_parse_canonical_shape():
    rec = {"dialogue_id": "x", "turns": [{"speaker": "seeker", "text": "hi"},
                                         {"speaker": "recommender", "text": "try A"},
                                         {"speaker": "seeker", "text": "ok"}],
           "recommendations": [{"turn_index": 1, "item_id": "m1"}]}
    result = parse_dialogues(io.StringIO(json.dumps(rec)))
    (d,) = result.dialogues
    assert len(d.turns) == 3 and len(d.recommendations) == 1


def test_parse_errors_are_per_line():
    good = {"dialogue_id": "ok", "turns": [{"speaker": "seeker", "text": "hi"}]}
    bad_speaker = {"dialogue_id": "b", "turns": [{"speaker": "narrator", "text": "hi"}]}
    bad_rec = {"dialogue_id": "c", "turns": [{"speaker": "seeker", "text": "hi"}],
               "recommendations": [{"turn_index": 0, "item_id": "m1"}]}
    src = "\n".join([json.dumps(good), "{oops", json.dumps(bad_speaker), json.dumps(bad_rec), json.dumps(good)])
    result = parse_dialogues(io.StringIO(src))
    assert [d.dialogue_id for d in result.dialogues] == ["ok", "ok"]
    assert [e.line for e in result.errors] == [2, 3, 4]
    assert "unknown speaker tag" in result.errors[1].message
    assert "not a recommender turn" in result.errors[2].message


def test_parse_rejects_unknown_format():
    with pytest.raises(ValueError):
        parse_dialogues(io.StringIO(""), "movielens")


def test_extraction_fixture_counts(fixtures, catalog):
    parsed = parse_dialogues(fixtures / "extraction.jsonl")
    instances, skips = extract_instances(parsed.dialogues, catalog)
    assert len(instances) == 5
    assert skips.total == 1
    assert skips.entries[0]["item_id"] == "zz-unknown"
    # two entries on the same turn give two instances with identical history
    d1 = [i for i in instances if i.instance_id.startswith("d1-")]
    assert [i.truth_item_id for i in d1] == ["m1", "m3", "m5"]
    assert d1[0].history == d1[1].history


def test_history_strictly_precedes_recommendation(fixtures, catalog):
    parsed = parse_dialogues(fixtures / "extraction.jsonl")
    recs = {(d.dialogue_id, n): t for d in parsed.dialogues for n, (t, _) in enumerate(d.recommendations)}
    instances, _ = extract_instances(parsed.dialogues, catalog)
    for inst in instances:
        did, n = inst.instance_id.rsplit("-", 1)
        assert max(t.turn_index for t in inst.history) < recs[(did, int(n))]
        assert any(t.speaker == "seeker" for t in inst.history)


def test_recommendation_at_turn_zero_is_skipped(catalog):
    d = Dialogue("z", [Turn("recommender", "Watch Alien", 0), Turn("seeker", "ok", 1)], [(0, "m7")])
    instances, skips = extract_instances([d], catalog)
    assert instances == [] and dict(skips.counts) == {"empty_history": 1}


def test_history_without_seeker_is_skipped(catalog):
    d = Dialogue("z", [Turn("recommender", "Hello", 0), Turn("recommender", "Watch Alien", 1)], [(1, "m7")])
    _, skips = extract_instances([d], catalog)
    assert dict(skips.counts) == {"no_seeker_turn": 1}


def test_redial_mini(fixtures, catalog):
    parsed = parse_dialogues(fixtures / "redial_mini.jsonl", "redial")
    assert len(parsed) == 3 and not parsed.errors
    first = parsed.dialogues[0]
    # consecutive seeker messages merge; mentions become titles
    assert first.turns[0].text == "hi there I liked Heat (1995) a lot"
    instances, skips = extract_instances(parsed.dialogues, catalog)
    assert [(i.instance_id, i.truth_item_id) for i in instances] == [("20001-0", "m3"), ("20002-0", "m7")]
    assert skips.total == 0


def test_inspired_mini(fixtures, catalog):
    parsed = parse_dialogues(fixtures / "inspired_mini.jsonl", "inspired")
    assert len(parsed) == 2
    instances, _ = extract_instances(parsed.dialogues, catalog, "test")
    assert [i.truth_item_id for i in instances] == ["m6", "m5"]
    assert all(i.split == "test" for i in instances)


def test_extraction_is_deterministic(fixtures, catalog):
    runs = [extract_instances(parse_dialogues(fixtures / "extraction.jsonl").dialogues, catalog)[0]
            for _ in range(2)]
    assert runs[0] == runs[1]


speakers = st.sampled_from(["seeker", "recommender"])
texts = st.text(min_size=1, max_size=20).filter(lambda s: s.strip() and s == " ".join(s.split()))


@st.composite
def dialogues(draw):
    turns = draw(st.lists(st.tuples(speakers, texts), min_size=1, max_size=6))
    turn_objs = [Turn(s, t, i) for i, (s, t) in enumerate(turns)]
    rec_turns = [t.turn_index for t in turn_objs if t.speaker == "recommender"]
    recs = []
    if rec_turns:
        picks = draw(st.lists(st.sampled_from(rec_turns), max_size=3))
        recs = [(i, draw(st.sampled_from(["m1", "m2", "m7"]))) for i in picks]
    return Dialogue(draw(st.from_regex(r"[a-z0-9]{1,6}", fullmatch=True)), turn_objs, recs)


@given(dialogues())
@settings(max_examples=200)
def test_canonical_round_trip(d):
    line = json.dumps(dialogue_to_canonical(d))
    (back,) = parse_dialogues(io.StringIO(line)).dialogues
    assert back.dialogue_id == d.dialogue_id
    assert back.turns == d.turns
    assert back.recommendations == d.recommendations


def test_render_history():
    turns = [Turn("seeker", "hi", 0), Turn("recommender", "hello", 1)]
    assert render_history(turns) == "Seeker: hi\nRecommender: hello"
