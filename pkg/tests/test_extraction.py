import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcustom.backends.stubs import FixedCaptioner, HeuristicLLM, ScriptedLLM
from mmcustom.errors import AllResponsesMalformed, BackendUnavailable
from mmcustom.extraction import (
    ANALYSIS_TEMPLATE,
    TEMPLATE_SLOT,
    ExtractionCache,
    Malformed,
    SemanticTriple,
    build_analysis_prompt,
    caption_image,
    extract_main_object,
    normalize_triple,
    parse_analysis_response,
    tally_votes,
)


def resp(fg, bg="None", action="None"):
    return f'the foreground is "{fg}", the background is "{bg}" and the action is "{action}".'


def test_template_has_single_slot_and_examples():
    assert ANALYSIS_TEMPLATE.count(f'"{TEMPLATE_SLOT}"') == 1
    assert ANALYSIS_TEMPLATE.count("Given a sentence") == 5


def test_build_analysis_prompt_fills_slot_only():
    prompt = build_analysis_prompt("there is a red toy on a table")
    assert '"there is a red toy on a table"' in prompt
    assert TEMPLATE_SLOT not in prompt.split("Now imitate")[1]
    assert prompt.startswith(ANALYSIS_TEMPLATE.split(TEMPLATE_SLOT)[0])
    with pytest.raises(ValueError):
        build_analysis_prompt("  ")


def test_parse_tolerates_order_case_and_prose():
    raw = 'Sure! Action: "running". The BACKGROUND is "a park". Foreground = "a dog".'
    assert parse_analysis_response(raw) == SemanticTriple("a dog", "a park", "running")


def test_parse_none_and_empty_map_to_absent():
    assert parse_analysis_response(resp("a cat", "None", "")) == SemanticTriple("a cat")


@pytest.mark.parametrize("raw", ["", "no fields here", resp("None"), 'the background is "beach"'])
def test_parse_malformed(raw):
    assert isinstance(parse_analysis_response(raw), Malformed)


def test_vote_majority_keeps_first_surface_form():
    tally = tally_votes([resp("A Cat."), resp("a dog"), resp("a cat"), "garbage", resp("a  cat")])
    assert tally.winner == SemanticTriple("A Cat.")
    assert tally.winner_count() == 3
    assert len(tally.parsed) == 4


def test_vote_tie_goes_to_earliest_arrival():
    assert tally_votes([resp("b"), resp("a"), resp("a"), resp("b")]).winner.foreground == "b"


def test_vote_all_malformed():
    with pytest.raises(AllResponsesMalformed) as info:
        tally_votes(["x", "y"])
    assert info.value.responses == ["x", "y"]


def test_normalize_triple():
    assert normalize_triple(SemanticTriple(" A  Red Toy!! ", "Table.", None)) == ("a red toy", "table", None)


@settings(max_examples=100)
@given(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=9),
       st.lists(st.integers(0, 9), max_size=4))
def test_vote_maximal_and_malformed_invariant(labels, junk_positions):
    responses = [resp(x) for x in labels]
    tally = tally_votes(responses)
    counts = {x: labels.count(x) for x in labels}
    assert counts[tally.winner.foreground] == max(counts.values())
    noisy = list(responses)
    for pos in junk_positions:
        noisy.insert(min(pos, len(noisy)), "unparseable reply")
    assert tally_votes(noisy).winner == tally.winner


def test_caption_image_uses_captioner(image_dir):
    cap = caption_image("red.png", FixedCaptioner(), image_dir)
    assert cap.text == "there is a red toy sitting on a wooden table"
    assert cap.backend_id == FixedCaptioner.backend_id


def test_caption_empty_is_backend_failure(image_dir):
    with pytest.raises(BackendUnavailable):
        caption_image("red.png", FixedCaptioner(default=" "), image_dir)


def test_extract_with_heuristic_llm(image_dir):
    llm = HeuristicLLM()
    triple, tally = extract_main_object("blue.png", 5, FixedCaptioner(), llm, base_dir=image_dir)
    assert triple == SemanticTriple("a blue toy", "wooden table", "sitting")
    assert len(tally.responses) == 5 and llm.calls == 5
    assert tally.caption.text.startswith("there is a blue toy")


def test_extract_k1_is_single_shot(image_dir):
    llm = ScriptedLLM([resp("a mug", "desk")])
    triple, _ = extract_main_object("red.png", 1, FixedCaptioner(), llm, base_dir=image_dir)
    assert triple == SemanticTriple("a mug", "desk") and llm.calls == 1


def test_extract_same_seed_same_responses(image_dir):
    runs = [extract_main_object("red.png", 3, FixedCaptioner(), HeuristicLLM(), seed=4, base_dir=image_dir)[1]
            for _ in range(2)]
    assert runs[0].responses == runs[1].responses


def test_exhausted_llm_fails_fast(image_dir):
    with pytest.raises(BackendUnavailable):
        extract_main_object("red.png", 3, FixedCaptioner(), ScriptedLLM([resp("a")]), base_dir=image_dir)


class _SlowFirstLLM:
    """Thread-safe LLM whose first inquiry answers last."""

    backend_id = "slow-first"
    concurrency_safe = True

    def complete(self, prompt, temperature, seed):
        if seed == 0:
            time.sleep(0.2)
            return resp("first")
        return resp("later" if seed == 1 else "other")


def test_concurrent_ties_follow_arrival_order(image_dir):
    # inquiry 0 answers "first" but arrives after inquiries 1 and 2
    triple, tally = extract_main_object("red.png", 3, FixedCaptioner(), _SlowFirstLLM(), max_workers=3,
                                        base_dir=image_dir)
    assert tally.arrival[-1] == 0
    assert triple.foreground == tally_votes(tally.responses).winner.foreground != "first"


def test_cache_hit_skips_backends(image_dir, tmp_path):
    cache = ExtractionCache(tmp_path / "x.jsonl")
    cap, llm = FixedCaptioner(), HeuristicLLM()
    first, _ = extract_main_object("red.png", 5, cap, llm, cache=cache, base_dir=image_dir)
    second, tally = extract_main_object("red.png", 5, cap, llm, cache=cache, base_dir=image_dir)
    assert first == second and cache.hits == 1
    assert cap.calls == 1 and llm.calls == 5
    assert len(tally.responses) == 5
    # a different k is a different cache entry
    extract_main_object("red.png", 3, cap, llm, cache=cache, base_dir=image_dir)
    assert llm.calls == 8
