"""Property-based checks for the cross-module invariants."""

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import make_concept
from mmcustom.backends.stubs import HashingEmbedder, StubDiffusion
from mmcustom.evalkit import EmbeddingVector, cosine, set_alignment_score
from mmcustom.extraction import SemanticTriple, parse_analysis_response
from mmcustom.generate import Mode, build_output_prompt, make_request, sample
from mmcustom.mmprompt import MultiModalPrompt, Segment, parse_prompt, serialize_prompt, substitute
from mmcustom.priorkit import combined_loss, noise_image

STUB = StubDiffusion(seed=0)
for _tok in ("sks", "zwx", "qlv"):
    STUB.register_token(_tok)
EMBEDDER = HashingEmbedder()

words = st.text(alphabet="abcdefghij <>\\:", min_size=1, max_size=10)
refs = st.text(alphabet="abcxyz012._-", min_size=1, max_size=6)
prompt_segments = st.lists(st.one_of(words.map(Segment.of_text), refs.map(Segment.of_image)), min_size=1, max_size=6)


@settings(max_examples=200)
@given(prompt_segments)
def test_substitution_is_total_and_order_preserving(segs):
    p = MultiModalPrompt.from_segments(segs)
    descriptors = {ref: f"[{ref}]" for ref in p.image_refs}
    r = substitute(p, descriptors)
    images = [s for s in p.segments if s.is_image]
    assert len(r.substitutions) == len(images)
    assert [ref for ref, _ in r.substitutions] == [s.image_ref for s in images]
    assert r.text == "".join(descriptors[s.image_ref] if s.is_image else s.text for s in p.segments)


@settings(max_examples=200)
@given(prompt_segments.filter(lambda s: serialize_prompt(MultiModalPrompt.from_segments(s)).strip()))
def test_parsing_never_loses_characters(segs):
    p = MultiModalPrompt.from_segments(segs)
    reparsed = parse_prompt(serialize_prompt(p))
    assert "".join(s.text if not s.is_image else f"<{s.image_ref}>" for s in reparsed.segments) == \
        "".join(s.text if not s.is_image else f"<{s.image_ref}>" for s in p.segments)


field = st.text(alphabet="abcdefghijklmnop ,'", min_size=1, max_size=20).map(str.strip).filter(
    lambda s: s and s.casefold() != "none")


@settings(max_examples=200)
@given(field, st.none() | field, st.none() | field)
def test_parse_is_idempotent_on_canonical_form(fg, bg, act):
    t = SemanticTriple(fg, bg, act)
    assert parse_analysis_response(t.canonical()) == t
    assert parse_analysis_response(parse_analysis_response(t.canonical()).canonical()) == t


@settings(max_examples=100)
@given(st.integers(1, 10), st.floats(-10, 10, allow_nan=False), st.integers(0, 2**31))
def test_noise_image_is_linear(t, a, seed):
    rng = np.random.default_rng(seed)
    x, eps = (torch.from_numpy(rng.standard_normal((3, 4, 4))) for _ in range(2))
    sched = STUB.schedule()
    lhs = noise_image(a * x, t, a * eps, sched)
    rhs = a * noise_image(x, t, eps, sched)
    assert torch.allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.integers(0, 1000), st.sampled_from(["all", "one"]))
def test_combined_loss_non_decreasing_in_lambda(l1, l2, seed, mode):
    lo, hi = sorted((l1, l2))
    concepts = [make_concept()]
    with torch.no_grad():
        a = combined_loss(STUB, concepts, lo, np.random.default_rng(seed), prior_mode=mode).item()
        b = combined_loss(STUB, concepts, hi, np.random.default_rng(seed), prior_mode=mode).item()
    assert b >= a - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2), st.floats(0, 3), st.lists(st.integers(0, 10**6), min_size=3, max_size=3))
def test_combined_loss_is_additive_over_concepts(split, lam, seeds):
    pool = [make_concept("sks", "a red toy", seed=0), make_concept("zwx", "a blue cup", seed=1, ref="b.png"),
            make_concept("qlv", "a green frog", seed=2, ref="c.png")]
    rngs = lambda idx: [np.random.default_rng(seeds[i]) for i in idx]  # noqa: E731
    with torch.no_grad():
        whole = combined_loss(STUB, pool, lam, rngs([0, 1, 2])).item()
        a = combined_loss(STUB, pool[:split], lam, rngs(range(split))).item()
        b = combined_loss(STUB, pool[split:], lam, rngs(range(split, 3))).item()
    assert abs(whole - (a + b)) <= 1e-9 * max(1.0, abs(whole))


CONCEPTS = {"a.png": make_concept("sks", "a red toy", ref="a.png"),
            "b.png": make_concept("zwx", "a blue cup", seed=1, ref="b.png")}
# the scene alphabet cannot spell any token or description, so substring checks are exact
scene = st.text(alphabet="mnoqrtuvwy ", max_size=8)


@settings(max_examples=150)
@given(st.lists(st.tuples(scene, st.sampled_from(["a.png", "b.png"])), min_size=1, max_size=4), scene)
def test_mode_soundness(parts, tail):
    p = MultiModalPrompt.from_segments(
        [seg for text, ref in parts for seg in (Segment.of_text(text), Segment.of_image(ref))] + [Segment.of_text(tail)])
    full = build_output_prompt(p, CONCEPTS, Mode.FULL).text
    extract = build_output_prompt(p, CONCEPTS, Mode.EXTRACTION_DIRECTLY).text
    token = build_output_prompt(p, CONCEPTS, Mode.FINETUNING_DIRECTLY).text
    for ref in p.image_refs:
        d = CONCEPTS[ref].descriptor
        assert d.token in full and d.object_description in full
        assert d.object_description in extract and d.token not in extract
        assert d.token in token and d.object_description not in token


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(0, 100))
def test_output_count_is_exact(n, seed):
    resolved = substitute(parse_prompt("a lighthouse"), {})
    images = sample(make_request(resolved, Mode.EXTRACTION_DIRECTLY, num_images=n, inference_steps=2, seed=seed), STUB)
    assert len(images) == n
    assert [im.seed for im in images] == list(range(seed, seed + n))


vectors = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=200)
@given(vectors, vectors)
def test_cosine_bounds_and_symmetry(u, v):
    a, b = EmbeddingVector(np.array(u), "clip-image"), EmbeddingVector(np.array(v), "clip-image")
    s = cosine(a, b)
    assert -1.0 <= s <= 1.0
    assert abs(s - cosine(b, a)) <= 1e-12


def _images(seeds):
    return [Image.fromarray(np.random.default_rng(s).integers(0, 256, (4, 4, 3), dtype=np.uint8)) for s in seeds]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 99), min_size=1, max_size=5), st.lists(st.integers(0, 99), min_size=1, max_size=5),
       st.randoms(use_true_random=False))
def test_set_score_is_permutation_invariant_and_bounded(gen_seeds, ref_seeds, rnd):
    gen, ref = _images(gen_seeds), _images(ref_seeds)
    score = set_alignment_score(gen, ref, EMBEDDER, "dino-image")
    assert -1.0 <= score <= 1.0
    rnd.shuffle(gen)
    rnd.shuffle(ref)
    assert abs(set_alignment_score(gen, ref, EMBEDDER, "dino-image") - score) <= 1e-12
