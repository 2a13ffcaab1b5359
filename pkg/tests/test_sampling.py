import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitok.codec import assemble_document, layout_vocab, parse_document, parse_vision_stream
from unitok.numerics import Tensor
from unitok.sampling import (
    GenerationPlan,
    SampleParams,
    caption_image,
    cfg_logits,
    extend_video,
    generate_image,
    sample_token,
    top_k_top_p_filter,
)
from unitok.transformer import ModelConfig, TransformerModel
from unitok.vq import VisionGrid

LAYOUT = layout_vocab()


@pytest.fixture(scope="module")
def model():
    return TransformerModel(ModelConfig(hidden=32, intermediate=64, heads=4, kv_heads=2, max_context=160))


# -- filtering --------------------------------------------------------------------------


def test_full_k_and_p_one_is_identity():
    logits = np.random.default_rng(0).normal(size=(3, 50))
    np.testing.assert_array_equal(top_k_top_p_filter(logits, 50, 1.0), logits)


def test_k_one_is_argmax_point_mass():
    logits = np.array([0.1, 2.0, -1.0, 2.0])
    out = top_k_top_p_filter(logits, 1)
    assert np.isfinite(out).tolist() == [False, True, False, False]
    rng = np.random.default_rng(0)
    assert {sample_token(out, rng) for _ in range(20)} == {1}


def test_top_p_hand_example():
    logits = np.log(np.array([4.0, 3.0, 2.0, 1.0]) / 10)
    out = top_k_top_p_filter(logits, 4, 0.7)
    assert np.isfinite(out).tolist() == [True, True, False, False]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 30), st.floats(0.05, 1.0))
def test_survivors_are_a_probability_prefix(seed, k, p):
    logits = np.random.default_rng(seed).normal(size=30) * 3
    keep = np.isfinite(top_k_top_p_filter(logits, k, p))
    order = np.argsort(-logits, kind="stable")
    ranked = keep[order]
    n = int(ranked.sum())
    assert n >= 1 and ranked[:n].all() and not ranked[n:].any() and n <= k


def test_filter_rejects_bad_arguments():
    with pytest.raises(ValueError):
        top_k_top_p_filter(np.zeros(4), 0)
    with pytest.raises(ValueError):
        top_k_top_p_filter(np.zeros(4), 2, 0.0)
    with pytest.raises(ValueError):
        SampleParams(temperature=0)


def test_default_sampling_params():
    p = SampleParams()
    assert (p.top_p, p.guidance) == (1.0, 5.0)
    assert p.resolved_top_k(64) == 64 and p.resolved_top_k(32768) == 16384


# -- guidance ----------------------------------------------------------------------------


def test_cfg_identities():
    rng = np.random.default_rng(1)
    c, u = rng.normal(size=20), rng.normal(size=20)
    assert np.array_equal(cfg_logits(c, u, 1.0), c)
    assert np.array_equal(cfg_logits(c, u, 0.0), u)
    assert np.array_equal(cfg_logits(c, c, 5.0), c)
    np.testing.assert_allclose(cfg_logits(c, u, 3.0), u + 3 * (c - u))
    with pytest.raises(ValueError):
        cfg_logits(c, u[:5], 2.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 10.0), st.floats(-50, 50))
def test_cfg_argmax_shift_invariant(seed, s, offset):
    rng = np.random.default_rng(seed)
    c, u = rng.normal(size=12), rng.normal(size=12)
    shift = np.full(12, offset)
    assert np.argmax(cfg_logits(c + shift, u + shift, s)) == np.argmax(cfg_logits(c, u, s))


# -- plans and generation -------------------------------------------------------------------


def test_plan_skeleton():
    plan = GenerationPlan.build((2, 2, 3), True, LAYOUT)
    assert plan.free == 12 and plan.free + plan.structural == len(plan)
    assert plan.skeleton[-1] == LAYOUT.EOV and list(plan.skeleton[:4]) == [-1, -1, -1, LAYOUT.EOL]


@pytest.mark.parametrize("seed", range(5))
def test_generated_stream_parses(model, seed):
    params = SampleParams(seed=seed, guidance=3.0)
    grid, stream = generate_image(model, LAYOUT, "a cat", (1, 4, 5), params, return_stream=True)
    assert grid.dims == (1, 4, 5)
    plan = GenerationPlan.build((1, 4, 5), False, LAYOUT)
    free = plan.skeleton < 0
    assert np.all(LAYOUT.is_vision(stream[free]))
    assert np.array_equal(stream[~free], plan.skeleton[~free])
    idx, video = parse_vision_stream(stream[:-1], LAYOUT)
    assert np.array_equal(idx, grid.indices) and not video
    parse_document(assemble_document("a cat", grid, LAYOUT).tokens, LAYOUT)


def test_generation_is_seed_deterministic(model):
    a = generate_image(model, LAYOUT, "x", (1, 3, 3), SampleParams(seed=4))
    b = generate_image(model, LAYOUT, "x", (1, 3, 3), SampleParams(seed=4))
    c = generate_image(model, LAYOUT, "x", (1, 3, 3), SampleParams(seed=5))
    assert a == b and a != c


def test_video_generation_has_eof_skeleton(model):
    grid, stream = generate_image(model, LAYOUT, "", (2, 2, 2), SampleParams(seed=0), ct=2, fps=2, return_stream=True)
    assert grid.kind == "video" and grid.ct == 2
    assert int(np.sum(stream == LAYOUT.EOF)) == 2


def test_context_too_small(model):
    with pytest.raises(ValueError, match="model context"):
        generate_image(model, LAYOUT, "x", (1, 12, 12), SampleParams())


def test_vocab_mismatch_is_rejected():
    m = TransformerModel(ModelConfig(vocab_size=300))
    with pytest.raises(ValueError, match="300 != layout total 328"):
        generate_image(m, LAYOUT, "x", (1, 2, 2))


# -- extension -----------------------------------------------------------------------------------


def video_prefix(t=2, h=2, w=3, seed=0):
    return VisionGrid(np.random.default_rng(seed).integers(0, 64, (t, h, w)), 64, 2, 4, 2)


def test_extend_zero_is_noop(model):
    prefix = video_prefix()
    assert extend_video(model, LAYOUT, prefix, 0) == prefix


@pytest.mark.parametrize("seed", range(3))
def test_extend_keeps_prefix(model, seed):
    prefix = video_prefix(seed=seed)
    out = extend_video(model, LAYOUT, prefix, 3, SampleParams(seed=seed))
    assert out.dims == (5, 2, 3)
    assert np.array_equal(out.indices[:2], prefix.indices)
    assert (out.ct, out.cs, out.fps) == (prefix.ct, prefix.cs, prefix.fps)


def test_iterative_extension_matches_structure(model):
    prefix = video_prefix()
    once = extend_video(model, LAYOUT, prefix, 4, SampleParams(seed=1))
    twice = extend_video(model, LAYOUT, extend_video(model, LAYOUT, prefix, 2, SampleParams(seed=1)), 2,
                         SampleParams(seed=2))
    assert once.dims == twice.dims
    assert np.array_equal(once.indices[:2], twice.indices[:2])


def test_extension_rewindows_past_context(model):
    # 160 positions hold the context plus roughly five 4x4 frames; asking for more forces re-windowing
    prefix = video_prefix(t=2, h=4, w=4)
    out = extend_video(model, LAYOUT, prefix, 8, SampleParams(seed=0))
    assert out.dims == (10, 4, 4) and np.array_equal(out.indices[:2], prefix.indices)


def test_extend_rejects_images(model):
    with pytest.raises(ValueError):
        extend_video(model, LAYOUT, VisionGrid(np.zeros((1, 2, 2), int), 64), 1)


# -- captioning ----------------------------------------------------------------------------------


def test_caption_only_text_and_eos(model):
    grid = VisionGrid(np.zeros((1, 3, 3), int), 64, 1, 4)
    text, ids = caption_image(model, LAYOUT, grid, SampleParams(seed=0), max_tokens=20, return_ids=True)
    assert len(ids) <= 20 and all(0 <= i < LAYOUT.text_size for i in ids)


class EosModel:
    """Stub whose every next-token distribution peaks on EOS."""

    config = ModelConfig()

    def new_cache(self):
        return None

    def forward(self, ids, cache=None):
        logits = np.zeros((1, ids.shape[-1], 328), np.float32)
        logits[..., LAYOUT.EOS] = 10.0
        return Tensor(logits)


def test_immediate_eos_gives_empty_caption():
    grid = VisionGrid(np.zeros((1, 2, 2), int), 64, 1, 4)
    assert caption_image(EosModel(), LAYOUT, grid, SampleParams(top_k=1)) == ""
