import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitok import numerics as nx
from unitok.codec import assemble_document, flatten_grid, layout_vocab, pack
from unitok.numerics import Tensor, finite_difference_check
from unitok.synthetic import caption_for, pattern_grid
from unitok.training import (
    PreferenceTriplet,
    TrainConfig,
    dpo_loss,
    dpo_objective,
    dpo_step,
    freeze,
    load_training_state,
    load_triplets,
    pretrain_step,
    qft_batch,
    qft_step,
    qft_weights,
    response_logprobs,
    row_loss,
    save_training_state,
    save_triplets,
    sequence_logprob,
    synthetic_triplets,
    weighted_ce,
)
from unitok.transformer import ModelConfig, TransformerModel
from unitok.vq import VisionGrid

LAYOUT = layout_vocab()


def tiny_model(dtype=np.float32, **kw):
    base = dict(hidden=16, intermediate=32, heads=2, kv_heads=1, max_context=128)
    base.update(kw)
    return TransformerModel(ModelConfig(**base), dtype=dtype)


def nll(logits, targets):
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    return -logp[np.arange(len(targets)), targets]


# -- weighted cross-entropy ------------------------------------------------------------


def test_unit_weights_give_mean_ce():
    rng = np.random.default_rng(0)
    logits, t = rng.normal(size=(6, 9)), rng.integers(0, 9, 6)
    got = float(weighted_ce(Tensor(logits, dtype=np.float64), t, np.ones(6)).data)
    assert got == pytest.approx(nll(logits, t).mean(), rel=1e-12)


def test_zero_weights_give_zero():
    assert float(weighted_ce(Tensor(np.ones((3, 4))), np.zeros(3, int), np.zeros(3)).data) == 0.0


def test_two_token_hand_example():
    rng = np.random.default_rng(1)
    logits, t = rng.normal(size=(2, 5)), np.array([1, 3])
    a, b = nll(logits, t)
    got = float(weighted_ce(Tensor(logits, dtype=np.float64), t, np.array([1.0, 0.5])).data)
    assert got == pytest.approx((a + 0.5 * b) / 1.5, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_weighted_ce_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    logits, t, w = rng.normal(size=(7, 5)), rng.integers(0, 5, 7), rng.random(7)
    f = lambda ww: float(weighted_ce(Tensor(logits, dtype=np.float64), t, ww).data)
    assert f(w * c) == pytest.approx(f(w), rel=1e-9)


def test_weighted_ce_length_mismatch():
    with pytest.raises(ValueError):
        weighted_ce(Tensor(np.zeros((3, 4))), np.zeros(2, int), np.ones(3))


def test_weighted_ce_gradient():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(5, 7)), requires_grad=True, dtype=np.float64)
    t, w = rng.integers(0, 7, 5), np.array([1, 0.5, 0.5, 0, 1])
    assert finite_difference_check(lambda: weighted_ce(x, t, w), [x]) < 1e-3


def test_pure_text_loss_ignores_vision_weighting():
    m = tiny_model()
    rows = np.array([[LAYOUT.BOS, *b"hello there", LAYOUT.EOS]])
    docs = np.zeros_like(rows)
    w = np.ones(rows.shape, np.float32)
    w[:, 0] = 0
    vision = LAYOUT.is_vision(rows)
    a = row_loss(m, rows, np.where(vision, 0.5, w), docs)
    b = row_loss(m, rows, np.where(vision, 1.0, w), docs)
    assert float(a.data) == float(b.data)


# -- config --------------------------------------------------------------------------------


def test_train_config_validation():
    assert TrainConfig().context_length == 256
    assert TrainConfig(stage="pretrain2").context_length == 512
    for kw in (dict(stage="warmup"), dict(context_pretrain1=512), dict(beta=0), dict(ce_weight=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


# -- pretraining / qft ------------------------------------------------------------------------


def small_corpus(n=6, mode="generation"):
    docs = [assemble_document(caption_for(d)[:12], pattern_grid(d, 3, 3, 64), LAYOUT, mode) for d in range(n)]
    return docs, pack(docs, 96, LAYOUT)


def test_pretrain_step_reports_metrics_and_checks_context():
    m = tiny_model()
    _, batch = small_corpus()
    opt = nx.AdamW(m.params, lr=1e-3)
    cfg = TrainConfig(base_lr=1e-3, total_steps=10, batch_rows=2)
    out = pretrain_step(m, batch, opt, cfg)
    assert set(out) == {"step", "loss", "lr", "tokens"} and out["lr"] == 1e-3 and out["step"] == 1
    big = pack(small_corpus()[0], 300, LAYOUT)
    with pytest.raises(ValueError, match="stage context"):
        pretrain_step(m, big, opt, cfg)


def test_nonfinite_loss_aborts():
    m = tiny_model()
    _, batch = small_corpus()
    m.params["head"].data[:] = np.nan
    opt = nx.AdamW(m.params)
    before = m.params["embed"].data.copy()
    with pytest.raises(nx.NonFiniteError):
        pretrain_step(m, batch, opt, TrainConfig(total_steps=5))
    assert np.array_equal(m.params["embed"].data, before) and opt.state.step == 0


def test_qft_weights_cover_exactly_the_vision_stream():
    g = pattern_grid(3, 4, 5, 64)
    for caption in ("", "a long caption about nothing in particular"):
        doc = assemble_document(caption, g, LAYOUT)
        w = qft_weights(doc)
        assert int((w > 0).sum()) == len(flatten_grid(g, LAYOUT))
        assert np.all(w[doc.segments == 1] == 0)
        assert doc.tokens[w > 0].tolist() == flatten_grid(g, LAYOUT).tolist()


def test_qft_rejects_understanding_mode():
    docs, batch = small_corpus(mode="understanding")
    with pytest.raises(ValueError):
        qft_weights(docs[0])
    with pytest.raises(ValueError):
        qft_batch(batch)


def test_qft_step_uses_annealed_schedule():
    m = tiny_model()
    _, batch = small_corpus()
    opt = nx.AdamW(m.params)
    cfg = TrainConfig(stage="qft", base_lr=1e-3, total_steps=20, batch_rows=2)
    lrs = [qft_step(m, batch, opt, cfg)["lr"] for _ in range(20)]
    assert lrs[0] == 1e-3 and lrs[-1] == nx.annealed_lr(19, 20, 1e-3)
    # linear from the knee at step 18 down to zero at step 20
    assert lrs[-1] == pytest.approx(lrs[-2] / 2, rel=1e-12)


def test_resume_matches_uninterrupted(tmp_path):
    _, batch = small_corpus()
    cfg = TrainConfig(base_lr=3e-3, total_steps=8, batch_rows=2)

    straight = tiny_model()
    opt = nx.AdamW(straight.params, lr=3e-3)
    for _ in range(8):
        pretrain_step(straight, batch, opt, cfg)

    first = tiny_model()
    opt = nx.AdamW(first.params, lr=3e-3)
    for _ in range(3):
        pretrain_step(first, batch, opt, cfg)
    save_training_state(tmp_path / "k.ckpt", first, opt)
    resumed, opt2, _ = load_training_state(tmp_path / "k.ckpt")
    for _ in range(5):
        pretrain_step(resumed, batch, opt2, cfg)
    for k in straight.params:
        assert resumed.params[k].data.tobytes() == straight.params[k].data.tobytes(), k


# -- log-probabilities ----------------------------------------------------------------------------


def test_sequence_logprob_basics():
    m = tiny_model()
    assert float(sequence_logprob(m, [LAYOUT.BOS], []).data) == 0.0
    lp = float(sequence_logprob(m, [LAYOUT.BOS, 5], [270, 271, LAYOUT.EOL]).data)
    assert lp <= 0


def test_sequence_logprob_matches_incremental_cache():
    m = tiny_model()
    prompt, resp = [LAYOUT.BOS, 7, 8, LAYOUT.SOT], [280, 281, LAYOUT.EOL, 290]
    total = float(sequence_logprob(m, prompt, resp).data)
    cache = m.new_cache()
    with nx.no_grad():
        logits = m.forward(np.array(prompt), cache=cache).data[0, -1]
        acc = 0.0
        for tok in resp:
            z = logits - logits.max()
            acc += float(z[tok] - np.log(np.exp(z).sum()))
            logits = m.forward(np.array([tok]), cache=cache).data[0, -1]
    assert total == pytest.approx(acc, abs=1e-5)


def test_batched_logprobs_ignore_padding():
    m = tiny_model()
    prompts, responses = [[LAYOUT.BOS, 1], [LAYOUT.BOS, 2, 3, 4]], [[270, 271], [272]]
    together, _ = response_logprobs(m, prompts, responses)
    for i in range(2):
        alone = float(sequence_logprob(m, prompts[i], responses[i]).data)
        assert float(together.data[i]) == pytest.approx(alone, abs=1e-5)


# -- DPO ------------------------------------------------------------------------------------------


@given(st.floats(-50, 0), st.floats(-50, 0), st.floats(0.01, 2))
def test_dpo_zero_margin_is_log2(a, b, beta):
    assert float(dpo_loss(a, b, a, b, beta).data) == pytest.approx(math.log(2), abs=1e-12)


def test_dpo_hand_example_and_limits():
    assert float(dpo_loss(1.0, -1.0, 0.0, 0.0, 0.1).data) == pytest.approx(-math.log(1 / (1 + math.exp(-0.2))), rel=1e-12)
    assert float(dpo_loss(1.0, -1.0, 0.0, 0.0, 0.1).data) == pytest.approx(0.5981, abs=1e-4)
    assert float(dpo_loss(1e4, 0.0, 0.0, 0.0, 1.0).data) < 1e-12
    assert float(dpo_loss(-1e4, 0.0, 0.0, 0.0, 1.0).data) == pytest.approx(1e4)


def test_dpo_monotone_in_policy_logprobs():
    pw = Tensor(np.array([-3.0, -1.0]), requires_grad=True, dtype=np.float64)
    pl = Tensor(np.array([-2.0, -4.0]), requires_grad=True, dtype=np.float64)
    loss = dpo_loss(pw, pl, np.array([-2.5, -1.5]), np.array([-2.0, -3.0]), 0.3)
    nx.backward(loss)
    assert np.all(pw.grad < 0) and np.all(pl.grad > 0)
    assert finite_difference_check(lambda: dpo_loss(pw, pl, np.array([-2.5, -1.5]), np.array([-2.0, -3.0]), 0.3),
                                   [pw, pl], eps=1e-5) < 1e-3


def test_triplets_share_skeleton_and_roundtrip(tmp_path):
    trips = synthetic_triplets(4, LAYOUT, 3, 3)
    for t in trips:
        t.validate(LAYOUT)
        assert t.chosen != t.rejected
    save_triplets(tmp_path / "t.jsonl", trips)
    assert load_triplets(tmp_path / "t.jsonl") == trips
    bad = PreferenceTriplet(trips[0].prompt, trips[0].chosen, trips[0].rejected[:-1] + [LAYOUT.EOF])
    with pytest.raises(ValueError, match="skeleton"):
        bad.validate(LAYOUT)


def test_dpo_step_zero_init_and_frozen_reference():
    policy = tiny_model()
    ref = freeze(policy)
    snapshot = {k: v.data.copy() for k, v in ref.params.items()}
    trips = synthetic_triplets(3, LAYOUT, 3, 3)
    opt = nx.AdamW(policy.params, lr=1e-3)
    cfg = TrainConfig(stage="dpo", base_lr=1e-3, total_steps=5)
    first = dpo_step(policy, ref, trips, opt, cfg)
    assert first["dpo"] == pytest.approx(math.log(2), abs=1e-5)
    for _ in range(3):
        dpo_step(policy, ref, trips, opt, cfg)
    for k, v in ref.params.items():
        assert v.data.tobytes() == snapshot[k].tobytes()
    ref.params["embed"].requires_grad = True
    with pytest.raises(AssertionError):
        dpo_step(policy, ref, trips, opt, cfg)


def test_dpo_without_ce_is_pure_dpo():
    policy = tiny_model()
    ref = freeze(policy)
    policy.params["head"].data += 0.01
    total, parts = dpo_objective(policy, ref, synthetic_triplets(2, LAYOUT, 3, 3), 0.1, 0.0)
    assert parts["total"] == parts["dpo"]


def test_dpo_objective_gradient():
    policy = tiny_model(np.float64)
    ref = freeze(policy)
    policy.params["head"].data += np.random.default_rng(0).normal(0, 0.05, policy.params["head"].shape)
    trips = synthetic_triplets(2, LAYOUT, 2, 2)
    f = lambda: dpo_objective(policy, ref, trips, 0.1, 1.0)[0]
    names = ["embed", "layers.0.attn.wk", "layers.1.mlp.down", "final_norm", "head"]
    assert finite_difference_check(f, [policy.params[n] for n in names], eps=1e-4, samples=6) < 1e-2
