"""Weighted next-token training, vision-only fine-tuning and preference optimisation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint, split_prefix
from .codec import (
    SEG_VISION,
    Document,
    PackedBatch,
    VocabLayout,
    encode_text,
    flatten_grid,
    meta_for_grid,
)
from .numerics import AdamW, NonFiniteError, Tensor
from .synthetic import caption_for, corrupt_grid, pattern_grid
from .transformer import ModelConfig, TransformerModel

STAGES = ("pretrain1", "pretrain2", "qft", "dpo")


@dataclass
class TrainConfig:
    stage: str = "pretrain1"
    context_pretrain1: int = 256
    context_pretrain2: int = 512
    base_lr: float = 5e-5
    total_steps: int = 1000
    batch_rows: int = 4
    weight_decay: float = 0.1
    beta: float = 0.1
    ce_weight: float = 1.0
    vision_weight: float = 0.5
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if not self.context_pretrain1 < self.context_pretrain2:
            raise ValueError("stage-1 context must be shorter than stage-2 context")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.ce_weight < 0:
            raise ValueError("ce_weight must be non-negative")
        if self.total_steps <= 0 or self.batch_rows <= 0:
            raise ValueError("total_steps and batch_rows must be positive")

    @property
    def context_length(self) -> int:
        return self.context_pretrain1 if self.stage == "pretrain1" else self.context_pretrain2

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses ----------------------------------------------------------------------------


def weighted_ce(logits: Tensor, targets, weights) -> Tensor:
    """``sum(w * nll) / sum(w)`` over all positions; an all-zero weight vector gives 0."""
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights)
    if logits.shape[:-1] != targets.shape or targets.shape != weights.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets {targets.shape}, weights {weights.shape}")
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    logp = nx.log_softmax(flat, axis=-1)
    picked = logp[np.arange(flat.shape[0]), targets.reshape(-1)]
    w = weights.reshape(-1).astype(logits.dtype)
    total = float(w.sum())
    return (picked * Tensor(w)).sum() * (-1.0 / (total if total > 0 else 1.0))


def row_loss(model: TransformerModel, tokens, weights, doc_ids, train: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    """Next-token loss over packed rows: position j predicts token j+1 with weight ``weights[j+1]``."""
    tokens = np.asarray(tokens)
    logits = model.forward(tokens[:, :-1], np.asarray(doc_ids)[:, :-1], train=train, rng=rng)
    return weighted_ce(logits, tokens[:, 1:], np.asarray(weights)[:, 1:])


def qft_weights(doc: Document) -> np.ndarray:
    """Supervise only the vision stream (codes, EOL, EOF) with weight 1."""
    if doc.mode != "generation":
        raise ValueError("quality fine-tuning needs generation-mode documents")
    w = (doc.segments == SEG_VISION).astype(np.float32)
    w[0] = 0.0
    return w


def qft_batch(batch: PackedBatch) -> PackedBatch:
    """Packed rows with vision-only weights; understanding-mode documents are rejected."""
    used = sorted(set(batch.doc_ids[batch.doc_ids >= 0].tolist()))
    if any(batch.modes[d] != "generation" for d in used):
        raise ValueError("quality fine-tuning needs generation-mode documents")
    weights = (batch.segments == SEG_VISION).astype(np.float32)
    return PackedBatch(batch.tokens, weights, batch.segments, batch.doc_ids, batch.modes, batch.rejected, batch.layout)


def dpo_loss(lp_policy_w, lp_policy_l, lp_ref_w, lp_ref_l, beta: float = 0.1) -> Tensor:
    """Mean of ``-log sigmoid(beta * ((pw - rw) - (pl - rl)))``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    lift = lambda a: a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))
    pw, pl, rw, rl = map(lift, (lp_policy_w, lp_policy_l, lp_ref_w, lp_ref_l))
    margin = ((pw - rw) - (pl - rl)) * beta
    return nx.logsigmoid(margin).mean() * -1.0


# -- log-probabilities --------------------------------------------------------------------


def _pad_rows(seqs: list[np.ndarray], pad: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def response_logprobs(model: TransformerModel, prompts: list, responses: list, pad: int = 0) -> tuple[Tensor, Tensor]:
    """Per-sequence summed log-probabilities of each response given its prompt, in eval mode.

    Rows are right-padded; causality keeps padding from touching real positions.
    Also returns the per-position log-probabilities (B, S-1) for reuse.
    """
    seqs = [np.concatenate([np.asarray(p, np.int64), np.asarray(r, np.int64)]) for p, r in zip(prompts, responses)]
    if any(len(p) == 0 for p in prompts):
        raise ValueError("prompts must contain at least one token")
    if max(len(s) for s in seqs) > model.config.max_context:
        raise ValueError(f"sequence exceeds max context {model.config.max_context}")
    ids = _pad_rows(seqs, pad)
    mask = np.zeros((len(seqs), ids.shape[1] - 1), np.float32)
    for i, (p, r) in enumerate(zip(prompts, responses)):
        mask[i, len(p) - 1 : len(p) - 1 + len(r)] = 1.0
    if ids.shape[1] < 2:
        zero = Tensor(np.zeros(len(seqs), model.dtype))
        return zero, Tensor(np.zeros((len(seqs), 0), model.dtype))
    logits = model.forward(ids[:, :-1], train=False)
    b, s, v = logits.shape
    logp = nx.log_softmax(logits.reshape(-1, v), axis=-1)[np.arange(b * s), ids[:, 1:].reshape(-1)].reshape(b, s)
    per = logp * Tensor(mask.astype(model.dtype))
    return per.sum(axis=1), per


def sequence_logprob(model: TransformerModel, prompt, response) -> Tensor:
    """Sum of ``log p(response[i] | prompt, response[:i])`` under the model in eval mode."""
    if len(response) == 0:
        return Tensor(np.zeros((), model.dtype))
    total, _ = response_logprobs(model, [prompt], [response])
    return total.reshape(())


# -- steps ------------------------------------------------------------------------------------


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def select_rows(num_rows: int, batch_rows: int, rng: np.random.Generator) -> np.ndarray:
    if num_rows == 0:
        raise ValueError("dataset has no rows")
    return np.sort(rng.choice(num_rows, size=min(batch_rows, num_rows), replace=False))


def _check_context(batch: PackedBatch, model: TransformerModel, limit: int) -> None:
    if batch.context_length > limit:
        raise ValueError(f"rows of {batch.context_length} tokens exceed the stage context of {limit}")
    if batch.context_length - 1 > model.config.max_context:
        raise ValueError(f"rows of {batch.context_length} tokens exceed the model context {model.config.max_context}")


def _apply(loss: Tensor, model: TransformerModel, optimizer: AdamW, lr: float) -> None:
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"non-finite loss {float(loss.data)}; step aborted")
    optimizer.zero_grad()
    nx.backward(loss)
    optimizer.step(lr)


def pretrain_step(model: TransformerModel, batch: PackedBatch, optimizer: AdamW, config: TrainConfig,
                  schedule=nx.cosine_lr) -> dict:
    """One optimiser step on rows drawn with the step-seeded generator.

    The step index is the optimiser's own counter, so a resumed run draws the
    same rows, dropout masks and learning rate as an uninterrupted one.
    """
    _check_context(batch, model, config.context_length)
    step = optimizer.state.step
    rng = step_rng(config.seed, step)
    rows = select_rows(batch.num_rows, config.batch_rows, rng)
    lr = schedule(min(step, config.total_steps), config.total_steps, config.base_lr)
    loss = row_loss(model, batch.tokens[rows], batch.weights[rows], batch.doc_ids[rows], train=True, rng=rng)
    _apply(loss, model, optimizer, lr)
    return {"step": step + 1, "loss": float(loss.data), "lr": lr, "tokens": int((batch.doc_ids[rows] >= 0).sum())}


def qft_step(model: TransformerModel, batch: PackedBatch, optimizer: AdamW, config: TrainConfig) -> dict:
    """Vision-only supervision with the annealed schedule (linear decay to zero at the end)."""
    return pretrain_step(model, qft_batch(batch), optimizer, config, schedule=nx.annealed_lr)


def evaluate(model: TransformerModel, batch: PackedBatch, rows_per_chunk: int = 8) -> float:
    """Weighted CE over every row in eval mode (weights pooled across rows)."""
    num = den = 0.0
    with nx.no_grad():
        for start in range(0, batch.num_rows, rows_per_chunk):
            sl = slice(start, start + rows_per_chunk)
            w = batch.weights[sl, 1:]
            loss = row_loss(model, batch.tokens[sl], batch.weights[sl], batch.doc_ids[sl])
            num += float(loss.data) * float(w.sum())
            den += float(w.sum())
    return num / den if den else 0.0


# -- preference optimisation -----------------------------------------------------------------


@dataclass
class PreferenceTriplet:
    prompt: list[int]
    chosen: list[int]
    rejected: list[int]

    def validate(self, layout: VocabLayout) -> None:
        for name in ("prompt", "chosen", "rejected"):
            ids = getattr(self, name)
            if any(not 0 <= i < layout.total for i in ids):
                raise ValueError(f"{name} has ids outside the vocabulary")
        skeleton = lambda ids: [i if not layout.vision_base <= i < layout.total else -1 for i in ids]
        if skeleton(self.chosen) != skeleton(self.rejected):
            raise ValueError("chosen and rejected responses must share one structural skeleton")


def generation_prompt(caption, grid, layout: VocabLayout) -> list[int]:
    """``BOS caption SOV meta SOT``: the context preceding a vision stream."""
    cap = encode_text(caption) if isinstance(caption, str) else list(caption)
    return [layout.BOS, *cap, layout.SOV, *encode_text(meta_for_grid(grid)), layout.SOT]


def synthetic_triplets(n: int, layout: VocabLayout, rows: int = 4, cols: int = 4, corrupt: float = 0.5,
                       seed: int = 0) -> list[PreferenceTriplet]:
    """Chosen = a clean pattern grid, rejected = the same grid with a fraction of codes replaced."""
    rng = np.random.default_rng(seed)
    out = []
    for doc in range(n):
        grid = pattern_grid(doc, rows, cols, layout.codebook_size)
        bad = corrupt_grid(grid, corrupt, rng)
        out.append(PreferenceTriplet(
            generation_prompt(caption_for(doc), grid, layout),
            flatten_grid(grid, layout).tolist(),
            flatten_grid(bad, layout).tolist(),
        ))
    return out


def save_triplets(path, triplets: list[PreferenceTriplet]) -> None:
    lines = [json.dumps({"prompt": t.prompt, "chosen": t.chosen, "rejected": t.rejected}) for t in triplets]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_triplets(path) -> list[PreferenceTriplet]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(PreferenceTriplet(list(rec["prompt"]), list(rec["chosen"]), list(rec["rejected"])))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValueError(f"{path}: line {n}: bad triplet record ({e})") from None
    return out


def freeze(model: TransformerModel) -> TransformerModel:
    """A gradient-free copy used as the DPO reference."""
    ref = model.copy()
    for t in ref.params.values():
        t.requires_grad = False
        t.grad = None
    return ref


def dpo_objective(policy: TransformerModel, reference: TransformerModel, triplets: list[PreferenceTriplet],
                  beta: float, ce_weight: float) -> tuple[Tensor, dict]:
    """DPO loss plus ``ce_weight`` times the vision-only CE on the chosen responses."""
    prompts = [t.prompt for t in triplets] * 2
    responses = [t.chosen for t in triplets] + [t.rejected for t in triplets]
    n = len(triplets)
    with nx.no_grad():
        ref_lp, _ = response_logprobs(reference, prompts, responses)
    pol_lp, per = response_logprobs(policy, prompts, responses)
    pw, pl = pol_lp[:n], pol_lp[n:]
    rw, rl = Tensor(ref_lp.data[:n]), Tensor(ref_lp.data[n:])
    dpo = dpo_loss(pw, pl, rw, rl, beta)
    # vision-only CE on chosen: the mean NLL over chosen response tokens
    count = float(sum(len(t.chosen) for t in triplets))
    ce = per[:n].sum() * (-1.0 / count)
    total = dpo + ce * ce_weight if ce_weight else dpo
    margin = beta * ((pw.data - rw.data) - (pl.data - rl.data))
    return total, {"dpo": float(dpo.data), "ce": float(ce.data), "total": float(total.data),
                   "margin": float(margin.mean())}


def dpo_step(policy: TransformerModel, reference: TransformerModel, triplets: list[PreferenceTriplet],
             optimizer: AdamW, config: TrainConfig) -> dict:
    """One step of the combined objective; dropout is off so log-ratios are exact."""
    if any(t.requires_grad for t in reference.params.values()):
        raise AssertionError("reference model must be frozen")
    step = optimizer.state.step
    lr = nx.cosine_lr(min(step, config.total_steps), config.total_steps, config.base_lr)
    total, metrics = dpo_objective(policy, reference, triplets, config.beta, config.ce_weight)
    _apply(total, policy, optimizer, lr)
    if any(t.grad is not None for t in reference.params.values()):
        raise AssertionError("reference model received a gradient")
    metrics.update(step=step + 1, lr=lr)
    return metrics


# -- checkpoints -----------------------------------------------------------------------------


def save_training_state(path, model: TransformerModel, optimizer: AdamW | None = None, extra: dict | None = None) -> str:
    arrays = {f"model.{k}": v for k, v in model.state_arrays().items()}
    header = {"kind": "transformer", "model": model.config.to_dict(), **(extra or {})}
    if optimizer is not None:
        arrays.update({f"opt.{k}": v for k, v in optimizer.state.arrays().items()})
        st = optimizer.state
        header["optimizer"] = {"lr": st.lr, "weight_decay": st.weight_decay, "betas": list(st.betas),
                               "eps": st.eps, "step": st.step}
    return save_checkpoint(path, arrays, header)


def load_training_state(path, dtype=np.float32) -> tuple[TransformerModel, AdamW | None, dict]:
    arrays, header = load_checkpoint(path)
    if header.get("kind") != "transformer":
        raise ValueError(f"{path}: not a transformer checkpoint (kind={header.get('kind')!r})")
    model = TransformerModel(ModelConfig(**header["model"]), dtype)
    model.load_state_arrays(split_prefix(arrays, "model."))
    optimizer = None
    if "optimizer" in header:
        o = header["optimizer"]
        optimizer = AdamW(model.params, o["lr"], o["weight_decay"], tuple(o["betas"]), o["eps"])
        optimizer.state.step = o["step"]
        optimizer.state.load_arrays(split_prefix(arrays, "opt."))
    return model, optimizer, header
