"""Guided, structurally constrained autoregressive decoding."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .codec import VocabLayout, decode_text, encode_text, flatten_grid, format_meta, stream_length
from .transformer import TransformerModel
from .vq.media import VisionGrid

DEFAULT_MAX_TOP_K = 16384


@dataclass
class SampleParams:
    """``top_k=None`` means ``min(16384, codebook size)``."""

    top_k: int | None = None
    top_p: float = 1.0
    guidance: float = 5.0
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def resolved_top_k(self, codebook_size: int) -> int:
        return min(DEFAULT_MAX_TOP_K, codebook_size) if self.top_k is None else self.top_k

    def to_dict(self) -> dict:
        return asdict(self)


def top_k_top_p_filter(logits: np.ndarray, k: int, p: float = 1.0) -> np.ndarray:
    """Keep the ``k`` largest logits, then the shortest prefix of them whose
    renormalised probability mass reaches ``p``; everything else becomes -inf.

    Ties are broken towards the lower index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    logits = np.asarray(logits, dtype=np.float64)
    order = np.argsort(-logits, axis=-1, kind="stable")
    ranked = np.take_along_axis(logits, order, axis=-1)
    keep = np.zeros(ranked.shape, dtype=bool)
    keep[..., : min(k, ranked.shape[-1])] = True
    keep &= np.isfinite(ranked) | (np.arange(ranked.shape[-1]) == 0)
    if p < 1.0:
        z = np.where(keep, ranked, -np.inf)
        probs = np.exp(z - z[..., :1])
        probs /= probs.sum(axis=-1, keepdims=True)
        before = np.cumsum(probs, axis=-1) - probs
        # tolerance so that an exact hit on p (0.4 + 0.3 == 0.7) stops the prefix
        keep &= before < p - 1e-12
    out = np.full(logits.shape, -np.inf)
    np.put_along_axis(out, order, np.where(keep, ranked, -np.inf), axis=-1)
    return out


def cfg_logits(cond: np.ndarray, uncond: np.ndarray, scale: float) -> np.ndarray:
    """``uncond + scale * (cond - uncond)``; scales 1 and 0 return the inputs exactly."""
    cond, uncond = np.asarray(cond), np.asarray(uncond)
    if cond.shape != uncond.shape:
        raise ValueError(f"cond/uncond shape mismatch: {cond.shape} vs {uncond.shape}")
    if scale == 1.0:
        return cond.copy()
    if scale == 0.0:
        return uncond.copy()
    return uncond + scale * (cond - uncond)


def sample_token(logits: np.ndarray, rng: np.random.Generator, temperature: float = 1.0) -> int:
    """Inverse-CDF draw from ``softmax(logits / temperature)``; one uniform per call."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - np.max(z)
    prob = np.exp(z)
    cdf = np.cumsum(prob)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


@dataclass
class GenerationPlan:
    """The vision stream skeleton for fixed grid dims: -1 marks a free (codebook) slot."""

    dims: tuple[int, int, int]
    video: bool
    skeleton: np.ndarray

    @classmethod
    def build(cls, dims, video: bool, layout: VocabLayout, with_eov: bool = True) -> "GenerationPlan":
        t, h, w = dims
        if min(dims) < 1:
            raise ValueError(f"grid dims must be positive, got {dims}")
        if t > 1 and not video:
            raise ValueError("multi-frame grids are videos")
        row = [-1] * w + [layout.EOL]
        frame = row * h + ([layout.EOF] if video else [])
        skeleton = np.asarray(frame * t + ([layout.EOV] if with_eov else []), dtype=np.int64)
        return cls(tuple(int(d) for d in dims), video, skeleton)

    @property
    def free(self) -> int:
        return int(np.sum(self.skeleton < 0))

    @property
    def structural(self) -> int:
        return int(np.sum(self.skeleton >= 0))

    def __len__(self) -> int:
        return len(self.skeleton)


class _Stream:
    """One incremental decoding context backed by a KV cache."""

    def __init__(self, model: TransformerModel, prompt):
        self.model = model
        self.cache = model.new_cache()
        self.logits = self._feed(np.asarray(prompt, dtype=np.int64))

    def _feed(self, ids: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return self.model.forward(ids[None], cache=self.cache).data[0, -1].astype(np.float64)

    def push(self, token: int) -> None:
        self.logits = self._feed(np.array([token]))


def _vision_mask(layout: VocabLayout, vocab: int) -> np.ndarray:
    mask = np.zeros(vocab, dtype=bool)
    mask[layout.vision_base : layout.total] = True
    return mask


def _check_vocab(model: TransformerModel, layout: VocabLayout) -> None:
    if model.config.vocab_size != layout.total:
        raise ValueError(f"model vocabulary {model.config.vocab_size} != layout total {layout.total}")


def decode_vision(model: TransformerModel, layout: VocabLayout, cond_prompt, uncond_prompt, plan: GenerationPlan,
                  params: SampleParams, rng: np.random.Generator) -> np.ndarray:
    """Fill the free slots of ``plan`` by guided sampling; returns the full stream (including EOV)."""
    _check_vocab(model, layout)
    need = len(cond_prompt) + len(plan) - 1
    if need > model.config.max_context:
        raise ValueError(f"plan needs {need} positions but the model context is {model.config.max_context}")
    cond = _Stream(model, cond_prompt)
    # with scale 1 the guided logits are the conditional ones, so skip the second context
    uncond = _Stream(model, uncond_prompt) if params.guidance != 1.0 else None
    allowed = _vision_mask(layout, model.config.vocab_size)
    k = params.resolved_top_k(layout.codebook_size)
    out = plan.skeleton.copy()
    for i, forced in enumerate(plan.skeleton):
        if forced < 0:
            logits = cond.logits if uncond is None else cfg_logits(cond.logits, uncond.logits, params.guidance)
            logits = np.where(allowed, logits, -np.inf)
            out[i] = sample_token(top_k_top_p_filter(logits, k, params.top_p), rng, params.temperature)
        if i == len(out) - 1:
            break
        cond.push(int(out[i]))
        if uncond is not None:
            uncond.push(int(out[i]))
    return out


def _grid_from_stream(stream: np.ndarray, plan: GenerationPlan, layout: VocabLayout) -> np.ndarray:
    free = stream[plan.skeleton < 0] - layout.vision_base
    return free.reshape(plan.dims)


def generation_context(layout: VocabLayout, caption, meta: str) -> list[int]:
    cap = encode_text(caption) if isinstance(caption, str) else list(caption)
    return [layout.BOS, *cap, layout.SOV, *encode_text(meta), layout.SOT]


def generate_image(model: TransformerModel, layout: VocabLayout, caption, dims=(1, 8, 8),
                   params: SampleParams | None = None, cs: int = 4, ct: int = 1, fps: int = 1,
                   return_stream: bool = False):
    """Sample a grid of ``dims`` = (frames, rows, cols) for ``caption``.

    Layout tokens are forced from the declared dims; codebook slots are drawn
    from guided, filtered logits restricted to the vision region. Multi-frame
    dims produce a video grid with temporal factor ``ct``.
    """
    params = params or SampleParams()
    t, h, w = dims
    video = t * ct > 1
    eff_ct = ct if video else 1
    kind = "video" if video else "image"
    meta = format_meta(h * cs, w * cs, kind, fps if video else 1, t * eff_ct)
    plan = GenerationPlan.build(dims, video, layout)
    rng = np.random.default_rng(params.seed)
    stream = decode_vision(model, layout, generation_context(layout, caption, meta),
                           generation_context(layout, [], meta), plan, params, rng)
    grid = VisionGrid(_grid_from_stream(stream, plan, layout), layout.codebook_size, eff_ct, cs, fps if video else 1)
    return (grid, stream) if return_stream else grid


def extend_video(model: TransformerModel, layout: VocabLayout, prefix: VisionGrid, frames: int,
                 params: SampleParams | None = None, caption="", return_stream: bool = False):
    """Append ``frames`` new latent frames after ``prefix``.

    The context is the generation document cut after the prefix's last EOF,
    with meta text declaring the extended duration. When the context would
    overflow, the oldest frames are dropped from the window and decoding
    continues in chunks. ``return_stream`` also returns the sampled tokens of
    the new frames, structural markers included.
    """
    if prefix.kind != "video":
        raise ValueError("extend_video needs a video prefix")
    if frames < 0:
        raise ValueError("frames must be >= 0")
    if frames == 0:
        same = prefix.with_indices(prefix.indices.copy())
        return (same, np.zeros(0, np.int64)) if return_stream else same
    _check_vocab(model, layout)
    params = params or SampleParams()
    rng = np.random.default_rng(params.seed)
    t, h, w = prefix.dims
    total = t + frames
    _, hs, ws = prefix.source_dims
    meta = format_meta(hs, ws, "video", prefix.fps, total * prefix.ct)
    cond_head = generation_context(layout, caption, meta)
    uncond_head = generation_context(layout, [], meta)
    frame_len = stream_length((1, h, w), True)
    limit = model.config.max_context
    if len(cond_head) + frame_len > limit:
        raise ValueError(f"a single frame ({frame_len} tokens) plus context does not fit in {limit} positions")

    done = [prefix.indices[i] for i in range(t)]
    sampled = []
    while len(done) < total:
        keep = len(done)
        while keep > 0 and len(cond_head) + (keep + 1) * frame_len > limit:
            keep -= 1
        room = (limit - len(cond_head)) // frame_len - keep
        new = min(total - len(done), room)
        window = flatten_grid(prefix.with_indices(np.stack(done[len(done) - keep :])), layout).tolist() if keep else []
        plan = GenerationPlan.build((new, h, w), True, layout, with_eov=False)
        stream = decode_vision(model, layout, cond_head + window, uncond_head + window, plan, params, rng)
        done.extend(_grid_from_stream(stream, plan, layout))
        sampled.append(np.asarray(stream))
    out = prefix.with_indices(np.stack(done))
    return (out, np.concatenate(sampled)) if return_stream else out


def caption_image(model: TransformerModel, layout: VocabLayout, grid: VisionGrid, params: SampleParams | None = None,
                  max_tokens: int = 64, return_ids: bool = False):
    """Understanding mode: sample text after ``BOS SOV meta SOT vision EOV`` until EOS.

    Only text ids and EOS can be drawn; guidance does not apply here.
    """
    _check_vocab(model, layout)
    params = params or SampleParams()
    rng = np.random.default_rng(params.seed)
    t, h, w = grid.source_dims
    meta = format_meta(h, w, grid.kind, grid.fps, t)
    prompt = [layout.BOS, layout.SOV, *encode_text(meta), layout.SOT, *flatten_grid(grid, layout).tolist(), layout.EOV]
    budget = min(max_tokens, model.config.max_context - len(prompt) + 1)
    if budget < 1:
        raise ValueError("grid does not leave room for a caption in the model context")
    allowed = np.zeros(model.config.vocab_size, dtype=bool)
    allowed[: layout.text_size] = True
    allowed[layout.EOS] = True
    k = params.top_k if params.top_k is not None else int(allowed.sum())
    ctx = _Stream(model, prompt)
    out: list[int] = []
    for i in range(budget):
        logits = np.where(allowed, ctx.logits, -np.inf)
        tok = sample_token(top_k_top_p_filter(logits, k, params.top_p), rng, params.temperature)
        if tok == layout.EOS:
            break
        out.append(tok)
        if i < budget - 1:
            ctx.push(tok)
    text = decode_text(out)
    return (text, out) if return_ids else text
