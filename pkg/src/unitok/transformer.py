"""Decoder-only transformer: RMSNorm, grouped-query attention with RoPE, SwiGLU, no biases."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor, make_op


@dataclass
class ModelConfig:
    vocab_size: int = 328
    layers: int = 2
    hidden: int = 64
    intermediate: int = 128
    heads: int = 4
    kv_heads: int = 2
    rope_base: float = 1e6
    max_context: int = 512
    dropout: float = 0.1
    norm_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.heads % self.kv_heads:
            raise ValueError(f"heads ({self.heads}) must be divisible by kv_heads ({self.kv_heads})")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if (self.hidden // self.heads) % 2:
            raise ValueError("head dim must be even for rotary embeddings")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


# -- blocks ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if x.shape[-1] != gain.shape[0]:
        raise ValueError(f"rmsnorm gain has {gain.shape[0]} entries for last dim {x.shape[-1]}")
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * (ms + eps) ** -0.5 * gain


def rope_angles(positions: np.ndarray, head_dim: int, base: float, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """cos and sin tables of shape positions.shape + (head_dim // 2,)."""
    if head_dim % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {head_dim}")
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: Tensor, positions: np.ndarray, base: float) -> Tensor:
    """Rotate (first half, second half) pairs of the last axis by ``position / base**(2i/d)``.

    ``x`` is (..., seq, head_dim); ``positions`` broadcasts against (..., seq).
    """
    d = x.shape[-1]
    cos, sin = rope_angles(positions, d, base, x.dtype)
    h = d // 2

    def rotate(a, s):
        a1, a2 = a[..., :h], a[..., h:]
        return np.concatenate([a1 * cos - a2 * s, a1 * s + a2 * cos], axis=-1)

    # the adjoint of a rotation is the rotation by the negative angle
    return make_op(rotate(x.data, sin), (x,), lambda g: (rotate(g, -sin),), "rope")


def attention_mask(doc_q: np.ndarray, pos_q: np.ndarray, doc_k: np.ndarray, pos_k: np.ndarray) -> np.ndarray:
    """Allowed (query, key) pairs: same document and key not in the future. Shape (B, 1, 1, Sq, Sk)."""
    same = doc_q[:, :, None] == doc_k[:, None, :]
    causal = pos_k[:, None, :] <= pos_q[:, :, None]
    return (same & causal)[:, None, None]


def gqa_attention(x: Tensor, p: dict[str, Tensor], prefix: str, cfg: ModelConfig, doc_ids: np.ndarray,
                  positions: np.ndarray, train: bool = False, rng: np.random.Generator | None = None,
                  cache: "LayerCache | None" = None, return_weights: bool = False):
    """Causal, document-blocked attention where each group of query heads shares one K/V head.

    ``positions`` are absolute row offsets (used for causality); rotary
    angles use the offset within each token's own document.
    """
    b, s, _ = x.shape
    hd, nh, nkv = cfg.head_dim, cfg.heads, cfg.kv_heads
    group = nh // nkv
    q = (x @ p[f"{prefix}.wq"]).reshape(b, s, nh, hd).transpose(0, 2, 1, 3)
    k = (x @ p[f"{prefix}.wk"]).reshape(b, s, nkv, hd).transpose(0, 2, 1, 3)
    v = (x @ p[f"{prefix}.wv"]).reshape(b, s, nkv, hd).transpose(0, 2, 1, 3)
    rel = doc_positions(doc_ids, positions) if cache is None else cache.rel_positions(doc_ids, positions)
    q = rope_apply(q, rel[:, None, :], cfg.rope_base)
    k = rope_apply(k, rel[:, None, :], cfg.rope_base)

    doc_k, pos_k = doc_ids, positions
    if cache is not None:
        k, v = cache.extend(k, v, doc_ids, positions)
        doc_k, pos_k = cache.doc_ids, cache.positions
    sk = k.shape[2]
    q5 = q.reshape(b, nkv, group, s, hd)
    k5 = k.reshape(b, nkv, 1, sk, hd)
    v5 = v.reshape(b, nkv, 1, sk, hd)
    scores = (q5 @ k5.transpose(0, 1, 2, 4, 3)) * (1.0 / np.sqrt(hd))
    allowed = attention_mask(doc_ids, positions, doc_k, pos_k)
    if np.any(~allowed.any(axis=-1)):
        raise ValueError("a query position has no visible key; check document boundaries")
    weights = nx.softmax(nx.masked_fill(scores, ~allowed, -np.inf), axis=-1)
    dropped = nx.dropout(weights, cfg.dropout, rng, train)
    out = (dropped @ v5).reshape(b, nh, s, hd).transpose(0, 2, 1, 3).reshape(b, s, nh * hd)
    out = out @ p[f"{prefix}.wo"]
    if return_weights:
        return out, weights.data.reshape(b, nh, s, sk)
    return out


def swiglu_mlp(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return (nx.silu(x @ p[f"{prefix}.gate"]) * (x @ p[f"{prefix}.up"])) @ p[f"{prefix}.down"]


def doc_positions(doc_ids: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Offset of every token from the first token of its document."""
    doc_ids = np.asarray(doc_ids)
    out = np.empty_like(positions)
    for r in range(doc_ids.shape[0]):
        starts = np.r_[True, doc_ids[r, 1:] != doc_ids[r, :-1]]
        first = np.maximum.accumulate(np.where(starts, np.arange(doc_ids.shape[1]), 0))
        out[r] = positions[r] - positions[r, first]
    return out


# -- incremental decoding ----------------------------------------------------------------


@dataclass
class LayerCache:
    k: np.ndarray | None = None
    v: np.ndarray | None = None
    doc_ids: np.ndarray | None = None
    positions: np.ndarray | None = None
    starts: dict = field(default_factory=dict)

    def rel_positions(self, doc_ids: np.ndarray, positions: np.ndarray) -> np.ndarray:
        out = np.empty_like(positions)
        for r in range(doc_ids.shape[0]):
            for j in range(doc_ids.shape[1]):
                key = (r, int(doc_ids[r, j]))
                self.starts.setdefault(key, int(positions[r, j]))
                out[r, j] = positions[r, j] - self.starts[key]
        return out

    def extend(self, k: Tensor, v: Tensor, doc_ids: np.ndarray, positions: np.ndarray) -> tuple[Tensor, Tensor]:
        if self.k is None:
            self.k, self.v = k.data, v.data
            self.doc_ids, self.positions = doc_ids, positions
        else:
            self.k = np.concatenate([self.k, k.data], axis=2)
            self.v = np.concatenate([self.v, v.data], axis=2)
            self.doc_ids = np.concatenate([self.doc_ids, doc_ids], axis=1)
            self.positions = np.concatenate([self.positions, positions], axis=1)
        return Tensor(self.k), Tensor(self.v)


@dataclass
class KVCache:
    layers: list[LayerCache]
    length: int = 0

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "KVCache":
        return cls([LayerCache() for _ in range(cfg.layers)])


# -- model -----------------------------------------------------------------------------------


class TransformerModel:
    """Parameters live in ``self.params`` (name -> Tensor); there are no bias tensors."""

    def __init__(self, config: ModelConfig | None = None, dtype=np.float32):
        self.config = cfg = config or ModelConfig()
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        std, resid = 0.02, 0.02 / np.sqrt(2 * cfg.layers)
        h, i, hd = cfg.hidden, cfg.intermediate, cfg.head_dim

        def w(shape, s):
            return Tensor(rng.normal(0.0, s, shape), requires_grad=True, dtype=dtype)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True, dtype=dtype)

        p = {"embed": w((cfg.vocab_size, h), std)}
        for l in range(cfg.layers):
            a, m = f"layers.{l}.attn", f"layers.{l}.mlp"
            p[f"{a}.norm"] = ones(h)
            p[f"{a}.wq"] = w((h, cfg.heads * hd), std)
            p[f"{a}.wk"] = w((h, cfg.kv_heads * hd), std)
            p[f"{a}.wv"] = w((h, cfg.kv_heads * hd), std)
            p[f"{a}.wo"] = w((cfg.heads * hd, h), resid)
            p[f"{m}.norm"] = ones(h)
            p[f"{m}.gate"] = w((h, i), std)
            p[f"{m}.up"] = w((h, i), std)
            p[f"{m}.down"] = w((i, h), resid)
        p["final_norm"] = ones(h)
        p["head"] = w((h, cfg.vocab_size), std)
        self.params: dict[str, Tensor] = p

    def forward(self, ids, doc_ids=None, train: bool = False, rng: np.random.Generator | None = None,
                cache: KVCache | None = None) -> Tensor:
        """Logits (B, S, vocab) for token ids (B, S) or (S,).

        ``doc_ids`` marks packed documents; attention never crosses them and
        rotary positions restart at each document. With ``cache`` the ids
        continue the cached prefix.
        """
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        b, s = ids.shape
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        start = cache.length if cache is not None else 0
        if start + s > cfg.max_context:
            raise ValueError(f"sequence of {start + s} tokens exceeds max context {cfg.max_context}")
        if train and cache is not None:
            raise ValueError("the KV cache is for inference only")
        doc_ids = np.zeros((b, s), np.int64) if doc_ids is None else np.asarray(doc_ids, np.int64).reshape(b, s)
        positions = np.broadcast_to(np.arange(start, start + s), (b, s)).copy()

        p = self.params
        x = nx.embedding(p["embed"], ids)
        for l in range(cfg.layers):
            a, m = f"layers.{l}.attn", f"layers.{l}.mlp"
            lc = cache.layers[l] if cache is not None else None
            x = x + gqa_attention(rmsnorm(x, p[f"{a}.norm"], cfg.norm_eps), p, a, cfg, doc_ids, positions, train, rng, lc)
            x = x + nx.dropout(swiglu_mlp(rmsnorm(x, p[f"{m}.norm"], cfg.norm_eps), p, m), cfg.dropout, rng, train)
        if cache is not None:
            cache.length += s
        return rmsnorm(x, p["final_norm"], cfg.norm_eps) @ p["head"]

    __call__ = forward

    def new_cache(self) -> KVCache:
        return KVCache.empty(self.config)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arrays[k].shape} != model {t.shape}")
            t.data = np.array(arrays[k], dtype=t.dtype)

    def copy(self) -> "TransformerModel":
        other = TransformerModel(self.config, self.dtype)
        other.load_state_arrays(self.state_arrays())
        return other

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())
