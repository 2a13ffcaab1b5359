"""Vector-quantised 3-D conv tokenizer for images and short clips.

Encoder: full-resolution conv, ``max(log2 ct, log2 cs)`` strided conv blocks,
two temporal residual blocks, 1x1x1 projection to the latent width. Decoder
mirrors it with transposed convs. Stills skip every temporal stride.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor
from .media import MediaClip, VisionGrid


@dataclass
class TokenizerConfig:
    temporal_factor: int = 2
    spatial_factor: int = 4
    codebook_size: int = 64
    latent_dim: int = 4
    channels: int = 16
    groups: int = 4
    commitment: float = 0.25
    dead_after: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("temporal_factor", "spatial_factor"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two, got {v}")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least two entries")
        if self.channels % self.groups:
            raise ValueError("channels must be divisible by groups")

    @property
    def temporal_levels(self) -> int:
        return int(math.log2(self.temporal_factor))

    @property
    def spatial_levels(self) -> int:
        return int(math.log2(self.spatial_factor))

    @property
    def levels(self) -> int:
        return max(self.temporal_levels, self.spatial_levels)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Quantized:
    indices: np.ndarray  # (N, t, h, w)
    z_q: Tensor  # (N, d, t, h, w), straight-through to z_e
    codebook_loss: Tensor
    commitment_loss: Tensor
    rows: np.ndarray  # z_e flattened to (N*t*h*w, d)


def nearest_codes(z: np.ndarray, codebook: np.ndarray, chunk_bytes: int = 1 << 26) -> np.ndarray:
    """Index of the closest codebook row for each row of ``z``; ties pick the lowest index."""
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    m, d = z.shape
    k = codebook.shape[0]
    step = max(1, chunk_bytes // max(1, k * d * z.itemsize))
    out = np.empty(m, dtype=np.int64)
    for s in range(0, m, step):
        diff = z[s : s + step, None, :] - codebook[None, :, :]
        out[s : s + step] = np.argmin((diff * diff).sum(-1), axis=1)
    return out


def quantize(z_e: Tensor, codebook: Tensor, frozen: Quantized | None = None) -> Quantized:
    """Nearest-neighbour quantisation with codebook and commitment losses.

    Passing an earlier result as ``frozen`` holds its codes and every
    stop-gradient operand fixed, turning the losses into the smooth surrogate
    whose exact gradient is the straight-through one (for numerical checks).
    """
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    n, d, t, h, w = z_e.shape
    rows = z_e.transpose(0, 2, 3, 4, 1).reshape(-1, d)
    if frozen is None:
        idx = nearest_codes(rows.data, codebook.data)
        picked = nx.embedding(codebook, idx)
        ze_stop, zq_stop = rows.detach(), picked.detach()
    else:
        idx = frozen.indices.reshape(-1)
        picked = nx.embedding(codebook, idx)
        ze_stop = Tensor(frozen.rows)
        zq_stop = Tensor(frozen.z_q.data.transpose(0, 2, 3, 4, 1).reshape(-1, d))
    codebook_loss = ((ze_stop - picked) ** 2).sum(axis=1).mean()
    commitment_loss = ((rows - zq_stop) ** 2).sum(axis=1).mean()
    if frozen is None:
        zq = picked.data.reshape(n, t, h, w, d).transpose(0, 4, 1, 2, 3)
        z_q = nx.straight_through(z_e, zq)
    else:
        base = frozen.rows.reshape(n, t, h, w, d).transpose(0, 4, 1, 2, 3)
        z_q = z_e + Tensor(frozen.z_q.data - base)
    return Quantized(idx.reshape(n, t, h, w), z_q, codebook_loss, commitment_loss, rows.data)


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int, eps: float = 1e-6) -> Tensor:
    n, c = x.shape[:2]
    g = x.reshape(n, groups, -1)
    mu = g.mean(axis=-1, keepdims=True)
    centered = g - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = (centered * (var + eps) ** -0.5).reshape(x.shape)
    return normed * gain.reshape(1, c, 1, 1, 1) + bias.reshape(1, c, 1, 1, 1)


class VisionTokenizer:
    def __init__(self, config: TokenizerConfig | None = None, dtype=np.float32):
        self.config = cfg = config or TokenizerConfig()
        rng = np.random.default_rng(cfg.seed)
        c, d = cfg.channels, cfg.latent_dim
        self.params: dict[str, Tensor] = {}

        def conv(name, o, i, k):
            fan_in = i * int(np.prod(k))
            self.params[f"{name}.w"] = Tensor(rng.normal(0, 1 / math.sqrt(fan_in), (o, i) + k), True, dtype)
            self.params[f"{name}.b"] = Tensor(np.zeros(o), True, dtype)

        def convt(name, i, o, k):
            self.params[f"{name}.w"] = Tensor(rng.normal(0, 1 / math.sqrt(i), (i, o) + k), True, dtype)
            self.params[f"{name}.b"] = Tensor(np.zeros(o), True, dtype)

        def norm(name, ch):
            self.params[f"{name}.g"] = Tensor(np.ones(ch), True, dtype)
            self.params[f"{name}.b"] = Tensor(np.zeros(ch), True, dtype)

        k3 = (3, 3, 3)
        conv("enc.conv_in", c, 3, k3)
        for i in range(cfg.levels):
            conv(f"enc.down{i}", c, c, k3)
            norm(f"enc.down{i}.norm", c)
        for j in range(2):
            norm(f"enc.res{j}.norm", c)
            conv(f"enc.res{j}.conv", c, c, k3)
        norm("enc.out.norm", c)
        conv("enc.out", d, c, (1, 1, 1))

        conv("dec.conv_in", c, d, k3)
        for j in range(2):
            norm(f"dec.res{j}.norm", c)
            conv(f"dec.res{j}.conv", c, c, k3)
        for i in reversed(range(cfg.levels)):
            if i < cfg.spatial_levels:
                convt(f"dec.up{i}.spatial", c, c, (1, 2, 2))
            if i < cfg.temporal_levels:
                convt(f"dec.up{i}.temporal", c, c, (2, 1, 1))
            conv(f"dec.up{i}.conv", c, c, k3)
            norm(f"dec.up{i}.norm", c)
        norm("dec.out.norm", c)
        conv("dec.out", 3, c, k3)

        self.params["codebook"] = Tensor(rng.normal(0, 1, (cfg.codebook_size, d)), True, dtype)
        self.usage = np.zeros(cfg.codebook_size, dtype=np.int64)
        self.idle = np.zeros(cfg.codebook_size, dtype=np.int64)
        self.positions_seen = 0
        self.steps = 0

    # -- shapes ---------------------------------------------------------
    def latent_dims(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        cfg = self.config
        video = t > 1
        if h % cfg.spatial_factor or w % cfg.spatial_factor:
            raise ValueError(f"frame size {h}x{w} is not divisible by the spatial factor {cfg.spatial_factor}")
        if video and t % cfg.temporal_factor:
            raise ValueError(f"clip length {t} is not divisible by the temporal factor {cfg.temporal_factor}")
        ct = cfg.temporal_factor if video else 1
        return t // ct, h // cfg.spatial_factor, w // cfg.spatial_factor

    def _strides(self, video: bool):
        cfg = self.config
        for i in range(cfg.levels):
            st = 2 if video and i < cfg.temporal_levels else 1
            ss = 2 if i < cfg.spatial_levels else 1
            yield i, (st, ss, ss)

    # -- network --------------------------------------------------------
    def _conv(self, name, x, stride=1, padding=1):
        return nx.conv3d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride, padding=padding)

    def _norm_act(self, name, x):
        p = self.params
        return nx.silu(group_norm(x, p[f"{name}.g"], p[f"{name}.b"], self.config.groups))

    def _res(self, name, x):
        return x + self._conv(f"{name}.conv", self._norm_act(f"{name}.norm", x))

    def encode_tensor(self, x: Tensor) -> Tensor:
        """(N, 3, T, H, W) -> z_e (N, d, t', h', w')."""
        video = x.shape[2] > 1
        self.latent_dims(*x.shape[2:])
        h = self._conv("enc.conv_in", x)
        for i, stride in self._strides(video):
            h = self._norm_act(f"enc.down{i}.norm", self._conv(f"enc.down{i}", h, stride=stride))
        for j in range(2):
            h = self._res(f"enc.res{j}", h)
        return self._conv("enc.out", self._norm_act("enc.out.norm", h), padding=0)

    def decode_tensor(self, z: Tensor, video: bool) -> Tensor:
        """(N, d, t', h', w') -> unclamped pixels (N, 3, T, H, W)."""
        cfg, p = self.config, self.params
        h = self._conv("dec.conv_in", z)
        for j in range(2):
            h = self._res(f"dec.res{j}", h)
        for i in reversed(range(cfg.levels)):
            if i < cfg.spatial_levels:
                h = nx.conv_transpose3d(h, p[f"dec.up{i}.spatial.w"], p[f"dec.up{i}.spatial.b"], stride=(1, 2, 2))
            if video and i < cfg.temporal_levels:
                h = nx.conv_transpose3d(h, p[f"dec.up{i}.temporal.w"], p[f"dec.up{i}.temporal.b"], stride=(2, 1, 1))
            h = self._norm_act(f"dec.up{i}.norm", self._conv(f"dec.up{i}.conv", h))
        return self._conv("dec.out", self._norm_act("dec.out.norm", h))

    # -- clip-level API -------------------------------------------------
    def _batch(self, clips) -> np.ndarray:
        if isinstance(clips, MediaClip):
            clips = [clips]
        shapes = {c.shape for c in clips}
        if len(shapes) != 1:
            raise ValueError(f"batch clips must share one shape, got {sorted(shapes)}")
        arr = np.stack([c.frames for c in clips]).transpose(0, 2, 1, 3, 4)
        return np.ascontiguousarray(arr, dtype=self.params["codebook"].dtype)

    def encode(self, clip: MediaClip) -> np.ndarray:
        """Continuous latents shaped (t', h', w', d)."""
        with nx.no_grad():
            z = self.encode_tensor(Tensor(self._batch(clip)))
        return z.data[0].transpose(1, 2, 3, 0)

    def tokenize(self, clip: MediaClip) -> VisionGrid:
        with nx.no_grad():
            z = self.encode_tensor(Tensor(self._batch(clip)))
            idx = quantize(z, self.params["codebook"]).indices[0]
        cfg = self.config
        ct = cfg.temporal_factor if clip.t > 1 else 1
        return VisionGrid(idx, cfg.codebook_size, ct, cfg.spatial_factor, clip.fps)

    def decode(self, grid: VisionGrid) -> MediaClip:
        cfg = self.config
        if grid.codebook_size != cfg.codebook_size:
            raise ValueError(f"grid codebook size {grid.codebook_size} != tokenizer {cfg.codebook_size}")
        if grid.cs != cfg.spatial_factor or grid.ct not in (1, cfg.temporal_factor):
            raise ValueError("grid compression does not match the tokenizer")
        if grid.indices.max() >= cfg.codebook_size:
            raise ValueError("grid index out of range")
        video = grid.kind == "video"
        with nx.no_grad():
            z = self.params["codebook"].data[grid.indices].transpose(3, 0, 1, 2)[None]
            out = self.decode_tensor(Tensor(np.ascontiguousarray(z)), video).data[0]
        frames = np.clip(out.transpose(1, 0, 2, 3), 0.0, 1.0)
        return MediaClip(frames, fps=grid.fps, kind=grid.kind)

    def reconstruct(self, clip: MediaClip) -> MediaClip:
        return self.decode(self.tokenize(clip))

    # -- training -------------------------------------------------------
    def loss(self, x: np.ndarray, frozen: Quantized | None = None) -> tuple[Tensor, dict[str, Tensor], Quantized]:
        xt = Tensor(x)
        z_e = self.encode_tensor(xt)
        q = quantize(z_e, self.params["codebook"], frozen)
        rec = self.decode_tensor(q.z_q, x.shape[2] > 1)
        diff = rec - xt
        l2 = (diff * diff).mean()
        total = l2 + q.codebook_loss + self.config.commitment * q.commitment_loss
        parts = {"l2": l2, "codebook": q.codebook_loss, "commitment": q.commitment_loss, "total": total}
        return total, parts, q

    def note_usage(self, indices: np.ndarray, z_rows: np.ndarray) -> list[int]:
        """Update usage statistics; re-seed entries idle for ``dead_after`` steps."""
        counts = np.bincount(indices.reshape(-1), minlength=self.config.codebook_size)
        self.usage += counts
        self.positions_seen += int(indices.size)
        self.idle += 1
        self.idle[counts > 0] = 0
        self.steps += 1
        dead = np.flatnonzero(self.idle >= self.config.dead_after)
        if dead.size:
            rng = np.random.default_rng([self.config.seed, self.steps])
            picks = rng.integers(0, z_rows.shape[0], size=dead.size)
            self.params["codebook"].data[dead] = z_rows[picks]
            self.idle[dead] = 0
        return dead.tolist()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        out["stats.usage"] = self.usage
        out["stats.idle"] = self.idle
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks tokenizer parameter {k}")
            if arrays[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.shape}")
            p.data = arrays[k].astype(p.dtype).copy()
        self.usage = arrays["stats.usage"].astype(np.int64).copy()
        self.idle = arrays["stats.idle"].astype(np.int64).copy()


def train_step(model: VisionTokenizer, batch, optimizer: nx.AdamW, lr: float | None = None,
               return_quantized: bool = False):
    """One optimisation step on a uniform batch; returns the loss breakdown.

    With ``return_quantized`` the quantisation result of the forward pass is
    returned too (indices and encoder rows, taken before the update).
    """
    x = model._batch(batch)
    total, parts, q = model.loss(x)
    values = {k: float(v.data) for k, v in parts.items()}
    if not all(np.isfinite(v) for v in values.values()):
        raise nx.NonFiniteError(f"non-finite tokenizer loss {values}")
    optimizer.zero_grad()
    nx.backward(total)
    optimizer.step(lr)
    model.note_usage(q.indices, q.rows)
    return (values, q) if return_quantized else values


def fit(model: VisionTokenizer, clips: list[MediaClip], optimizer: nx.AdamW, steps: int, base_lr: float,
        batch_size: int = 4, seed: int = 0, callback=None) -> list[dict[str, float]]:
    """Cosine-scheduled training from the optimiser's current step up to ``steps``.

    Batches are drawn with a generator seeded by (seed, step), so stopping and
    resuming from a checkpoint replays the same batches. ``callback(step,
    metrics, q, codebook_before)`` sees every step.
    """
    history = []
    while optimizer.state.step < steps:
        step = optimizer.state.step
        rng = np.random.default_rng([seed, step])
        pick = np.sort(rng.choice(len(clips), size=min(batch_size, len(clips)), replace=False))
        lr = nx.cosine_lr(step, steps, base_lr)
        before = model.params["codebook"].data.copy() if callback else None
        values, q = train_step(model, [clips[i] for i in pick], optimizer, lr, return_quantized=True)
        values = {"step": step + 1, "lr": lr, **values}
        history.append(values)
        if callback:
            callback(step, values, q, before)
    return history
