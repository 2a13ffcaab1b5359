"""Deterministic synthetic data for tests, scripts and demos."""
from __future__ import annotations

import numpy as np

from .vq.media import MediaClip, VisionGrid


def pattern_frame(kind: int, size: int, phase: int, colors: np.ndarray) -> np.ndarray:
    """Stripes (kind 0) or a checkerboard (kind 1) in two colours, shape 3 x size x size."""
    yy, xx = np.mgrid[0:size, 0:size]
    cell = max(2, size // 4)
    if kind == 0:
        mask = ((yy + phase) // cell) % 2
    else:
        mask = (((yy + phase) // cell) + ((xx + phase) // cell)) % 2
    return np.where(mask[None] == 1, colors[1][:, None, None], colors[0][:, None, None]).astype(np.float32)


def two_pattern_clips(n: int, size: int = 32, frames: int = 2, fps: int = 2, seed: int = 0) -> list[MediaClip]:
    """Clips alternating between the two pattern families; each frame shifts the phase by one pixel."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        kind = i % 2
        colors = np.array([[0.1, 0.2, 0.8], [0.9, 0.8, 0.1]]) if kind == 0 else np.array([[0.05, 0.05, 0.05], [0.95, 0.3, 0.4]])
        colors = np.clip(colors + rng.normal(0, 0.05, colors.shape), 0, 1)
        phase = int(rng.integers(0, size // 4))
        stack = np.stack([pattern_frame(kind, size, phase + f, colors) for f in range(frames)])
        clips.append(MediaClip(stack, fps=fps if frames > 1 else 1, kind="video" if frames > 1 else "image"))
    return clips


def mean_baseline_psnr(clips: list[MediaClip]) -> float:
    """PSNR of every clip against the dataset-mean clip, averaged."""
    from .vq.metrics import psnr

    mean = np.mean([c.frames for c in clips], axis=0)
    return float(np.mean([psnr(c.frames, mean) for c in clips]))


def pattern_grid(doc: int, rows: int, cols: int, codebook_size: int, frames: int = 1, ct: int = 1,
                 cs: int = 4, fps: int = 1) -> VisionGrid:
    """A structured token grid keyed by ``doc``: two codes laid out in diagonal bands.

    Each document gets its own pair of codes and band width, so grids are
    distinct yet every token after the first few is predictable from its
    neighbours.
    """
    a = doc % codebook_size
    b = (doc * 7 + 3) % codebook_size
    if b == a:
        b = (a + 1) % codebook_size
    width = 1 + (doc // codebook_size) % 3
    t_i, r_i, c_i = np.mgrid[0:frames, 0:rows, 0:cols]
    mask = ((r_i + c_i + t_i) // width) % 2
    return VisionGrid(np.where(mask == 0, a, b), codebook_size, ct, cs, fps)


def corrupt_grid(grid: VisionGrid, fraction: float, rng: np.random.Generator) -> VisionGrid:
    """Replace a fraction of positions with random codes that differ from the original."""
    idx = grid.indices.copy().reshape(-1)
    n = max(1, int(round(fraction * idx.size)))
    where = rng.choice(idx.size, size=n, replace=False)
    shift = rng.integers(1, grid.codebook_size, size=n)
    idx[where] = (idx[where] + shift) % grid.codebook_size
    return grid.with_indices(idx.reshape(grid.indices.shape))


def caption_for(doc: int) -> str:
    return f"a synthetic picture of pattern number {doc:02d} in two tones"


def write_media_corpus(directory, clips: list[MediaClip], captions: list[str] | None = None,
                       modes: list[str] | None = None, name: str = "manifest.jsonl"):
    """Save clips as RTF1 files next to a JSON-lines manifest; returns the manifest path."""
    import json
    from pathlib import Path

    from .vq.media import save_clip

    directory = Path(directory)
    (directory / "media").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, clip in enumerate(clips):
        rel = f"media/clip_{i:04d}.rtf"
        save_clip(directory / rel, clip)
        lines.append(json.dumps({
            "caption": captions[i] if captions else caption_for(i),
            "media": rel,
            "mode": modes[i] if modes else "generation",
        }))
    path = directory / name
    path.write_text("".join(line + "\n" for line in lines))
    return path
