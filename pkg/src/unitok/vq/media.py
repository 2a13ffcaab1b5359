"""Media clips, vision grids and their raw file formats (RTF1, VGF1)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MediaFormatError(ValueError):
    """Malformed media or grid file; the message names the path and byte offset."""


@dataclass
class MediaClip:
    """``frames`` is t x c x h x w float32 in [0, 1]; stills use t == 1, fps == 1."""

    frames: np.ndarray
    fps: int = 1
    kind: str = "image"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be t x 3 x h x w, got {self.frames.shape}")
        if self.kind not in ("image", "video"):
            raise ValueError(f"unknown media kind {self.kind!r}")
        if self.kind == "image" and self.frames.shape[0] != 1:
            raise ValueError("an image clip has exactly one frame")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @classmethod
    def image(cls, frame: np.ndarray) -> "MediaClip":
        return cls(np.asarray(frame)[None], fps=1, kind="image")

    @property
    def t(self) -> int:
        return self.frames.shape[0]

    @property
    def h(self) -> int:
        return self.frames.shape[2]

    @property
    def w(self) -> int:
        return self.frames.shape[3]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.frames.shape


@dataclass
class VisionGrid:
    """Codebook indices on a (frames, rows, cols) lattice.

    ``ct`` is the temporal factor actually applied (1 for stills), ``cs`` the
    spatial one, so the source clip is ``frames*ct x rows*cs x cols*cs``.
    """

    indices: np.ndarray
    codebook_size: int
    ct: int = 1
    cs: int = 1
    fps: int = 1

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 3 or min(self.indices.shape) < 1:
            raise ValueError(f"grid indices must be a non-empty 3-D array, got shape {self.indices.shape}")
        if self.indices.min() < 0 or self.indices.max() >= self.codebook_size:
            raise ValueError(f"grid index out of range [0, {self.codebook_size})")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.indices.shape)

    @property
    def source_dims(self) -> tuple[int, int, int]:
        t, h, w = self.dims
        return t * self.ct, h * self.cs, w * self.cs

    @property
    def kind(self) -> str:
        return "image" if self.source_dims[0] == 1 else "video"

    def with_indices(self, indices: np.ndarray) -> "VisionGrid":
        return VisionGrid(indices, self.codebook_size, self.ct, self.cs, self.fps)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VisionGrid):
            return NotImplemented
        return (
            np.array_equal(self.indices, other.indices)
            and (self.codebook_size, self.ct, self.cs, self.fps)
            == (other.codebook_size, other.ct, other.cs, other.fps)
        )


def _read_header(path: Path, magic: str, nfields: int) -> tuple[list[str], bytes, int]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise MediaFormatError(f"{path}: byte 0: missing header line")
    try:
        fields = raw[:end].decode("ascii").split()
    except UnicodeDecodeError as e:
        raise MediaFormatError(f"{path}: byte {e.start}: header is not ASCII") from None
    if not fields or fields[0] != magic:
        raise MediaFormatError(f"{path}: byte 0: expected magic {magic!r}")
    if len(fields) != nfields + 1:
        raise MediaFormatError(f"{path}: byte {len(fields[0]) + 1}: expected {nfields} header fields, got {len(fields) - 1}")
    return fields[1:], raw[end + 1 :], end + 1


def _ints(path, fields, offset_base: int, names) -> list[int]:
    out = []
    pos = offset_base
    for name, f in zip(names, fields):
        try:
            v = int(f)
        except ValueError:
            raise MediaFormatError(f"{path}: byte {pos}: header field {name}={f!r} is not an integer") from None
        if v <= 0:
            raise MediaFormatError(f"{path}: byte {pos}: header field {name} must be positive")
        out.append(v)
        pos += len(f) + 1
    return out


def save_clip(path, clip: MediaClip) -> None:
    t, c, h, w = clip.shape
    header = f"RTF1 {t} {c} {h} {w} {clip.fps}\n".encode("ascii")
    Path(path).write_bytes(header + clip.frames.astype("<f4").tobytes())


def load_clip(path) -> MediaClip:
    fields, payload, data_off = _read_header(path, "RTF1", 5)
    t, c, h, w, fps = _ints(path, fields, 5, ("t", "c", "h", "w", "fps"))
    need = t * c * h * w * 4
    if len(payload) != need:
        raise MediaFormatError(f"{path}: byte {data_off + min(len(payload), need)}: expected {need} payload bytes, found {len(payload)}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, c, h, w).astype(np.float32)
    return MediaClip(frames, fps=fps, kind="image" if t == 1 else "video")


def save_grid(path, grid: VisionGrid) -> None:
    t, h, w = grid.dims
    header = f"VGF1 {t} {h} {w} {grid.codebook_size} {grid.ct} {grid.cs} {grid.fps}\n".encode("ascii")
    Path(path).write_bytes(header + grid.indices.astype("<u4").tobytes())


def load_grid(path) -> VisionGrid:
    fields, payload, data_off = _read_header(path, "VGF1", 7)
    t, h, w, k, ct, cs, fps = _ints(path, fields, 5, ("t", "h", "w", "K", "ct", "cs", "fps"))
    need = t * h * w * 4
    if len(payload) != need:
        raise MediaFormatError(f"{path}: byte {data_off + min(len(payload), need)}: expected {need} payload bytes, found {len(payload)}")
    idx = np.frombuffer(payload, dtype="<u4").reshape(t, h, w).astype(np.int64)
    if idx.max() >= k:
        bad = int(np.argmax(idx.reshape(-1) >= k))
        raise MediaFormatError(f"{path}: byte {data_off + 4 * bad}: index {idx.reshape(-1)[bad]} >= K={k}")
    return VisionGrid(idx, k, ct, cs, fps)
