"""Unified token ids, the multimodal document template, parsing and packing.

Ids are laid out as ``[text | specials | vision]``: byte-level text in
``[0, T)``, eight control tokens in ``[T, T+8)``, and codebook index ``i`` at
``T + 8 + i``. A document reads

    BOS caption SOV meta SOT vision-stream EOV EOS        (generation)
    BOS SOV meta SOT vision-stream EOV caption EOS        (understanding)

where the vision stream is the grid in row-major order with EOL after every
row and, for videos, EOF after every frame.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vq.media import VisionGrid

SPECIALS = ("PAD", "BOS", "EOS", "SOV", "SOT", "EOV", "EOL", "EOF")
MODES = ("generation", "understanding")

# segment codes stored per token
SEG_PAD, SEG_CAPTION, SEG_META, SEG_VISION, SEG_STRUCT = 0, 1, 2, 3, 4
SEGMENT_NAMES = {SEG_PAD: "pad", SEG_CAPTION: "caption", SEG_META: "meta", SEG_VISION: "vision", SEG_STRUCT: "structural"}

VISION_WEIGHT = 0.5


class DocumentFormatError(ValueError):
    """A token sequence that violates the document template."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


@dataclass(frozen=True)
class VocabLayout:
    text_size: int
    codebook_size: int

    def __post_init__(self):
        if self.text_size < 1:
            raise ValueError("text_size must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")

    @property
    def vision_base(self) -> int:
        return self.text_size + len(SPECIALS)

    @property
    def total(self) -> int:
        return self.vision_base + self.codebook_size

    def special(self, name: str) -> int:
        return self.text_size + SPECIALS.index(name)

    def __getattr__(self, name):
        # layout.BOS, layout.EOL, ...
        if name in SPECIALS:
            return self.text_size + SPECIALS.index(name)
        raise AttributeError(name)

    def region_of(self, token: int) -> str:
        token = int(token)
        if 0 <= token < self.text_size:
            return "text"
        if self.text_size <= token < self.vision_base:
            return "special"
        if self.vision_base <= token < self.total:
            return "vision"
        raise ValueError(f"token id {token} outside vocabulary of {self.total}")

    def from_id(self, token: int) -> tuple[str, int]:
        region = self.region_of(token)
        base = {"text": 0, "special": self.text_size, "vision": self.vision_base}[region]
        return region, int(token) - base

    def to_id(self, region: str, offset: int) -> int:
        size = {"text": self.text_size, "special": len(SPECIALS), "vision": self.codebook_size}[region]
        if not 0 <= offset < size:
            raise ValueError(f"{region} offset {offset} outside [0, {size})")
        base = {"text": 0, "special": self.text_size, "vision": self.vision_base}[region]
        return base + offset

    def is_vision(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        return (tokens >= self.vision_base) & (tokens < self.total)

    def to_dict(self) -> dict:
        return {"text_size": self.text_size, "codebook_size": self.codebook_size}


def layout_vocab(text_size: int = 256, codebook_size: int = 64) -> VocabLayout:
    return VocabLayout(text_size, codebook_size)


# -- text -----------------------------------------------------------------------


def encode_text(text: str) -> list[int]:
    """Byte-level text tokens (UTF-8)."""
    return list(text.encode("utf-8"))


def decode_text(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


def format_meta(height: int, width: int, kind: str = "image", fps: int = 1, frames: int = 1) -> str:
    """``HxW`` for images, ``HxW,FPSfps,SECs`` for videos (duration rounded up to whole seconds)."""
    if min(height, width, fps, frames) <= 0:
        raise ValueError("meta dims must be positive")
    if kind == "image":
        return f"{height}x{width}"
    if kind == "video":
        return f"{height}x{width},{fps}fps,{math.ceil(frames / fps)}s"
    raise ValueError(f"unknown media kind {kind!r}")


def meta_for_grid(grid: VisionGrid) -> str:
    t, h, w = grid.source_dims
    return format_meta(h, w, grid.kind, grid.fps, t)


def parse_meta(text: str) -> dict:
    parts = text.split(",")
    try:
        h, w = (int(v) for v in parts[0].split("x"))
        if len(parts) == 1:
            return {"kind": "image", "height": h, "width": w}
        if len(parts) == 3 and parts[1].endswith("fps") and parts[2].endswith("s"):
            return {"kind": "video", "height": h, "width": w, "fps": int(parts[1][:-3]), "seconds": int(parts[2][:-1])}
    except ValueError:
        pass
    raise ValueError(f"unparseable meta text {text!r}")


# -- vision stream ----------------------------------------------------------------


def flatten_grid(grid: VisionGrid, layout: VocabLayout) -> np.ndarray:
    """Row-major vision tokens with EOL after each row and, for videos, EOF after each frame."""
    if grid.codebook_size > layout.codebook_size or grid.indices.max() >= layout.codebook_size:
        raise ValueError(f"grid index out of range for codebook of {layout.codebook_size}")
    t, h, w = grid.dims
    rows = np.concatenate([grid.indices + layout.vision_base, np.full((t, h, 1), layout.EOL)], axis=2)
    frames = rows.reshape(t, h * (w + 1))
    if grid.kind == "video":
        frames = np.concatenate([frames, np.full((t, 1), layout.EOF)], axis=1)
    return frames.reshape(-1).astype(np.int64)


def stream_length(dims: tuple[int, int, int], video: bool) -> int:
    t, h, w = dims
    return t * (h * (w + 1) + int(video))


# -- documents ----------------------------------------------------------------------


@dataclass
class Document:
    """``weights[i]`` weights the prediction of ``tokens[i]`` from the prefix; ``weights[0]`` is 0."""

    tokens: np.ndarray
    weights: np.ndarray
    segments: np.ndarray
    mode: str = "generation"

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.segments = np.asarray(self.segments, dtype=np.uint8)
        if not (len(self.tokens) == len(self.weights) == len(self.segments)):
            raise ValueError("tokens, weights and segments must have equal length")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vision_mask(self) -> np.ndarray:
        return self.segments == SEG_VISION


def assemble_document(caption, grid: VisionGrid, layout: VocabLayout, mode: str = "generation",
                      vision_weight: float = VISION_WEIGHT) -> Document:
    """Build the token sequence and per-target loss weights for one (caption, grid) pair.

    Generation mode weights vision-stream targets (codes, EOL, EOF) by
    ``vision_weight`` and every other target by 1. Understanding mode drops
    the vision-stream targets to 0 and keeps the rest at 1.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    caption = np.asarray(encode_text(caption) if isinstance(caption, str) else list(caption), dtype=np.int64)
    if caption.size and (caption.min() < 0 or caption.max() >= layout.text_size):
        raise ValueError("caption tokens must lie in the text region")
    if grid.indices.size == 0:
        raise ValueError("empty grid")
    meta = np.asarray(encode_text(meta_for_grid(grid)), dtype=np.int64)
    stream = flatten_grid(grid, layout)

    parts: list[tuple[np.ndarray, int]] = [(np.array([layout.BOS]), SEG_STRUCT)]
    if mode == "generation":
        parts.append((caption, SEG_CAPTION))
    parts += [
        (np.array([layout.SOV]), SEG_STRUCT),
        (meta, SEG_META),
        (np.array([layout.SOT]), SEG_STRUCT),
        (stream, SEG_VISION),
        (np.array([layout.EOV]), SEG_STRUCT),
    ]
    if mode == "understanding":
        parts.append((caption, SEG_CAPTION))
    parts.append((np.array([layout.EOS]), SEG_STRUCT))

    tokens = np.concatenate([p for p, _ in parts]).astype(np.int64)
    segments = np.concatenate([np.full(len(p), s, np.uint8) for p, s in parts])
    vision = segments == SEG_VISION
    weights = np.where(vision, vision_weight if mode == "generation" else 0.0, 1.0).astype(np.float32)
    weights[0] = 0.0
    return Document(tokens, weights, segments, mode)


@dataclass
class ParsedDocument:
    caption: list[int]
    meta: str
    dims: tuple[int, int, int]
    mode: str
    indices: np.ndarray
    video: bool

    @property
    def caption_text(self) -> str:
        return decode_text(self.caption)


def _find_unique(tokens: np.ndarray, token: int, name: str, start: int = 0) -> int:
    hits = np.flatnonzero(tokens == token)
    if len(hits) > 1:
        raise DocumentFormatError(f"duplicate {name}", int(hits[1]))
    if len(hits) == 0:
        return -1
    if hits[0] < start:
        raise DocumentFormatError(f"{name} out of order", int(hits[0]))
    return int(hits[0])


def parse_vision_stream(stream: np.ndarray, layout: VocabLayout, offset: int = 0) -> tuple[np.ndarray, bool]:
    """Recover (frames, rows, cols) indices from a vision stream; ``offset`` positions error messages."""
    if len(stream) == 0:
        raise DocumentFormatError("empty vision stream", offset)
    video = bool(np.any(stream == layout.EOF))
    frames, rows, row = [], [], []
    width = height = None
    for i, tok in enumerate(stream.tolist()):
        at = offset + i
        if layout.vision_base <= tok < layout.total:
            row.append(tok - layout.vision_base)
        elif tok == layout.EOL:
            if not row:
                raise DocumentFormatError("empty row", at)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DocumentFormatError(f"inconsistent row width: expected {width}, found {len(row)}", at)
            rows.append(row)
            row = []
        elif tok == layout.EOF:
            if row:
                raise DocumentFormatError("EOF inside a row", at)
            if not rows:
                raise DocumentFormatError("empty frame", at)
            if height is None:
                height = len(rows)
            elif len(rows) != height:
                raise DocumentFormatError(f"inconsistent frame height: expected {height}, found {len(rows)}", at)
            frames.append(rows)
            rows = []
        else:
            raise DocumentFormatError(f"token {tok} not allowed in the vision stream", at)
    end = offset + len(stream)
    if row:
        raise DocumentFormatError("vision stream ends inside a row", end)
    if video:
        if rows:
            raise DocumentFormatError("video stream ends inside a frame", end)
    else:
        frames = [rows]
    return np.asarray(frames, dtype=np.int64), video


def parse_document(tokens, layout: VocabLayout) -> ParsedDocument:
    """Invert :func:`assemble_document`.

    A document with an empty caption has the same tokens in both modes and
    parses as generation mode.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if n == 0 or tokens[0] != layout.BOS:
        raise DocumentFormatError("document must start with BOS", 0)
    if np.any((tokens < 0) | (tokens >= layout.total)):
        bad = int(np.flatnonzero((tokens < 0) | (tokens >= layout.total))[0])
        raise DocumentFormatError(f"token id {int(tokens[bad])} outside vocabulary", bad)
    bad = np.flatnonzero(tokens[1:] == layout.BOS)
    if len(bad):
        raise DocumentFormatError("duplicate BOS", int(bad[0]) + 1)
    if tokens[-1] != layout.EOS or np.sum(tokens == layout.EOS) != 1:
        at = int(np.flatnonzero(tokens == layout.EOS)[0]) if np.any(tokens[:-1] == layout.EOS) else n
        raise DocumentFormatError("document must end with a single EOS", at)
    sov = _find_unique(tokens, layout.SOV, "SOV", 1)
    if sov < 0:
        raise DocumentFormatError("missing SOV", 1)
    sot = _find_unique(tokens, layout.SOT, "SOT", sov + 1)
    if sot < 0:
        raise DocumentFormatError("missing SOT", sov + 1)
    eov = _find_unique(tokens, layout.EOV, "EOV", sot + 1)
    if eov < 0:
        # the stream runs until the first token that cannot belong to it
        stream_ok = layout.is_vision(tokens) | (tokens == layout.EOL) | (tokens == layout.EOF)
        tail = np.flatnonzero(~stream_ok[sot + 1 :])
        raise DocumentFormatError("missing EOV", sot + 1 + int(tail[0]) if len(tail) else n)
    for t in (layout.PAD,):
        hits = np.flatnonzero(tokens == t)
        if len(hits):
            raise DocumentFormatError("PAD inside a document", int(hits[0]))

    head, tail = tokens[1:sov], tokens[eov + 1 : n - 1]
    for start, span in ((1, head), (eov + 1, tail)):
        outside = np.flatnonzero(span >= layout.text_size)
        if len(outside):
            raise DocumentFormatError("non-text token in caption", start + int(outside[0]))
    if len(head) and len(tail):
        raise DocumentFormatError("caption on both sides of the vision block", eov + 1)
    mode = "understanding" if len(tail) else "generation"
    caption = (tail if len(tail) else head).tolist()

    meta_ids = tokens[sov + 1 : sot]
    outside = np.flatnonzero(meta_ids >= layout.text_size)
    if len(outside):
        raise DocumentFormatError("non-text token in meta", sov + 1 + int(outside[0]))
    meta = decode_text(meta_ids)
    indices, video = parse_vision_stream(tokens[sot + 1 : eov], layout, sot + 1)
    return ParsedDocument(caption, meta, tuple(int(d) for d in indices.shape), mode, indices, video)


# -- packing ------------------------------------------------------------------------


@dataclass
class PackedBatch:
    """Fixed-length rows of whole documents; ``doc_ids`` is -1 on PAD and marks attention blocks."""

    tokens: np.ndarray
    weights: np.ndarray
    segments: np.ndarray
    doc_ids: np.ndarray
    modes: list[str] = field(default_factory=list)
    rejected: list[int] = field(default_factory=list)
    layout: VocabLayout | None = None

    @property
    def context_length(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_rows(self) -> int:
        return self.tokens.shape[0]

    def boundaries(self, row: int) -> list[tuple[int, int, int]]:
        """(start, end, document) spans of one row, in order."""
        ids = self.doc_ids[row]
        out = []
        start = 0
        for i in range(1, len(ids) + 1):
            if i == len(ids) or ids[i] != ids[start]:
                if ids[start] >= 0:
                    out.append((start, i, int(ids[start])))
                start = i
        return out

    def select(self, rows) -> "PackedBatch":
        rows = np.asarray(rows)
        return PackedBatch(self.tokens[rows], self.weights[rows], self.segments[rows], self.doc_ids[rows],
                           self.modes, self.rejected, self.layout)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PackedBatch):
            return NotImplemented
        return (
            all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("tokens", "weights", "segments", "doc_ids"))
            and self.weights.dtype == other.weights.dtype
            and self.modes == other.modes and self.rejected == other.rejected and self.layout == other.layout
        )


def first_fit_decreasing(lengths: list[int], capacity: int) -> tuple[list[list[int]], list[int]]:
    """Bin indices by first-fit-decreasing; items longer than ``capacity`` are returned as rejects."""
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    bins: list[list[int]] = []
    free: list[int] = []
    rejects = []
    for i in order:
        n = lengths[i]
        if n > capacity:
            rejects.append(i)
            continue
        for b, room in enumerate(free):
            if n <= room:
                bins[b].append(i)
                free[b] -= n
                break
        else:
            bins.append([i])
            free.append(capacity - n)
    return bins, sorted(rejects)


def pack(documents: list[Document], context_length: int, layout: VocabLayout | None = None) -> PackedBatch:
    """Pack whole documents into rows of ``context_length`` tokens, PAD-filled with weight 0.

    Documents longer than a row are skipped with a warning and listed in ``rejected``.
    """
    if context_length < 1:
        raise ValueError("context_length must be positive")
    bins, rejects = first_fit_decreasing([len(d) for d in documents], context_length)
    if rejects:
        warnings.warn(f"{len(rejects)} document(s) longer than {context_length} tokens were rejected: {rejects}")
    pad = layout.PAD if layout is not None else 0
    r = len(bins)
    tokens = np.full((r, context_length), pad, np.int64)
    weights = np.zeros((r, context_length), np.float32)
    segments = np.zeros((r, context_length), np.uint8)
    doc_ids = np.full((r, context_length), -1, np.int64)
    for row, members in enumerate(bins):
        at = 0
        for i in members:
            d = documents[i]
            sl = slice(at, at + len(d))
            tokens[row, sl], weights[row, sl], segments[row, sl], doc_ids[row, sl] = d.tokens, d.weights, d.segments, i
            at += len(d)
    return PackedBatch(tokens, weights, segments, doc_ids, [d.mode for d in documents], rejects, layout)


# -- dataset file ---------------------------------------------------------------------

_ARRAYS = (("tokens", "<u4"), ("weights", "<f4"), ("segments", "u1"), ("doc_ids", "<i4"))


def save_packed(path, batch: PackedBatch, stats: dict | None = None) -> None:
    """``PKD1 {json}\\n`` then tokens, weights, segments and doc ids as raw little-endian arrays."""
    header = {
        "rows": batch.num_rows,
        "context_length": batch.context_length,
        "layout": batch.layout.to_dict() if batch.layout else None,
        "modes": batch.modes,
        "rejected": batch.rejected,
        "stats": stats or {},
    }
    blob = b"".join(np.ascontiguousarray(getattr(batch, name)).astype(dt).tobytes() for name, dt in _ARRAYS)
    Path(path).write_bytes(b"PKD1 " + json.dumps(header, sort_keys=True).encode() + b"\n" + blob)


def load_packed(path) -> tuple[PackedBatch, dict]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if not raw.startswith(b"PKD1 ") or end < 0:
        raise ValueError(f"{path}: byte 0: not a PKD1 dataset")
    try:
        header = json.loads(raw[5:end])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: byte {5 + e.pos}: bad header json: {e.msg}") from None
    r, L = header["rows"], header["context_length"]
    at = end + 1
    arrays = {}
    for name, dt in _ARRAYS:
        size = np.dtype(dt).itemsize * r * L
        if len(raw) < at + size:
            raise ValueError(f"{path}: byte {len(raw)}: truncated {name} payload")
        arrays[name] = np.frombuffer(raw[at : at + size], dtype=dt).reshape(r, L)
        at += size
    if at != len(raw):
        raise ValueError(f"{path}: byte {at}: trailing bytes after payload")
    layout = VocabLayout(**header["layout"]) if header["layout"] else None
    batch = PackedBatch(
        arrays["tokens"].astype(np.int64), arrays["weights"].astype(np.float32), arrays["segments"].astype(np.uint8),
        arrays["doc_ids"].astype(np.int64), header["modes"], header["rejected"], layout,
    )
    return batch, header["stats"]
