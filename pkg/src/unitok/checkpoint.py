"""CKPT1 checkpoints: named little-endian arrays plus a JSON header.

Layout::

    CKPT1 {json header}\\n
    [[name, dtype, shape, offset], ...]\\n
    payload bytes (offsets are relative to the payload start)
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"CKPT1 "


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> str:
    """Write ``arrays`` bit-exactly and return the file's sha256."""
    table, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|", "<") else a.dtype
        raw = a.astype(dt, copy=False).tobytes()
        table.append([name, dt.str, list(a.shape), offset])
        chunks.append(raw)
        offset += len(raw)
    blob = (
        MAGIC + json.dumps(header or {}, sort_keys=True).encode() + b"\n"
        + json.dumps(table).encode() + b"\n" + b"".join(chunks)
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: byte 0: not a CKPT1 checkpoint")
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0:
        raise CheckpointError(f"{path}: byte {len(raw)}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC) : first])
        table = json.loads(raw[first + 1 : second])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: bad header json: {e.msg}") from None
    base = second + 1
    arrays = {}
    for name, dtype, shape, off in table:
        dt = np.dtype(dtype)
        n = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if base + off + n > len(raw):
            raise CheckpointError(f"{path}: byte {len(raw)}: payload for {name} truncated")
        arrays[name] = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=base + off).reshape(shape).copy()
    return arrays, header


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def split_prefix(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def save_tokenizer(path, tokenizer, optimizer=None, extra: dict | None = None) -> str:
    arrays = {f"model.{k}": v for k, v in tokenizer.state_arrays().items()}
    header = {"kind": "tokenizer", "tokenizer": tokenizer.config.to_dict(), "steps": int(tokenizer.steps),
              "positions_seen": int(tokenizer.positions_seen), **(extra or {})}
    if optimizer is not None:
        st = optimizer.state
        arrays.update({f"opt.{k}": v for k, v in st.arrays().items()})
        header["optimizer"] = {"lr": st.lr, "weight_decay": st.weight_decay, "betas": list(st.betas),
                               "eps": st.eps, "step": st.step}
    return save_checkpoint(path, arrays, header)


def load_tokenizer(path):
    """Returns (tokenizer, optimizer or None, header)."""
    from .numerics import AdamW
    from .vq import TokenizerConfig, VisionTokenizer

    arrays, header = load_checkpoint(path)
    if header.get("kind") != "tokenizer":
        raise CheckpointError(f"{path}: not a tokenizer checkpoint (kind={header.get('kind')!r})")
    tok = VisionTokenizer(TokenizerConfig(**header["tokenizer"]))
    tok.load_state_arrays(split_prefix(arrays, "model."))
    tok.steps = header.get("steps", 0)
    tok.positions_seen = header.get("positions_seen", 0)
    optimizer = None
    if "optimizer" in header:
        o = header["optimizer"]
        optimizer = AdamW(tok.params, o["lr"], o["weight_decay"], tuple(o["betas"]), o["eps"])
        optimizer.state.step = o["step"]
        optimizer.state.load_arrays(split_prefix(arrays, "opt."))
    return tok, optimizer, header
