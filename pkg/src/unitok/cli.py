"""Command-line entry point: ``python -m unitok <command> --config run.json --out DIR``.

Every command writes into a run directory (config.json, checkpoints/,
metrics.csv, samples/) and fails with a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import file_sha256, load_tokenizer, save_tokenizer
from .codec import (
    SEG_VISION,
    VocabLayout,
    assemble_document,
    layout_vocab,
    load_packed,
    pack,
    save_packed,
)
from .config import ConfigError, RunConfig, load_config, save_config
from .sampling import SampleParams, caption_image, extend_video, generate_image
from .training import (
    dpo_step,
    freeze,
    load_training_state,
    load_triplets,
    pretrain_step,
    qft_batch,
    qft_step,
    save_training_state,
    select_rows,
    step_rng,
)
from .transformer import TransformerModel
from .vq import MediaClip, VisionTokenizer, fit, load_clip, load_grid, psnr, save_clip, save_grid, ssim

KEEP_CHECKPOINTS = 3


class CommandError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, 2)


def _fail(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    sys.exit(code)


# -- run directory ------------------------------------------------------------------------


class RunDir:
    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.hash = cfg.hash()
        for sub in ("checkpoints", "samples"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        save_config(self.root / "config.json", cfg)
        (self.root / "config.hash").write_text(self.hash + "\n")

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    def metrics(self, fresh: bool) -> "MetricsLog":
        return MetricsLog(self.root / "metrics.csv", fresh)

    def prune(self, pattern: str = "step_*.ckpt") -> None:
        old = sorted(self.checkpoints.glob(pattern))[:-KEEP_CHECKPOINTS]
        for p in old:
            p.unlink()


class MetricsLog:
    """CSV ``step,stage,loss,lr,extra...``; the extra columns are fixed by the first row."""

    def __init__(self, path: Path, fresh: bool):
        self.path = path
        self.columns = None
        if fresh and path.exists():
            path.unlink()
        if path.exists():
            with open(path) as f:
                self.columns = next(csv.reader(f), None)

    def write(self, stage: str, metrics: dict) -> None:
        row = {"stage": stage, **metrics}
        if self.columns is None:
            extra = sorted(k for k in row if k not in ("step", "stage", "loss", "lr"))
            self.columns = ["step", "stage", "loss", "lr", *extra]
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.columns)
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([_fmt(row.get(c, "")) for c in self.columns])


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


# -- manifests ------------------------------------------------------------------------------


def read_manifest(path) -> list[dict]:
    """JSON lines ``{"caption", "media", "mode"}``; media paths resolve against the manifest."""
    if not path:
        raise CommandError("no manifest configured (data.manifest)")
    path = Path(path)
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            media = Path(rec["media"])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CommandError(f"{path}: line {n}: bad manifest record ({e})") from None
        records.append({
            "caption": rec.get("caption", ""),
            "media": media if media.is_absolute() else path.parent / media,
            "mode": rec.get("mode", "generation"),
            "line": n,
        })
    return records


def _load_clips(records) -> list[MediaClip]:
    return [load_clip(r["media"]) for r in records]


def _holdout_split(n: int, fraction: float) -> tuple[list[int], list[int]]:
    held = int(np.ceil(n * fraction)) if n > 1 and fraction > 0 else 0
    held = min(held, n - 1)
    return list(range(n - held)), list(range(n - held, n))


# -- tokenizer commands -------------------------------------------------------------------------


def recon_table(tokenizer, clips: list[MediaClip]) -> list[dict]:
    """Mean PSNR/SSIM per resolution bucket (``HxW``), sorted by pixel count."""
    buckets: dict[tuple[int, int], list[tuple[float, float]]] = {}
    for clip in clips:
        rec = tokenizer.reconstruct(clip)
        buckets.setdefault((clip.h, clip.w), []).append((psnr(clip, rec), ssim(clip, rec)))
    rows = []
    for (h, w) in sorted(buckets, key=lambda k: (k[0] * k[1], k)):
        vals = np.array(buckets[(h, w)])
        rows.append({"resolution": f"{h}x{w}", "clips": len(vals), "psnr": float(vals[:, 0].mean()),
                     "ssim": float(vals[:, 1].mean())})
    return rows


def write_recon_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["resolution", "clips", "psnr", "ssim"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "psnr": f"{r['psnr']:.4f}", "ssim": f"{r['ssim']:.6f}"})


def cmd_train_tokenizer(cfg: RunConfig, run: RunDir, args) -> dict:
    records = read_manifest(cfg.data.manifest)
    clips = _load_clips(records)
    if not clips:
        raise CommandError("manifest has no media")
    if len({c.shape for c in clips}) != 1 or len({c.kind for c in clips}) != 1:
        raise CommandError("train-tokenizer needs clips of a single shape and kind")
    train_idx, held_idx = _holdout_split(len(clips), cfg.tokenizer_train.holdout)
    train, held = [clips[i] for i in train_idx], [clips[i] for i in held_idx] or [clips[i] for i in train_idx]
    tc = cfg.tokenizer_train
    if args.resume:
        tok, opt, _ = load_tokenizer(args.resume)
    else:
        tok = VisionTokenizer(cfg.tokenizer)
        opt = None
    if opt is None:
        opt = nx.AdamW(tok.params, lr=tc.lr, weight_decay=tc.weight_decay)
    log = run.metrics(fresh=not args.resume)
    every = cfg.train.checkpoint_every

    def on_step(step, metrics, q, before):
        log.write("tokenizer", {"step": metrics["step"], "loss": metrics["total"], "lr": metrics["lr"],
                                "l2": metrics["l2"], "codebook": metrics["codebook"],
                                "commitment": metrics["commitment"]})
        if every and metrics["step"] % every == 0 and metrics["step"] < tc.steps:
            save_tokenizer(run.checkpoints / f"step_{metrics['step']:06d}.ckpt", tok, opt, {"config_hash": run.hash})
            run.prune()

    fit(tok, train, opt, tc.steps, tc.lr, tc.batch_size, tc.seed, on_step)
    digest = save_tokenizer(run.checkpoints / "tokenizer.ckpt", tok, opt, {"config_hash": run.hash})
    rows = recon_table(tok, held)
    mean = np.mean([c.frames for c in train], axis=0)
    baseline = float(np.mean([psnr(c.frames, mean) for c in held]))
    report = {"checkpoint": "checkpoints/tokenizer.ckpt", "sha256": digest, "holdout": len(held),
              "psnr": float(np.mean([r["psnr"] for r in rows])), "ssim": float(np.mean([r["ssim"] for r in rows])),
              "baseline_psnr": baseline, "config_hash": run.hash}
    (run.root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_recon_csv(run.root / "recon.csv", rows)
    return report


def cmd_eval_recon(cfg: RunConfig, run: RunDir, args) -> dict:
    path = args.checkpoint or cfg.data.tokenizer_checkpoint
    if not path:
        raise CommandError("eval-recon needs a tokenizer checkpoint")
    tok, _, _ = load_tokenizer(path)
    rows = recon_table(tok, _load_clips(read_manifest(cfg.data.manifest)))
    write_recon_csv(run.root / "recon.csv", rows)
    return {"rows": rows, "csv": "recon.csv"}


# -- corpus ------------------------------------------------------------------------------------------


def _layout(cfg: RunConfig, tokenizer: VisionTokenizer) -> VocabLayout:
    return layout_vocab(cfg.data.text_size, tokenizer.config.codebook_size)


def build_corpus(records, tokenizer: VisionTokenizer, layout: VocabLayout, context_length: int, vision_weight=0.5):
    docs = []
    for r in records:
        grid = tokenizer.tokenize(load_clip(r["media"]))
        docs.append(assemble_document(r["caption"], grid, layout, r["mode"], vision_weight))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        batch = pack(docs, context_length, layout)
    accepted = [i for i in range(len(docs)) if i not in set(batch.rejected)]
    tokens = sum(len(docs[i]) for i in accepted)
    vision = sum(int(np.sum(docs[i].segments == SEG_VISION)) for i in accepted)
    stats = {"documents": len(docs), "accepted": len(accepted), "rows": batch.num_rows, "tokens": tokens,
             "vision_tokens": vision, "vision_fraction": vision / tokens if tokens else 0.0,
             "rejected": batch.rejected, "rejected_lines": [records[i]["line"] for i in batch.rejected],
             "context_length": context_length}
    return batch, stats


def cmd_build_corpus(cfg: RunConfig, run: RunDir, args) -> dict:
    records = read_manifest(cfg.data.manifest)
    path = args.checkpoint or cfg.data.tokenizer_checkpoint
    if not path:
        raise CommandError("build-corpus needs a tokenizer checkpoint (data.tokenizer_checkpoint)")
    tok, _, _ = load_tokenizer(path)
    layout = _layout(cfg, tok)
    if not records:
        warnings.warn("empty manifest: writing an empty dataset")
    batch, stats = build_corpus(records, tok, layout, cfg.train.context_length, cfg.train.vision_weight)
    if batch.rejected:
        warnings.warn(f"{len(batch.rejected)} document(s) longer than {cfg.train.context_length} tokens rejected")
    stats["tokenizer_sha256"] = file_sha256(path)
    stats["config_hash"] = run.hash
    save_packed(run.root / "dataset.pkd", batch, stats)
    (run.root / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats


# -- training ------------------------------------------------------------------------------------------


def _check_layout(model: TransformerModel, layout: VocabLayout | None) -> None:
    if layout is not None and model.config.vocab_size != layout.total:
        raise CommandError(f"vocabulary mismatch: model has {model.config.vocab_size} ids, layout total is {layout.total}")


def _model_and_optimizer(cfg: RunConfig, args, lr: float):
    if args.resume:
        model, opt, _ = load_training_state(args.resume)
        if opt is None:
            raise CommandError(f"{args.resume}: checkpoint has no optimizer state to resume from")
        return model, opt
    if cfg.data.init_checkpoint:
        model, _, _ = load_training_state(cfg.data.init_checkpoint)
    else:
        model = TransformerModel(cfg.model)
    return model, nx.AdamW(model.params, lr=lr, weight_decay=cfg.train.weight_decay)


def _train_loop(cfg: RunConfig, run: RunDir, args, step_fn, stage: str, checkpoint_extra: dict) -> dict:
    model, opt = _model_and_optimizer(cfg, args, cfg.train.base_lr)
    log = run.metrics(fresh=not args.resume)
    metrics = {}
    every = cfg.train.checkpoint_every
    while opt.state.step < cfg.train.total_steps:
        metrics = step_fn(model, opt)
        log.write(stage, metrics)
        step = metrics["step"]
        if every and step % every == 0 and step < cfg.train.total_steps:
            save_training_state(run.checkpoints / f"step_{step:06d}.ckpt", model, opt,
                                {"stage": stage, "config_hash": run.hash, **checkpoint_extra})
            run.prune()
    digest = save_training_state(run.checkpoints / "final.ckpt", model, opt,
                                 {"stage": stage, "config_hash": run.hash, **checkpoint_extra})
    return {"checkpoint": "checkpoints/final.ckpt", "sha256": digest, "steps": opt.state.step, "last": metrics}


def _dataset(cfg: RunConfig):
    if not cfg.data.dataset:
        raise CommandError("no dataset configured (data.dataset)")
    batch, _ = load_packed(cfg.data.dataset)
    if batch.num_rows == 0:
        raise CommandError(f"{cfg.data.dataset}: dataset is empty")
    return batch


def cmd_pretrain(cfg: RunConfig, run: RunDir, args) -> dict:
    if cfg.train.stage not in ("pretrain1", "pretrain2"):
        raise CommandError(f"pretrain expects stage pretrain1 or pretrain2, config has {cfg.train.stage}")
    batch = _dataset(cfg)

    def step(model, opt):
        _check_layout(model, batch.layout)
        return pretrain_step(model, batch, opt, cfg.train)

    return _train_loop(cfg, run, args, step, cfg.train.stage, {"layout": batch.layout.to_dict()})


def cmd_qft(cfg: RunConfig, run: RunDir, args) -> dict:
    batch = qft_batch(_dataset(cfg))
    qcfg = dataclasses.replace(cfg.train, stage="qft")

    def step(model, opt):
        _check_layout(model, batch.layout)
        return qft_step(model, batch, opt, qcfg)

    return _train_loop(cfg, run, args, step, "qft", {"layout": batch.layout.to_dict()})


def cmd_dpo(cfg: RunConfig, run: RunDir, args) -> dict:
    if not cfg.data.reference_checkpoint:
        raise CommandError("dpo requires a reference checkpoint (data.reference_checkpoint)")
    if not cfg.data.triplets:
        raise CommandError("dpo requires a triplet manifest (data.triplets)")
    reference = freeze(load_training_state(cfg.data.reference_checkpoint)[0])
    triplets = load_triplets(cfg.data.triplets)
    if not triplets:
        raise CommandError(f"{cfg.data.triplets}: no triplets")
    dcfg = dataclasses.replace(cfg.train, stage="dpo")

    def step(model, opt):
        if model.config.vocab_size != reference.config.vocab_size:
            raise CommandError("policy and reference vocabularies differ")
        rows = select_rows(len(triplets), dcfg.batch_rows, step_rng(dcfg.seed, opt.state.step))
        metrics = dpo_step(model, reference, [triplets[i] for i in rows], opt, dcfg)
        return {"loss": metrics["total"], **metrics}

    return _train_loop(cfg, run, args, step, "dpo", {"reference_sha256": file_sha256(cfg.data.reference_checkpoint)})


# -- sampling commands -------------------------------------------------------------------------------------


def _sampling_setup(cfg: RunConfig, args):
    path = args.checkpoint or cfg.data.init_checkpoint
    if not path:
        raise CommandError("a model checkpoint is required (--checkpoint or data.init_checkpoint)")
    model, _, header = load_training_state(path)
    layout_info = header.get("layout")
    tokenizer = None
    tok_path = cfg.data.tokenizer_checkpoint
    if tok_path:
        tokenizer, _, _ = load_tokenizer(tok_path)
        layout = _layout(cfg, tokenizer)
    elif layout_info:
        layout = VocabLayout(**layout_info)
    else:
        layout = layout_vocab(cfg.data.text_size, cfg.tokenizer.codebook_size)
    _check_layout(model, layout)
    hashes = {"checkpoint_sha256": file_sha256(path)}
    if tok_path:
        hashes["tokenizer_sha256"] = file_sha256(tok_path)
    return model, layout, tokenizer, hashes


def _write_outputs(run: RunDir, name: str, grid, tokenizer, sidecar: dict) -> dict:
    grid_path = run.samples / f"{name}.vgf"
    save_grid(grid_path, grid)
    outputs = {"grid": str(grid_path.relative_to(run.root))}
    if tokenizer is not None:
        media = run.samples / f"{name}.rtf"
        save_clip(media, tokenizer.decode(grid))
        outputs["media"] = str(media.relative_to(run.root))
    sidecar = {**sidecar, "outputs": outputs, "config_hash": run.hash}
    (run.samples / f"{name}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return sidecar


def _params(cfg: RunConfig, layout: VocabLayout) -> tuple[SampleParams, dict]:
    p = cfg.sample
    echo = {**p.to_dict(), "top_k": p.resolved_top_k(layout.codebook_size)}
    return p, echo


def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise CommandError(f"--dims expects t,h,w integers, got {text!r}") from None
    if len(dims) != 3:
        raise CommandError(f"--dims expects t,h,w integers, got {text!r}")
    return dims


def cmd_generate(cfg: RunConfig, run: RunDir, args) -> dict:
    model, layout, tokenizer, hashes = _sampling_setup(cfg, args)
    params, echo = _params(cfg, layout)
    dims = _dims(args.dims)
    tc = tokenizer.config if tokenizer is not None else cfg.tokenizer
    grid = generate_image(model, layout, args.caption, dims, params, cs=tc.spatial_factor, ct=tc.temporal_factor,
                          fps=args.fps)
    return _write_outputs(run, args.name, grid, tokenizer, {"command": "generate", "caption": args.caption,
                                                            "dims": list(dims), "params": echo, **hashes})


def cmd_extend(cfg: RunConfig, run: RunDir, args) -> dict:
    model, layout, tokenizer, hashes = _sampling_setup(cfg, args)
    params, echo = _params(cfg, layout)
    prefix = load_grid(args.grid)
    grid = extend_video(model, layout, prefix, args.frames, params, caption=args.caption)
    return _write_outputs(run, args.name, grid, tokenizer, {"command": "extend", "prefix": str(args.grid),
                                                            "prefix_sha256": file_sha256(args.grid),
                                                            "frames": args.frames, "params": echo, **hashes})


def cmd_caption(cfg: RunConfig, run: RunDir, args) -> dict:
    model, layout, tokenizer, hashes = _sampling_setup(cfg, args)
    params, echo = _params(cfg, layout)
    echo["top_k"] = params.top_k if params.top_k is not None else layout.text_size + 1
    if args.grid:
        grid, source = load_grid(args.grid), args.grid
    elif args.media:
        if tokenizer is None:
            raise CommandError("captioning media needs data.tokenizer_checkpoint")
        grid, source = tokenizer.tokenize(load_clip(args.media)), args.media
    else:
        raise CommandError("caption needs --grid or --media")
    text = caption_image(model, layout, grid, params, max_tokens=args.max_tokens)
    sidecar = {"command": "caption", "source": str(source), "source_sha256": file_sha256(source), "caption": text,
               "params": echo, "config_hash": run.hash, **hashes}
    (run.samples / f"{args.name}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return sidecar


COMMANDS = {
    "train-tokenizer": cmd_train_tokenizer,
    "build-corpus": cmd_build_corpus,
    "pretrain": cmd_pretrain,
    "qft": cmd_qft,
    "dpo": cmd_dpo,
    "generate": cmd_generate,
    "extend": cmd_extend,
    "caption": cmd_caption,
    "eval-recon": cmd_eval_recon,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unitok", description="Desk-scale multimodal token pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config JSON (defaults fill missing keys)")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--resume", help="checkpoint to resume training from")
        if name in ("build-corpus", "eval-recon", "generate", "extend", "caption"):
            p.add_argument("--checkpoint", help="model (or tokenizer) checkpoint")
        if name in ("generate", "extend", "caption"):
            p.add_argument("--name", default="sample", help="output file stem inside samples/")
        if name == "generate":
            p.add_argument("--caption", default="")
            p.add_argument("--dims", default="1,8,8", help="latent grid t,h,w")
            p.add_argument("--fps", type=int, default=1)
        if name == "extend":
            p.add_argument("--grid", required=True, help="VGF1 video prefix")
            p.add_argument("--frames", type=int, required=True)
            p.add_argument("--caption", default="")
        if name == "caption":
            p.add_argument("--grid")
            p.add_argument("--media")
            p.add_argument("--max-tokens", type=int, default=64)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        run = RunDir(args.out, cfg)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = COMMANDS[args.command](cfg, run, args)
        for w in caught:
            sys.stderr.write(json.dumps({"warning": str(w.message)}) + "\n")
    except (CommandError, ConfigError, ValueError, OSError, KeyError, nx.NonFiniteError) as e:
        _fail(type(e).__name__, str(e).replace("\n", " "))
    print(json.dumps({"command": args.command, "out": str(args.out), "result": result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
