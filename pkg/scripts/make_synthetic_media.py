"""Write a synthetic two-pattern media corpus plus a starter run config.

    python3 scripts/make_synthetic_media.py --out data/synth --count 16
    unitok train-tokenizer --config data/synth/run.json --out data/synth/runs/tok
"""
import argparse
import json
from pathlib import Path

from unitok.synthetic import two_pattern_clips, write_media_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=16)
    ap.add_argument("--size", type=int, default=32, help="frame height and width")
    ap.add_argument("--frames", type=int, default=2, help="1 writes stills")
    ap.add_argument("--understanding", type=float, default=0.0, help="fraction of understanding-mode records")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    clips = two_pattern_clips(args.count, size=args.size, frames=args.frames, seed=args.seed)
    n_und = int(round(args.understanding * args.count))
    modes = ["understanding" if i < n_und else "generation" for i in range(args.count)]
    manifest = write_media_corpus(out, clips, modes=modes)
    config = {
        "model": {"max_context": 512},
        "train": {"stage": "pretrain1", "total_steps": 500, "base_lr": 3e-3, "batch_rows": 2, "checkpoint_every": 100},
        "data": {"manifest": manifest.name, "tokenizer_checkpoint": "runs/tok/checkpoints/tokenizer.ckpt",
                 "dataset": "runs/corpus/dataset.pkd"},
    }
    (out / "run.json").write_text(json.dumps(config, indent=2) + "\n")
    print(f"wrote {args.count} clips, {manifest} and {out / 'run.json'}")


if __name__ == "__main__":
    main()
