"""Train the desk tokenizer on the two-pattern clips and report reconstruction quality.

    python3 scripts/tokenizer_demo.py --steps 300
"""
import argparse
import time

import numpy as np

from unitok import numerics as nx
from unitok.synthetic import two_pattern_clips
from unitok.vq import TokenizerConfig, VisionTokenizer, fit, psnr, ssim


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=4e-3)
    ap.add_argument("--clips", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train = two_pattern_clips(args.clips, seed=args.seed)
    held = two_pattern_clips(args.clips, seed=args.seed + 1)
    tok = VisionTokenizer(TokenizerConfig(seed=args.seed))
    opt = nx.AdamW(tok.params, lr=args.lr, weight_decay=0.0)
    start = time.perf_counter()

    def report(step, metrics, q, before):
        if metrics["step"] % 50 == 0 or metrics["step"] == 1:
            print(f"step {metrics['step']:4d}  l2 {metrics['l2']:.4f}  codebook {metrics['codebook']:.4f}  "
                  f"commit {metrics['commitment']:.4f}  lr {metrics['lr']:.2e}  {time.perf_counter() - start:.0f}s")

    fit(tok, train, opt, args.steps, args.lr, batch_size=args.clips, seed=args.seed, callback=report)
    mean = np.mean([c.frames for c in train], axis=0)
    recs = [tok.reconstruct(c) for c in held]
    print(f"held-out PSNR {np.mean([psnr(c, r) for c, r in zip(held, recs)]):.2f} dB  "
          f"SSIM {np.mean([ssim(c, r) for c, r in zip(held, recs)]):.3f}")
    print(f"mean-image baseline PSNR {np.mean([psnr(c.frames, mean) for c in held]):.2f} dB")
    print(f"codes in use {int(np.sum(tok.usage > 0))} / {tok.config.codebook_size}")


if __name__ == "__main__":
    main()
