"""Memorise 64 synthetic caption/grid documents packed into 512-token rows, then decode greedily.

    python3 scripts/overfit_demo.py --steps 1000
"""
import argparse
import time

from unitok import numerics as nx
from unitok.codec import assemble_document, layout_vocab, pack
from unitok.sampling import SampleParams, generate_image
from unitok.synthetic import caption_for, pattern_grid
from unitok.training import TrainConfig, evaluate, pretrain_step
from unitok.transformer import ModelConfig, TransformerModel


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--docs", type=int, default=64)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--rows", type=int, default=2, help="packed rows per step")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    layout = layout_vocab()
    grids = [pattern_grid(d, 8, 8, layout.codebook_size) for d in range(args.docs)]
    batch = pack([assemble_document(caption_for(d), g, layout) for d, g in enumerate(grids)], 512, layout)
    model = TransformerModel(ModelConfig(seed=args.seed))
    cfg = TrainConfig(stage="pretrain2", base_lr=args.lr, total_steps=args.steps, batch_rows=args.rows, seed=args.seed)
    opt = nx.AdamW(model.params, lr=args.lr, weight_decay=cfg.weight_decay)
    print(f"{args.docs} documents in {batch.num_rows} rows, {model.num_parameters()} parameters")
    start = time.perf_counter()
    while opt.state.step < args.steps:
        out = pretrain_step(model, batch, opt, cfg)
        if out["step"] % 100 == 0:
            print(f"step {out['step']:5d}  loss {out['loss']:.4f}  eval {evaluate(model, batch):.4f}  "
                  f"{time.perf_counter() - start:.0f}s")
    hits = 0
    for d in range(0, args.docs, max(1, args.docs // 8)):
        grid = generate_image(model, layout, caption_for(d), (1, 8, 8), SampleParams(top_k=1, guidance=1.0))
        hits += grid == grids[d]
        print(f"doc {d:2d}: {'reproduced' if grid == grids[d] else 'differs'}")
    print(f"greedy decoding reproduced {hits} grids")


if __name__ == "__main__":
    main()
