"""Stage-one input/fusion ablation on a held-out clip with static masks.

Trains the full model, a single-frame variant (no cross-frame attention),
and a variant without the mirrored/synthesized texture channels, with the
same data and step budget per seed, then compares missing-region error.

Usage: python scripts/run_ablation.py [--steps N] [--seeds 0,1,2]
"""

import argparse

import torch

from uvinpaint import experiments


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=1200)
    ap.add_argument("--seeds", type=str, default="0,1,2")
    ap.add_argument("--base-width", type=int, default=8)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    torch.set_num_threads(args.threads)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    res = experiments.ablation_stage1(seeds=seeds, steps=args.steps,
                                      base_width=args.base_width)
    print("held-out missing-region L1 per seed:")
    for name, vals in res.per_seed.items():
        print(f"  {name:15s} " + "  ".join(f"{v:.4f}" for v in vals))
    print("medians:")
    for name, val in res.median_missing_l1.items():
        print(f"  {name:15s} {val:.4f}")


if __name__ == "__main__":
    main()
