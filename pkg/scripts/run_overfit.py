"""Single-clip trainability check for both stages.

Usage: python scripts/run_overfit.py [--stage 1|2] [--steps N] [--seed S]
"""

import argparse

import torch

from uvinpaint import experiments


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--stage", type=int, default=1, choices=(1, 2))
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    torch.set_num_threads(args.threads)
    run = (experiments.overfit_stage1 if args.stage == 1
           else experiments.overfit_stage2)
    res = run(seed=args.seed, steps=args.steps)
    for step, metric in res.metric_history:
        print(f"step {step:5d}  masked-region L1 {metric:.4f}")
    print(f"reached<0.05: {res.reached} after {res.steps_used} steps "
          f"(final {res.final_metric:.4f})")


if __name__ == "__main__":
    main()
