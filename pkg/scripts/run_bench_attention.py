"""Windowed vs non-local attention cost comparison.

Prints analytic multiply-accumulate counts and measured single-thread wall
times over a feature-map size sweep.

Usage: python scripts/run_bench_attention.py [--channels C] [--repeats R]
"""

import argparse

from uvinpaint import experiments


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    rows = experiments.bench_attention(channels=args.channels,
                                       repeats=args.repeats)
    head = (f"{'size':>8} {'mac_window':>12} {'mac_nonlocal':>14} "
            f"{'mac_ratio':>10} {'t_window':>10} {'t_nonlocal':>11} "
            f"{'t_ratio':>8}")
    print(head)
    for r in rows:
        print(f"{r.h_f}x{r.w_f:>5} {r.mac_frame_wise:>12} {r.mac_non_local:>14} "
              f"{r.mac_ratio:>10.1f} {r.time_frame_wise_s:>9.3f}s "
              f"{r.time_non_local_s:>10.3f}s {r.time_ratio:>7.1f}x")


if __name__ == "__main__":
    main()
