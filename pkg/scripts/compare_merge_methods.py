"""Desk-scale speed comparison of merge methods on seeded random weights.

Interleaves the timed passes across methods so background noise spreads
evenly, then prints median wall clock and throughput per method.

Usage: python scripts/compare_merge_methods.py [--arch vit-b16] [--r 16]
       [--batch 8] [--repeat 5]
"""

import argparse
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from tofu.fusion import MergeMethod, ReduceSpec
from tofu.vit import ARCH_PRESETS, forward, random_model


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--arch", default="vit-b16", choices=sorted(ARCH_PRESETS))
    parser.add_argument("--r", type=int, default=16)
    parser.add_argument("--batch", type=int, default=8)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg = ARCH_PRESETS[args.arch]
    model = random_model(cfg, args.seed)
    rng = np.random.default_rng([args.seed, 1])
    x = rng.standard_normal(
        (args.batch, cfg.n_tokens, cfg.channels)).astype(np.float32)

    depth = cfg.depth
    specs = {
        "full": ReduceSpec(r=0),
        "pruned": ReduceSpec(r=args.r, merge_string="P" * depth),
        "average": ReduceSpec(r=args.r, merge_string="A" * depth,
                              late_method=MergeMethod.AVERAGE),
        "mlerp": ReduceSpec(r=args.r, merge_string="A" * depth,
                            late_method=MergeMethod.MLERP),
    }

    for spec in specs.values():  # warmup
        forward(x, model, spec)
    times = {name: [] for name in specs}
    for _ in range(args.repeat):
        for name, spec in specs.items():
            t0 = time.perf_counter()
            forward(x, model, spec)
            times[name].append(time.perf_counter() - t0)

    full_median = float(np.median(times["full"]))
    print(f"{args.arch}  batch={args.batch}  r={args.r}  repeat={args.repeat}")
    print(f"{'method':>8}  {'median ms':>10}  {'img/s':>8}  {'vs full':>8}")
    for name, ts in times.items():
        med = float(np.median(ts))
        print(f"{name:>8}  {med * 1000:>10.1f}  {args.batch / med:>8.2f}  "
              f"{full_median / med:>7.2f}x")


if __name__ == "__main__":
    main()
