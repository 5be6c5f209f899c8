"""Per-layer functional linearity of a seeded random model.

The per-layer means motivate where a hybrid schedule should flip from
pruning to merging; on random weights expect noisy values, on trained
weights a rising curve.

Usage: python scripts/profile_linearity.py [--arch vit-tiny] [--steps 21] [--r 5]
"""

import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from tofu.linearity import FlConfig, profile_model
from tofu.vit import ARCH_PRESETS, random_model


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--arch", default="vit-tiny", choices=sorted(ARCH_PRESETS))
    parser.add_argument("--steps", type=int, default=21)
    parser.add_argument("--r", type=int, default=5)
    parser.add_argument("--batch", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg = ARCH_PRESETS[args.arch]
    model = random_model(cfg, args.seed)
    rng = np.random.default_rng([args.seed, 1])
    tokens = rng.standard_normal(
        (args.batch, cfg.n_tokens, cfg.channels)).astype(np.float32)

    report = profile_model(model, tokens,
                           FlConfig(n_steps=args.steps, pair_r=args.r))
    print(f"{args.arch}  steps={args.steps}  pairs/seq={args.r}")
    print(f"{'layer':>5}  {'mean FL':>8}  {'std':>7}  {'pairs':>5}")
    for s in report.layers:
        mean = "   n/a" if s.mean_fl is None else f"{s.mean_fl:8.4f}"
        std = "    n/a" if s.std_fl is None else f"{s.std_fl:7.4f}"
        print(f"{s.layer:>5}  {mean}  {std}  {s.count:>5}")


if __name__ == "__main__":
    main()
