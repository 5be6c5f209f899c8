"""Print the analytical cost table: GFLOPs per architecture and reduction rate.

Usage: python scripts/flops_table.py [--arch vit-b16 vit-l16] [--r 0 8 12 16 20]
"""

import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from tofu.fusion import ReduceSpec
from tofu.vit import ARCH_PRESETS, flops_estimate


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--arch", nargs="+", default=["vit-b16", "vit-l16"],
                        choices=sorted(ARCH_PRESETS))
    parser.add_argument("--r", nargs="+", type=int, default=[0, 8, 12, 16, 20])
    args = parser.parse_args()

    header = "arch      " + "".join(f"  r={r:<8d}" for r in args.r)
    print(header)
    print("-" * len(header))
    for arch in args.arch:
        cfg = ARCH_PRESETS[arch]
        cells = []
        for r in args.r:
            total = flops_estimate(cfg, ReduceSpec(r=r)).total
            cells.append(f"  {total / 1e9:<10.2f}")
        print(f"{arch:<10}" + "".join(cells))
    print("\nvalues are GFLOPs per image (1 MAC = 1 FLOP, patch embed included)")


if __name__ == "__main__":
    main()
