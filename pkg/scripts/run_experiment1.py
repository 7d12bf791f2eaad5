#!/usr/bin/env python3
"""Zeroed-KL posterior comparison (co-attention vs mean-pool) over seeds."""

import argparse
import sys

from latentmt.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out-dir", default="exp1_out")
    args = ap.parse_args()
    for seed in args.seeds.split(","):
        rc = cli_main([
            "experiment1", "--seed", seed.strip(), "--size", str(args.size),
            "--epochs", str(args.epochs), "--out-dir", f"{args.out_dir}/seed{seed.strip()}",
        ])
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
