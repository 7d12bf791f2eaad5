#!/usr/bin/env python3
"""Collapse-mitigation sweep on the synthetic multimodal corpus."""

import argparse
import sys

from latentmt.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mitigations", default="none,warmup,kl_min=0.1,kl_coeff=0.25")
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="exp2_out")
    args = ap.parse_args()
    return cli_main([
        "experiment2", "--mitigations", args.mitigations, "--size", str(args.size),
        "--epochs", str(args.epochs), "--seed", str(args.seed), "--out-dir", args.out_dir,
    ])


if __name__ == "__main__":
    sys.exit(main())
