"""Reproduce the miniature comparison and ablation tables end to end.

Builds the default synthetic dataset (1024 train / 256 test, seed 42),
runs the eight-variant matrix, and prints the aligned ablation table.
Expect a couple of hours on a single CPU core; pass --epochs/--n-train to
shrink the protocol for a quick look.
"""
import argparse
import sys
from pathlib import Path

from latentstain.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default="out/reproduction")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--n-train", type=int, default=1024)
    ap.add_argument("--n-test", type=int, default=256)
    ap.add_argument("--epochs", type=int, default=50)
    args = ap.parse_args()

    root = Path(args.root)
    data = root / "data"
    if not (data / "manifest.csv").exists():
        rc = cli_main(["gen-data", "--n-train", str(args.n_train),
                       "--n-test", str(args.n_test), "--seed", "42",
                       "--out", str(data)])
        if rc != 0:
            return rc
    return cli_main(["ablate", "--dataset", str(data / "manifest.csv"),
                     "--seed", str(args.seed), "--epochs", str(args.epochs),
                     "--out", str(root / "matrix")])


if __name__ == "__main__":
    sys.exit(main())
