"""Build the default dataset and run the variant ladder for one seed.

Development aid for checking the accuracy orderings before freezing the
generator; prints one row per run.
"""
import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from latentstain.harness import RunConfig, pretrain_teacher, train
from latentstain.synth import build_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default="/tmp/ls-calib")
    ap.add_argument("--n-train", type=int, default=1024)
    ap.add_argument("--n-test", type=int, default=256)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--variants", default="A,B,C,D,E,F")
    args = ap.parse_args()

    root = Path(args.root)
    data_dir = root / "data"
    if not (data_dir / "manifest.csv").exists():
        t0 = time.perf_counter()
        build_dataset(args.n_train, args.n_test, 42, data_dir)
        print(f"dataset built in {time.perf_counter()-t0:.1f}s", flush=True)
    base = RunConfig(dataset=str(data_dir / "manifest.csv"), seed=args.seed,
                     epochs=args.epochs, out_root=str(root / f"runs-{args.seed}"))

    t0 = time.perf_counter()
    teacher_ckpt, tres = pretrain_teacher(base)
    print(f"ihc_unimodal acc={tres.metrics.accuracy:.4f} f1={tres.metrics.macro_f1:.4f} "
          f"({tres.seconds:.0f}s)", flush=True)
    for v in args.variants.split(","):
        needs = v not in ("A", "feature_concat", "image_concat")
        cfg = replace(base, variant=v,
                      teacher_ckpt=str(teacher_ckpt) if needs else None)
        res = train(cfg)
        print(f"{v} acc={res.metrics.accuracy:.4f} f1={res.metrics.macro_f1:.4f} "
              f"kappa={res.metrics.kappa:.4f} last_total={res.loss_log[-1].total:.4f} "
              f"first_total={res.loss_log[0].total:.4f} ({res.seconds:.0f}s)", flush=True)
    print(f"ladder done in {(time.perf_counter()-t0)/60:.1f} min", flush=True)


if __name__ == "__main__":
    sys.exit(main())
