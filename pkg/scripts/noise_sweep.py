"""Sweep H&E confounder noise levels; report accuracy of variants A and E.

Development aid: finds generator settings where ring-echo evidence is
extractable under dense supervision but not trivially under plain CE.
"""
import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import latentstain.synth as synth
from latentstain.harness import RunConfig, pretrain_teacher, train
from latentstain.synth import build_dataset


def run_setting(tag, speckle, tint, root, n_train, n_test, epochs, variants):
    synth.HE_SPECKLE_SCALE = speckle
    synth.HE_TINT_MAX = tint
    data_dir = Path(root) / f"data-{tag}"
    if not (data_dir / "manifest.csv").exists():
        build_dataset(n_train, n_test, 42, data_dir)
    base = RunConfig(dataset=str(data_dir / "manifest.csv"), seed=42,
                     epochs=epochs, out_root=str(Path(root) / f"runs-{tag}"))
    teacher_ckpt, tres = pretrain_teacher(base)
    print(f"[{tag}] teacher acc={tres.metrics.accuracy:.3f}", flush=True)
    for v in variants:
        needs = v not in ("A",)
        cfg = replace(base, variant=v,
                      teacher_ckpt=str(teacher_ckpt) if needs else None)
        res = train(cfg)
        last = res.loss_log[-1]
        print(f"[{tag}] {v} acc={res.metrics.accuracy:.3f} "
              f"cls={last.cls:.3f} dist={last.dist:.3f} nuc={last.nuc:.3f} "
              f"mem={last.mem:.3f} ({res.seconds:.0f}s)", flush=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default="/tmp/ls-sweep")
    ap.add_argument("--n-train", type=int, default=512)
    ap.add_argument("--n-test", type=int, default=128)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--variants", default="A,E")
    ap.add_argument("--settings", default="s1:0.05:0.10,s2:0.025:0.05,s3:0.012:0.05")
    args = ap.parse_args()
    t0 = time.perf_counter()
    for spec in args.settings.split(","):
        tag, speckle, tint = spec.split(":")
        run_setting(tag, float(speckle), float(tint), args.root, args.n_train,
                    args.n_test, args.epochs, args.variants.split(","))
    print(f"sweep done in {(time.perf_counter()-t0)/60:.1f} min", flush=True)


if __name__ == "__main__":
    sys.exit(main())
