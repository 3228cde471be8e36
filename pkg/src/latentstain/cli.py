"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 diverged run.
The LGD_SEED environment variable overrides any configured seed.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .harness import (DivergedRunError, RunConfig, evaluate, load_config,
                      pretrain_teacher, run_ablation_matrix, train)
from .lgdt import load_checkpoint
from .synth import build_dataset, load_manifest, write_targets
from .ppm import read_ppm

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _build_parser() -> _Parser:
    parser = _Parser(prog="latentstain",
                     description="HER2 scoring via latent feature hallucination")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-test", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--grid", type=int, default=8)

    p = sub.add_parser("precompute", help="re-derive density/mask targets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--density-source", choices=("he", "ihc"), default="he")

    for name in ("pretrain-teacher", "train", "ablate"):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} per a run config")
        p.add_argument("--config")
        p.add_argument("--variant")
        p.add_argument("--dataset")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--base-lr", type=float)
        p.add_argument("--teacher-ckpt")
        p.add_argument("--out")

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("inspect", help="list checkpoint parameters")
    p.add_argument("--ckpt", required=True)
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    overrides = {}
    for attr, key in (("variant", "variant"), ("dataset", "dataset"),
                      ("seed", "seed"), ("epochs", "epochs"),
                      ("batch_size", "batch_size"), ("base_lr", "base_lr"),
                      ("teacher_ckpt", "teacher_ckpt"), ("out", "out_root")):
        value = getattr(args, attr)
        if value is not None:
            overrides[key] = value
    if overrides:
        cfg = replace(cfg, **overrides)
    if "LGD_SEED" in os.environ:
        cfg = replace(cfg, seed=int(os.environ["LGD_SEED"]))
    return cfg


def _cmd_gen_data(args) -> int:
    manifest = build_dataset(args.n_train, args.n_test, args.seed, args.out,
                             size=args.size, sigma=args.sigma, grid=args.grid)
    print(f"manifest: {manifest.path}")
    for split in ("train", "test"):
        counts = manifest.class_counts(split)
        joined = ", ".join(f"{c}:{counts[c]}" for c in sorted(counts))
        print(f"{split} class counts: {joined}")
    return EXIT_OK


def _cmd_precompute(args) -> int:
    manifest = load_manifest(args.manifest)
    for row in manifest.rows:
        write_targets(read_ppm(row.he), read_ppm(row.ihc), row.density, row.mask,
                      sigma=args.sigma, grid=args.grid,
                      density_source=args.density_source)
    print(f"wrote targets for {len(manifest.rows)} pairs")
    return EXIT_OK


def _print_epoch(epoch, bd, lr):
    print(f"epoch {epoch:3d}  total {bd.total:.5f}  cls {bd.cls:.5f}  "
          f"dist {bd.dist:.5f}  nuc {bd.nuc:.5f}  mem {bd.mem:.5f}  lr {lr:.3g}")


def _cmd_train(args) -> int:
    result = train(_config_from_args(args), on_epoch=_print_epoch)
    m = result.metrics
    print(f"run dir: {result.run_dir}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"test acc {m.accuracy:.4f}  macro-f1 {m.macro_f1:.4f}  kappa {m.kappa:.4f}"
          f"  (n={m.n}, {result.seconds:.1f}s)")
    return EXIT_OK


def _cmd_pretrain_teacher(args) -> int:
    ckpt, result = pretrain_teacher(_config_from_args(args))
    m = result.metrics
    print(f"teacher checkpoint: {ckpt}")
    print(f"ihc-unimodal test acc {m.accuracy:.4f}  macro-f1 {m.macro_f1:.4f}  "
          f"kappa {m.kappa:.4f}")
    return EXIT_OK


_TABLE_TRAITS = {
    "ihc_unimodal": ("-", "-", "-"),
    "A": ("no", "no", "none"),
    "B": ("yes", "concat", "none"),
    "C": ("yes", "yes", "none"),
    "D": ("yes", "yes", "nuclei"),
    "E": ("yes", "yes", "membrane"),
    "F": ("yes", "yes", "both"),
    "feature_concat": ("-", "yes", "-"),
}


def _cmd_ablate(args) -> int:
    rows = run_ablation_matrix(_config_from_args(args))
    header = ("variant", "Halluc.", "Attn.", "Bio-Reg", "Acc", "F1", "kappa")
    table = [header]
    for row in rows:
        halluc, attn, bio = _TABLE_TRAITS[row["variant"]]
        table.append((row["variant"], halluc, attn, bio,
                      row["acc"], row["f1"], row["kappa"]))
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    for r in table:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return EXIT_OK


def _cmd_eval(args) -> int:
    report = evaluate(args.ckpt, args.manifest)
    print(report.to_json())
    return EXIT_OK


def _cmd_inspect(args) -> int:
    state = load_checkpoint(args.ckpt)
    width = max((len(n) for n in state), default=0)
    for name in sorted(state):
        arr = state[name]
        shape = "x".join(str(d) for d in arr.shape)
        print(f"{name.ljust(width)}  {shape:>12}  norm={np.linalg.norm(arr):.6g}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "precompute": _cmd_precompute,
    "pretrain-teacher": _cmd_pretrain_teacher,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "eval": _cmd_eval,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except DivergedRunError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    sys.exit(main())
