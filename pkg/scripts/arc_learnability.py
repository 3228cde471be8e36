"""Diagnostic: train variant A on patches whose nucleus count carries no
class information, so arc geometry is the only usable signal."""
import sys
from pathlib import Path

import latentstain.synth as synth
from latentstain.harness import RunConfig, train
from latentstain.synth import build_dataset


def main():
    synth.NUCLEUS_COUNT_RANGE = ((8, 12),) * 4  # count uninformative
    root = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/ls-arconly")
    data = root / "data"
    if not (data / "manifest.csv").exists():
        build_dataset(1024, 256, 42, data)
    cfg = RunConfig(variant="A", dataset=str(data / "manifest.csv"), seed=42,
                    out_root=str(root / "runs"))
    res = train(cfg)
    print(f"arc-only A: acc={res.metrics.accuracy:.3f} "
          f"f1={res.metrics.macro_f1:.3f} "
          f"first={res.loss_log[0].total:.3f} last={res.loss_log[-1].total:.3f}",
          flush=True)
    print(res.metrics.confusion)


if __name__ == "__main__":
    main()
