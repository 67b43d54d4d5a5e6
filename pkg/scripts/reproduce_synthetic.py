#!/usr/bin/env python3
"""Run the synthetic stress-test suite and build one comparison table.

Trains the TCN and LSTM presets for the adding problem and the copy
memory task (desk-scale budgets), then aggregates the final metrics.
Expect roughly 20 minutes single-threaded for the default list; pass
preset names to run a subset, e.g.

    python scripts/reproduce_synthetic.py copy-t50-tcn copy-t50-lstm
"""

import sys
import time
from pathlib import Path

from seqlab.cli import main as cli_main
from seqlab.presets import get_preset
from seqlab.trainer import train

DEFAULT = [
    "adding-t50-tiny-tcn",
    "adding-t200-tcn",
    "copy-t50-tcn",
    "copy-t50-lstm",
    "charlm-demo-tcn",
    "charlm-demo-rnn",
]


def main() -> int:
    names = sys.argv[1:] or DEFAULT
    out_root = Path("runs")
    run_dirs = []
    for name in names:
        cfg = get_preset(name)
        cfg.out_dir = str(out_root / name)
        run_dirs.append(cfg.out_dir)
        t0 = time.time()
        row, _ = train(cfg)
        frac = "" if row.fraction_of_baseline is None else f" ({row.fraction_of_baseline:.4f}x baseline)"
        print(
            f"{name}: loss={row.loss:.6g} {row.metric_kind}={row.metric:.6g}{frac} "
            f"[{time.time() - t0:.0f}s]"
        )
    table = out_root / "comparison.csv"
    code = cli_main(["compare", "--runs", *run_dirs, "--out", str(table)])
    print(f"comparison table: {table}")
    return code


if __name__ == "__main__":
    sys.exit(main())
