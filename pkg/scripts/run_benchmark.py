#!/usr/bin/env python3
"""
End-to-end synthetic benchmark: generate the four-modality set, run the
four-arm ablation and print the table.
"""

import argparse
import os
import sys

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))

from src.main import cmd_ablate, cmd_gen_synth  # noqa: E402

ROOT = os.path.join(os.path.dirname(__file__), "..")


def main(argv=None):
    parser = argparse.ArgumentParser(description="Run the synthetic LitMAS benchmark")
    parser.add_argument("--out", default="benchmark_out", help="Output directory")
    parser.add_argument("--workers", type=int, help="Ablation arms trained in parallel")
    parser.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                        help="Override a training config value")
    args = parser.parse_args(argv)

    os.makedirs(args.out, exist_ok=True)
    data = os.path.join(args.out, "benchmark.feat")
    cmd_gen_synth(os.path.join(ROOT, "configs", "synth_benchmark.cfg"), data, split=True)
    return cmd_ablate(
        os.path.join(ROOT, "configs", "train_benchmark.cfg"),
        os.path.join(args.out, "benchmark.train.feat"),
        os.path.join(args.out, "benchmark.test.feat"),
        os.path.join(args.out, "ablation"),
        overrides=args.overrides,
        workers=args.workers,
    )


if __name__ == "__main__":
    sys.exit(main())
