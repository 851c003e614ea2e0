#!/usr/bin/env python3
"""
Run script for LitMAS: synthetic data, two-step training, scoring, PAD
evaluation, ablation and embedding export.
"""

import argparse
import sys

from src.errors import LitmasError


def parse_arguments(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(description="LitMAS multi-modal presentation attack detection")
    parser.add_argument("--show-config", action="store_true", help="Print environment settings before running")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="Generate a synthetic multi-modal feature file")
    p.add_argument("config_path", help="Synthetic-data config file")
    p.add_argument("out_path", help="Feature file to write")
    p.add_argument("--split", action="store_true", help="Also write stratified .train/.test files")
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE", help="Override a config value")

    p = sub.add_parser("train", help="MAC pre-training and/or MoPE fine-tuning")
    p.add_argument("config_path", help="Training config file")
    p.add_argument("train_file", help="Training feature file")
    p.add_argument("out_dir", help="Directory for checkpoints and run logs")
    p.add_argument("--step", choices=["1", "2", "both"], default="both", help="Which step(s) to run")
    p.add_argument("--no-mac", action="store_true", help="Skip MAC pre-training (encoder from scratch)")
    p.add_argument("--no-mope", action="store_true", help="One shared projection head instead of MoPE")
    p.add_argument("--val-file", help="Optional validation feature file")
    p.add_argument("--init-from", help="Step-1 checkpoint for --step 2 (default: <out_dir>/step1.ckpt)")
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE", help="Override a config value")

    p = sub.add_parser("score", help="Score a feature file with a step2 checkpoint")
    p.add_argument("ckpt")
    p.add_argument("feature_file")
    p.add_argument("out_path")

    p = sub.add_parser("eval", help="PAD metrics report from a score file")
    p.add_argument("score_file")
    p.add_argument("out_path", help="Report CSV to write")
    p.add_argument("--group", choices=["modality", "dataset", "both", "none"], default="both")
    p.add_argument("--tdcf-params", dest="tdcf_params", help="t-DCF cost model config file")
    p.add_argument("--roc-out", dest="roc_out", help="Also write raw ROC/DET points")

    p = sub.add_parser("ablate", help="Four-arm MAC pre-training x MoPE ablation")
    p.add_argument("config_path")
    p.add_argument("train_file")
    p.add_argument("test_file")
    p.add_argument("out_dir")
    p.add_argument("--workers", type=int, help="Arms trained in parallel (default LITMAS_ABLATION_WORKERS)")
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE", help="Override a config value")

    p = sub.add_parser("export-embeddings", help="Write backbone or projected embeddings as CSV")
    p.add_argument("ckpt")
    p.add_argument("feature_file")
    p.add_argument("out_path")
    p.add_argument("--space", choices=["backbone", "projected"], default="backbone")

    p = sub.add_parser("replay", help="Re-run the command recorded in a manifest")
    p.add_argument("manifest_path")

    return parser.parse_args(argv)


def dispatch(args) -> int:
    from src import main

    if args.command == "replay":
        return main.cmd_replay(args.manifest_path)
    kwargs = {k: v for k, v in vars(args).items() if k not in ("command", "show_config")}
    return main.COMMANDS[args.command](**kwargs)


def run(argv=None) -> int:
    """Run one command and map failures to exit codes."""
    args = parse_arguments(argv)
    if args.show_config:
        from src.config import config

        config.print_config()
    try:
        return dispatch(args)
    except LitmasError as exc:
        print(f"✗ {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"✗ I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(run())
