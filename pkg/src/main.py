"""
Command implementations behind ``run.py``.

Every command writes a manifest next to its outputs; ``cmd_replay`` runs a
manifest's command again with the recorded arguments.
"""

import os
from dataclasses import asdict, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from src.config import config, get_logger, load_config_file, parse_overrides
from src.dataio import (
    SynthConfig,
    class_count_table,
    gen_synthetic,
    load_feature_file,
    stratified_split,
    write_feature_file,
)
from src.errors import ArtifactIOError, CheckpointError, ConfigError, DimensionError, MetricUndefinedError
from src.manifest import RunManifest, manifest_path_for
from src.model import embed, load_checkpoint, project_array, save_checkpoint
from src.padmetrics import TdcfParams, evaluate_file, read_score_file, write_roc_points, write_score_file
from src.trainer import TrainConfig, finetune_step2, pretrain_step1, run_ablation, score_view

logger = get_logger("main")

RULE = "=" * 60


def _banner(title: str) -> None:
    print("\n" + RULE)
    print(title)
    print(RULE)


def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"Cannot create directory {path}: {exc}") from exc


def _split_paths(out_path: str):
    root, ext = os.path.splitext(out_path)
    return f"{root}.train{ext}", f"{root}.test{ext}"


def print_class_counts(view) -> None:
    """Per-dataset real/spoof counts."""
    rows = class_count_table(view)
    print(f"{'Dataset':<28}{'Real':>8}{'Spoof':>8}")
    for tag, real, spoof in rows:
        print(f"{tag:<28}{real:>8}{spoof:>8}")
    print(f"{'Total':<28}{sum(r for _, r, _ in rows):>8}{sum(s for _, _, s in rows):>8}")


def cmd_gen_synth(config_path: str, out_path: str, overrides: Optional[List[str]] = None, split: bool = False) -> int:
    """
    Generate a synthetic multi-modal feature file.

    Args:
        config_path: Synthetic-data config file
        out_path: Feature file to write
        overrides: ``key=value`` strings applied over the file
        split: Also write stratified ``.train`` / ``.test`` files

    Returns:
        Exit code
    """
    values = load_config_file(config_path)
    values.update(parse_overrides(overrides))
    synth = SynthConfig.from_mapping(values, source=config_path)
    view = gen_synthetic(synth)
    write_feature_file(view, out_path)
    outputs = [out_path]

    _banner("Synthetic dataset")
    print_class_counts(view)
    print(f"\n✓ Wrote {len(view)} samples ({view.input_dim} features) to {out_path}")
    if split:
        train, test = stratified_split(view, synth.test_fraction, synth.seed)
        train_path, test_path = _split_paths(out_path)
        write_feature_file(train, train_path)
        write_feature_file(test, test_path)
        outputs += [train_path, test_path]
        print(f"✓ Train split: {len(train)} samples -> {train_path}")
        print(f"✓ Test split:  {len(test)} samples -> {test_path}")

    RunManifest.record(
        "gen-synth",
        {"config_path": config_path, "out_path": out_path, "overrides": list(overrides or []), "split": split},
        inputs=[config_path],
        outputs=outputs,
        resolved_config=values,
        seed=synth.seed,
    ).save_to_file(manifest_path_for(out_path))
    return 0


def _train_config(config_path: str, overrides: Optional[List[str]]) -> TrainConfig:
    return TrainConfig.from_file(config_path, parse_overrides(overrides))


def cmd_train(
    config_path: str,
    train_file: str,
    out_dir: str,
    step: str = "both",
    no_mac: bool = False,
    no_mope: bool = False,
    overrides: Optional[List[str]] = None,
    val_file: Optional[str] = None,
    init_from: Optional[str] = None,
) -> int:
    """
    Run Step 1, Step 2 or both, writing checkpoints and run logs under ``out_dir``.

    Returns:
        Exit code
    """
    if step not in ("1", "2", "both"):
        raise ConfigError(f"--step must be 1, 2 or both, got '{step}'")
    cfg = _train_config(config_path, overrides)
    cfg = replace(cfg, use_mac_pretrain=cfg.use_mac_pretrain and not no_mac, use_mope=cfg.use_mope and not no_mope)
    if step == "1" and not cfg.use_mac_pretrain:
        raise ConfigError("--step 1 is MAC pre-training; it cannot run with --no-mac")
    train_view = load_feature_file(train_file)
    val_view = load_feature_file(val_file) if val_file else None
    _ensure_dir(out_dir)
    inputs = [config_path, train_file, val_file]
    outputs = []

    _banner(f"Training (step {step})")
    step1 = None
    if step in ("1", "both") and cfg.use_mac_pretrain:
        step1, log = pretrain_step1(cfg, train_view, val_view)
        ckpt = os.path.join(out_dir, "step1.ckpt")
        save_checkpoint(step1, ckpt)
        log.to_csv(os.path.join(out_dir, "step1_runlog.csv"))
        outputs += [ckpt, os.path.join(out_dir, "step1_runlog.csv")]
        print(f"✓ Step 1: {cfg.epochs_step1} epochs, final MAC loss "
              f"{log.losses[-1] if log.records else float('nan'):.6f} -> {ckpt}")

    if step in ("2", "both"):
        if cfg.use_mac_pretrain and step1 is None:
            source = init_from or os.path.join(out_dir, "step1.ckpt")
            step1 = load_checkpoint(source)
            inputs.append(source)
        bundle, log = finetune_step2(cfg, train_view, step1, val_view)
        ckpt = os.path.join(out_dir, "step2.ckpt")
        save_checkpoint(bundle, ckpt)
        log.to_csv(os.path.join(out_dir, "step2_runlog.csv"))
        outputs += [ckpt, os.path.join(out_dir, "step2_runlog.csv")]
        print(f"✓ Step 2: {cfg.epochs_step2} epochs "
              f"({'MoPE' if cfg.use_mope else 'shared head'}, "
              f"{'pre-trained' if cfg.use_mac_pretrain else 'scratch'} encoder) -> {ckpt}")

    RunManifest.record(
        "train",
        {
            "config_path": config_path, "train_file": train_file, "out_dir": out_dir, "step": step,
            "no_mac": no_mac, "no_mope": no_mope, "overrides": list(overrides or []),
            "val_file": val_file, "init_from": init_from,
        },
        inputs=inputs,
        outputs=outputs,
        resolved_config=cfg.to_mapping(),
        seed=cfg.seed,
    ).save_to_file(manifest_path_for(out_dir, is_dir=True))
    return 0


def cmd_score(ckpt: str, feature_file: str, out_path: str) -> int:
    """Score every sample of a feature file with a step2 checkpoint."""
    bundle = load_checkpoint(ckpt)
    if bundle.step != "step2":
        raise CheckpointError(f"{ckpt} is tagged '{bundle.step}'; scoring needs a step2 checkpoint")
    view = load_feature_file(feature_file)
    records = score_view(bundle, view)
    write_score_file(records, out_path)
    print(f"✓ Scored {len(records)} samples -> {out_path}")
    RunManifest.record(
        "score",
        {"ckpt": ckpt, "feature_file": feature_file, "out_path": out_path},
        inputs=[ckpt, feature_file],
        outputs=[out_path],
    ).save_to_file(manifest_path_for(out_path))
    return 0


def cmd_eval(
    score_file: str,
    out_path: str,
    group: str = "both",
    tdcf_params: Optional[str] = None,
    roc_out: Optional[str] = None,
) -> int:
    """
    Write the metrics report of a score file.

    min t-DCF is computed for the groups named in LITMAS_SPEECH_GROUPS, with
    the cost model from ``tdcf_params`` or the built-in defaults.
    """
    params = TdcfParams.from_file(tdcf_params) if tdcf_params else TdcfParams()
    report = evaluate_file(score_file, group, params, config.SPEECH_GROUPS)
    report.to_csv(out_path)
    outputs = [out_path]
    if roc_out:
        write_roc_points(read_score_file(score_file), roc_out)
        outputs.append(roc_out)

    _banner("PAD metrics")
    print(report.format_table())
    print(f"\n✓ Report written to {out_path}")
    RunManifest.record(
        "eval",
        {"score_file": score_file, "out_path": out_path, "group": group,
         "tdcf_params": tdcf_params, "roc_out": roc_out},
        inputs=[score_file, tdcf_params],
        outputs=outputs,
        resolved_config={k: str(v) for k, v in asdict(params).items()},
    ).save_to_file(manifest_path_for(out_path))
    if not report.overall.defined:
        raise MetricUndefinedError("Overall score set has a single class; metrics are undefined")
    return 0


def cmd_ablate(
    config_path: str,
    train_file: str,
    test_file: str,
    out_dir: str,
    overrides: Optional[List[str]] = None,
    workers: Optional[int] = None,
) -> int:
    """Train and test the four (pre-train, MoPE) arms; write ablation.csv and per-arm checkpoints."""
    cfg = _train_config(config_path, overrides)
    train_view = load_feature_file(train_file)
    test_view = load_feature_file(test_file)
    _ensure_dir(out_dir)

    _banner("Ablation: MAC pre-training x MoPE")
    report = run_ablation(cfg, train_view, test_view, workers)
    outputs = []
    step1_dir = os.path.join(out_dir, "step1")
    _ensure_dir(step1_dir)
    save_checkpoint(report.step1, os.path.join(step1_dir, "step1.ckpt"))
    report.step1_log.to_csv(os.path.join(step1_dir, "step1_runlog.csv"))
    outputs += [os.path.join(step1_dir, "step1.ckpt"), os.path.join(step1_dir, "step1_runlog.csv")]
    for row in report.rows:
        arm_dir = os.path.join(out_dir, f"arm_pretrain{int(row.pretrain)}_mope{int(row.mope)}")
        _ensure_dir(arm_dir)
        save_checkpoint(row.bundle, os.path.join(arm_dir, "step2.ckpt"))
        row.log.to_csv(os.path.join(arm_dir, "step2_runlog.csv"))
        outputs += [os.path.join(arm_dir, "step2.ckpt"), os.path.join(arm_dir, "step2_runlog.csv")]
    table_path = os.path.join(out_dir, "ablation.csv")
    report.to_csv(table_path)
    outputs.append(table_path)

    print(report.format_table())
    print(f"\n✓ Ablation table written to {table_path}")
    RunManifest.record(
        "ablate",
        {"config_path": config_path, "train_file": train_file, "test_file": test_file,
         "out_dir": out_dir, "overrides": list(overrides or []), "workers": workers},
        inputs=[config_path, train_file, test_file],
        outputs=outputs,
        resolved_config=cfg.to_mapping(),
        seed=cfg.seed,
    ).save_to_file(manifest_path_for(out_dir, is_dir=True))
    return 0


def cmd_export_embeddings(ckpt: str, feature_file: str, out_path: str, space: str = "backbone") -> int:
    """Write per-sample backbone (d) or projected (k) embeddings as CSV."""
    if space not in ("backbone", "projected"):
        raise ConfigError(f"--space must be backbone or projected, got '{space}'")
    bundle = load_checkpoint(ckpt)
    view = load_feature_file(feature_file)
    if view.input_dim != bundle.dims.input_dim:
        raise DimensionError(f"{ckpt} expects {bundle.dims.input_dim} features, file has {view.input_dim}")
    E = embed(bundle, view.features)
    if space == "projected":
        if bundle.mope is None:
            raise CheckpointError(f"{ckpt} is tagged '{bundle.step}' and has no projection heads")
        ids = np.array([bundle.modalities.get(s.modality.name).index for s in view.samples], dtype=np.int64)
        E = project_array(bundle, E, ids)

    lines = [",".join(["id", "modality", "label"] + [f"e{j}" for j in range(E.shape[1])])]
    for s, row in zip(view.samples, E):
        lines.append(",".join([s.id, s.modality.name, str(s.label)] + [repr(float(x)) for x in row]))
    try:
        with open(out_path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"Cannot write embeddings {out_path}: {exc}") from exc
    print(f"✓ Exported {len(view)} {space} embeddings ({E.shape[1]} dims) -> {out_path}")
    RunManifest.record(
        "export-embeddings",
        {"ckpt": ckpt, "feature_file": feature_file, "out_path": out_path, "space": space},
        inputs=[ckpt, feature_file],
        outputs=[out_path],
    ).save_to_file(manifest_path_for(out_path))
    return 0


COMMANDS: Dict[str, Callable[..., int]] = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}


def cmd_replay(manifest_path: str) -> int:
    """Re-run the command a manifest recorded, after checking its inputs are unchanged."""
    manifest = RunManifest.load_from_file(manifest_path)
    if manifest.command not in COMMANDS:
        raise ConfigError(f"{manifest_path}: unknown command '{manifest.command}'")
    manifest.verify_inputs()
    print(f"Replaying '{manifest.command}' from {manifest_path}")
    return COMMANDS[manifest.command](**manifest.arguments)
