#!/usr/bin/env python3
"""
Tests for AdamW, the training configuration, both training steps and the ablation harness.
"""

from dataclasses import replace

import numpy as np
import pytest

from src import numgrad as ng
from src.dataio import SynthConfig, gen_synthetic, stratified_split
from src.errors import CheckpointError, ConfigError, DimensionError, DivergenceError
from src.losses import init_centers
from src.model import checkpoint_bytes, init_model, parameters, predict_logits
from src.trainer import (
    ABLATION_ARMS,
    AdamW,
    AdamWState,
    EpochRecord,
    RunLog,
    TrainConfig,
    adamw_step,
    finetune_step2,
    pretrain_step1,
    run_ablation,
    run_pipeline,
    score_view,
    training_accuracy,
)
from tests.conftest import synth_mapping


def small_config(**changes):
    cfg = TrainConfig(
        lr=1e-2, weight_decay=1e-5, batch_size=8, epochs_step1=2, epochs_step2=2,
        hidden=(8,), d=4, k=6, seed=1,
    )
    return replace(cfg, **changes)


@pytest.fixture
def separable_split():
    """Two well-separated modalities, one spoof cluster each."""
    synth = SynthConfig.from_mapping(
        synth_mapping(input_dim=8, n_bonafide=60, n_spoof=60, seed=7, spoof_offset=8.0, spoof_clusters=1)
    )
    return stratified_split(gen_synthetic(synth), 0.5, seed=7)


def same_parameters(a, b):
    pa, pb = parameters(a), parameters(b)
    return [n for n, _ in pa] == [n for n, _ in pb] and all(
        np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(pa, pb)
    )


class TestAdamWStep:
    def test_first_step_moves_by_learning_rate(self):
        params, state = adamw_step([np.array([1.0])], [np.array([1.0])], AdamWState.zeros_like([np.zeros(1)]), 0.1, 0.0)
        assert params[0][0] - 1.0 == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
        assert state.t == 1

    def test_zero_gradient_is_fixed_point(self):
        theta = [np.array([0.3, -2.0]), np.array([[1.5]])]
        state = AdamWState.zeros_like(theta)
        params = theta
        for _ in range(25):
            params, state = adamw_step(params, [np.zeros_like(p) for p in params], state, 0.1, 0.0)
        assert all(np.array_equal(p, q) for p, q in zip(params, theta))

    def test_pure_decay(self):
        params, _ = adamw_step([np.array([1.0])], [np.array([0.0])], AdamWState.zeros_like([np.zeros(1)]), 0.1, 0.5)
        assert params[0][0] == 0.95

    def test_decay_is_exactly_geometric(self):
        lr, wd = 0.01, 0.3
        params, state = [np.array([2.0, -1.0])], AdamWState.zeros_like([np.zeros(2)])
        expected = np.array([2.0, -1.0])
        for _ in range(50):
            params, state = adamw_step(params, [np.zeros(2)], state, lr, wd)
            expected = expected * (1.0 - lr * wd)
        assert np.array_equal(params[0], expected)

    def test_quadratic_reduced_hundredfold(self):
        theta = [np.array([1.0, 1.0])]
        state = AdamWState.zeros_like(theta)
        start = float(np.sum(theta[0] ** 2))
        for _ in range(200):
            theta, state = adamw_step(theta, [2.0 * theta[0]], state, 0.05, 0.0)
        assert float(np.sum(theta[0] ** 2)) <= start / 100

    def test_inputs_left_untouched(self):
        p, g = np.array([1.0]), np.array([0.5])
        state = AdamWState.zeros_like([p])
        adamw_step([p], [g], state, 0.1, 0.1)
        assert p[0] == 1.0 and state.t == 0 and state.m[0][0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adamw_step([np.zeros(2)], [np.zeros(3)], AdamWState.zeros_like([np.zeros(2)]), 0.1, 0.0)

    def test_stateful_optimizer_rejects_non_finite_gradient(self):
        w = ng.parameter([1.0], name="w")
        optimizer = AdamW([w], lr=0.1)
        w.grad = np.array([np.nan])
        with pytest.raises(DivergenceError):
            optimizer.step()


class TestTrainConfig:
    def test_seed_is_required(self):
        with pytest.raises(ConfigError, match="seed"):
            TrainConfig.from_mapping({"lr": "0.01"})

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="epochs_step3"):
            TrainConfig.from_mapping({"seed": "1", "epochs_step3": "4"})

    def test_parsing_and_defaults(self):
        cfg = TrainConfig.from_mapping({"seed": "5", "hidden": "32, 16", "use_mope": "false"})
        assert cfg.hidden == (32, 16)
        assert cfg.use_mope is False
        assert cfg.lr == 1e-4 and cfg.weight_decay == 1e-5
        assert (cfg.epochs_step1, cfg.epochs_step2, cfg.d, cfg.k) == (40, 40, 192, 512)

    def test_mapping_round_trip(self):
        cfg = small_config(use_mac_pretrain=False, input_dim=4)
        assert TrainConfig.from_mapping(cfg.to_mapping()) == cfg

    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("# run\nseed = 3\nlr = 0.01\n")
        cfg = TrainConfig.from_file(str(path), {"lr": "0.5"})
        assert cfg.lr == 0.5 and cfg.seed == 3

    @pytest.mark.parametrize(
        "field, value",
        [("lr", 0.0), ("weight_decay", -1e-3), ("epochs_step1", -1), ("seed", -2), ("d", 0)],
    )
    def test_invalid_values(self, field, value):
        with pytest.raises(ConfigError):
            small_config(**{field: value}).validate()

    def test_batch_must_cover_quota(self):
        with pytest.raises(ConfigError):
            small_config(batch_size=5).validate(num_modalities=3)

    def test_declared_input_dim_checked(self):
        with pytest.raises(DimensionError):
            small_config(input_dim=3).model_dims(4)


class TestRunLog:
    def test_epochs_in_order(self):
        log = RunLog("step1")
        log.append(EpochRecord(1, 0.5, 0.1))
        with pytest.raises(ConfigError):
            log.append(EpochRecord(3, 0.4, 0.1))

    def test_csv_without_timing(self, tmp_path):
        log = RunLog("step1")
        log.append(EpochRecord(1, 0.5, 1.25, center_drift=0.125))
        path = tmp_path / "log.csv"
        log.to_csv(str(path), record_timing=False)
        assert path.read_text().splitlines() == [
            "epoch,loss,seconds,center_drift,val_eer,val_auc",
            "1,0.5,,0.125,,",
        ]

    def test_csv_with_timing(self, tmp_path):
        log = RunLog("step2")
        log.append(EpochRecord(1, 0.5, 1.25))
        path = tmp_path / "log.csv"
        log.to_csv(str(path), record_timing=True)
        assert path.read_text().splitlines()[1] == "1,0.5,1.25,,,"


class TestStepOne:
    def test_zero_epochs_returns_initialization(self, synth_view):
        cfg = small_config(epochs_step1=0)
        bundle, log = pretrain_step1(cfg, synth_view)
        fresh = init_model(cfg.model_dims(4), synth_view.modalities, cfg.seed, heads=None)
        assert bundle.step == "step1"
        assert not log.records
        assert same_parameters(bundle, fresh)
        assert np.array_equal(bundle.centers, init_centers(fresh, synth_view).centers)

    def test_one_epoch_updates_every_encoder_weight(self, synth_view):
        cfg = small_config(epochs_step1=1)
        bundle, log = pretrain_step1(cfg, synth_view)
        fresh = init_model(cfg.model_dims(4), synth_view.modalities, cfg.seed, heads=None)
        assert len(log.records) == 1
        for (name, trained), (_, initial) in zip(parameters(bundle), parameters(fresh)):
            if name.endswith(".weight"):
                assert not np.array_equal(trained.data, initial.data), name

    def test_same_seed_same_bytes(self, synth_view):
        a, log_a = pretrain_step1(small_config(), synth_view)
        b, log_b = pretrain_step1(small_config(), synth_view)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)
        assert log_a.losses == log_b.losses

    def test_log_records_every_epoch(self, synth_view):
        bundle, log = pretrain_step1(small_config(epochs_step1=3), synth_view, val_view=synth_view)
        assert [r.epoch for r in log.records] == [1, 2, 3]
        assert bundle.center_epoch == 3
        assert all(r.center_drift >= 0 and 0 <= r.val_auc <= 1 for r in log.records)

    def test_mac_loss_decreases_on_separable_data(self, separable_split):
        train, _ = separable_split
        _, log = pretrain_step1(small_config(batch_size=16, epochs_step1=10, d=8, hidden=(16,)), train)
        assert log.losses[-1] < log.losses[0]


class TestStepTwo:
    def test_pretrain_needs_step1(self, synth_view):
        with pytest.raises(ConfigError):
            finetune_step2(small_config(), synth_view)

    def test_rejects_wrong_tag(self, synth_view):
        fresh = init_model(small_config().model_dims(4), synth_view.modalities, 1, heads=None)
        with pytest.raises(CheckpointError):
            finetune_step2(small_config(), synth_view, fresh)

    def test_encoder_copied_from_step1(self, synth_view):
        step1, _ = pretrain_step1(small_config(), synth_view)
        step2, _ = finetune_step2(small_config(epochs_step2=0), synth_view, step1)
        assert step2.step == "step2" and step2.centers is None
        for (_, a), (_, b) in zip(step1.encoder.named_parameters(), step2.encoder.named_parameters()):
            assert np.array_equal(a.data, b.data) and a is not b

    def test_shared_head_arm(self, synth_view):
        bundle, _ = finetune_step2(small_config(use_mac_pretrain=False, use_mope=False), synth_view)
        assert len(bundle.mope.heads) == 1
        assert bundle.mope.routing == (0, 0)

    def test_fresh_model_has_zero_margin(self, synth_view):
        bundle, _ = finetune_step2(small_config(use_mac_pretrain=False, epochs_step2=0), synth_view)
        logits = predict_logits(bundle, synth_view.features, synth_view.modality_ids)
        assert not (logits[:, 0] - logits[:, 1]).any()

    def test_scoring_needs_step2(self, synth_view):
        step1, _ = pretrain_step1(small_config(epochs_step1=0), synth_view)
        with pytest.raises(CheckpointError):
            score_view(step1, synth_view)

    def test_scores_follow_view_order(self, synth_view):
        result = run_pipeline(small_config(), synth_view)
        records = score_view(result.step2, synth_view)
        assert [r.id for r in records] == [s.id for s in synth_view.samples]
        assert result.step1_log is not None and len(result.step2_log.records) == 2

    @pytest.mark.slow
    def test_separable_training_accuracy(self, separable_split):
        train, _ = separable_split
        cfg = small_config(batch_size=16, epochs_step1=10, epochs_step2=20, d=8, hidden=(16,))
        result = run_pipeline(cfg, train)
        assert training_accuracy(result.step2, train) > 0.95


class TestAblation:
    def test_four_arms_in_fixed_order(self, synth_view):
        report = run_ablation(small_config(epochs_step1=1, epochs_step2=1), synth_view, synth_view)
        assert [(r.pretrain, r.mope) for r in report.rows] == list(ABLATION_ARMS)
        assert report.step1.step == "step1"
        assert all(0 <= r.auc <= 1 and 0 <= r.eer <= 1 for r in report.rows)

    def test_untrained_arms_are_identical(self, synth_view):
        report = run_ablation(small_config(epochs_step1=0, epochs_step2=0), synth_view, synth_view)
        assert {(r.auc, r.eer) for r in report.rows} == {(report.rows[0].auc, report.rows[0].eer)}
        assert report.rows[0].auc == 0.5

    def test_parallel_arms_match_serial(self, synth_view):
        cfg = small_config(epochs_step1=1, epochs_step2=2)
        serial = run_ablation(cfg, synth_view, synth_view, workers=1)
        parallel = run_ablation(cfg, synth_view, synth_view, workers=4)
        assert [(r.auc, r.eer) for r in serial.rows] == [(r.auc, r.eer) for r in parallel.rows]
        for a, b in zip(serial.rows, parallel.rows):
            assert checkpoint_bytes(a.bundle) == checkpoint_bytes(b.bundle)

    def test_report_csv_and_table(self, synth_view, tmp_path):
        report = run_ablation(small_config(epochs_step1=0, epochs_step2=0), synth_view, synth_view)
        path = tmp_path / "ablation.csv"
        report.to_csv(str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "pretrain,mope,auc,eer"
        assert [line.split(",")[:2] for line in lines[1:]] == [["0", "0"], ["1", "0"], ["0", "1"], ["1", "1"]]
        assert "✓" in report.format_table() and "✗" in report.format_table()
