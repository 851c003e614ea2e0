#!/usr/bin/env python3
"""
Tests for ROC, AUC, EER, BPCER@APCER, min t-DCF, score files and reports.
"""

import math
from fractions import Fraction

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from src.dataio import BONAFIDE, SPOOF
from src.errors import MetricUndefinedError, ParseError, TdcfParameterError
from src.padmetrics import (
    REPORT_COLUMNS,
    ScoreRecord,
    TdcfParams,
    apcer_bpcer_at,
    apcer_resolution_coarse,
    asv_operating_point,
    auc,
    bpcer_at_apcer,
    det_points,
    eer,
    evaluate,
    evaluate_file,
    min_tdcf,
    read_score_file,
    roc,
    score_set,
    tdcf_coefficients,
    tdcf_curve,
    write_roc_points,
    write_score_file,
)

SYMMETRIC = TdcfParams(p_target=0.5, p_nontarget=0.25, p_spoof=0.25, c_miss_cm=1.0, c_fa_cm=2.0)


def random_score_set(rng):
    """Up to 200 records on a coarse grid so ties are common."""
    nb, ns = int(rng.integers(1, 100)), int(rng.integers(1, 100))
    return score_set(rng.integers(0, 25, size=nb) / 10.0, rng.integers(0, 25, size=ns) / 10.0)


def brute_force_grid(records):
    distinct = sorted({r.score for r in records})
    mids = [(a + b) / 2 for a, b in zip(distinct, distinct[1:])]
    return [-math.inf] + mids + [math.inf]


def brute_force_rates(records, threshold):
    bona = [r.score for r in records if r.label == BONAFIDE]
    spoof = [r.score for r in records if r.label == SPOOF]
    apcer = Fraction(sum(s >= threshold for s in spoof), len(spoof))
    bpcer = Fraction(sum(s < threshold for s in bona), len(bona))
    return apcer, bpcer


def brute_force_eer(records):
    best = None
    for t in brute_force_grid(records):
        apcer, bpcer = brute_force_rates(records, t)
        key = (abs(apcer - bpcer), (apcer + bpcer) / 2, t)
        if best is None or key < best:
            best = key
    return float(best[1]), best[2]


def pair_count_auc(records):
    bona = [r.score for r in records if r.label == BONAFIDE]
    spoof = [r.score for r in records if r.label == SPOOF]
    wins = sum(1.0 if b > s else 0.5 if b == s else 0.0 for b in bona for s in spoof)
    return wins / (len(bona) * len(spoof))


def flipped(records):
    """Negated scores with swapped labels."""
    return [ScoreRecord(r.id, r.modality, r.dataset_tag, 1 - r.label, -r.score) for r in records]


class TestRoc:
    def test_sentinels(self, four_scores):
        points = roc(four_scores)
        assert (points[0].threshold, points[0].apcer, points[0].bpcer) == (-math.inf, 1.0, 0.0)
        assert (points[-1].threshold, points[-1].apcer, points[-1].bpcer) == (math.inf, 0.0, 1.0)

    def test_four_score_points_match_direct_counting(self, four_scores):
        points = roc(four_scores)
        assert [p.threshold for p in points] == [-math.inf, 0.1, 0.4, 0.6, 0.9, math.inf]
        for p in points:
            apcer, bpcer = brute_force_rates(four_scores, p.threshold)
            assert (p.apcer, p.bpcer) == (float(apcer), float(bpcer))

    def test_all_scores_equal(self):
        records = score_set([0.5] * 3, [0.5] * 4)
        for p in roc(records)[1:-1]:
            assert (p.apcer, p.bpcer) in {(1.0, 0.0), (0.0, 1.0)}

    def test_separated_singletons(self):
        assert apcer_bpcer_at(score_set([0.9], [0.1]), 0.5) == (0.0, 0.0)

    def test_monotone(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            points = roc(random_score_set(rng))
            assert all(a.apcer >= b.apcer and a.bpcer <= b.bpcer for a, b in zip(points, points[1:]))

    def test_single_class(self):
        with pytest.raises(MetricUndefinedError):
            roc(score_set([0.1, 0.2], []))

    def test_det_points_and_csv(self, four_scores, tmp_path):
        thresholds, apcer, bpcer = det_points(four_scores)
        assert thresholds.tolist() == [-math.inf, 0.25, 0.5, 0.75, math.inf]
        assert apcer.tolist() == [1.0, 0.5, 0.5, 0.0, 0.0]
        assert bpcer.tolist() == [0.0, 0.0, 0.5, 0.5, 1.0]
        path = tmp_path / "roc.csv"
        write_roc_points(four_scores, str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "threshold,apcer,bpcer,apcer_deviate,bpcer_deviate"
        assert lines[1] == "-inf,1.0,0.0,,"
        assert lines[4].split(",")[3] == "0.0"


class TestAucEer:
    def test_four_score_fixture(self, four_scores):
        assert auc(four_scores) == 0.75
        assert eer(four_scores) == (0.5, 0.5)
        assert apcer_bpcer_at(four_scores, 0.5) == (0.5, 0.5)

    def test_separated(self, separated_scores):
        assert auc(separated_scores) == 1.0
        value, threshold = eer(separated_scores)
        assert value == 0.0
        assert threshold == pytest.approx(0.55)

    def test_all_ties(self):
        assert auc(score_set([0.3] * 4, [0.3] * 5)) == 0.5

    def test_extreme_thresholds(self, four_scores):
        assert apcer_bpcer_at(four_scores, -math.inf) == (1.0, 0.0)
        assert apcer_bpcer_at(four_scores, math.inf) == (0.0, 1.0)

    def test_inverted_separation_is_worst_case(self, separated_scores):
        inverted = [ScoreRecord(r.id, r.modality, r.dataset_tag, r.label, -r.score) for r in separated_scores]
        assert auc(inverted) == 0.0
        assert eer(inverted)[0] == brute_force_eer(inverted)[0] == 1.0

    def test_single_class(self):
        with pytest.raises(MetricUndefinedError):
            eer(score_set([], [0.1]))

    def test_random_sets_match_oracles(self):
        rng = np.random.default_rng(2024)
        for _ in range(500):
            records = random_score_set(rng)
            assert abs(auc(records) - pair_count_auc(records)) <= 1e-12
            value, threshold = eer(records)
            expected_value, expected_threshold = brute_force_eer(records)
            assert abs(value - expected_value) <= 1e-12
            assert threshold == expected_threshold

    def test_auc_agrees_with_sklearn(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            records = random_score_set(rng)
            y = [1 if r.label == BONAFIDE else 0 for r in records]
            assert auc(records) == pytest.approx(roc_auc_score(y, [r.score for r in records]), abs=1e-12)

    def test_orientation_invariance(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            records = random_score_set(rng)
            assert auc(flipped(records)) == pytest.approx(auc(records), abs=1e-12)
            assert eer(flipped(records))[0] == pytest.approx(eer(records)[0], abs=1e-12)


class TestBpcerAtApcer:
    def test_separated(self, separated_scores):
        assert bpcer_at_apcer(separated_scores)[0] == 0.0

    def test_one_spoof_above_every_bonafide(self):
        rng = np.random.default_rng(0)
        spoof = list(rng.uniform(0.0, 0.4, size=99)) + [0.9]
        records = score_set(rng.uniform(0.5, 0.6, size=50), spoof)
        bpcer, threshold = bpcer_at_apcer(records, 0.01)
        assert bpcer == 0.0
        assert apcer_bpcer_at(records, threshold)[0] == 0.01
        assert not apcer_resolution_coarse(100)

    def test_four_score_fixture_is_coarse(self, four_scores):
        bpcer, threshold = bpcer_at_apcer(four_scores, 0.01)
        assert bpcer == 0.5
        assert threshold > 0.6
        assert apcer_resolution_coarse(2)


class TestTdcf:
    def test_perfect_separation_costs_nothing(self, separated_scores):
        assert min_tdcf(separated_scores)[0] == 0.0

    def test_minimum_is_bounded(self):
        rng = np.random.default_rng(3)
        for params in (TdcfParams(), TdcfParams(variant="revised", asv_miss=0.1, asv_fa=0.05, asv_spoof_pass=0.4)):
            for _ in range(100):
                records = random_score_set(rng)
                value, _ = min_tdcf(records, params)
                _, curve = tdcf_curve(records, params)
                assert value <= 1.0 + 1e-12
                assert np.all(value <= curve)

    def test_symmetric_costs_match_direct_sweep(self):
        assert tdcf_coefficients(SYMMETRIC) == (0.0, 0.5, 0.5)
        rng = np.random.default_rng(4)
        for _ in range(100):
            records = random_score_set(rng)
            oracle = min(float(sum(brute_force_rates(records, t))) for t in brute_force_grid(records))
            assert min_tdcf(records, SYMMETRIC)[0] == pytest.approx(oracle, abs=1e-12)

    def test_constrained_coefficients_with_perfect_verifier(self):
        c0, c1, c2 = tdcf_coefficients(TdcfParams())
        assert c0 == 0.0
        assert c1 == pytest.approx(0.9405)
        assert c2 == pytest.approx(0.5)

    def test_revised_coefficients(self):
        params = TdcfParams(variant="revised", asv_miss=0.1, asv_fa=0.2)
        c0, c1, c2 = tdcf_coefficients(params)
        assert c0 == pytest.approx(0.9405 * 0.1 + 0.0095 * 10 * 0.2)
        assert c1 == pytest.approx(0.9405 - c0)
        assert c2 == pytest.approx(0.05 * 10)

    @pytest.mark.parametrize(
        "changes",
        [
            {"asv_spoof_pass": 0.0},
            {"p_target": 0.5},
            {"c_fa": -1.0},
            {"asv_miss": 1.5},
            {"variant": "legacy"},
        ],
    )
    def test_invalid_params(self, changes):
        with pytest.raises(TdcfParameterError):
            tdcf_coefficients(TdcfParams(**changes))

    def test_reference_config_file(self, benchmark_paths):
        params = TdcfParams.from_file(benchmark_paths["tdcf"])
        assert params.variant == "constrained"
        assert params.p_target == pytest.approx(TdcfParams().p_target)
        assert params.c_fa_cm == 10.0

    def test_asv_operating_point(self):
        threshold, miss, fa, spoof_pass = asv_operating_point([2.0, 3.0, 4.0], [0.0, 1.0], [2.5, 0.5])
        assert threshold == 1.5
        assert (miss, fa, spoof_pass) == (0.0, 0.0, 0.5)


class TestScoreFile:
    def test_round_trip(self, tmp_path):
        records = [
            ScoreRecord("a-1", "speech", "set-x", BONAFIDE, 0.1 + 0.2),
            ScoreRecord("a-2", "face", "set-y", SPOOF, -1e-300),
        ]
        path = tmp_path / "s.scores"
        write_score_file(records, str(path))
        assert read_score_file(str(path)) == records

    def test_missing_header(self, tmp_path):
        path = tmp_path / "s.scores"
        path.write_text("a\tface\tx\t0\t0.5\n")
        with pytest.raises(ParseError) as info:
            read_score_file(str(path))
        assert info.value.line == 1

    def test_bad_label_reports_line(self, tmp_path):
        path = tmp_path / "s.scores"
        path.write_text("litmas-scores v1\n# note\na\tface\tx\t0\t0.5\nb\tface\tx\t3\t0.5\n")
        with pytest.raises(ParseError) as info:
            read_score_file(str(path))
        assert info.value.line == 4


class TestReport:
    def setup_method(self):
        self.records = (
            score_set([0.9, 0.8], [0.1, 0.7], modality="speech", tag="set-b")
            + score_set([0.6, 0.4], [0.5], modality="face", tag="set-a")
            + score_set([0.3], [], modality="iris", tag="set-a")
        )

    def test_row_order(self):
        report = evaluate(self.records, "both")
        assert [(r.kind, r.group) for r in report.rows] == [
            ("overall", "all"),
            ("modality", "face"), ("modality", "iris"), ("modality", "speech"),
            ("dataset", "set-a"), ("dataset", "set-b"),
        ]

    def test_grouping_none(self):
        assert len(evaluate(self.records, "none").rows) == 1

    def test_single_class_group_is_undefined(self):
        iris = evaluate(self.records, "modality").row("iris")
        assert not iris.defined
        assert iris.flags == ["single-class"]
        assert iris.cells()[2:8] == ["NA"] * 6

    def test_min_tdcf_only_for_speech_groups(self):
        report = evaluate(self.records, "modality", TdcfParams(), speech_groups=("speech",))
        assert report.row("speech").min_tdcf is not None
        assert report.row("face").min_tdcf is None
        assert report.overall.min_tdcf is None

    def test_group_metrics_match_direct_calls(self):
        face = [r for r in self.records if r.modality == "face"]
        row = evaluate(self.records, "modality").row("face")
        assert row.auc == auc(face)
        assert (row.eer, row.eer_threshold) == eer(face)
        assert "coarse-apcer" in row.flags

    def test_csv_layout(self, tmp_path):
        scores = tmp_path / "s.scores"
        write_score_file(self.records, str(scores))
        report = evaluate_file(str(scores), "both", TdcfParams(), ("speech",))
        out = tmp_path / "report.csv"
        report.to_csv(str(out))
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# accept if score >= threshold")
        assert "fully inverted scores give EER 1.0" in lines[0]
        assert "variant=constrained" in lines[0]
        assert lines[1] == ",".join(REPORT_COLUMNS)
        assert len(lines) == 2 + len(report.rows)
        assert lines[2].startswith("all,overall,")
        assert "NA" in report.format_table()
