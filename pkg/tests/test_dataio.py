#!/usr/bin/env python3
"""
Tests for the dataset model, feature files, synthetic data and the balanced sampler.
"""

import math
from collections import Counter

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from src.dataio import (
    BONAFIDE,
    SPOOF,
    BalancedBatchSampler,
    DatasetView,
    ModalityTable,
    SynthConfig,
    class_count_table,
    gen_synthetic,
    load_feature_file,
    make_balanced_batches,
    stratified_split,
    write_feature_file,
)
from src.errors import ArtifactIOError, ConfigError, ParseError
from tests.conftest import make_view, synth_mapping


class TestModalityTable:
    def test_dense_indices(self):
        table = ModalityTable(["speech", "face"])
        assert table.get("face").index == 1
        assert [m.name for m in table] == ["speech", "face"]

    def test_duplicate_names_rejected(self):
        with pytest.raises(ConfigError):
            ModalityTable(["face", "face"])

    def test_unknown_name(self):
        with pytest.raises(ConfigError, match="Unknown modality"):
            ModalityTable(["face"]).get("iris")

    def test_merged_keeps_order(self):
        merged = ModalityTable(["a", "b"]).merged(ModalityTable(["c", "a"]))
        assert merged.names == ("a", "b", "c")


class TestDatasetView:
    def test_class_indices_partition_samples(self, tiny_view):
        all_ix = []
        for m in tiny_view.modalities:
            all_ix += tiny_view.bonafide_index[m.index].tolist() + tiny_view.spoof_index[m.index].tolist()
        assert sorted(all_ix) == list(range(len(tiny_view)))
        assert tiny_view.bonafide_index[0].tolist() == [0, 1, 2]
        assert tiny_view.spoof_index[1].tolist() == [8, 9]

    def test_inconsistent_dims_rejected(self):
        with pytest.raises(ConfigError):
            make_view([("A", BONAFIDE, [1.0, 2.0]), ("A", SPOOF, [1.0])])

    def test_features_are_read_only(self, tiny_view):
        with pytest.raises(ValueError):
            tiny_view.features[0, 0] = 5.0

    def test_combine_unions_per_modality_subsets(self):
        speech = make_view([("speech", BONAFIDE, [1.0]), ("speech", SPOOF, [2.0])], names=("speech",))
        face = make_view([("face", BONAFIDE, [3.0])], names=("face",))
        combined = DatasetView.combine([speech, face])
        assert combined.modalities.names == ("speech", "face")
        assert len(combined) == 3
        assert combined[2].modality.index == 1
        assert combined.bonafide_index[1].tolist() == [2]

    def test_by_modality(self, tiny_view):
        only_b = tiny_view.by_modality("B")
        assert len(only_b) == 5
        assert {s.modality.name for s in only_b.samples} == {"B"}


class TestFeatureFile:
    def test_round_trip_is_exact(self, synth_view, tmp_path):
        path = tmp_path / "data.feat"
        write_feature_file(synth_view, str(path))
        loaded = load_feature_file(str(path))
        assert loaded == synth_view

    def test_same_view_same_bytes(self, synth_view, tmp_path):
        a, b = tmp_path / "a.feat", tmp_path / "b.feat"
        write_feature_file(synth_view, str(a))
        write_feature_file(synth_view, str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "c.feat"
        path.write_text(
            "# generated by hand\nlitmas-features v1 dim=2\nmodalities=face\n\n"
            "f1\tface\t0\tsetA\t0.5 1.5\n# trailing comment\n"
        )
        view = load_feature_file(str(path))
        assert len(view) == 1
        assert view[0].dataset_tag == "setA"
        assert np.array_equal(view[0].features, [0.5, 1.5])

    def test_header_only_file_is_an_empty_view(self, tmp_path):
        path = tmp_path / "empty.feat"
        path.write_text("litmas-features v1 dim=3\nmodalities=face,iris\n")
        view = load_feature_file(str(path))
        assert len(view) == 0
        assert view.input_dim == 3
        assert view.features.shape == (0, 3)
        assert list(view.modalities.names) == ["face", "iris"]

    def test_unwritable_path(self, synth_view, tmp_path):
        with pytest.raises(ArtifactIOError):
            write_feature_file(synth_view, str(tmp_path / "missing" / "data.feat"))

    @pytest.mark.parametrize(
        "body, line",
        [
            ("litmas-features v1 dim=2\nmodalities=face\nf1\tface\t0\tA\t0.5\n", 3),
            ("litmas-features v1 dim=2\nmodalities=face\nf1\tiris\t0\tA\t0.5 1\n", 3),
            ("litmas-features v1 dim=2\nmodalities=face\nf1\tface\t2\tA\t0.5 1\n", 3),
            ("litmas-features v1 dim=2\nmodalities=face\nf1\tface\t0\tA\t0.5 x\n", 3),
            ("litmas-features v2 dim=2\nmodalities=face\n", 1),
            ("litmas-features v1 dim=2\nmodalities=face\nf1\tface\t0\tA\t1 1\nf1\tface\t1\tA\t1 2\n", 4),
        ],
    )
    def test_malformed_lines_report_line_number(self, tmp_path, body, line):
        path = tmp_path / "bad.feat"
        path.write_text(body)
        with pytest.raises(ParseError) as info:
            load_feature_file(str(path))
        assert info.value.line == line


class TestSynthetic:
    def test_counts_and_order(self, synth_view):
        assert len(synth_view) == 2 * (12 + 12)
        assert synth_view.input_dim == 4
        assert [s.label for s in synth_view.samples[:24]] == [BONAFIDE] * 12 + [SPOOF] * 12
        assert synth_view[0].id == "speech-b-00000"
        assert synth_view[24].modality.name == "face"

    def test_deterministic_per_seed(self):
        a = gen_synthetic(SynthConfig.from_mapping(synth_mapping()))
        b = gen_synthetic(SynthConfig.from_mapping(synth_mapping()))
        c = gen_synthetic(SynthConfig.from_mapping(synth_mapping(seed=4)))
        assert a == b
        assert not np.array_equal(a.features, c.features)

    def test_missing_field_named(self):
        values = synth_mapping()
        del values["n_spoof"]
        with pytest.raises(ConfigError, match="n_spoof"):
            SynthConfig.from_mapping(values)

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="spof_offset"):
            SynthConfig.from_mapping(synth_mapping(spof_offset=2))

    def test_dataset_tags_per_modality(self):
        view = gen_synthetic(SynthConfig.from_mapping(synth_mapping(datasets_per_modality=2)))
        assert view.dataset_tags == ["synth-face-0", "synth-face-1", "synth-speech-0", "synth-speech-1"]

    def test_class_count_table(self, synth_view):
        assert class_count_table(synth_view) == [("synth-face", 12, 12), ("synth-speech", 12, 12)]

    def test_zero_offset_gives_chance_level_classifier(self):
        aucs = []
        for seed in range(10):
            synth = SynthConfig.from_mapping(
                synth_mapping(num_modalities=4, n_bonafide=200, n_spoof=200, seed=seed, spoof_offset=0.0, spoof_clusters=1)
            )
            train, test = stratified_split(gen_synthetic(synth), 0.5, seed)
            for name in train.modalities.names:
                tr, te = train.by_modality(name), test.by_modality(name)
                clf = LogisticRegression().fit(tr.features, tr.labels == BONAFIDE)
                aucs.append(roc_auc_score(te.labels == BONAFIDE, clf.decision_function(te.features)))
        assert abs(np.mean(aucs) - 0.5) <= 0.05

    def test_stratified_split(self, synth_view):
        train, test = stratified_split(synth_view, 0.5, seed=1)
        assert len(train) + len(test) == len(synth_view)
        assert class_count_table(test) == [("synth-face", 6, 6), ("synth-speech", 6, 6)]
        assert not {s.id for s in train.samples} & {s.id for s in test.samples}


class TestBalancedSampler:
    def setup_method(self):
        rows = []
        for name, n_bona, n_spoof in (("A", 10, 7), ("B", 3, 9)):
            rows += [(name, BONAFIDE, [1.0]) for _ in range(n_bona)]
            rows += [(name, SPOOF, [1.0]) for _ in range(n_spoof)]
        self.view = make_view(rows)

    def test_every_batch_meets_bonafide_quota(self):
        batches = make_balanced_batches(self.view, batch_size=8, seed=5)
        quota = 8 // (2 * 2)
        for batch in batches:
            counts = Counter(
                self.view.modality_ids[i] for i in batch if self.view.labels[i] == BONAFIDE
            )
            assert counts[0] == quota and counts[1] == quota

    def test_spoofs_used_at_most_once_per_epoch(self):
        batches = make_balanced_batches(self.view, batch_size=8, seed=5)
        spoof_ix = [i for b in batches for i in b if self.view.labels[i] == SPOOF]
        assert len(spoof_ix) == len(set(spoof_ix)) == 16

    def test_epoch_length(self):
        sampler = BalancedBatchSampler(self.view, batch_size=8, seed=5)
        assert len(sampler) == max(math.ceil(16 / 4), math.ceil(10 / 2))
        assert len(list(sampler)) == len(sampler)

    def test_deterministic_per_seed_and_epoch(self):
        a = make_balanced_batches(self.view, 8, seed=5, epoch=1)
        b = make_balanced_batches(self.view, 8, seed=5, epoch=1)
        c = make_balanced_batches(self.view, 8, seed=5, epoch=2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_batch_too_small_for_quota(self):
        with pytest.raises(ConfigError, match="quota"):
            BalancedBatchSampler(self.view, batch_size=3, seed=0)

    def test_modality_without_bonafide_rejected(self):
        view = make_view([("A", BONAFIDE, [1.0]), ("B", SPOOF, [1.0])])
        with pytest.raises(ConfigError, match="no bonafide"):
            BalancedBatchSampler(view, batch_size=4, seed=0)
