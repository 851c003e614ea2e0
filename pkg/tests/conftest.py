#!/usr/bin/env python3
"""
Pytest configuration file for the test suite.
This file provides fixtures shared across all tests.
"""

import os

import numpy as np
import pytest

from src.dataio import BONAFIDE, SPOOF, DatasetView, ModalityTable, Sample, SynthConfig, gen_synthetic
from src.model import ModelDims, init_model
from src.padmetrics import score_set


def make_view(rows, names=("A", "B"), dim=None):
    """View from (modality name, label, features) tuples; ids are positional."""
    table = ModalityTable(names)
    samples = [
        Sample(f"x{i}", table.get(name), label, f"tag-{name}", np.asarray(feats, dtype=np.float64))
        for i, (name, label, feats) in enumerate(rows)
    ]
    return DatasetView(samples, table, dim)


def synth_mapping(**overrides):
    values = {
        "num_modalities": "2",
        "input_dim": "4",
        "n_bonafide": "12",
        "n_spoof": "12",
        "seed": "3",
    }
    values.update({k: str(v) for k, v in overrides.items()})
    return values


@pytest.fixture
def tiny_view():
    """Two modalities, three bonafide and two spoof each, 3-dim features."""
    rng = np.random.default_rng(0)
    rows = []
    for name in ("A", "B"):
        rows += [(name, BONAFIDE, rng.normal(size=3)) for _ in range(3)]
        rows += [(name, SPOOF, rng.normal(size=3)) for _ in range(2)]
    return make_view(rows)


@pytest.fixture
def synth_view():
    return gen_synthetic(SynthConfig.from_mapping(synth_mapping()))


@pytest.fixture
def small_dims():
    return ModelDims(input_dim=4, hidden=(8,), d=5, k=6)


@pytest.fixture
def small_bundle(small_dims):
    return init_model(small_dims, ModalityTable(["A", "B"]), seed=11)


@pytest.fixture
def four_scores():
    """bona = {0.9, 0.4}, spoof = {0.6, 0.1}."""
    return score_set([0.9, 0.4], [0.6, 0.1])


@pytest.fixture
def separated_scores():
    return score_set([0.8, 0.9, 0.95], [0.1, 0.2, 0.3])


@pytest.fixture
def benchmark_paths():
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    return {
        "synth": os.path.join(root, "synth_benchmark.cfg"),
        "train": os.path.join(root, "train_benchmark.cfg"),
        "tdcf": os.path.join(root, "tdcf_asvspoof2019.cfg"),
    }
