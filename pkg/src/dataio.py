"""
Dataset model, feature-file ingestion, synthetic multi-modal data and the
balanced batch sampler.

A dataset is the union of per-modality subsets; every sample carries its
modality, a bonafide (0) / spoof (1) label, a dataset tag and a feature vector.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.config import REQUIRED, FieldReader, get_logger, load_config_file
from src.errors import ArtifactIOError, ConfigError, ParseError

logger = get_logger("dataio")

BONAFIDE = 0
SPOOF = 1

FEATURE_MAGIC = "litmas-features"
FEATURE_VERSION = "v1"


@dataclass(frozen=True)
class ModalityId:
    """Dense modality index plus its canonical name."""

    index: int
    name: str


class ModalityTable:
    """Ordered, unique modality names mapped to dense indices 0..|M|-1."""

    def __init__(self, names: Sequence[str]):
        names = tuple(names)
        if len(set(names)) != len(names):
            raise ConfigError(f"Modality names must be unique: {list(names)}")
        for name in names:
            if not name or any(ch in name for ch in ",\t\n "):
                raise ConfigError(f"Invalid modality name '{name}'")
        self.names: Tuple[str, ...] = names
        self._by_name = {name: ModalityId(i, name) for i, name in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def __iter__(self) -> Iterator[ModalityId]:
        return (self._by_name[name] for name in self.names)

    def __eq__(self, other):
        return isinstance(other, ModalityTable) and self.names == other.names

    def __hash__(self):
        return hash(self.names)

    def __repr__(self):
        return f"ModalityTable({list(self.names)})"

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def get(self, name: str) -> ModalityId:
        if name not in self._by_name:
            raise ConfigError(f"Unknown modality '{name}'; known: {list(self.names)}")
        return self._by_name[name]

    def at(self, index: int) -> ModalityId:
        return self._by_name[self.names[index]]

    def merged(self, other: "ModalityTable") -> "ModalityTable":
        extra = [name for name in other.names if name not in self._by_name]
        return ModalityTable(self.names + tuple(extra))


@dataclass(frozen=True)
class Sample:
    """One biometric observation."""

    id: str
    modality: ModalityId
    label: int
    dataset_tag: str
    features: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.label not in (BONAFIDE, SPOOF):
            raise ConfigError(f"Sample {self.id}: label must be 0 or 1, got {self.label}")


class DatasetView:
    """
    Immutable ordered list of samples with per-modality class indices.

    The view is the concatenation of its per-modality subsets; the bonafide
    and spoof index sets of all modalities partition the sample indices.
    """

    def __init__(self, samples: Sequence[Sample], modalities: ModalityTable, input_dim: Optional[int] = None):
        self.samples: Tuple[Sample, ...] = tuple(samples)
        self.modalities = modalities
        dims = {s.features.shape[0] for s in self.samples}
        if len(dims) > 1:
            raise ConfigError(f"Inconsistent feature lengths in view: {sorted(dims)}")
        if input_dim is None:
            input_dim = dims.pop() if dims else 0
        elif dims and dims.pop() != input_dim:
            raise ConfigError(f"Feature length does not match declared dim={input_dim}")
        self.input_dim = input_dim

        bona: Dict[int, List[int]] = {m.index: [] for m in modalities}
        spoof: Dict[int, List[int]] = {m.index: [] for m in modalities}
        for i, s in enumerate(self.samples):
            if s.modality.index >= len(modalities) or modalities.at(s.modality.index) != s.modality:
                raise ConfigError(f"Sample {s.id} uses modality {s.modality} outside the view's table")
            (bona if s.label == BONAFIDE else spoof)[s.modality.index].append(i)
        self.bonafide_index: Dict[int, np.ndarray] = {m: np.array(ix, dtype=np.intp) for m, ix in bona.items()}
        self.spoof_index: Dict[int, np.ndarray] = {m: np.array(ix, dtype=np.intp) for m, ix in spoof.items()}

        if self.samples:
            features = np.stack([s.features for s in self.samples]).astype(np.float64)
        else:
            features = np.zeros((0, input_dim))
        features.setflags(write=False)
        self._features = features
        self._labels = np.array([s.label for s in self.samples], dtype=np.int64)
        self._modality_ids = np.array([s.modality.index for s in self.samples], dtype=np.int64)
        self._labels.setflags(write=False)
        self._modality_ids.setflags(write=False)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, DatasetView):
            return NotImplemented
        return (
            self.modalities == other.modalities
            and self.input_dim == other.input_dim
            and len(self) == len(other)
            and all(
                a.id == b.id and a.modality == b.modality and a.label == b.label
                and a.dataset_tag == b.dataset_tag and np.array_equal(a.features, b.features)
                for a, b in zip(self.samples, other.samples)
            )
        )

    def __repr__(self):
        return f"DatasetView(n={len(self)}, dim={self.input_dim}, modalities={list(self.modalities.names)})"

    @property
    def features(self) -> np.ndarray:
        return self._features

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def modality_ids(self) -> np.ndarray:
        return self._modality_ids

    @property
    def dataset_tags(self) -> List[str]:
        return sorted({s.dataset_tag for s in self.samples})

    def present_modalities(self) -> List[ModalityId]:
        """Modalities with at least one sample, in table order."""
        return [
            m for m in self.modalities
            if self.bonafide_index[m.index].size or self.spoof_index[m.index].size
        ]

    def subset(self, indices: Sequence[int]) -> "DatasetView":
        return DatasetView([self.samples[i] for i in indices], self.modalities, self.input_dim)

    def by_modality(self, name: str) -> "DatasetView":
        m = self.modalities.get(name)
        ix = np.sort(np.concatenate([self.bonafide_index[m.index], self.spoof_index[m.index]]))
        return self.subset(ix.tolist())

    @classmethod
    def combine(cls, views: Sequence["DatasetView"]) -> "DatasetView":
        """Union of views (per-modality subsets) into one combined training set."""
        if not views:
            raise ConfigError("combine needs at least one view")
        table = views[0].modalities
        for view in views[1:]:
            table = table.merged(view.modalities)
        dims = {v.input_dim for v in views if len(v)}
        if len(dims) > 1:
            raise ConfigError(f"Cannot combine views with feature dims {sorted(dims)}")
        samples = []
        for view in views:
            for s in view.samples:
                samples.append(Sample(s.id, table.get(s.modality.name), s.label, s.dataset_tag, s.features))
        return cls(samples, table, dims.pop() if dims else views[0].input_dim)


# feature file


def _format_float(x: float) -> str:
    # repr is the shortest string that round-trips exactly
    return repr(float(x))


def write_feature_file(view: DatasetView, path: str) -> None:
    """
    Write a view in the self-describing text feature format.

    Args:
        view: Dataset to write
        path: Destination path
    """
    lines = [
        f"{FEATURE_MAGIC} {FEATURE_VERSION} dim={view.input_dim}",
        f"modalities={','.join(view.modalities.names)}",
    ]
    for s in view.samples:
        feats = " ".join(_format_float(x) for x in s.features)
        lines.append(f"{s.id}\t{s.modality.name}\t{s.label}\t{s.dataset_tag}\t{feats}")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"Cannot write feature file {path}: {exc}") from exc


def _content_lines(path: str):
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = f.read().split("\n")
    except OSError as exc:
        raise ArtifactIOError(f"Cannot read {path}: {exc}") from exc
    for number, line in enumerate(raw, start=1):
        line = line.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield number, line


def load_feature_file(path: str) -> DatasetView:
    """
    Parse a feature file into a DatasetView (sample order = file order).

    Args:
        path: Feature file path

    Returns:
        Parsed view
    """
    lines = _content_lines(path)
    try:
        number, header = next(lines)
    except StopIteration:
        raise ParseError("missing header line", path, 1)
    parts = header.split()
    if len(parts) != 3 or parts[0] != FEATURE_MAGIC or not parts[2].startswith("dim="):
        raise ParseError(f"expected '{FEATURE_MAGIC} {FEATURE_VERSION} dim=<D>'", path, number)
    if parts[1] != FEATURE_VERSION:
        raise ParseError(f"unsupported feature file version '{parts[1]}'", path, number)
    try:
        dim = int(parts[2][4:])
    except ValueError:
        raise ParseError(f"invalid dimension '{parts[2]}'", path, number)
    if dim <= 0:
        raise ParseError("dimension must be positive", path, number)

    try:
        number, table_line = next(lines)
    except StopIteration:
        raise ParseError("missing modalities line", path, number + 1)
    if not table_line.startswith("modalities="):
        raise ParseError("expected 'modalities=<name0,name1,...>'", path, number)
    names = [n.strip() for n in table_line[len("modalities="):].split(",") if n.strip()]
    try:
        table = ModalityTable(names)
    except ConfigError as exc:
        raise ParseError(str(exc), path, number)

    samples = []
    seen_ids = set()
    for number, line in lines:
        fields = line.split("\t")
        if len(fields) != 5:
            raise ParseError(f"expected 5 tab-separated fields, got {len(fields)}", path, number)
        sample_id, modality_name, label_text, tag, feature_text = fields
        if modality_name not in table:
            raise ParseError(f"unknown modality '{modality_name}'", path, number)
        if label_text not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got '{label_text}'", path, number)
        if sample_id in seen_ids:
            raise ParseError(f"duplicate sample id '{sample_id}'", path, number)
        try:
            values = np.array([float(tok) for tok in feature_text.split()], dtype=np.float64)
        except ValueError:
            raise ParseError("non-numeric feature value", path, number)
        if values.size != dim:
            raise ParseError(f"expected {dim} features, got {values.size}", path, number)
        if not np.all(np.isfinite(values)):
            raise ParseError("features must be finite", path, number)
        seen_ids.add(sample_id)
        samples.append(Sample(sample_id, table.get(modality_name), int(label_text), tag, values))
    return DatasetView(samples, table, dim)


# synthetic data


@dataclass
class SynthConfig:
    """Gaussian multi-modal generator settings."""

    modality_names: Tuple[str, ...]
    input_dim: int
    bonafide_means: np.ndarray  # |M| x D
    bonafide_scale: float
    spoof_offsets: Tuple[np.ndarray, ...]  # per modality: clusters x D
    spoof_scales: Tuple[np.ndarray, ...]  # per modality: clusters
    n_bonafide: int
    n_spoof: int
    seed: int
    datasets_per_modality: int = 1
    test_fraction: float = 0.5

    @property
    def num_modalities(self) -> int:
        return len(self.modality_names)

    def validate(self) -> "SynthConfig":
        if self.num_modalities <= 0:
            raise ConfigError("num_modalities must be > 0")
        if self.input_dim <= 0:
            raise ConfigError("input_dim must be > 0")
        if self.n_bonafide <= 0 or self.n_spoof <= 0:
            raise ConfigError("n_bonafide and n_spoof must be > 0")
        if self.bonafide_scale <= 0:
            raise ConfigError("bonafide_scale must be > 0")
        if self.datasets_per_modality <= 0:
            raise ConfigError("datasets_per_modality must be > 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")
        if self.bonafide_means.shape != (self.num_modalities, self.input_dim):
            raise ConfigError(f"bonafide_means must be {self.num_modalities} x {self.input_dim}")
        if len(self.spoof_offsets) != self.num_modalities or len(self.spoof_scales) != self.num_modalities:
            raise ConfigError("one spoof cluster list per modality is required")
        for offsets, scales in zip(self.spoof_offsets, self.spoof_scales):
            if offsets.ndim != 2 or offsets.shape[1] != self.input_dim or offsets.shape[0] == 0:
                raise ConfigError("spoof offsets must be a non-empty clusters x input_dim array")
            if scales.shape != (offsets.shape[0],) or np.any(scales <= 0):
                raise ConfigError("spoof scales must be positive, one per cluster")
        ModalityTable(self.modality_names)
        return self

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], source: str = "synth config") -> "SynthConfig":
        """
        Build a config from flat keys, deriving mean vectors and spoof offsets
        from the seed.

        Mean of modality m is a random direction of length ``mean_radius``;
        each spoof cluster sits at a random direction of length
        ``spoof_offset`` from its modality's bonafide mean.
        """
        reader = FieldReader(values, source)
        num_modalities = reader.get_int("num_modalities", REQUIRED)
        input_dim = reader.get_int("input_dim", REQUIRED)
        n_bonafide = reader.get_int("n_bonafide", REQUIRED)
        n_spoof = reader.get_int("n_spoof", REQUIRED)
        seed = reader.get_int("seed", REQUIRED)
        default_names = ("speech", "face", "iris", "fingerprint")
        names = reader.get_list("modality_names", str, None)
        if names is None:
            names = tuple(
                default_names[i] if i < len(default_names) else f"modality{i}" for i in range(max(num_modalities, 0))
            )
        mean_radius = reader.get_float("mean_radius", 4.0)
        bonafide_scale = reader.get_float("bonafide_scale", 1.0)
        spoof_offset = reader.get_float("spoof_offset", 3.0)
        spoof_scale = reader.get_float("spoof_scale", 1.0)
        spoof_clusters = reader.get_int("spoof_clusters", 2)
        datasets_per_modality = reader.get_int("datasets_per_modality", 1)
        test_fraction = reader.get_float("test_fraction", 0.5)
        reader.finish()

        if len(names) != num_modalities:
            raise ConfigError(f"{source}: modality_names lists {len(names)} names for {num_modalities} modalities")
        if num_modalities <= 0 or input_dim <= 0:
            raise ConfigError(f"{source}: num_modalities and input_dim must be > 0")
        if spoof_clusters <= 0:
            raise ConfigError(f"{source}: spoof_clusters must be > 0")
        if spoof_offset < 0 or mean_radius < 0:
            raise ConfigError(f"{source}: spoof_offset and mean_radius must be >= 0")

        layout = np.random.default_rng([seed, 0])
        means = _random_directions(layout, num_modalities, input_dim) * mean_radius
        offsets = tuple(_random_directions(layout, spoof_clusters, input_dim) * spoof_offset for _ in range(num_modalities))
        scales = tuple(np.full(spoof_clusters, spoof_scale) for _ in range(num_modalities))
        return cls(
            modality_names=tuple(names),
            input_dim=input_dim,
            bonafide_means=means,
            bonafide_scale=bonafide_scale,
            spoof_offsets=offsets,
            spoof_scales=scales,
            n_bonafide=n_bonafide,
            n_spoof=n_spoof,
            seed=seed,
            datasets_per_modality=datasets_per_modality,
            test_fraction=test_fraction,
        ).validate()

    @classmethod
    def from_file(cls, path: str, overrides: Optional[Mapping[str, str]] = None) -> "SynthConfig":
        values = load_config_file(path)
        values.update(overrides or {})
        return cls.from_mapping(values, source=path)


def _random_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    raw = rng.standard_normal((count, dim))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return raw / np.where(norms > 0, norms, 1.0)


def gen_synthetic(cfg: SynthConfig) -> DatasetView:
    """
    Draw a seeded multi-modal dataset.

    Bonafide samples of modality m follow N(mean_m, scale^2 I); spoof samples
    are assigned round-robin to the modality's clusters and follow
    N(mean_m + offset_c, scale_c^2 I). Samples are ordered modality-major,
    bonafide before spoof.
    """
    cfg.validate()
    table = ModalityTable(cfg.modality_names)
    rng = np.random.default_rng([cfg.seed, 1])
    samples: List[Sample] = []
    for m in table:
        mean = cfg.bonafide_means[m.index]
        bona = mean + cfg.bonafide_scale * rng.standard_normal((cfg.n_bonafide, cfg.input_dim))
        offsets = cfg.spoof_offsets[m.index]
        scales = cfg.spoof_scales[m.index]
        cluster = np.arange(cfg.n_spoof) % offsets.shape[0]
        noise = rng.standard_normal((cfg.n_spoof, cfg.input_dim))
        spoof = mean + offsets[cluster] + scales[cluster][:, None] * noise
        for i, x in enumerate(bona):
            tag = _synth_tag(m.name, i, cfg.datasets_per_modality)
            samples.append(Sample(f"{m.name}-b-{i:05d}", m, BONAFIDE, tag, x))
        for i, x in enumerate(spoof):
            tag = _synth_tag(m.name, i, cfg.datasets_per_modality)
            samples.append(Sample(f"{m.name}-s-{i:05d}", m, SPOOF, tag, x))
    view = DatasetView(samples, table, cfg.input_dim)
    logger.debug("generated %d synthetic samples over %d modalities", len(view), len(table))
    return view


def _synth_tag(name: str, i: int, datasets: int) -> str:
    return f"synth-{name}" if datasets == 1 else f"synth-{name}-{i % datasets}"


def stratified_split(view: DatasetView, test_fraction: float, seed: int) -> Tuple[DatasetView, DatasetView]:
    """
    Split every (modality, label) group into train/test parts.

    Args:
        view: View to split
        test_fraction: Share of each group sent to the test part
        seed: Shuffle seed

    Returns:
        (train view, test view), each in original sample order
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng([seed, 2])
    test = []
    for m in view.modalities:
        for group in (view.bonafide_index[m.index], view.spoof_index[m.index]):
            if group.size == 0:
                continue
            n_test = int(round(group.size * test_fraction))
            test.extend(rng.permutation(group)[:n_test].tolist())
    test_set = set(test)
    train_ix = [i for i in range(len(view)) if i not in test_set]
    return view.subset(train_ix), view.subset(sorted(test_set))


def class_count_table(view: DatasetView) -> List[Tuple[str, int, int]]:
    """Per-dataset (tag, real, spoof) counts, tags sorted."""
    counts: Counter = Counter((s.dataset_tag, s.label) for s in view.samples)
    return [(tag, counts[(tag, BONAFIDE)], counts[(tag, SPOOF)]) for tag in view.dataset_tags]


# balanced batches


class BalancedBatchSampler:
    """
    One epoch of batches with an equal per-modality bonafide quota.

    Every batch holds ``batch_size // (2 * |M|)`` bonafide samples of each
    modality present in the view (pools are reshuffled and reused when a
    modality runs out); the remaining slots take spoof samples from a seeded
    shuffle, each spoof at most once per epoch.
    """

    def __init__(self, view: DatasetView, batch_size: int, seed: int, epoch: int = 0):
        self.view = view
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.modalities = view.present_modalities()
        if not self.modalities:
            raise ConfigError("Cannot sample batches from an empty view")
        for m in self.modalities:
            if view.bonafide_index[m.index].size == 0:
                raise ConfigError(f"Modality '{m.name}' has no bonafide samples; the bonafide quota cannot be met")
        if batch_size < 2 * len(self.modalities):
            raise ConfigError(
                f"batch_size {batch_size} is below 2 x {len(self.modalities)} modalities; bonafide quota would be 0"
            )
        self.quota = batch_size // (2 * len(self.modalities))
        self.spoof_slots = batch_size - self.quota * len(self.modalities)
        self.spoof_pool = np.sort(np.concatenate([view.spoof_index[m.index] for m in self.modalities]))
        n_spoof_batches = math.ceil(self.spoof_pool.size / self.spoof_slots) if self.spoof_pool.size else 0
        largest_bona = max(view.bonafide_index[m.index].size for m in self.modalities)
        self.num_batches = max(n_spoof_batches, math.ceil(largest_bona / self.quota))

    def __len__(self):
        return self.num_batches

    def __iter__(self) -> Iterator[np.ndarray]:
        rng = np.random.default_rng([self.seed, 3, self.epoch])
        spoof_order = rng.permutation(self.spoof_pool)
        bona_streams = {m.index: _CyclingPool(self.view.bonafide_index[m.index], rng) for m in self.modalities}
        for b in range(self.num_batches):
            parts = [bona_streams[m.index].draw(self.quota) for m in self.modalities]
            parts.append(spoof_order[b * self.spoof_slots:(b + 1) * self.spoof_slots])
            yield np.sort(np.concatenate(parts))


class _CyclingPool:
    """Draws without replacement, reshuffling the pool once it is used up."""

    def __init__(self, pool: np.ndarray, rng: np.random.Generator):
        self.pool = pool
        self.rng = rng
        self.order = rng.permutation(pool)
        self.pos = 0

    def draw(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.order.size:
                self.order = self.rng.permutation(self.pool)
                self.pos = 0
            take = min(k, self.order.size - self.pos)
            out.append(self.order[self.pos:self.pos + take])
            self.pos += take
            k -= take
        return np.concatenate(out)


def make_balanced_batches(view: DatasetView, batch_size: int, seed: int, epoch: int = 0) -> List[np.ndarray]:
    """Materialize one epoch of balanced index batches (deterministic per seed and epoch)."""
    return list(BalancedBatchSampler(view, batch_size, seed, epoch))
