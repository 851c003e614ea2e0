"""
Modality-aware concentration (MAC) loss, the center bank and cross-entropy.

For modality m the loss looks at N_m: the batch's bonafide samples of m plus
every spoof sample of any modality. Cosine similarities to the modality's
bonafide center are turned into a softmax over N_m and compared, by
cross-entropy, to a target that spreads mass uniformly over the bonafide
members. Minimizing it pulls bonafide embeddings of m toward their center and
pushes spoofs away.
"""

import math
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from src import numgrad as ng
from src.config import get_logger
from src.dataio import BONAFIDE, SPOOF, DatasetView
from src.errors import (
    BatchError,
    ConfigError,
    ContractError,
    DegenerateEmbeddingError,
    DimensionError,
    NonFiniteError,
)
from src.model import ModelBundle, embed

logger = get_logger("losses")


@dataclass(frozen=True)
class CenterBank:
    """Per-modality bonafide centers (|M| x d, unnormalized) and the epoch they belong to."""

    centers: np.ndarray
    epoch: int = 0

    def __post_init__(self):
        if self.centers.ndim != 2:
            raise DimensionError(f"Center bank must be |M| x d, got shape {self.centers.shape}")
        norms = np.linalg.norm(self.centers, axis=1)
        if norms.size and norms.min() <= ng.NORM_EPS:
            bad = int(np.argmin(norms))
            raise DegenerateEmbeddingError(f"Center of modality index {bad} has norm <= 1e-12")
        self.centers.setflags(write=False)

    def __len__(self):
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def center(self, modality_index: int) -> np.ndarray:
        return self.centers[modality_index]

    def drift(self, other: "CenterBank") -> float:
        """Frobenius norm of the change between two banks."""
        if other.centers.shape != self.centers.shape:
            raise DimensionError("Cannot compare center banks of different shapes")
        return float(np.linalg.norm(self.centers - other.centers))

    def store(self, bundle: ModelBundle) -> ModelBundle:
        """Copy of the bundle carrying this bank (saved inside checkpoints)."""
        return replace(bundle, centers=np.array(self.centers), center_epoch=self.epoch)

    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> Optional["CenterBank"]:
        if bundle.centers is None:
            return None
        return cls(np.array(bundle.centers), bundle.center_epoch)


@dataclass
class MacBatch:
    """Embeddings of one batch with aligned labels and modality indices."""

    Z: ng.Value
    labels: np.ndarray
    modality_ids: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.modality_ids = np.asarray(self.modality_ids, dtype=np.int64)
        n = self.Z.shape[0]
        if self.Z.ndim != 2 or self.labels.shape != (n,) or self.modality_ids.shape != (n,):
            raise DimensionError(
                f"MacBatch: Z {self.Z.shape}, labels {self.labels.shape}, modalities {self.modality_ids.shape}"
            )
        if not np.all(np.isin(self.labels, (BONAFIDE, SPOOF))):
            raise ContractError("MacBatch labels must be 0 (bonafide) or 1 (spoof)")

    def __len__(self):
        return self.labels.size


def select_Nm(batch: MacBatch, m: int) -> np.ndarray:
    """Ascending indices of bonafide samples of modality m and all spoof samples."""
    keep = ((batch.labels == BONAFIDE) & (batch.modality_ids == m)) | (batch.labels == SPOOF)
    return np.flatnonzero(keep)


def concentration_loss(batch: MacBatch, m: int, center, set_size_norm: bool = False) -> Optional[ng.Value]:
    """
    Cross-entropy between the uniform-over-bonafide target and the softmax of
    cosine similarities to ``center`` over N_m.

    Args:
        batch: Batch embeddings and metadata
        m: Modality index
        center: Center vector (array or Value); always treated as a constant
        set_size_norm: Scale the term by B / |N_m|

    Returns:
        Scalar loss Value, or None when N_m holds no bonafide of modality m
    """
    members = select_Nm(batch, m)
    is_bona = batch.labels[members] == BONAFIDE
    n_bona = int(is_bona.sum())
    if n_bona == 0:
        return None
    sims = ng.cosine_rows(ng.take_rows(batch.Z, members), ng.constant(center))
    target = is_bona.astype(np.float64) / n_bona
    loss = ng.neg(ng.reduce(ng.mul(ng.log_softmax(sims), target), "sum"))
    if set_size_norm:
        loss = loss * (n_bona / members.size)
    return loss


def mac_loss(batch: MacBatch, bank: CenterBank, set_size_norm: bool = False) -> ng.Value:
    """Mean concentration loss over the modalities with bonafide in the batch."""
    terms: List[ng.Value] = []
    for m in range(len(bank)):
        term = concentration_loss(batch, m, bank.center(m), set_size_norm)
        if term is None:
            logger.debug("modality %d has no bonafide in batch; skipped", m)
            continue
        terms.append(term)
    if not terms:
        raise BatchError("No modality has a bonafide sample in this batch; MAC loss is undefined")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def _bonafide_means(bundle: ModelBundle, view: DatasetView, epoch: int) -> CenterBank:
    if view.modalities != bundle.modalities:
        raise ConfigError(
            f"View modalities {list(view.modalities.names)} differ from model {list(bundle.modalities.names)}"
        )
    rows = []
    for m in view.modalities:
        idx = view.bonafide_index[m.index]
        if idx.size == 0:
            raise ConfigError(f"Modality '{m.name}' has no bonafide training samples; its center is undefined")
        E = embed(bundle, view.features[idx])
        if not np.all(np.isfinite(E)):
            raise NonFiniteError(f"Non-finite embedding of a {m.name} bonafide sample; training diverged")
        # exactly rounded sums do not depend on sample order
        try:
            rows.append([math.fsum(E[:, j]) / idx.size for j in range(E.shape[1])])
        except OverflowError as exc:
            raise NonFiniteError(f"Center of modality {m.name} overflowed") from exc
    return CenterBank(np.array(rows, dtype=np.float64), epoch)


def init_centers(bundle: ModelBundle, view: DatasetView) -> CenterBank:
    """Epoch-0 centers: bonafide means under the freshly initialized encoder."""
    return _bonafide_means(bundle, view, 0)


def update_centers(bundle: ModelBundle, view: DatasetView, epoch: Optional[int] = None) -> CenterBank:
    """
    Recompute every modality center as the mean bonafide embedding.

    Args:
        bundle: Model whose encoder embeds the samples
        view: Training view
        epoch: Stamp for the new bank (default: bundle's stamp + 1)

    Returns:
        New CenterBank
    """
    return _bonafide_means(bundle, view, bundle.center_epoch + 1 if epoch is None else epoch)


def center_scores(bundle: ModelBundle, bank: CenterBank, view: DatasetView) -> np.ndarray:
    """Cosine similarity of each sample's embedding to its own modality's center."""
    E = embed(bundle, view.features)
    C = bank.centers[view.modality_ids]
    norms = np.linalg.norm(E, axis=1)
    if norms.size and norms.min() <= ng.NORM_EPS:
        raise DegenerateEmbeddingError("Embedding with norm <= 1e-12; cosine score undefined")
    return np.einsum("ij,ij->i", E, C) / (norms * np.linalg.norm(C, axis=1))


def cross_entropy(logits: ng.Value, labels) -> ng.Value:
    """Mean negative log-likelihood of the labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects n x 2 logits and n labels, got {logits.shape} / {labels.shape}")
    if not np.all(np.isin(labels, (BONAFIDE, SPOOF))):
        raise ContractError("cross_entropy labels must be 0 or 1")
    return ng.neg(ng.reduce(ng.pick(ng.log_softmax(logits, axis=1), labels), "mean"))
