"""
Encoder, per-modality projection experts and the liveness classifier.

The encoder is a small MLP standing in for a vision-transformer backbone: it
maps a feature vector to a d-dim embedding. In fine-tuning each sample is
sent through the projection head of its own modality (d -> k) and a single
shared classifier turns the k-dim feature into (bonafide, spoof) logits.

Checkpoint container layout (version 1, all integers little-endian):

    8 bytes   magic b"LITMASCK"
    u32       container version
    u32       header length L
    L bytes   UTF-8 JSON header (sorted keys): dims, modalities, step tag,
              head routing, parameter names/shapes in blob order, centers meta
    ...       float64 little-endian blobs, one per parameter, then centers
    32 bytes  SHA-256 over everything before it
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src import numgrad as ng
from src.config import get_logger
from src.dataio import ModalityTable
from src.errors import (
    ArtifactIOError,
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    CorruptCheckpointError,
    DimensionError,
)

logger = get_logger("model")

CHECKPOINT_MAGIC = b"LITMASCK"
CHECKPOINT_VERSION = 1
_DIGEST_SIZE = 32

# Distinct generator streams so heads do not shift when encoder dims change
_ENCODER_STREAM = 10
_HEAD_STREAM = 11


@dataclass(frozen=True)
class ModelDims:
    input_dim: int
    hidden: Tuple[int, ...] = (256, 256)
    d: int = 192
    k: int = 512

    def __post_init__(self):
        for name, value in (("input_dim", self.input_dim), ("d", self.d), ("k", self.k)):
            if value <= 0:
                raise ConfigError(f"Model dimension {name} must be > 0, got {value}")
        if any(width <= 0 for width in self.hidden):
            raise ConfigError(f"Encoder hidden widths must be > 0, got {list(self.hidden)}")

    @property
    def encoder_widths(self) -> Tuple[int, ...]:
        return (self.input_dim,) + tuple(self.hidden) + (self.d,)

    def to_dict(self) -> Dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "d": self.d, "k": self.k}

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelDims":
        return cls(int(data["input_dim"]), tuple(int(h) for h in data["hidden"]), int(data["d"]), int(data["k"]))


@dataclass
class Linear:
    """Affine layer x @ weight + bias with weight stored fan_in x fan_out."""

    weight: ng.Value
    bias: ng.Value

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: ng.Value) -> ng.Value:
        return ng.matmul(x, self.weight) + self.bias

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.data + self.bias.data

    def copy(self) -> "Linear":
        return Linear(
            ng.parameter(self.weight.data, self.weight.name),
            ng.parameter(self.bias.data, self.bias.name),
        )

    def named_parameters(self, prefix: str) -> List[Tuple[str, ng.Value]]:
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def _kaiming_linear(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Linear:
    # U(-b, b) with b = sqrt(6 / fan_in) has std sqrt(2 / fan_in)
    bound = np.sqrt(6.0 / fan_in)
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return Linear(ng.parameter(weight, f"{name}.weight"), ng.parameter(np.zeros(fan_out), f"{name}.bias"))


def _zero_linear(fan_in: int, fan_out: int, name: str) -> Linear:
    return Linear(
        ng.parameter(np.zeros((fan_in, fan_out)), f"{name}.weight"),
        ng.parameter(np.zeros(fan_out), f"{name}.bias"),
    )


@dataclass
class EncoderParams:
    """MLP layers; relu between layers, none after the last."""

    layers: List[Linear] = field(default_factory=list)

    @property
    def output_dim(self) -> Optional[int]:
        return self.layers[-1].fan_out if self.layers else None

    def copy(self) -> "EncoderParams":
        return EncoderParams([layer.copy() for layer in self.layers])

    def validate(self) -> "EncoderParams":
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise DimensionError(f"Encoder layers do not chain: {prev.fan_out} -> {nxt.fan_in}")
        return self

    def named_parameters(self, prefix: str = "encoder") -> List[Tuple[str, ng.Value]]:
        named = []
        for i, layer in enumerate(self.layers):
            named.extend(layer.named_parameters(f"{prefix}.{i}"))
        return named


@dataclass
class MoPEParams:
    """
    Projection heads plus the modality -> head routing.

    With one head per modality ``routing[m] == m``; the shared-head ablation
    arm keeps a single head and routes every modality to it.
    """

    heads: List[Linear]
    routing: Tuple[int, ...]

    @property
    def shared(self) -> bool:
        return len(self.heads) == 1 and len(self.routing) > 1

    def head_for(self, modality_index: int) -> Linear:
        if not 0 <= modality_index < len(self.routing):
            raise ContractError(f"No projection head for modality index {modality_index}")
        return self.heads[self.routing[modality_index]]

    def named_parameters(self, prefix: str = "mope") -> List[Tuple[str, ng.Value]]:
        named = []
        for i, head in enumerate(self.heads):
            named.extend(head.named_parameters(f"{prefix}.{i}"))
        return named


@dataclass
class ClassifierParams:
    linear: Linear

    def named_parameters(self, prefix: str = "classifier") -> List[Tuple[str, ng.Value]]:
        return self.linear.named_parameters(prefix)


@dataclass
class ModelBundle:
    """Everything a checkpoint carries."""

    dims: ModelDims
    modalities: ModalityTable
    encoder: EncoderParams
    mope: Optional[MoPEParams] = None
    classifier: Optional[ClassifierParams] = None
    step: str = "init"
    centers: Optional[np.ndarray] = None
    center_epoch: int = 0

    def validate(self) -> "ModelBundle":
        self.encoder.validate()
        if self.encoder.layers:
            if self.encoder.layers[0].fan_in != self.dims.input_dim or self.encoder.output_dim != self.dims.d:
                raise DimensionError("Encoder layers disagree with the declared dims")
        if self.mope is not None:
            if len(self.mope.routing) != len(self.modalities):
                raise DimensionError("Projection routing does not cover the modality table")
            for head in self.mope.heads:
                if (head.fan_in, head.fan_out) != (self.dims.d, self.dims.k):
                    raise DimensionError(f"Projection head is {head.fan_in}x{head.fan_out}, expected d x k")
        if self.classifier is not None:
            if (self.classifier.linear.fan_in, self.classifier.linear.fan_out) != (self.dims.k, 2):
                raise DimensionError("Classifier must map k features to 2 logits")
        if self.centers is not None and self.centers.shape != (len(self.modalities), self.dims.d):
            raise DimensionError("Center matrix must be |M| x d")
        return self


def init_model(dims: ModelDims, modalities: ModalityTable, seed: int, heads: Optional[str] = "mope") -> ModelBundle:
    """
    Seeded initialization: Kaiming-uniform weights, zero biases, zero classifier.

    Args:
        dims: Model dimensions
        modalities: Modality table the heads are keyed by
        seed: Generator seed
        heads: "mope" (one head per modality), "shared" (single head) or None
            for an encoder-only bundle

    Returns:
        Fresh ModelBundle tagged "init"
    """
    if heads not in ("mope", "shared", None):
        raise ConfigError(f"heads must be 'mope', 'shared' or None, got '{heads}'")
    rng = np.random.default_rng([seed, _ENCODER_STREAM])
    widths = dims.encoder_widths
    layers = [_kaiming_linear(rng, a, b, f"encoder.{i}") for i, (a, b) in enumerate(zip(widths, widths[1:]))]
    bundle = ModelBundle(dims=dims, modalities=modalities, encoder=EncoderParams(layers))
    if heads is not None:
        bundle = attach_heads(bundle, seed, shared=(heads == "shared"))
    return bundle.validate()


def attach_heads(bundle: ModelBundle, seed: int, shared: bool = False) -> ModelBundle:
    """Fresh projection heads and zero classifier on top of an existing encoder."""
    rng = np.random.default_rng([seed, _HEAD_STREAM])
    count = 1 if shared else len(bundle.modalities)
    head_list = [_kaiming_linear(rng, bundle.dims.d, bundle.dims.k, f"mope.{i}") for i in range(count)]
    routing = tuple(0 if shared else m for m in range(len(bundle.modalities)))
    return replace(
        bundle,
        encoder=bundle.encoder.copy(),
        mope=MoPEParams(head_list, routing),
        classifier=ClassifierParams(_zero_linear(bundle.dims.k, 2, "classifier")),
    )


# forward passes


def _check_input(bundle: ModelBundle, shape) -> None:
    if len(shape) != 2 or shape[1] != bundle.dims.input_dim:
        raise DimensionError(f"Encoder expects n x {bundle.dims.input_dim} input, got {tuple(shape)}")


def encode(bundle: ModelBundle, X) -> ng.Value:
    """Recorded MLP forward: n x input_dim -> n x d."""
    x = X if isinstance(X, ng.Value) else ng.constant(X)
    _check_input(bundle, x.shape)
    layers = bundle.encoder.layers
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = ng.relu(x)
    return x


def embed(bundle: ModelBundle, X: np.ndarray) -> np.ndarray:
    """Tape-free encoder forward on plain arrays."""
    X = np.asarray(X, dtype=np.float64)
    _check_input(bundle, X.shape)
    layers = bundle.encoder.layers
    for i, layer in enumerate(layers):
        X = layer.apply(X)
        if i < len(layers) - 1:
            X = np.maximum(X, 0.0)
    return X


def _route(bundle: ModelBundle, modality_ids) -> Dict[int, np.ndarray]:
    if bundle.mope is None:
        raise ContractError("Bundle has no projection heads (encoder-only checkpoint)")
    ids = np.asarray(modality_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(bundle.mope.routing)):
        raise ContractError(f"Unknown modality id in {sorted(set(ids.tolist()))}")
    head_of_row = np.array([bundle.mope.routing[m] for m in ids.tolist()], dtype=np.int64)
    return {h: np.flatnonzero(head_of_row == h) for h in range(len(bundle.mope.heads))}


def project(bundle: ModelBundle, Z: ng.Value, modality_ids) -> ng.Value:
    """
    Route every row through the head of its modality.

    Args:
        bundle: Model with projection heads
        Z: n x d embeddings
        modality_ids: n dense modality indices

    Returns:
        n x k projected features
    """
    ids = np.asarray(modality_ids, dtype=np.int64)
    if ids.shape != (Z.shape[0],):
        raise DimensionError(f"project: {Z.shape[0]} rows but {ids.size} modality ids")
    if Z.shape[0] == 0:
        raise DimensionError("project: empty batch")
    parts, index_lists = [], []
    for h, rows in _route(bundle, ids).items():
        if rows.size == 0:
            continue
        parts.append(bundle.mope.heads[h](ng.take_rows(Z, rows)))
        index_lists.append(rows)
    return ng.scatter_rows(parts, index_lists, Z.shape[0])


def project_array(bundle: ModelBundle, Z: np.ndarray, modality_ids) -> np.ndarray:
    out = np.zeros((Z.shape[0], bundle.dims.k))
    for h, rows in _route(bundle, modality_ids).items():
        if rows.size:
            out[rows] = bundle.mope.heads[h].apply(Z[rows])
    return out


def classify(bundle: ModelBundle, H: ng.Value) -> ng.Value:
    """Affine map to (bonafide, spoof) logits; no softmax."""
    if bundle.classifier is None:
        raise ContractError("Bundle has no classifier (encoder-only checkpoint)")
    if H.ndim != 2 or H.shape[1] != bundle.dims.k:
        raise DimensionError(f"Classifier expects n x {bundle.dims.k} input, got {H.shape}")
    return bundle.classifier.linear(H)


def forward(bundle: ModelBundle, X, modality_ids) -> ng.Value:
    return classify(bundle, project(bundle, encode(bundle, X), modality_ids))


def predict_logits(bundle: ModelBundle, X: np.ndarray, modality_ids) -> np.ndarray:
    """Tape-free full forward."""
    if bundle.classifier is None:
        raise ContractError("Bundle has no classifier (encoder-only checkpoint)")
    H = project_array(bundle, embed(bundle, X), modality_ids)
    return bundle.classifier.linear.apply(H)


def liveness_score(logits_row: Sequence[float]) -> float:
    """Bonafide logit minus spoof logit; higher means more live."""
    return float(logits_row[0]) - float(logits_row[1])


def liveness_scores(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return logits[:, 0] - logits[:, 1]


# parameter registry


def parameters(bundle: ModelBundle) -> List[Tuple[str, ng.Value]]:
    """Ordered (name, Value) registry: encoder, heads, classifier."""
    named = bundle.encoder.named_parameters()
    if bundle.mope is not None:
        named += bundle.mope.named_parameters()
    if bundle.classifier is not None:
        named += bundle.classifier.named_parameters()
    return named


def param_count(part) -> int:
    """Scalar parameter count of a bundle or any of its components."""
    named = parameters(part) if isinstance(part, ModelBundle) else part.named_parameters()
    return sum(value.size for _, value in named)


# checkpoints


def checkpoint_bytes(bundle: ModelBundle) -> bytes:
    bundle.validate()
    named = parameters(bundle)
    header = {
        "format": "litmas-checkpoint",
        "step": bundle.step,
        "dims": bundle.dims.to_dict(),
        "modalities": list(bundle.modalities.names),
        "routing": list(bundle.mope.routing) if bundle.mope is not None else None,
        "num_heads": len(bundle.mope.heads) if bundle.mope is not None else 0,
        "classifier": bundle.classifier is not None,
        "params": [{"name": name, "shape": list(value.shape)} for name, value in named],
        "centers": None if bundle.centers is None else {"epoch": bundle.center_epoch},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)), header_bytes]
    chunks += [np.ascontiguousarray(value.data, dtype="<f8").tobytes() for _, value in named]
    if bundle.centers is not None:
        chunks.append(np.ascontiguousarray(bundle.centers, dtype="<f8").tobytes())
    body = b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(bundle: ModelBundle, path: str) -> None:
    """Write a bundle; identical bundles always produce identical bytes."""
    payload = checkpoint_bytes(bundle)
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as exc:
        raise ArtifactIOError(f"Cannot write checkpoint {path}: {exc}") from exc
    logger.info("saved %s checkpoint (%d parameters) to %s", bundle.step, param_count(bundle), path)


def _take(buffer: memoryview, offset: int, size: int, path: str) -> Tuple[memoryview, int]:
    if offset + size > len(buffer):
        raise CorruptCheckpointError(f"{path}: truncated checkpoint")
    return buffer[offset:offset + size], offset + size


def checkpoint_from_bytes(payload: bytes, path: str = "<bytes>") -> ModelBundle:
    if len(payload) < len(CHECKPOINT_MAGIC) + 8 + _DIGEST_SIZE:
        raise CorruptCheckpointError(f"{path}: truncated checkpoint")
    if payload[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<II", payload, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: container version {version}, supported {CHECKPOINT_VERSION}")
    body, digest = payload[:-_DIGEST_SIZE], payload[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: digest mismatch (truncated or modified)")

    buffer = memoryview(body)
    offset = len(CHECKPOINT_MAGIC) + 8
    raw_header, offset = _take(buffer, offset, header_len, path)
    try:
        header = json.loads(bytes(raw_header).decode("utf-8"))
        dims = ModelDims.from_dict(header["dims"])
        table = ModalityTable(header["modalities"])
        specs = header["params"]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc

    values: Dict[str, ng.Value] = {}
    for spec in specs:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        blob, offset = _take(buffer, offset, 8 * count, path)
        values[spec["name"]] = ng.parameter(np.frombuffer(blob, dtype="<f8").reshape(shape).copy(), spec["name"])

    def linear(prefix: str) -> Linear:
        try:
            return Linear(values[f"{prefix}.weight"], values[f"{prefix}.bias"])
        except KeyError:
            raise CorruptCheckpointError(f"{path}: missing parameters for {prefix}")

    n_layers = len(dims.encoder_widths) - 1
    encoder = EncoderParams([linear(f"encoder.{i}") for i in range(n_layers)])
    mope = None
    if header.get("routing") is not None:
        mope = MoPEParams([linear(f"mope.{i}") for i in range(header["num_heads"])], tuple(header["routing"]))
    classifier = ClassifierParams(linear("classifier")) if header.get("classifier") else None

    centers, center_epoch = None, 0
    if header.get("centers") is not None:
        blob, offset = _take(buffer, offset, 8 * len(table) * dims.d, path)
        centers = np.frombuffer(blob, dtype="<f8").reshape(len(table), dims.d).copy()
        center_epoch = int(header["centers"]["epoch"])
    if offset != len(buffer):
        raise CorruptCheckpointError(f"{path}: trailing bytes after parameter blobs")

    bundle = ModelBundle(dims, table, encoder, mope, classifier, header.get("step", "init"), centers, center_epoch)
    try:
        return bundle.validate()
    except DimensionError as exc:
        raise CorruptCheckpointError(f"{path}: inconsistent checkpoint ({exc})") from exc


def load_checkpoint(path: str) -> ModelBundle:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as exc:
        raise ArtifactIOError(f"Cannot read checkpoint {path}: {exc}") from exc
    bundle = checkpoint_from_bytes(payload, path)
    logger.debug("loaded %s checkpoint from %s", bundle.step, path)
    return bundle


def require_compatible(bundle: ModelBundle, dims: ModelDims, modalities: ModalityTable, path: str = "checkpoint"):
    """Reject a checkpoint whose dims or modality table differ from the run's."""
    if bundle.dims != dims:
        raise CheckpointError(f"{path}: dims {bundle.dims.to_dict()} do not match config {dims.to_dict()}")
    if bundle.modalities != modalities:
        raise CheckpointError(
            f"{path}: modalities {list(bundle.modalities.names)} do not match data {list(modalities.names)}"
        )
