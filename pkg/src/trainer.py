"""
AdamW, the two-step training pipeline and the pretrain x MoPE ablation.

Step 1 pre-trains the encoder with the MAC loss and refreshes the modality
centers after every epoch. Step 2 puts projection heads and the classifier on
top of the (pre-trained or fresh) encoder and fine-tunes everything with
cross-entropy.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src import numgrad as ng
from src.config import REQUIRED, FieldReader, config, get_logger, load_config_file
from src.dataio import BalancedBatchSampler, DatasetView
from src.errors import (
    ArtifactIOError,
    CheckpointError,
    ConfigError,
    DimensionError,
    DivergenceError,
    MetricUndefinedError,
)
from src.losses import MacBatch, center_scores, cross_entropy, init_centers, mac_loss, update_centers
from src.model import (
    ModelBundle,
    ModelDims,
    attach_heads,
    encode,
    forward,
    init_model,
    liveness_scores,
    parameters,
    predict_logits,
    require_compatible,
)
from src.padmetrics import ScoreRecord, auc, eer

logger = get_logger("trainer")


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of one run; defaults are the full-scale published settings."""

    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs_step1: int = 40
    epochs_step2: int = 40
    hidden: Tuple[int, ...] = (256, 256)
    d: int = 192
    k: int = 512
    seed: int = 0
    use_mac_pretrain: bool = True
    use_mope: bool = True
    set_size_norm: bool = False
    input_dim: Optional[int] = None

    def validate(self, num_modalities: Optional[int] = None) -> "TrainConfig":
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (self.weight_decay >= 0 and math.isfinite(self.weight_decay)):
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs_step1 < 0 or self.epochs_step2 < 0:
            raise ConfigError("epochs_step1 and epochs_step2 must be >= 0")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be > 0, got {self.batch_size}")
        if num_modalities is not None and self.batch_size < 2 * num_modalities:
            raise ConfigError(f"batch_size {self.batch_size} must be >= 2 x {num_modalities} modalities")
        ModelDims(self.input_dim or 1, self.hidden, self.d, self.k)
        return self

    def model_dims(self, input_dim: int) -> ModelDims:
        if self.input_dim is not None and self.input_dim != input_dim:
            raise DimensionError(f"Config input_dim={self.input_dim} but the data has {input_dim} features")
        return ModelDims(input_dim, self.hidden, self.d, self.k)

    def to_mapping(self) -> Dict[str, str]:
        """Every field as a config-file string (defaults materialized)."""
        out = {}
        for key, value in asdict(self).items():
            if value is None:
                continue
            if isinstance(value, bool):
                out[key] = "true" if value else "false"
            elif isinstance(value, (tuple, list)):
                out[key] = ",".join(str(v) for v in value)
            else:
                out[key] = repr(value) if isinstance(value, float) else str(value)
        return out

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], source: str = "train config") -> "TrainConfig":
        reader = FieldReader(values, source)
        d = cls()
        cfg = cls(
            lr=reader.get_float("lr", d.lr),
            weight_decay=reader.get_float("weight_decay", d.weight_decay),
            batch_size=reader.get_int("batch_size", d.batch_size),
            epochs_step1=reader.get_int("epochs_step1", d.epochs_step1),
            epochs_step2=reader.get_int("epochs_step2", d.epochs_step2),
            hidden=reader.get_list("hidden", int, d.hidden),
            d=reader.get_int("d", d.d),
            k=reader.get_int("k", d.k),
            seed=reader.get_int("seed", REQUIRED),
            use_mac_pretrain=reader.get_bool("use_mac_pretrain", d.use_mac_pretrain),
            use_mope=reader.get_bool("use_mope", d.use_mope),
            set_size_norm=reader.get_bool("set_size_norm", d.set_size_norm),
            input_dim=reader.get_int("input_dim", None),
        )
        reader.finish()
        return cfg.validate()

    @classmethod
    def from_file(cls, path: str, overrides: Optional[Mapping[str, str]] = None) -> "TrainConfig":
        values = load_config_file(path)
        values.update(overrides or {})
        return cls.from_mapping(values, source=path)


# optimizer


@dataclass
class AdamWState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamWState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
) -> Tuple[List[np.ndarray], AdamWState]:
    """
    One AdamW update with decoupled weight decay.

    Args:
        params: Current parameter arrays (left untouched)
        grads: Gradients aligned with params
        state: Moments and step counter (left untouched)
        lr: Learning rate
        weight_decay: Decoupled decay coefficient

    Returns:
        (new params, new state)
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adamw_step: params, grads and state have different lengths")
    t = state.t + 1
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    decay = 1.0 - lr * weight_decay
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adamw_step: parameter {p.shape} vs gradient {g.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        step = lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        new_params.append(p * decay - step)
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, m=new_m, v=new_v, t=t)


class AdamW:
    """Stateful AdamW over autodiff parameters."""

    def __init__(self, params: Sequence[ng.Value], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamWState.zeros_like([p.data for p in self.params])

    def zero_grad(self):
        ng.zero_grad(self.params)

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"Non-finite gradient for {p.name}")
        new_params, self.state = adamw_step(
            [p.data for p in self.params], [p.grad for p in self.params], self.state, self.lr, self.weight_decay
        )
        for p, data in zip(self.params, new_params):
            if not np.all(np.isfinite(data)):
                raise DivergenceError(f"Parameter {p.name} became non-finite (lr={self.lr})")
            p.data = data


# run logs


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    seconds: float
    center_drift: Optional[float] = None
    val_eer: Optional[float] = None
    val_auc: Optional[float] = None


@dataclass
class RunLog:
    step: str
    records: List[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "loss", "seconds", "center_drift", "val_eer", "val_auc")

    def append(self, record: EpochRecord) -> None:
        expected = len(self.records) + 1
        if record.epoch != expected:
            raise ConfigError(f"RunLog expects epoch {expected}, got {record.epoch}")
        self.records.append(record)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def to_csv(self, path: str, record_timing: Optional[bool] = None) -> None:
        """Write the log; wall time stays blank unless timing is recorded."""
        timing = config.RECORD_TIMING if record_timing is None else record_timing

        def cell(value):
            return "" if value is None else repr(float(value))

        lines = [",".join(self.COLUMNS)]
        for r in self.records:
            lines.append(",".join([
                str(r.epoch), cell(r.loss), cell(r.seconds) if timing else "",
                cell(r.center_drift), cell(r.val_eer), cell(r.val_auc),
            ]))
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write("\n".join(lines) + "\n")
        except OSError as exc:
            raise ArtifactIOError(f"Cannot write run log {path}: {exc}") from exc


def _validation_metrics(records: Sequence[ScoreRecord]) -> Tuple[Optional[float], Optional[float]]:
    try:
        return eer(records)[0], auc(records)
    except MetricUndefinedError:
        return None, None


def _records(view: DatasetView, scores: np.ndarray) -> List[ScoreRecord]:
    return [
        ScoreRecord(s.id, s.modality.name, s.dataset_tag, s.label, float(score))
        for s, score in zip(view.samples, scores)
    ]


def _batches(cfg: TrainConfig, view: DatasetView, epoch: int, step_tag: int) -> BalancedBatchSampler:
    # each step draws its own batch order from the run seed
    return BalancedBatchSampler(view, cfg.batch_size, cfg.seed * 1000 + step_tag, epoch)


def _check_loss(loss: ng.Value, step: str, epoch: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"{step} epoch {epoch}: non-finite loss")
    return value


# step 1


def pretrain_step1(
    cfg: TrainConfig, train_view: DatasetView, val_view: Optional[DatasetView] = None
) -> Tuple[ModelBundle, RunLog]:
    """
    MAC-loss pre-training of the encoder.

    Args:
        cfg: Run configuration
        train_view: Combined multi-modal training set
        val_view: Optional view scored by cosine to the own-modality center

    Returns:
        (bundle tagged "step1" carrying the final centers, per-epoch RunLog)
    """
    cfg.validate(len(train_view.present_modalities()))
    bundle = init_model(cfg.model_dims(train_view.input_dim), train_view.modalities, cfg.seed, heads=None)
    bank = init_centers(bundle, train_view)
    log = RunLog("step1")
    optimizer = AdamW([value for _, value in parameters(bundle)], cfg.lr, cfg.weight_decay)
    X, y, mods = train_view.features, train_view.labels, train_view.modality_ids

    for epoch in range(1, cfg.epochs_step1 + 1):
        started = time.perf_counter()
        losses = []
        for ix in _batches(cfg, train_view, epoch, 1):
            optimizer.zero_grad()
            batch = MacBatch(encode(bundle, X[ix]), y[ix], mods[ix])
            loss = mac_loss(batch, bank, cfg.set_size_norm)
            losses.append(_check_loss(loss, "step1", epoch))
            loss.backward()
            optimizer.step()
        new_bank = update_centers(bundle, train_view, epoch=epoch)
        drift = new_bank.drift(bank)
        bank = new_bank
        val_eer = val_auc = None
        if val_view is not None:
            val_eer, val_auc = _validation_metrics(_records(val_view, center_scores(bundle, bank, val_view)))
        record = EpochRecord(epoch, float(np.mean(losses)), time.perf_counter() - started, drift, val_eer, val_auc)
        log.append(record)
        logger.info(
            "step1 epoch %d/%d loss=%.6f drift=%.6f%s",
            epoch, cfg.epochs_step1, record.loss, drift,
            "" if val_eer is None else f" val_eer={val_eer:.4f} val_auc={val_auc:.4f}",
        )

    return replace(bank.store(bundle), step="step1"), log


# step 2


def finetune_step2(
    cfg: TrainConfig,
    train_view: DatasetView,
    step1: Optional[ModelBundle] = None,
    val_view: Optional[DatasetView] = None,
) -> Tuple[ModelBundle, RunLog]:
    """
    Cross-entropy fine-tuning with projection heads (or one shared head).

    With ``use_mac_pretrain`` the encoder is copied from the Step-1 bundle;
    otherwise it is freshly initialized. Heads and classifier are always new.
    """
    cfg.validate(len(train_view.present_modalities()))
    dims = cfg.model_dims(train_view.input_dim)
    if cfg.use_mac_pretrain:
        if step1 is None:
            raise ConfigError("use_mac_pretrain is set but no step1 checkpoint was supplied")
        if step1.step != "step1":
            raise CheckpointError(f"Expected a step1 checkpoint, got one tagged '{step1.step}'")
        require_compatible(step1, dims, train_view.modalities)
        base = replace(step1, centers=None, center_epoch=0)
        bundle = attach_heads(base, cfg.seed, shared=not cfg.use_mope)
    else:
        bundle = init_model(dims, train_view.modalities, cfg.seed, heads="mope" if cfg.use_mope else "shared")

    log = RunLog("step2")
    optimizer = AdamW([value for _, value in parameters(bundle)], cfg.lr, cfg.weight_decay)
    X, y, mods = train_view.features, train_view.labels, train_view.modality_ids

    for epoch in range(1, cfg.epochs_step2 + 1):
        started = time.perf_counter()
        losses = []
        for ix in _batches(cfg, train_view, epoch, 2):
            optimizer.zero_grad()
            loss = cross_entropy(forward(bundle, X[ix], mods[ix]), y[ix])
            losses.append(_check_loss(loss, "step2", epoch))
            loss.backward()
            optimizer.step()
        val_eer = val_auc = None
        if val_view is not None:
            val_eer, val_auc = _validation_metrics(score_view(bundle, val_view))
        record = EpochRecord(epoch, float(np.mean(losses)), time.perf_counter() - started, None, val_eer, val_auc)
        log.append(record)
        logger.info(
            "step2 epoch %d/%d loss=%.6f%s",
            epoch, cfg.epochs_step2, record.loss,
            "" if val_eer is None else f" val_eer={val_eer:.4f} val_auc={val_auc:.4f}",
        )

    return replace(bundle, step="step2"), log


def score_view(bundle: ModelBundle, view: DatasetView) -> List[ScoreRecord]:
    """Liveness score of every sample, in view order."""
    if bundle.step != "step2":
        raise CheckpointError(f"Scoring needs a step2 checkpoint, got one tagged '{bundle.step}'")
    if view.input_dim != bundle.dims.input_dim:
        raise DimensionError(f"Checkpoint expects {bundle.dims.input_dim} features, file has {view.input_dim}")
    # route by modality name; the file's table may order modalities differently
    ids = np.array([bundle.modalities.get(s.modality.name).index for s in view.samples], dtype=np.int64)
    logits = predict_logits(bundle, view.features, ids)
    return _records(view, liveness_scores(logits))


@dataclass
class PipelineResult:
    step1: Optional[ModelBundle]
    step1_log: Optional[RunLog]
    step2: ModelBundle
    step2_log: RunLog


def run_pipeline(
    cfg: TrainConfig, train_view: DatasetView, val_view: Optional[DatasetView] = None
) -> PipelineResult:
    """Step 1 (when pre-training is enabled) followed by Step 2."""
    step1 = step1_log = None
    if cfg.use_mac_pretrain:
        step1, step1_log = pretrain_step1(cfg, train_view, val_view)
    step2, step2_log = finetune_step2(cfg, train_view, step1, val_view)
    return PipelineResult(step1, step1_log, step2, step2_log)


# ablation


ABLATION_ARMS = ((False, False), (True, False), (False, True), (True, True))


@dataclass
class AblationRow:
    pretrain: bool
    mope: bool
    auc: float
    eer: float
    bundle: Optional[ModelBundle] = field(default=None, repr=False)
    log: Optional[RunLog] = field(default=None, repr=False)


@dataclass
class AblationReport:
    rows: List[AblationRow]
    step1: Optional[ModelBundle] = field(default=None, repr=False)
    step1_log: Optional[RunLog] = field(default=None, repr=False)

    def row(self, pretrain: bool, mope: bool) -> AblationRow:
        for r in self.rows:
            if r.pretrain == pretrain and r.mope == mope:
                return r
        raise KeyError((pretrain, mope))

    def to_csv(self, path: str) -> None:
        lines = ["pretrain,mope,auc,eer"]
        lines += [f"{int(r.pretrain)},{int(r.mope)},{r.auc!r},{r.eer!r}" for r in self.rows]
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write("\n".join(lines) + "\n")
        except OSError as exc:
            raise ArtifactIOError(f"Cannot write ablation report {path}: {exc}") from exc

    def format_table(self) -> str:
        lines = [f"{'MAC pre-train':<15}{'MoPE':<8}{'AUC':>10}{'EER (%)':>10}"]
        for r in self.rows:
            lines.append(
                f"{'✓' if r.pretrain else '✗':<15}{'✓' if r.mope else '✗':<8}{r.auc:>10.4f}{100 * r.eer:>10.2f}"
            )
        return "\n".join(lines)


def run_ablation(
    cfg: TrainConfig,
    train_view: DatasetView,
    test_view: DatasetView,
    workers: Optional[int] = None,
) -> AblationReport:
    """
    Train and test all four (pre-train, MoPE) combinations on the same data and seed.

    Step 1 runs once and is shared by both pre-trained arms. Rows come back in
    fixed arm order whatever the worker count.
    """
    cfg.validate(len(train_view.present_modalities()))
    workers = config.ABLATION_WORKERS if workers is None else workers
    step1, step1_log = pretrain_step1(cfg, train_view)

    def run_arm(arm):
        pretrain, mope = arm
        arm_cfg = replace(cfg, use_mac_pretrain=pretrain, use_mope=mope)
        bundle, log = finetune_step2(arm_cfg, train_view, step1 if pretrain else None)
        records = score_view(bundle, test_view)
        test_eer, _ = eer(records)
        row = AblationRow(pretrain, mope, auc(records), test_eer, bundle, log)
        logger.info("ablation arm pretrain=%s mope=%s auc=%.4f eer=%.4f", pretrain, mope, row.auc, row.eer)
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_arm, ABLATION_ARMS))
    else:
        rows = [run_arm(arm) for arm in ABLATION_ARMS]
    return AblationReport(rows, step1, step1_log)


def training_accuracy(bundle: ModelBundle, view: DatasetView) -> float:
    """Share of samples whose argmax logit matches the label."""
    logits = predict_logits(bundle, view.features, view.modality_ids)
    return float(np.mean(np.argmax(logits, axis=1) == view.labels))
