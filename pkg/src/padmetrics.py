"""
Presentation-attack-detection metrics over liveness scores.

Scores are oriented so that higher means more live and a sample is accepted
as bonafide when ``score >= threshold``:

    APCER(t) = share of spoof samples accepted
    BPCER(t) = share of bonafide samples rejected

Every threshold search runs over the same candidate grid: -inf, the midpoints
between adjacent distinct scores, and +inf. Error counts are evaluated per
grid position (not by re-comparing the midpoint) and compared as exact
integer ratios, so ties resolve identically on every platform.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata

from src.config import FieldReader, get_logger, load_config_file
from src.dataio import BONAFIDE, SPOOF
from src.errors import ArtifactIOError, ConfigError, MetricUndefinedError, ParseError, TdcfParameterError

logger = get_logger("padmetrics")

SCORE_MAGIC = "litmas-scores v1"
DEFAULT_APCER_TARGET = 0.01
REPORT_COLUMNS = (
    "group", "kind", "auc", "eer", "eer_threshold", "apcer_at_eer",
    "bpcer_at_eer", "bpcer_at_apcer1", "min_tdcf", "flags",
)
CONVENTION = (
    "# accept if score >= threshold; thresholds = midpoints of distinct scores plus -inf/+inf; "
    "EER minimizes |APCER-BPCER| (ties: lower mean, then lower threshold) and reports the mean, "
    "so fully inverted scores give EER 1.0; "
    "BPCER@APCER1% = smallest threshold with APCER <= 1%, no interpolation; min t-DCF variant={variant}"
)


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    modality: str
    dataset_tag: str
    label: int
    score: float

    def __post_init__(self):
        if self.label not in (BONAFIDE, SPOOF):
            raise ConfigError(f"Score {self.id}: label must be 0 or 1")
        if not math.isfinite(self.score):
            raise ConfigError(f"Score {self.id}: score must be finite")


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    apcer: float
    bpcer: float


def score_set(bonafide: Sequence[float], spoof: Sequence[float], modality: str = "all", tag: str = "all"):
    """Records from two plain score lists (bonafide first)."""
    records = [ScoreRecord(f"b{i}", modality, tag, BONAFIDE, float(s)) for i, s in enumerate(bonafide)]
    records += [ScoreRecord(f"s{i}", modality, tag, SPOOF, float(s)) for i, s in enumerate(spoof)]
    return records


# threshold grid


class _Sweep:
    """Error counts at every candidate threshold of one score set."""

    def __init__(self, scores: Sequence[ScoreRecord]):
        bona = np.array([r.score for r in scores if r.label == BONAFIDE], dtype=np.float64)
        spoof = np.array([r.score for r in scores if r.label == SPOOF], dtype=np.float64)
        if bona.size == 0 or spoof.size == 0:
            raise MetricUndefinedError(
                f"Metric needs both classes, got {bona.size} bonafide and {spoof.size} spoof scores"
            )
        self.bona = np.sort(bona)
        self.spoof = np.sort(spoof)
        self.nb = bona.size
        self.ns = spoof.size
        distinct = np.unique(np.concatenate([bona, spoof]))
        # position j accepts every score >= distinct[j]; j == len(distinct) rejects all
        cut = np.append(distinct, np.inf)
        self.accepted_spoof = self.ns - np.searchsorted(self.spoof, cut, side="left")
        self.rejected_bona = np.searchsorted(self.bona, cut, side="left")
        self.accepted_spoof[-1] = 0
        self.rejected_bona[-1] = self.nb
        mids = (distinct[:-1] + distinct[1:]) / 2.0
        self.thresholds = np.concatenate([[-np.inf], mids, [np.inf]])

    @property
    def apcer(self) -> np.ndarray:
        return self.accepted_spoof / self.ns

    @property
    def bpcer(self) -> np.ndarray:
        return self.rejected_bona / self.nb


def _counts_at(scores: Sequence[ScoreRecord], threshold: float) -> Tuple[int, int, int, int]:
    ka = sum(1 for r in scores if r.label == SPOOF and r.score >= threshold)
    kb = sum(1 for r in scores if r.label == BONAFIDE and r.score < threshold)
    ns = sum(1 for r in scores if r.label == SPOOF)
    nb = len(scores) - ns
    if nb == 0 or ns == 0:
        raise MetricUndefinedError(f"Metric needs both classes, got {nb} bonafide and {ns} spoof scores")
    return ka, kb, ns, nb


def roc(scores: Sequence[ScoreRecord]) -> List[RocPoint]:
    """ROC points at -inf, every distinct score and +inf."""
    sweep = _Sweep(scores)
    distinct = np.unique(np.concatenate([sweep.bona, sweep.spoof]))
    thresholds = np.concatenate([[-np.inf], distinct, [np.inf]])
    accepted = sweep.ns - np.searchsorted(sweep.spoof, thresholds, side="left")
    rejected = np.searchsorted(sweep.bona, thresholds, side="left")
    return [
        RocPoint(float(t), int(a) / sweep.ns, int(r) / sweep.nb)
        for t, a, r in zip(thresholds, accepted, rejected)
    ]


def det_points(scores: Sequence[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, apcer, bpcer) over the candidate grid, for external DET plots."""
    sweep = _Sweep(scores)
    return sweep.thresholds.copy(), sweep.apcer, sweep.bpcer


def write_roc_points(scores: Sequence[ScoreRecord], path: str) -> None:
    """CSV of the ROC grid plus normal-deviate coordinates for DET axes."""
    points = roc(scores)
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["threshold", "apcer", "bpcer", "apcer_deviate", "bpcer_deviate"])
            for p in points:
                writer.writerow([
                    repr(p.threshold), repr(p.apcer), repr(p.bpcer),
                    _deviate(p.apcer), _deviate(p.bpcer),
                ])
    except OSError as exc:
        raise ArtifactIOError(f"Cannot write ROC points {path}: {exc}") from exc


def _deviate(rate: float) -> str:
    if rate <= 0.0 or rate >= 1.0:
        return ""
    return repr(float(norm.ppf(rate)))


def auc(scores: Sequence[ScoreRecord]) -> float:
    """Mann-Whitney AUC: P(bonafide score > spoof score), ties counted as one half."""
    sweep = _Sweep(scores)
    ranks = rankdata(np.concatenate([sweep.bona, sweep.spoof]))
    rank_sum = float(ranks[:sweep.nb].sum())
    return (rank_sum - sweep.nb * (sweep.nb + 1) / 2.0) / (sweep.nb * sweep.ns)


def eer(scores: Sequence[ScoreRecord]) -> Tuple[float, float]:
    """
    Equal error rate on the candidate grid.

    Returns:
        (eer, threshold) where eer = (APCER + BPCER) / 2 at the chosen threshold
    """
    sweep = _Sweep(scores)
    ka = sweep.accepted_spoof.astype(object)
    kb = sweep.rejected_bona.astype(object)
    best = min(
        range(len(sweep.thresholds)),
        key=lambda j: (abs(ka[j] * sweep.nb - kb[j] * sweep.ns), ka[j] * sweep.nb + kb[j] * sweep.ns, j),
    )
    value = (int(ka[best]) / sweep.ns + int(kb[best]) / sweep.nb) / 2.0
    return value, float(sweep.thresholds[best])


def apcer_bpcer_at(scores: Sequence[ScoreRecord], threshold: float) -> Tuple[float, float]:
    ka, kb, ns, nb = _counts_at(scores, threshold)
    return ka / ns, kb / nb


def bpcer_at_apcer(scores: Sequence[ScoreRecord], target: float = DEFAULT_APCER_TARGET) -> Tuple[float, float]:
    """
    BPCER at the smallest grid threshold whose APCER does not exceed ``target``.

    Returns:
        (bpcer, threshold)
    """
    if not 0.0 <= target <= 1.0:
        raise ConfigError(f"APCER target must be in [0, 1], got {target}")
    sweep = _Sweep(scores)
    limit = target * sweep.ns + 1e-12
    # accepted spoof counts are non-increasing along the grid; +inf always qualifies
    j = int(np.argmax(sweep.accepted_spoof <= limit))
    return int(sweep.rejected_bona[j]) / sweep.nb, float(sweep.thresholds[j])


def apcer_resolution_coarse(n_spoof: int, target: float = DEFAULT_APCER_TARGET) -> bool:
    """True when too few spoof scores exist to realize an APCER equal to ``target``."""
    return target > 0 and n_spoof < 1.0 / target


# tandem detection cost


@dataclass(frozen=True)
class TdcfParams:
    """
    Tandem cost model. Defaults follow the ASVspoof 2019 logical-access setup;
    the ASV operating point defaults to a perfect verifier that passes every spoof.
    """

    p_target: float = 0.95 * 0.99
    p_nontarget: float = 0.95 * 0.01
    p_spoof: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 10.0
    c_miss_cm: float = 1.0
    c_fa_cm: float = 10.0
    c_fa_spoof: float = 10.0
    asv_miss: float = 0.0
    asv_fa: float = 0.0
    asv_spoof_pass: float = 1.0
    variant: str = "constrained"

    def validate(self) -> "TdcfParams":
        priors = (self.p_target, self.p_nontarget, self.p_spoof)
        if any(p <= 0 for p in priors) or abs(sum(priors) - 1.0) > 1e-9:
            raise TdcfParameterError(f"t-DCF priors must be positive and sum to 1, got {priors}")
        costs = (self.c_miss, self.c_fa, self.c_miss_cm, self.c_fa_cm, self.c_fa_spoof)
        if any(c <= 0 for c in costs):
            raise TdcfParameterError("t-DCF costs must be > 0")
        for name in ("asv_miss", "asv_fa", "asv_spoof_pass"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise TdcfParameterError(f"t-DCF rate {name} must be in [0, 1]")
        if self.variant not in ("constrained", "revised"):
            raise TdcfParameterError(f"t-DCF variant must be 'constrained' or 'revised', got '{self.variant}'")
        return self

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], source: str = "t-DCF params") -> "TdcfParams":
        reader = FieldReader(values, source)
        defaults = cls()
        kwargs = {
            name: reader.get_float(name, getattr(defaults, name))
            for name in (
                "p_target", "p_nontarget", "p_spoof", "c_miss", "c_fa", "c_miss_cm",
                "c_fa_cm", "c_fa_spoof", "asv_miss", "asv_fa", "asv_spoof_pass",
            )
        }
        kwargs["variant"] = reader.get_str("variant", defaults.variant)
        reader.finish()
        return cls(**kwargs).validate()

    @classmethod
    def from_file(cls, path: str) -> "TdcfParams":
        return cls.from_mapping(load_config_file(path), source=path)


def tdcf_coefficients(params: TdcfParams) -> Tuple[float, float, float]:
    """
    (C0, C1, C2) so that t-DCF = C0 + C1 * Pmiss_cm + C2 * Pfa_cm.

    The constrained form has C0 = 0.
    """
    params.validate()
    if params.variant == "constrained":
        c0 = 0.0
        c1 = params.p_target * (params.c_miss_cm - params.c_miss * params.asv_miss) \
            - params.p_nontarget * params.c_fa * params.asv_fa
        c2 = params.c_fa_cm * params.p_spoof * params.asv_spoof_pass
    else:
        c0 = params.p_target * params.c_miss * params.asv_miss + params.p_nontarget * params.c_fa * params.asv_fa
        c1 = params.p_target * params.c_miss - c0
        c2 = params.p_spoof * params.c_fa_spoof * params.asv_spoof_pass
    if c1 <= 0 or c2 <= 0:
        raise TdcfParameterError(
            f"Degenerate t-DCF (C1={c1:.6g}, C2={c2:.6g}); the ASV operating point or costs leave nothing to detect"
        )
    return c0, c1, c2


def tdcf_curve(scores: Sequence[ScoreRecord], params: TdcfParams) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized t-DCF at every candidate threshold: (thresholds, values)."""
    c0, c1, c2 = tdcf_coefficients(params)
    sweep = _Sweep(scores)
    values = (c0 + c1 * sweep.bpcer + c2 * sweep.apcer) / (c0 + min(c1, c2))
    return sweep.thresholds.copy(), values


def min_tdcf(scores: Sequence[ScoreRecord], params: Optional[TdcfParams] = None) -> Tuple[float, float]:
    """Minimum normalized t-DCF and its threshold; never exceeds 1."""
    thresholds, values = tdcf_curve(scores, params or TdcfParams())
    j = int(np.argmin(values))
    return float(values[j]), float(thresholds[j])


def asv_operating_point(target: Sequence[float], nontarget: Sequence[float], spoof: Sequence[float]):
    """
    Fix the ASV system at its own EER threshold.

    Args:
        target: ASV scores of genuine target trials
        nontarget: ASV scores of zero-effort impostor trials
        spoof: ASV scores of spoofed trials

    Returns:
        (threshold, asv_miss, asv_fa, asv_spoof_pass)
    """
    _, threshold = eer(score_set(target, nontarget))
    target = np.asarray(target, dtype=np.float64)
    nontarget = np.asarray(nontarget, dtype=np.float64)
    spoof = np.asarray(spoof, dtype=np.float64)
    if spoof.size == 0:
        raise MetricUndefinedError("ASV operating point needs spoof trial scores")
    return (
        threshold,
        float(np.mean(target < threshold)),
        float(np.mean(nontarget >= threshold)),
        float(np.mean(spoof >= threshold)),
    )


# score files


def write_score_file(records: Sequence[ScoreRecord], path: str) -> None:
    lines = [SCORE_MAGIC]
    lines += [f"{r.id}\t{r.modality}\t{r.dataset_tag}\t{r.label}\t{r.score!r}" for r in records]
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"Cannot write score file {path}: {exc}") from exc


def read_score_file(path: str) -> List[ScoreRecord]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = f.read().split("\n")
    except OSError as exc:
        raise ArtifactIOError(f"Cannot read score file {path}: {exc}") from exc
    records: List[ScoreRecord] = []
    header_seen = False
    for number, line in enumerate(raw, start=1):
        line = line.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if not header_seen:
            if line.strip() != SCORE_MAGIC:
                raise ParseError(f"expected header '{SCORE_MAGIC}'", path, number)
            header_seen = True
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ParseError(f"expected 5 tab-separated fields, got {len(fields)}", path, number)
        sample_id, modality, tag, label_text, score_text = fields
        if label_text not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got '{label_text}'", path, number)
        try:
            score = float(score_text)
        except ValueError:
            raise ParseError(f"invalid score '{score_text}'", path, number)
        if not math.isfinite(score):
            raise ParseError("score must be finite", path, number)
        records.append(ScoreRecord(sample_id, modality, tag, int(label_text), score))
    if not header_seen:
        raise ParseError(f"missing header '{SCORE_MAGIC}'", path, 1)
    return records


# reports


@dataclass
class MetricsRow:
    group: str
    kind: str
    auc: Optional[float] = None
    eer: Optional[float] = None
    eer_threshold: Optional[float] = None
    apcer_at_eer: Optional[float] = None
    bpcer_at_eer: Optional[float] = None
    bpcer_at_apcer1: Optional[float] = None
    min_tdcf: Optional[float] = None
    flags: List[str] = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return self.auc is not None

    def cells(self) -> List[str]:
        def fmt(value):
            return "NA" if value is None else repr(float(value))

        return [
            self.group, self.kind, fmt(self.auc), fmt(self.eer), fmt(self.eer_threshold),
            fmt(self.apcer_at_eer), fmt(self.bpcer_at_eer), fmt(self.bpcer_at_apcer1),
            "" if self.min_tdcf is None else repr(float(self.min_tdcf)), ";".join(self.flags),
        ]


@dataclass
class MetricsReport:
    rows: List[MetricsRow]
    tdcf_variant: str = "constrained"

    @property
    def overall(self) -> MetricsRow:
        return self.rows[0]

    def row(self, group: str, kind: Optional[str] = None) -> MetricsRow:
        for r in self.rows:
            if r.group == group and (kind is None or r.kind == kind):
                return r
        raise KeyError(group)

    def to_csv(self, path: str) -> None:
        try:
            with open(path, "w", encoding="utf-8", newline="") as f:
                f.write(CONVENTION.format(variant=self.tdcf_variant) + "\n")
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(REPORT_COLUMNS)
                for r in self.rows:
                    writer.writerow(r.cells())
        except OSError as exc:
            raise ArtifactIOError(f"Cannot write report {path}: {exc}") from exc

    def format_table(self) -> str:
        lines = [f"{'group':<20} {'kind':<9} {'AUC':>8} {'EER':>8} {'BPCER@1%':>9} {'minTDCF':>8}  flags"]
        for r in self.rows:
            def cell(v, width):
                return f"{'NA':>{width}}" if v is None else f"{v:>{width}.4f}"

            lines.append(
                f"{r.group:<20} {r.kind:<9} {cell(r.auc, 8)} {cell(r.eer, 8)} "
                f"{cell(r.bpcer_at_apcer1, 9)} {cell(r.min_tdcf, 8)}  {';'.join(r.flags)}"
            )
        return "\n".join(lines)


def evaluate_group(
    group: str,
    kind: str,
    records: Sequence[ScoreRecord],
    tdcf_params: Optional[TdcfParams] = None,
    apcer_target: float = DEFAULT_APCER_TARGET,
) -> MetricsRow:
    """All metrics for one group; a single-class group yields an undefined row."""
    row = MetricsRow(group, kind)
    n_spoof = sum(1 for r in records if r.label == SPOOF)
    if n_spoof == 0 or n_spoof == len(records):
        row.flags.append("single-class")
        logger.warning("group %s/%s has a single class; metrics undefined", kind, group)
        return row
    row.auc = auc(records)
    row.eer, row.eer_threshold = eer(records)
    row.apcer_at_eer, row.bpcer_at_eer = apcer_bpcer_at(records, row.eer_threshold)
    row.bpcer_at_apcer1, _ = bpcer_at_apcer(records, apcer_target)
    if apcer_resolution_coarse(n_spoof, apcer_target):
        row.flags.append("coarse-apcer")
    if tdcf_params is not None:
        row.min_tdcf, _ = min_tdcf(records, tdcf_params)
    return row


def evaluate(
    records: Sequence[ScoreRecord],
    grouping: str = "both",
    tdcf_params: Optional[TdcfParams] = None,
    speech_groups: Sequence[str] = (),
) -> MetricsReport:
    """
    Metrics per group: overall, then modalities, then dataset tags (each sorted).

    Args:
        records: Scores to evaluate
        grouping: "modality", "dataset", "both" or "none"
        tdcf_params: Cost model; min t-DCF is computed only when given
        speech_groups: Group names (modality names or dataset tags, or "all")
            that receive min t-DCF

    Returns:
        MetricsReport in deterministic row order
    """
    if grouping not in ("modality", "dataset", "both", "none"):
        raise ConfigError(f"grouping must be modality, dataset, both or none, got '{grouping}'")
    if not records:
        raise MetricUndefinedError("No scores to evaluate")
    speech = set(speech_groups)

    def params_for(name: str):
        return tdcf_params if tdcf_params is not None and name in speech else None

    rows = [evaluate_group("all", "overall", records, params_for("all"))]
    axes = []
    if grouping in ("modality", "both"):
        axes.append(("modality", lambda r: r.modality))
    if grouping in ("dataset", "both"):
        axes.append(("dataset", lambda r: r.dataset_tag))
    for kind, key in axes:
        groups: Dict[str, List[ScoreRecord]] = {}
        for r in records:
            groups.setdefault(key(r), []).append(r)
        for name in sorted(groups):
            rows.append(evaluate_group(name, kind, groups[name], params_for(name)))
    return MetricsReport(rows, tdcf_params.variant if tdcf_params is not None else "constrained")


def evaluate_file(path: str, grouping: str = "both", tdcf_params=None, speech_groups=()) -> MetricsReport:
    return evaluate(read_score_file(path), grouping, tdcf_params, speech_groups)
