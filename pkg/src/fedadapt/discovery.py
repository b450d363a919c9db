"""Server-side knowledge discovery.

Given the source global model and a freshly trained upload from a joiner,
measure how far apart the two models are on the public dataset and decide
whether the joiner brings new knowledge, and of which kind. Feature change
is a Manhattan distance summed over the whole public set; encoder and
classifier parameter changes are Euclidean distances.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import CalibrationError, ConfigError
from .nn import SplitModel, _require_congruent, flatten_classifier, flatten_encoder, forward


@dataclass(frozen=True)
class DiffReport:
    diff_f: float
    diff_c: float
    diff_e: float
    public_set_size: int


@dataclass(frozen=True)
class Thresholds:
    t_f: float
    t_c: float

    def __post_init__(self):
        if self.t_f <= 0 or self.t_c <= 0:
            raise ConfigError(f"thresholds must be > 0, got ({self.t_f}, {self.t_c})")


class VerdictKind(enum.Enum):
    NO_NEW_KNOWLEDGE = "no_new_knowledge"
    DOMAIN_INCREMENT = "domain_increment"
    CLASS_INCREMENT = "class_increment"


@dataclass(frozen=True)
class KnowledgeVerdict:
    kind: VerdictKind
    report: DiffReport


def encode_public(model: SplitModel, public: LabeledDataset) -> np.ndarray:
    """Feature matrix of the public samples under the given model."""
    features, _ = forward(model, public.samples)
    return features


def feature_gap(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Manhattan distance summed over all samples and feature dims (unnormalized)."""
    if features_a.shape != features_b.shape:
        raise ConfigError(
            f"feature matrices differ in shape: {features_a.shape} vs {features_b.shape}"
        )
    return float(np.abs(features_a - features_b).sum())


def classifier_gap(a: SplitModel, b: SplitModel) -> float:
    """Euclidean distance between flattened classifier parameters (incl. bias)."""
    return float(np.linalg.norm(flatten_classifier(a) - flatten_classifier(b)))


def encoder_gap(a: SplitModel, b: SplitModel) -> float:
    """Euclidean distance between flattened encoder parameters."""
    return float(np.linalg.norm(flatten_encoder(a) - flatten_encoder(b)))


def compute_diffs(source: SplitModel, target: SplitModel, public: LabeledDataset) -> DiffReport:
    if len(public) == 0:
        raise ConfigError("public dataset is empty")
    _require_congruent(source, target)
    f_source = encode_public(source, public)
    f_target = encode_public(target, public)
    return DiffReport(
        diff_f=feature_gap(f_source, f_target),
        diff_c=classifier_gap(source, target),
        diff_e=encoder_gap(source, target),
        public_set_size=len(public),
    )


def classify_knowledge(report: DiffReport, thresholds: Thresholds) -> KnowledgeVerdict:
    """Decision rule: feature change past t_f means new knowledge; classifier
    change past t_c on top of that marks it a class increment."""
    if report.diff_f <= thresholds.t_f:
        kind = VerdictKind.NO_NEW_KNOWLEDGE
    elif report.diff_c > thresholds.t_c:
        kind = VerdictKind.CLASS_INCREMENT
    else:
        kind = VerdictKind.DOMAIN_INCREMENT
    return KnowledgeVerdict(kind=kind, report=report)


IN_DISTRIBUTION = "same"
DOMAIN_LABEL = "domain"
CLASS_LABEL = "class"
_LABELS = (IN_DISTRIBUTION, DOMAIN_LABEL, CLASS_LABEL)


def calibrate_thresholds(labeled_reports) -> Thresholds:
    """Place thresholds between observed bands of labeled probe reports.

    t_f sits at the geometric mean of (largest in-distribution diff_f,
    smallest increment diff_f); t_c analogously between the domain-increment
    and class-increment diff_c bands. Overlapping bands are an error: the
    probe runs do not separate and no threshold can be trusted.
    """
    by_label = {label: [] for label in _LABELS}
    for label, report in labeled_reports:
        if label not in by_label:
            raise ConfigError(f"unknown probe label {label!r}, expected one of {_LABELS}")
        by_label[label].append(report)

    in_dist = by_label[IN_DISTRIBUTION]
    increments = by_label[DOMAIN_LABEL] + by_label[CLASS_LABEL]
    if not in_dist or not increments:
        raise ConfigError("calibration needs >= 1 in-distribution and >= 1 increment report")

    f_low = max(r.diff_f for r in in_dist)
    f_high = min(r.diff_f for r in increments)
    if f_low >= f_high:
        raise CalibrationError(
            f"feature bands overlap: in-distribution up to {f_low:.6g}, "
            f"increments down to {f_high:.6g}"
        )
    t_f = math.sqrt(f_low * f_high)

    if by_label[CLASS_LABEL]:
        c_high = min(r.diff_c for r in by_label[CLASS_LABEL])
        non_class = by_label[DOMAIN_LABEL] if by_label[DOMAIN_LABEL] else in_dist
        c_low = max(r.diff_c for r in non_class)
        if c_low >= c_high:
            raise CalibrationError(
                f"classifier bands overlap: non-class up to {c_low:.6g}, "
                f"class increments down to {c_high:.6g}"
            )
        t_c = math.sqrt(c_low * c_high)
    else:
        # No class-increment probes: any classifier change seen so far is
        # non-class, so park t_c safely above the whole observed band.
        c_low = max(r.diff_c for r in in_dist + increments)
        t_c = 2.0 * c_low if c_low > 0 else 1.0
    return Thresholds(t_f=t_f, t_c=t_c)
