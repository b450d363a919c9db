"""Contribution weighting and model aggregation rules.

Source clients whose uploads sit closer to the target's upload get more
aggregation weight; the target itself always carries the data-size
fraction beta = |target| / (|target| + sum of source sizes). Class
increments swap the weighted classifier merge for channel-wise
supplementation: source-class rows come from the size-weighted source
classifier, new-class rows verbatim from the target.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AggregationError, ConfigError
from .nn import DenseLayer, SplitModel, _require_congruent

MASS_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ContributionSet:
    """Per-round aggregation weights; classifier_weights is None in class-increment mode."""

    encoder_weights: np.ndarray
    classifier_weights: object
    target_beta: float
    round_index: int

    def __post_init__(self):
        vectors = [self.encoder_weights]
        if self.classifier_weights is not None:
            vectors.append(self.classifier_weights)
        if self.target_beta < 0:
            raise AggregationError(f"negative target weight {self.target_beta}")
        for vec in vectors:
            if np.any(vec < 0):
                raise AggregationError("negative contribution weight")
            mass = float(vec.sum()) + self.target_beta
            if abs(mass - 1.0) > MASS_TOLERANCE:
                raise AggregationError(f"weight mass {mass!r} differs from 1 beyond tolerance")


def target_fraction(source_sizes, target_size: int) -> float:
    sizes = np.asarray(source_sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ConfigError("at least one source client is required")
    if np.any(sizes <= 0) or target_size <= 0:
        raise ConfigError("client dataset sizes must be > 0")
    return float(target_size / (target_size + sizes.sum()))


def _diff_contributions(diffs, source_sizes, target_size: int) -> np.ndarray:
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.size == 0:
        raise ConfigError("at least one source client is required")
    if np.any(diffs < 0):
        raise ConfigError("diffs must be non-negative")
    beta = target_fraction(source_sizes, target_size)
    inverse = 1.0 / (1.0 + diffs)
    return inverse / inverse.sum() * (1.0 - beta)


def encoder_contributions(diff_f, source_sizes, target_size: int) -> np.ndarray:
    """Feature-based weights: inverse (1 + diff_f), normalized, scaled by the source mass."""
    return _diff_contributions(diff_f, source_sizes, target_size)


def classifier_contributions(diff_c, source_sizes, target_size: int) -> np.ndarray:
    """Parameter-based weights: same form with classifier diffs."""
    return _diff_contributions(diff_c, source_sizes, target_size)


def _weighted_layers(layer_lists, weights) -> tuple:
    out = []
    for layers in zip(*layer_lists):
        weight = sum(w * l.weight for w, l in zip(weights, layers))
        bias = sum(w * l.bias for w, l in zip(weights, layers))
        out.append(DenseLayer(weight=weight, bias=bias, activation=layers[0].activation))
    return tuple(out)


def _check_congruent(models):
    first = models[0]
    for other in models[1:]:
        _require_congruent(first, other)


def aggregate_domain(source_models, target_model: SplitModel,
                     contributions: ContributionSet) -> SplitModel:
    """Domain-increment merge: convex combination with per-component weights."""
    source_models = list(source_models)
    if len(source_models) != contributions.encoder_weights.shape[0]:
        raise ConfigError(
            f"{len(source_models)} source models vs "
            f"{contributions.encoder_weights.shape[0]} weights"
        )
    if contributions.classifier_weights is None:
        raise ConfigError("domain aggregation needs classifier weights")
    _check_congruent(source_models + [target_model])

    enc_weights = list(contributions.encoder_weights) + [contributions.target_beta]
    clf_weights = list(contributions.classifier_weights) + [contributions.target_beta]
    encoders = [m.encoder for m in source_models] + [target_model.encoder]
    classifiers = [(m.classifier,) for m in source_models] + [(target_model.classifier,)]
    encoder = _weighted_layers(encoders, enc_weights)
    (classifier,) = _weighted_layers(classifiers, clf_weights)
    return SplitModel(encoder=encoder, classifier=classifier)


def aggregate_class_encoder(source_models, target_model: SplitModel,
                            encoder_weights, beta: float) -> tuple:
    """Class-increment encoder merge: same convex combination, feature-based weights."""
    source_models = list(source_models)
    weights = np.asarray(encoder_weights, dtype=np.float64)
    if len(source_models) != weights.shape[0]:
        raise ConfigError(f"{len(source_models)} source models vs {weights.shape[0]} weights")
    mass = float(weights.sum()) + beta
    if abs(mass - 1.0) > MASS_TOLERANCE:
        raise AggregationError(f"weight mass {mass!r} differs from 1 beyond tolerance")
    _check_congruent(source_models + [target_model])
    encoders = [m.encoder for m in source_models] + [target_model.encoder]
    return _weighted_layers(encoders, list(weights) + [beta])


def aggregate_class_classifier(source_models, target_model: SplitModel,
                               source_sizes, source_classes, target_new_classes) -> DenseLayer:
    """Channel-wise supplementation of the classifier head.

    The source classifiers are first merged by data size; then each output
    channel (weight row + bias entry) is copied verbatim: source classes
    from the merged source classifier, the target's new classes from the
    target classifier. Channels claimed by neither set stay with the
    source merge.
    """
    source_models = list(source_models)
    sizes = np.asarray(source_sizes, dtype=np.float64)
    if sizes.shape[0] != len(source_models):
        raise ConfigError(f"{len(source_models)} source models vs {sizes.shape[0]} sizes")
    if np.any(sizes <= 0):
        raise ConfigError("client dataset sizes must be > 0")
    k_source = set(int(c) for c in source_classes)
    k_target = set(int(c) for c in target_new_classes)
    if k_source & k_target:
        raise ConfigError(f"class sets overlap: {sorted(k_source & k_target)}")
    _check_congruent(source_models + [target_model])
    k_total = target_model.n_classes
    out_of_range = [c for c in k_source | k_target if not 0 <= c < k_total]
    if out_of_range:
        raise ConfigError(f"classes {sorted(out_of_range)} outside head range 0..{k_total - 1}")

    size_weights = sizes / sizes.sum()
    merged_w = sum(w * m.classifier.weight for w, m in zip(size_weights, source_models))
    merged_b = sum(w * m.classifier.bias for w, m in zip(size_weights, source_models))

    weight = merged_w.copy()
    bias = merged_b.copy()
    for cls in k_target:
        weight[cls] = target_model.classifier.weight[cls]
        bias[cls] = target_model.classifier.bias[cls]
    return DenseLayer(weight=weight, bias=bias, activation="linear")


def aggregate_fedavg(models, sizes) -> SplitModel:
    """Plain size-weighted parameter mean over all participants."""
    models = list(models)
    weights = np.asarray(sizes, dtype=np.float64)
    if not models:
        raise ConfigError("at least one model is required")
    if weights.shape[0] != len(models):
        raise ConfigError(f"{len(models)} models vs {weights.shape[0]} sizes")
    if np.any(weights <= 0):
        raise ConfigError("client dataset sizes must be > 0")
    _check_congruent(models)
    weights = weights / weights.sum()
    encoder = _weighted_layers([m.encoder for m in models], weights)
    (classifier,) = _weighted_layers([(m.classifier,) for m in models], weights)
    return SplitModel(encoder=encoder, classifier=classifier)
