"""Dense neural-network substrate.

A model is an encoder (stack of dense layers) plus a single linear
classifier head; that encoder/classifier split is the unit every other
module works with. Everything is float64, value-semantic (operations
return new models, arrays are never written in place) and deterministic
for a fixed seed.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .seeding import stream

ACTIVATIONS = ("relu", "linear")


def _as_matrix(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{what}: expected a 2-D array, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True)
class DenseLayer:
    """One dense layer: weight (out_dim, in_dim), bias (out_dim,), activation tag."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise DimensionError(f"layer weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class SplitModel:
    """Encoder layer stack plus a linear classifier head.

    The classifier is always linear with a fixed, over-provisioned output
    width (one channel per class that can ever appear in the federation).
    An empty encoder is allowed; features are then the raw inputs.
    """

    encoder: tuple
    classifier: DenseLayer

    def __post_init__(self):
        prev = None
        for i, layer in enumerate(self.encoder):
            if prev is not None and layer.in_dim != prev:
                raise DimensionError(
                    f"encoder layer {i}: input dim {layer.in_dim} does not chain "
                    f"from previous output dim {prev}"
                )
            prev = layer.out_dim
        if prev is not None and self.classifier.in_dim != prev:
            raise DimensionError(
                f"classifier: input dim {self.classifier.in_dim} does not match "
                f"encoder output dim {prev}"
            )
        if self.classifier.activation != "linear":
            raise ConfigError("classifier activation must be linear")

    @property
    def input_dim(self) -> int:
        return self.encoder[0].in_dim if self.encoder else self.classifier.in_dim

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1].out_dim if self.encoder else self.classifier.in_dim

    @property
    def n_classes(self) -> int:
        return self.classifier.out_dim


@dataclass(frozen=True)
class LayerGrads:
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class GradientSet:
    """Gradients with the same shape tree as the model they came from."""

    encoder: tuple
    classifier: LayerGrads


@dataclass(frozen=True)
class ProximalSpec:
    """Quadratic pull toward an anchor model: coeff * ||params - anchor||^2."""

    coeff: float
    anchor: SplitModel


def new_model(input_dim: int, hidden_dims, n_classes: int, seed: int) -> SplitModel:
    """Fresh model with uniform Glorot weights and zero biases.

    hidden_dims lists the encoder layer widths (ReLU); the last entry is
    the feature dimension. Empty hidden_dims gives an encoder-free model
    whose features are the inputs themselves.
    """
    if input_dim < 1 or n_classes < 1:
        raise ConfigError("input_dim and n_classes must be >= 1")
    layers = []
    prev = input_dim
    for i, width in enumerate(hidden_dims):
        layers.append(_init_layer(prev, int(width), "relu", stream(seed, "init", "encoder", i)))
        prev = int(width)
    classifier = _init_layer(prev, n_classes, "linear", stream(seed, "init", "classifier"))
    return SplitModel(encoder=tuple(layers), classifier=classifier)


def _init_layer(in_dim: int, out_dim: int, activation: str, rng) -> DenseLayer:
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return DenseLayer(weight=weight, bias=np.zeros(out_dim), activation=activation)


def _apply_activation(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def forward(model: SplitModel, batch) -> tuple:
    """Run the model: returns (features, logits)."""
    h = _as_matrix(batch, "batch")
    if h.shape[1] != model.input_dim:
        raise DimensionError(
            f"batch has {h.shape[1]} columns, model expects {model.input_dim}"
        )
    for i, layer in enumerate(model.encoder):
        if h.shape[1] != layer.in_dim:
            raise DimensionError(
                f"encoder layer {i}: expected input dim {layer.in_dim}, got {h.shape[1]}"
            )
        h = _apply_activation(h @ layer.weight.T + layer.bias, layer.activation)
    logits = h @ model.classifier.weight.T + model.classifier.bias
    _check_finite(h, "features")
    _check_finite(logits, "logits")
    return h, logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(model: SplitModel, batch, labels, reg: ProximalSpec = None) -> tuple:
    """Mean softmax cross-entropy (+ optional proximal term) and its gradients.

    With reg present the loss gains coeff * ||params - anchor||^2 over the
    flattened parameter vector, and each gradient the matching
    2 * coeff * (param - anchor) term.
    """
    x = _as_matrix(batch, "batch")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise DimensionError(
            f"labels shape {y.shape} does not match batch rows {x.shape[0]}"
        )
    if y.size and (y.min() < 0 or y.max() >= model.n_classes):
        raise ConfigError(
            f"labels must lie in [0, {model.n_classes}), got range "
            f"[{y.min()}, {y.max()}]"
        )
    if reg is not None:
        _require_congruent(model, reg.anchor)

    # Forward pass, keeping pre-activations for backprop.
    h = x
    pre = []
    acts = [h]
    for layer in model.encoder:
        z = h @ layer.weight.T + layer.bias
        pre.append(z)
        h = _apply_activation(z, layer.activation)
        acts.append(h)
    logits = h @ model.classifier.weight.T + model.classifier.bias

    n = x.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), y]))

    probs = softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    clf_w_grad = dlogits.T @ h
    clf_b_grad = dlogits.sum(axis=0)
    dh = dlogits @ model.classifier.weight

    enc_grads = [None] * len(model.encoder)
    for i in range(len(model.encoder) - 1, -1, -1):
        layer = model.encoder[i]
        dz = dh * (pre[i] > 0.0) if layer.activation == "relu" else dh
        enc_grads[i] = LayerGrads(weight=dz.T @ acts[i], bias=dz.sum(axis=0))
        dh = dz @ layer.weight

    if reg is not None and reg.coeff != 0.0:
        gap = flatten(model) - flatten(reg.anchor)
        loss += float(reg.coeff * np.dot(gap, gap))
        c = 2.0 * reg.coeff
        enc_grads = [
            LayerGrads(
                weight=g.weight + c * (l.weight - a.weight),
                bias=g.bias + c * (l.bias - a.bias),
            )
            for g, l, a in zip(enc_grads, model.encoder, reg.anchor.encoder)
        ]
        clf_w_grad = clf_w_grad + c * (model.classifier.weight - reg.anchor.classifier.weight)
        clf_b_grad = clf_b_grad + c * (model.classifier.bias - reg.anchor.classifier.bias)

    if not np.isfinite(loss):
        raise NumericError("loss is non-finite")
    grads = GradientSet(
        encoder=tuple(enc_grads),
        classifier=LayerGrads(weight=clf_w_grad, bias=clf_b_grad),
    )
    return loss, grads


def sgd_step(model: SplitModel, grads: GradientSet, eta: float) -> SplitModel:
    """One plain SGD update: every parameter p' = p - eta * g."""
    if eta <= 0:
        raise ConfigError(f"learning rate must be > 0, got {eta}")
    if len(grads.encoder) != len(model.encoder):
        raise DimensionError("gradient tree does not match model encoder depth")
    for g in list(grads.encoder) + [grads.classifier]:
        if not (np.all(np.isfinite(g.weight)) and np.all(np.isfinite(g.bias))):
            raise NumericError("non-finite gradient; aborting the step")
    layers = tuple(
        DenseLayer(
            weight=l.weight - eta * g.weight,
            bias=l.bias - eta * g.bias,
            activation=l.activation,
        )
        for l, g in zip(model.encoder, grads.encoder)
    )
    clf = DenseLayer(
        weight=model.classifier.weight - eta * grads.classifier.weight,
        bias=model.classifier.bias - eta * grads.classifier.bias,
        activation="linear",
    )
    return SplitModel(encoder=layers, classifier=clf)


def model_shape(model: SplitModel) -> tuple:
    """Canonical shape spec: ((in, out, activation), ...) encoder entries, classifier last."""
    entries = [(l.in_dim, l.out_dim, l.activation) for l in model.encoder]
    entries.append((model.classifier.in_dim, model.classifier.out_dim, "linear"))
    return tuple(entries)


def flatten(model: SplitModel) -> np.ndarray:
    """Parameters in canonical order: each encoder layer weight row-major then bias, classifier last."""
    parts = []
    for layer in model.encoder:
        parts.append(layer.weight.ravel())
        parts.append(layer.bias)
    parts.append(model.classifier.weight.ravel())
    parts.append(model.classifier.bias)
    return np.concatenate(parts)


def unflatten(vector, shape) -> SplitModel:
    """Rebuild a model from a flat vector and a model_shape() spec."""
    vec = np.asarray(vector, dtype=np.float64)
    expected = sum(i * o + o for i, o, _ in shape)
    if vec.ndim != 1 or vec.size != expected:
        raise DimensionError(
            f"flat vector has {vec.size} entries, shape spec needs {expected}"
        )
    layers = []
    pos = 0
    for in_dim, out_dim, activation in shape:
        w = vec[pos:pos + in_dim * out_dim].reshape(out_dim, in_dim).copy()
        pos += in_dim * out_dim
        b = vec[pos:pos + out_dim].copy()
        pos += out_dim
        layers.append(DenseLayer(weight=w, bias=b, activation=activation))
    return SplitModel(encoder=tuple(layers[:-1]), classifier=layers[-1])


def flatten_encoder(model: SplitModel) -> np.ndarray:
    parts = []
    for layer in model.encoder:
        parts.append(layer.weight.ravel())
        parts.append(layer.bias)
    return np.concatenate(parts) if parts else np.zeros(0)


def flatten_classifier(model: SplitModel) -> np.ndarray:
    return np.concatenate([model.classifier.weight.ravel(), model.classifier.bias])


def flatten_grads(grads: GradientSet) -> np.ndarray:
    parts = []
    for g in grads.encoder:
        parts.append(g.weight.ravel())
        parts.append(g.bias)
    parts.append(grads.classifier.weight.ravel())
    parts.append(grads.classifier.bias)
    return np.concatenate(parts)


def _require_congruent(a: SplitModel, b: SplitModel):
    if model_shape(a) != model_shape(b):
        raise DimensionError("models are not shape-congruent")


def models_congruent(a: SplitModel, b: SplitModel) -> bool:
    return model_shape(a) == model_shape(b)
