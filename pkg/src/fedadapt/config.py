"""Run configuration: typed specs, dict/file round-trip, validation.

Config files are TOML or JSON mirrors of the nested dataclasses below and
carry a schema_version key. Unknown keys are rejected rather than ignored
so typos fail loudly.
"""

import enum
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .data import (AdditiveNoise, AffineScale, BackgroundBlend,
                   ChannelPermutation, Identity, Rotation)
from .errors import ConfigError, FormatError

SCHEMA_VERSION = 1

METHODS = ("contribution", "contribution-noafm", "fedavg", "fedprox")


class ScenarioKind(enum.Enum):
    MILD = "mild_shift"
    MEDIUM = "medium_shift"
    STRONG = "strong_shift"


def transform_from_dict(doc) -> object:
    if doc is None:
        return Identity()
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError(f"transform spec must be a dict with a 'kind', got {doc!r}")
    kind = doc["kind"]
    params = {k: v for k, v in doc.items() if k != "kind"}
    try:
        if kind == "identity":
            return Identity(**params)
        if kind == "rotation":
            return Rotation(**params)
        if kind == "affine_scale":
            return AffineScale(**params)
        if kind == "additive_noise":
            return AdditiveNoise(**params)
        if kind == "channel_permutation":
            return ChannelPermutation(perm=tuple(params.pop("perm")), **params)
        if kind == "background_blend":
            return BackgroundBlend(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for transform {kind!r}: {exc}") from exc
    raise ConfigError(f"unknown transform kind {kind!r}")


def transform_to_dict(transform) -> dict:
    mapping = {
        Identity: "identity",
        Rotation: "rotation",
        AffineScale: "affine_scale",
        AdditiveNoise: "additive_noise",
        ChannelPermutation: "channel_permutation",
        BackgroundBlend: "background_blend",
    }
    kind = mapping.get(type(transform))
    if kind is None:
        raise ConfigError(f"unknown transform {transform!r}")
    doc = {"kind": kind}
    for f in fields(transform):
        value = getattr(transform, f.name)
        doc[f.name] = list(value) if isinstance(value, tuple) else value
    return doc


@dataclass(frozen=True)
class DataSpec:
    n_classes: int = 10
    input_dim: int = 10
    layout_kind: str = "axes"
    layout_radius: float = 3.0
    cluster_std: float = 0.5
    tail_fraction: float = 0.0
    tail_scale: float = 3.0
    train_per_client: int = 200
    test_per_client: int = 100
    target_train_size: int = 200
    target_test_size: int = 100
    dirichlet_alpha: float = 0.1
    public_per_class: int = 32
    # Scenario knobs; None means "use the scenario's default".
    source_classes: tuple = None
    target_classes: tuple = None
    target_transform: dict = None
    source_transforms: tuple = None
    probe_transform: dict = None
    # Radial scale applied to the class centers nobody in the source holds;
    # >1 places incoming classes in input regions of their own.
    held_out_radius_scale: float = 1.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.input_dim < 2:
            raise ConfigError("need input_dim >= 2")
        if self.layout_kind not in ("axes", "mirrored", "circle"):
            raise ConfigError(
                f"layout_kind must be axes|mirrored|circle, got {self.layout_kind!r}")
        if self.layout_kind in ("axes", "mirrored") and self.input_dim < self.n_classes:
            raise ConfigError(f"{self.layout_kind} layout needs input_dim >= n_classes")
        for name in ("train_per_client", "test_per_client", "target_train_size",
                     "target_test_size", "public_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dirichlet_alpha <= 0:
            raise ConfigError("dirichlet_alpha must be > 0")
        for name in ("source_classes", "target_classes"):
            value = getattr(self, name)
            if value is not None:
                bad = [c for c in value if not 0 <= int(c) < self.n_classes]
                if bad:
                    raise ConfigError(f"{name} {bad} outside 0..{self.n_classes - 1}")
        if self.held_out_radius_scale <= 0:
            raise ConfigError("held_out_radius_scale must be > 0")


@dataclass(frozen=True)
class ModelSpec:
    hidden_dims: tuple = (32,)

    def __post_init__(self):
        if any(int(d) < 1 for d in self.hidden_dims):
            raise ConfigError("hidden layer widths must be >= 1")


@dataclass(frozen=True)
class TrainSpec:
    eta: float = 0.05
    batch_size: int = 32
    local_epochs: int = 2
    discovery_epochs: int = 5
    lam: float = 0.1
    fedprox_mu: float = 0.01

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError("eta must be > 0")
        if self.batch_size < 1 or self.local_epochs < 1 or self.discovery_epochs < 1:
            raise ConfigError("batch_size, local_epochs and discovery_epochs must be >= 1")
        if self.lam < 0 or self.fedprox_mu < 0:
            raise ConfigError("regularization coefficients must be >= 0")


@dataclass(frozen=True)
class ThresholdSpec:
    """Where discovery thresholds come from: probe-calibrated or preset values."""

    mode: str = "calibrated"
    t_f: float = None
    t_c: float = None
    probe_seeds: int = 3

    def __post_init__(self):
        if self.mode not in ("calibrated", "preset"):
            raise ConfigError(f"threshold mode must be calibrated|preset, got {self.mode!r}")
        if self.mode == "preset" and (self.t_f is None or self.t_c is None):
            raise ConfigError("preset thresholds need explicit t_f and t_c")
        if self.mode == "calibrated" and self.probe_seeds < 1:
            raise ConfigError("probe_seeds must be >= 1")


@dataclass(frozen=True)
class FederationConfig:
    scenario: ScenarioKind = ScenarioKind.MEDIUM
    method: str = "contribution"
    rounds: int = 15
    n_source_clients: int = 3
    seed: int = 0
    bootstrap_max_rounds: int = 100
    bootstrap_patience: int = 5
    bootstrap_min_improvement: float = 0.002
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    thresholds: ThresholdSpec = field(default_factory=ThresholdSpec)
    arrivals: tuple = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.n_source_clients < 1:
            raise ConfigError("n_source_clients must be >= 1")
        if self.scenario is ScenarioKind.STRONG and self.n_source_clients < 2:
            raise ConfigError("strong shift needs >= 2 source clients (distinct domains)")
        if self.bootstrap_max_rounds < 1 or self.bootstrap_patience < 1:
            raise ConfigError("bootstrap rounds/patience must be >= 1")

    def to_dict(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario.value,
            "method": self.method,
            "rounds": self.rounds,
            "n_source_clients": self.n_source_clients,
            "seed": self.seed,
            "bootstrap_max_rounds": self.bootstrap_max_rounds,
            "bootstrap_patience": self.bootstrap_patience,
            "bootstrap_min_improvement": self.bootstrap_min_improvement,
            "data": asdict(self.data),
            "model": {"hidden_dims": list(self.model.hidden_dims)},
            "train": asdict(self.train),
            "thresholds": asdict(self.thresholds),
            "arrivals": [dict(a) for a in self.arrivals],
        }
        return doc


# Hyperparameter profiles; "paper-digitfive" mirrors the published
# digit-benchmark settings (SGD, lr 0.005, batch 128).
PROFILES = {
    "desk-default": {},
    "paper-digitfive": {"train": {"eta": 0.005, "batch_size": 128}},
}


def _build(cls, doc: dict, context: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")
    return cls(**doc)


def config_from_dict(doc: dict) -> FederationConfig:
    doc = dict(doc)
    version = doc.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")

    profile_name = doc.pop("profile", None)
    if profile_name is not None:
        if profile_name not in PROFILES:
            raise ConfigError(f"unknown profile {profile_name!r}, have {sorted(PROFILES)}")
        merged = {}
        for key, value in PROFILES[profile_name].items():
            merged[key] = dict(value)
        for key, value in doc.items():
            if key in merged and isinstance(value, dict):
                merged[key].update(value)
            else:
                merged[key] = value
        doc = merged

    try:
        scenario = ScenarioKind(doc.pop("scenario", ScenarioKind.MEDIUM.value))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    sub = {}
    if "data" in doc:
        data_doc = dict(doc.pop("data"))
        for key in ("source_classes", "target_classes"):
            if data_doc.get(key) is not None:
                data_doc[key] = tuple(int(c) for c in data_doc[key])
        if data_doc.get("source_transforms") is not None:
            for t in data_doc["source_transforms"]:
                transform_from_dict(t)
            data_doc["source_transforms"] = tuple(data_doc["source_transforms"])
        for key in ("target_transform", "probe_transform"):
            if data_doc.get(key) is not None:
                transform_from_dict(data_doc[key])
        sub["data"] = _build(DataSpec, data_doc, "data")
    if "model" in doc:
        model_doc = dict(doc.pop("model"))
        if "hidden_dims" in model_doc:
            model_doc["hidden_dims"] = tuple(int(d) for d in model_doc["hidden_dims"])
        sub["model"] = _build(ModelSpec, model_doc, "model")
    if "train" in doc:
        sub["train"] = _build(TrainSpec, doc.pop("train"), "train")
    if "thresholds" in doc:
        sub["thresholds"] = _build(ThresholdSpec, doc.pop("thresholds"), "thresholds")
    if "arrivals" in doc:
        arrivals = doc.pop("arrivals")
        parsed = []
        for arrival in arrivals:
            if not isinstance(arrival, dict) or not ({"classes", "transform"} & set(arrival)):
                raise ConfigError(
                    f"arrival spec needs 'classes' and/or 'transform', got {arrival!r}"
                )
            unknown = set(arrival) - {"classes", "transform"}
            if unknown:
                raise ConfigError(f"unknown arrival keys: {sorted(unknown)}")
            entry = {}
            if "classes" in arrival:
                entry["classes"] = tuple(int(c) for c in arrival["classes"])
            if "transform" in arrival:
                transform_from_dict(arrival["transform"])  # validate early
                entry["transform"] = arrival["transform"]
            parsed.append(entry)
        sub["arrivals"] = tuple(parsed)

    return _build(FederationConfig, {**doc, **sub, "scenario": scenario}, "config")


def load_config(path: str) -> FederationConfig:
    try:
        if path.endswith(".toml"):
            import tomli

            with open(path, "rb") as fh:
                doc = tomli.load(fh)
        else:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except (json.JSONDecodeError, ValueError) as exc:
        raise FormatError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"config {path} must hold a table/object at top level")
    return config_from_dict(doc)


def with_method(cfg: FederationConfig, method: str) -> FederationConfig:
    return replace(cfg, method=method)
