"""Multi-domain synthetic datasets, IDX ingestion, and non-IID partitioning.

A "domain" is a deterministic transform applied on top of a shared
Gaussian class layout; different transforms stand in for the sub-dataset
shifts a federation would see in the wild.
"""

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .seeding import stream

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    """Row-per-sample feature matrix with integer class labels."""

    samples: np.ndarray
    labels: np.ndarray
    domain_id: str
    split: str

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise DimensionError(f"samples must be 2-D, got shape {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise DimensionError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.samples.shape[0]} sample rows"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ConfigError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_features(self) -> int:
        return self.samples.shape[1]

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            samples=self.samples[idx].copy(),
            labels=self.labels[idx].copy(),
            domain_id=self.domain_id,
            split=self.split,
        )


def concat_datasets(datasets, domain_id: str = "pooled", split: str = "train") -> LabeledDataset:
    datasets = list(datasets)
    if not datasets:
        raise ConfigError("cannot concatenate zero datasets")
    return LabeledDataset(
        samples=np.concatenate([d.samples for d in datasets], axis=0),
        labels=np.concatenate([d.labels for d in datasets]),
        domain_id=domain_id,
        split=split,
    )


# --- domain transforms -------------------------------------------------

@dataclass(frozen=True)
class Rotation:
    angle_deg: float


@dataclass(frozen=True)
class AffineScale:
    factor: float

    def __post_init__(self):
        if self.factor <= 0:
            raise ConfigError(f"scale factor must be > 0, got {self.factor}")


@dataclass(frozen=True)
class AdditiveNoise:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class ChannelPermutation:
    perm: tuple

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ConfigError(f"{self.perm} is not a permutation of 0..{len(self.perm) - 1}")


@dataclass(frozen=True)
class BackgroundBlend:
    weight: float

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ConfigError(f"blend weight must be in [0, 1], got {self.weight}")


@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    transform: object = field(default_factory=Identity)


def apply_transform(transform, samples: np.ndarray, rng) -> np.ndarray:
    """Apply a domain transform to features only; labels are untouched."""
    x = samples
    if isinstance(transform, Identity):
        return x.copy()
    if isinstance(transform, Rotation):
        # Rotates the first two feature coordinates; higher dims pass through.
        if x.shape[1] < 2:
            raise ConfigError("rotation needs at least 2 feature dimensions")
        theta = np.deg2rad(transform.angle_deg)
        c, s = np.cos(theta), np.sin(theta)
        out = x.copy()
        out[:, 0] = c * x[:, 0] - s * x[:, 1]
        out[:, 1] = s * x[:, 0] + c * x[:, 1]
        return out
    if isinstance(transform, AffineScale):
        return x * transform.factor
    if isinstance(transform, AdditiveNoise):
        return x + rng.normal(0.0, transform.sigma, size=x.shape)
    if isinstance(transform, ChannelPermutation):
        if len(transform.perm) != x.shape[1]:
            raise ConfigError(
                f"permutation length {len(transform.perm)} does not match "
                f"{x.shape[1]} feature columns"
            )
        return x[:, list(transform.perm)].copy()
    if isinstance(transform, BackgroundBlend):
        # Blend toward a fixed sinusoidal background pattern.
        background = np.sin(np.arange(1, x.shape[1] + 1, dtype=np.float64))
        return (1.0 - transform.weight) * x + transform.weight * background
    raise ConfigError(f"unknown transform {transform!r}")


# --- synthetic generation ----------------------------------------------

@dataclass(frozen=True)
class ClusterLayout:
    """Gaussian class clusters: one center per class, shared std.

    With mirrored=True every class occupies two antipodal lobes (+-center),
    which is not linearly separable from the raw inputs, so hidden features
    must actually be learned. tail_fraction of samples get tail_scale times
    the std: a heavy-tailed minority that keeps per-sample losses (and
    SGD's gradient noise floor) from vanishing on an otherwise easy task.
    """

    centers: np.ndarray
    std: float
    mirrored: bool = False
    tail_fraction: float = 0.0
    tail_scale: float = 3.0

    def __post_init__(self):
        if self.centers.ndim != 2 or self.centers.shape[0] < 2:
            raise ConfigError("layout needs at least 2 class centers")
        if self.std <= 0:
            raise ConfigError(f"cluster std must be > 0, got {self.std}")
        if not 0.0 <= self.tail_fraction < 1.0 or self.tail_scale < 1.0:
            raise ConfigError("tail_fraction must be in [0, 1) and tail_scale >= 1")
        gaps = self.centers[:, None, :] - self.centers[None, :, :]
        dist = np.sqrt((gaps ** 2).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() == 0.0:
            raise ConfigError("degenerate layout: duplicate class centers")

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def circle_layout(n_classes: int, radius: float, dim: int = 2, std: float = 0.5) -> ClusterLayout:
    """Class centers evenly spaced on a circle in the first two dimensions."""
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    if dim < 2:
        raise ConfigError("circle layout needs dim >= 2")
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return ClusterLayout(centers=centers, std=std)


def axis_layout(n_classes: int, radius: float, dim: int = None, std: float = 0.5,
                mirrored: bool = False) -> ClusterLayout:
    """One class per coordinate axis: center c sits at radius * e_c.

    Mutually orthogonal class directions keep cross-class interference low,
    the way well-separated deep features behave.
    """
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    dim = n_classes if dim is None else dim
    if dim < n_classes:
        raise ConfigError(f"axis layout needs dim >= n_classes, got {dim} < {n_classes}")
    centers = np.zeros((n_classes, dim))
    centers[np.arange(n_classes), np.arange(n_classes)] = radius
    return ClusterLayout(centers=centers, std=std, mirrored=mirrored)


def generate_synthetic(
    layout: ClusterLayout,
    domain: DomainSpec,
    n: int,
    seed: int,
    classes=None,
    split: str = "train",
) -> LabeledDataset:
    """Draw n samples, balanced within +-1 across the chosen classes.

    The class draw depends only on (layout, n, seed, classes); the domain
    transform is applied on top with its own derived stream, so two domains
    built from the same seed share the underlying class draw.
    """
    if n <= 0:
        raise ConfigError(f"sample count must be > 0, got {n}")
    chosen = list(range(layout.n_classes)) if classes is None else sorted(classes)
    if not chosen:
        raise ConfigError("empty class subset")
    if min(chosen) < 0 or max(chosen) >= layout.n_classes:
        raise ConfigError(f"classes {chosen} outside layout range 0..{layout.n_classes - 1}")

    base, extra = divmod(n, len(chosen))
    counts = [base + (1 if i < extra else 0) for i in range(len(chosen))]
    draw_rng = stream(seed, "draw")
    rows, labels = [], []
    for cls, count in zip(chosen, counts):
        if count == 0:
            continue
        center = layout.centers[cls]
        noise = layout.std * draw_rng.normal(size=(count, layout.dim))
        if layout.tail_fraction > 0.0:
            in_tail = draw_rng.random(count) < layout.tail_fraction
            noise[in_tail] *= layout.tail_scale
        if layout.mirrored:
            signs = draw_rng.choice((-1.0, 1.0), size=(count, 1))
            rows.append(signs * center + noise)
        else:
            rows.append(center + noise)
        labels.append(np.full(count, cls, dtype=np.int64))
    samples = np.concatenate(rows, axis=0)
    labels = np.concatenate(labels)
    samples = apply_transform(domain.transform, samples, stream(seed, "transform"))
    return LabeledDataset(samples=samples, labels=labels, domain_id=domain.domain_id, split=split)


# --- IDX ubyte ingestion ------------------------------------------------

def _open_maybe_gzip(path: str):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path: str, labels_path: str, domain_id: str = "idx", split: str = "train") -> LabeledDataset:
    """Read a big-endian IDX ubyte image/label file pair.

    Pixels are scaled to [0, 1] and each image flattened row-major.
    """
    with _open_maybe_gzip(images_path) as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise FormatError(f"{images_path}: truncated header at offset {len(header)}")
        magic, count, n_rows, n_cols = struct.unpack(">IIII", header)
        if magic != IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IMAGES_MAGIC:08x}"
            )
        payload = fh.read(count * n_rows * n_cols + 1)
    expected = count * n_rows * n_cols
    if len(payload) < expected:
        raise FormatError(
            f"{images_path}: truncated payload at offset {16 + len(payload)}, "
            f"expected {expected} pixel bytes"
        )
    if len(payload) > expected:
        raise FormatError(f"{images_path}: {len(payload) - expected}+ trailing bytes after payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    samples = pixels.reshape(count, n_rows * n_cols)

    with _open_maybe_gzip(labels_path) as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise FormatError(f"{labels_path}: truncated header at offset {len(header)}")
        magic, label_count = struct.unpack(">II", header)
        if magic != LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{LABELS_MAGIC:08x}"
            )
        label_bytes = fh.read(label_count + 1)
    if len(label_bytes) < label_count:
        raise FormatError(
            f"{labels_path}: truncated payload at offset {8 + len(label_bytes)}, "
            f"expected {label_count} label bytes"
        )
    if len(label_bytes) > label_count:
        raise FormatError(f"{labels_path}: {len(label_bytes) - label_count}+ trailing bytes after payload")
    if label_count != count:
        raise FormatError(
            f"label count {label_count} does not match image count {count}"
        )
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(samples=samples, labels=labels, domain_id=domain_id, split=split)


# --- partitioning -------------------------------------------------------

@dataclass(frozen=True)
class PartitionPlan:
    """client -> tuple of sample indices; disjoint and covering."""

    assignments: tuple
    alpha: float

    def __post_init__(self):
        seen = set()
        for client_indices in self.assignments:
            if len(client_indices) == 0:
                raise ConfigError("partition plan has an empty client")
            for idx in client_indices:
                if idx in seen:
                    raise ConfigError(f"sample index {idx} assigned twice")
                seen.add(idx)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)


def dirichlet_partition(dataset: LabeledDataset, n_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Per-class Dirichlet(alpha) split of sample indices across clients.

    alpha = 0.1 gives heavily skewed shards, which at small scale often
    leaves clients empty; those are repaired by moving one sample at a
    time from the currently largest client.
    """
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}")
    if alpha <= 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    if len(dataset) < n_clients:
        raise ConfigError(
            f"dataset of {len(dataset)} samples cannot cover {n_clients} clients"
        )
    rng = stream(seed, "dirichlet")
    shards = [[] for _ in range(n_clients)]
    for cls in dataset.classes():
        idx = np.flatnonzero(dataset.labels == cls)
        idx = idx[rng.permutation(idx.size)]
        proportions = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(proportions)[:-1] * idx.size).astype(np.int64)
        for client, chunk in enumerate(np.split(idx, cuts)):
            shards[client].extend(int(i) for i in chunk)

    # Empty-client repair: steal one sample from the largest shard until
    # every client holds at least one.
    while any(len(s) == 0 for s in shards):
        donor = max(range(n_clients), key=lambda c: (len(shards[c]), -c))
        taker = next(c for c in range(n_clients) if len(shards[c]) == 0)
        shards[taker].append(shards[donor].pop())

    return PartitionPlan(assignments=tuple(tuple(s) for s in shards), alpha=alpha)


def build_public_set(sources, per_class_k: int, seed: int) -> LabeledDataset:
    """Stratified public sample: per_class_k samples of every class the sources hold."""
    if per_class_k < 1:
        raise ConfigError(f"per-class count must be >= 1, got {per_class_k}")
    pool = concat_datasets(sources, domain_id="public", split="train")
    rng = stream(seed, "public")
    picks = []
    for cls in np.unique(pool.labels):
        idx = np.flatnonzero(pool.labels == cls)
        if idx.size < per_class_k:
            raise ConfigError(
                f"class {cls} has only {idx.size} samples, need {per_class_k}"
            )
        picks.append(rng.choice(idx, size=per_class_k, replace=False))
    order = np.concatenate(picks)
    return LabeledDataset(
        samples=pool.samples[order].copy(),
        labels=pool.labels[order].copy(),
        domain_id="public",
        split="train",
    )


def train_test_split(dataset: LabeledDataset, test_fraction: float, seed: int) -> tuple:
    """Shuffled split into (train, test) datasets."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    rng = stream(seed, "split")
    order = rng.permutation(len(dataset))
    n_test = max(1, int(round(test_fraction * len(dataset))))
    test_idx, train_idx = order[:n_test], order[n_test:]
    train = dataset.subset(np.sort(train_idx))
    test = dataset.subset(np.sort(test_idx))
    return (
        LabeledDataset(train.samples, train.labels, dataset.domain_id, "train"),
        LabeledDataset(test.samples, test.labels, dataset.domain_id, "test"),
    )
