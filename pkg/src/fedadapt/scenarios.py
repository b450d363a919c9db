"""Concrete dataset construction for the three shift scenarios.

Mild shift: one domain, source and target hold disjoint class subsets.
Medium shift: one source domain vs. a different target domain, source
data split non-IID across clients. Strong shift: every source client its
own domain, the target a further unseen one.
"""

from dataclasses import dataclass, replace

import numpy as np

from .config import FederationConfig, ScenarioKind, transform_from_dict
from .data import (ClusterLayout, DomainSpec, Identity, LabeledDataset,
                   axis_layout, build_public_set, circle_layout, concat_datasets,
                   dirichlet_partition, generate_synthetic)
from .errors import ConfigError
from .seeding import child_seed, stream

# Domain palette for strong-shift source clients. Every transform keeps the
# class directions coherent (shifted, scaled or blurred, never relabeled),
# so one model can serve all the domains at once.
STRONG_SOURCE_TRANSFORMS = (
    {"kind": "identity"},
    {"kind": "affine_scale", "factor": 1.6},
    {"kind": "additive_noise", "sigma": 0.35},
    {"kind": "background_blend", "weight": 0.25},
    {"kind": "affine_scale", "factor": 0.7},
    {"kind": "rotation", "angle_deg": 25.0},
)
# Default unseen domains: the layout shrinks and shifts toward a fixed
# background pattern the sources never saw; the calibration probe blends
# further along the same path so it stays distinct from the target too.
DEFAULT_TARGET_TRANSFORM = {"kind": "background_blend", "weight": 0.55}
DEFAULT_PROBE_TRANSFORM = {"kind": "background_blend", "weight": 0.8}


@dataclass(frozen=True)
class ScenarioData:
    """Everything the orchestrator needs to stand up one federation run."""

    layout: ClusterLayout
    source_train: tuple
    source_test: tuple
    source_domains: tuple
    target_train: LabeledDataset
    target_test: LabeledDataset
    target_domain: DomainSpec
    target_classes: tuple
    public: LabeledDataset
    source_classes: tuple
    k_total: int


def _resolve_classes(cfg: FederationConfig) -> tuple:
    data = cfg.data
    all_classes = tuple(range(data.n_classes))
    if cfg.scenario is ScenarioKind.MILD:
        target = data.target_classes or all_classes[-2:]
        source = data.source_classes or tuple(c for c in all_classes if c not in target)
        if set(source) & set(target):
            raise ConfigError("mild shift needs disjoint source/target classes")
    else:
        source = data.source_classes or all_classes
        target = data.target_classes or all_classes
    if not source or not target:
        raise ConfigError("source and target class sets must be non-empty")
    return tuple(sorted(source)), tuple(sorted(target))


def _source_domains(cfg: FederationConfig) -> tuple:
    data = cfg.data
    if cfg.scenario is ScenarioKind.STRONG:
        specs = data.source_transforms or STRONG_SOURCE_TRANSFORMS
        if len(specs) < cfg.n_source_clients:
            raise ConfigError(
                f"strong shift needs {cfg.n_source_clients} source transforms, "
                f"have {len(specs)}"
            )
        return tuple(
            DomainSpec(domain_id=f"src-{i}", transform=transform_from_dict(specs[i]))
            for i in range(cfg.n_source_clients)
        )
    return (DomainSpec(domain_id="base", transform=Identity()),)


def _target_domain(cfg: FederationConfig) -> DomainSpec:
    if cfg.scenario is ScenarioKind.MILD:
        spec = cfg.data.target_transform or {"kind": "identity"}
    else:
        spec = cfg.data.target_transform or DEFAULT_TARGET_TRANSFORM
    return DomainSpec(domain_id="target", transform=transform_from_dict(spec))


def _balanced_test(layout, domain, classes, size, seed) -> LabeledDataset:
    return generate_synthetic(layout, domain, size, seed, classes=classes, split="test")


def _proportional_test(layout, domain, shard_labels, size, seed) -> LabeledDataset:
    """Fresh test draw mirroring a shard's class mix, so a client is scored
    on what it actually holds."""
    classes, counts = np.unique(shard_labels, return_counts=True)
    per_class = np.maximum(1, np.round(size * counts / counts.sum()).astype(int))
    parts = [
        generate_synthetic(layout, domain, int(k), child_seed(seed, int(cls)),
                           classes=(int(cls),), split="test")
        for cls, k in zip(classes, per_class)
    ]
    merged = concat_datasets(parts, domain_id=domain.domain_id, split="test")
    return merged


def _scenario_layout(cfg: FederationConfig, source_classes) -> ClusterLayout:
    data = cfg.data
    if data.layout_kind in ("axes", "mirrored"):
        layout = axis_layout(data.n_classes, data.layout_radius,
                             dim=data.input_dim, std=data.cluster_std,
                             mirrored=data.layout_kind == "mirrored")
    else:
        layout = circle_layout(data.n_classes, data.layout_radius,
                               dim=data.input_dim, std=data.cluster_std)
    layout = replace(layout, tail_fraction=data.tail_fraction,
                     tail_scale=data.tail_scale)
    if data.held_out_radius_scale != 1.0:
        centers = layout.centers.copy()
        for cls in range(data.n_classes):
            if cls not in source_classes:
                centers[cls] *= data.held_out_radius_scale
        layout = replace(layout, centers=centers)
    return layout


def build_scenario(cfg: FederationConfig) -> ScenarioData:
    data = cfg.data
    source_classes, target_classes = _resolve_classes(cfg)
    layout = _scenario_layout(cfg, source_classes)
    source_domains = _source_domains(cfg)
    target_domain = _target_domain(cfg)

    source_train, source_test = [], []
    if cfg.scenario is ScenarioKind.STRONG:
        # One domain per client, balanced within the client.
        for i, domain in enumerate(source_domains):
            train = generate_synthetic(
                layout, domain, data.train_per_client,
                child_seed(cfg.seed, "source-train", i), classes=source_classes,
            )
            test = _balanced_test(layout, domain, source_classes,
                                  data.test_per_client, child_seed(cfg.seed, "source-test", i))
            source_train.append(train)
            source_test.append(test)
    else:
        # Single source domain, Dirichlet split of the pooled train data.
        domain = source_domains[0]
        pool = generate_synthetic(
            layout, domain, data.train_per_client * cfg.n_source_clients,
            child_seed(cfg.seed, "source-train"), classes=source_classes,
        )
        plan = dirichlet_partition(pool, cfg.n_source_clients, data.dirichlet_alpha,
                                   child_seed(cfg.seed, "partition"))
        for i, indices in enumerate(plan.assignments):
            shard = pool.subset(indices)
            # Fresh test draw mirroring the shard's class mix: stable even for
            # tiny non-IID shards, and scored on what the client holds.
            test = _proportional_test(layout, domain, shard.labels,
                                      data.test_per_client,
                                      child_seed(cfg.seed, "source-test", i))
            source_train.append(shard)
            source_test.append(test)

    target_train = generate_synthetic(
        layout, target_domain, data.target_train_size,
        child_seed(cfg.seed, "target-train"), classes=target_classes,
    )
    target_test = _balanced_test(layout, target_domain, target_classes,
                                 data.target_test_size, child_seed(cfg.seed, "target-test"))

    public = build_public_set(source_train, data.public_per_class,
                              child_seed(cfg.seed, "public"))

    return ScenarioData(
        layout=layout,
        source_train=tuple(source_train),
        source_test=tuple(source_test),
        source_domains=source_domains,
        target_train=target_train,
        target_test=target_test,
        target_domain=target_domain,
        target_classes=target_classes,
        public=public,
        source_classes=source_classes,
        k_total=data.n_classes,
    )


def build_probe_dataset(cfg: FederationConfig, layout: ClusterLayout, kind: str,
                        source_classes: tuple, source_domains: tuple, seed: int) -> LabeledDataset:
    """Synthetic joiner used for threshold calibration.

    "same" draws fresh source-domain data over a skewed class subset (an
    in-distribution joiner is still a non-IID client, not a uniform resample);
    "domain" keeps the classes but applies the probe transform; "class"
    keeps the domain but uses classes the sources never held.
    """
    data = cfg.data
    base = source_domains[0]
    if kind == "same":
        take = max(2, (len(source_classes) + 1) // 2)
        subset = stream(seed, "probe-classes").choice(
            np.asarray(source_classes), size=take, replace=False)
        return generate_synthetic(layout, base, data.target_train_size, seed,
                                  classes=tuple(int(c) for c in subset))
    if kind == "domain":
        spec = data.probe_transform or DEFAULT_PROBE_TRANSFORM
        probe_domain = DomainSpec(domain_id="probe", transform=transform_from_dict(spec))
        return generate_synthetic(layout, probe_domain, data.target_train_size, seed,
                                  classes=source_classes)
    if kind == "class":
        held_out = tuple(c for c in range(data.n_classes) if c not in source_classes)
        if not held_out:
            raise ConfigError("no held-out classes available for a class probe")
        return generate_synthetic(layout, base, data.target_train_size, seed,
                                  classes=held_out[:2])
    raise ConfigError(f"unknown probe kind {kind!r}")


def build_arrival(cfg: FederationConfig, layout: ClusterLayout, arrival: dict,
                  index: int) -> tuple:
    """(train, test, classes) for one sequential-FDA arrival spec."""
    data = cfg.data
    classes = arrival.get("classes")
    transform_spec = arrival.get("transform", {"kind": "identity"})
    if classes is None:
        classes = tuple(range(data.n_classes))
    classes = tuple(sorted(int(c) for c in classes))
    domain = DomainSpec(domain_id=f"arrival-{index}",
                        transform=transform_from_dict(transform_spec))
    train = generate_synthetic(layout, domain, data.target_train_size,
                               child_seed(cfg.seed, "arrival-train", index), classes=classes)
    test = _balanced_test(layout, domain, classes, data.target_test_size,
                          child_seed(cfg.seed, "arrival-test", index))
    return train, test, classes
