"""End-to-end federation driver.

Bootstraps a source federation, admits a joining client, runs discovery,
and drives contribution-weighted adaptation rounds (or the FedAvg/FedProx
baselines over the identical protocol). Sequential arrivals promote each
adapted target into the source pool before admitting the next one.
All stages draw from named seed streams, so a (config, seed) pair fixes
the whole run byte-for-byte.
"""

from dataclasses import dataclass, replace

import numpy as np

from .aggregation import (ContributionSet, aggregate_class_classifier,
                          aggregate_class_encoder, aggregate_domain,
                          aggregate_fedavg, classifier_contributions,
                          encoder_contributions, target_fraction)
from .config import FederationConfig
from .data import LabeledDataset
from .discovery import (CLASS_LABEL, DOMAIN_LABEL, IN_DISTRIBUTION,
                        KnowledgeVerdict, Thresholds, VerdictKind,
                        calibrate_thresholds, classifier_gap, classify_knowledge,
                        compute_diffs, encode_public, feature_gap)
from .errors import ConfigError
from .metrics import accuracy, evaluate, models_digest
from .nn import SplitModel, new_model
from .scenarios import ScenarioData, build_arrival, build_probe_dataset, build_scenario
from .seeding import child_seed
from .training import (ClientState, Role, run_sgd, snapshot_memory,
                       train_plain_local, train_proximal_local,
                       train_source_local, train_target_local)


@dataclass(frozen=True)
class BootstrapResult:
    global_model: SplitModel
    clients: tuple
    source_acc_history: tuple
    rounds_run: int


@dataclass(frozen=True)
class RunLog:
    """Everything a finished run reports: verdict, per-round metrics, weights."""

    config_echo: dict
    method: str
    verdict: object
    thresholds: object
    rounds: tuple
    contributions: tuple
    final_models_digest: str
    bootstrap_rounds: int
    bootstrap_history: tuple
    no_new_knowledge_acc: float = None

    def to_dict(self) -> dict:
        verdict_doc = None
        if self.verdict is not None:
            verdict_doc = {
                "kind": self.verdict.kind.value,
                "report": {
                    "diff_f": self.verdict.report.diff_f,
                    "diff_c": self.verdict.report.diff_c,
                    "diff_e": self.verdict.report.diff_e,
                    "public_set_size": self.verdict.report.public_set_size,
                },
            }
        thresholds_doc = None
        if self.thresholds is not None:
            thresholds_doc = {"t_f": self.thresholds.t_f, "t_c": self.thresholds.t_c}
        return {
            "schema_version": 1,
            "config": self.config_echo,
            "method": self.method,
            "verdict": verdict_doc,
            "thresholds": thresholds_doc,
            "rounds": [m.to_dict() for m in self.rounds],
            "contributions": [
                {
                    "round": cs.round_index,
                    "encoder_weights": [float(w) for w in cs.encoder_weights],
                    "classifier_weights": (
                        None if cs.classifier_weights is None
                        else [float(w) for w in cs.classifier_weights]
                    ),
                    "target_beta": cs.target_beta,
                }
                for cs in self.contributions
            ],
            "final_models_digest": self.final_models_digest,
            "bootstrap_rounds": self.bootstrap_rounds,
            "bootstrap_history": list(self.bootstrap_history),
            "no_new_knowledge_acc": self.no_new_knowledge_acc,
            "final_metrics": self.rounds[-1].to_dict() if self.rounds else None,
        }


@dataclass(frozen=True)
class AdaptationOutcome:
    """RunLog plus the live end-of-run states sequential promotion needs."""

    log: RunLog
    global_model: SplitModel
    sources: tuple
    target: ClientState


def _make_source_clients(cfg: FederationConfig, scenario: ScenarioData,
                         model: SplitModel) -> tuple:
    lam = 0.0 if cfg.method == "contribution-noafm" else cfg.train.lam
    return tuple(
        ClientState(
            client_id=f"src-{i}",
            role=Role.SOURCE,
            train=scenario.source_train[i],
            test=scenario.source_test[i],
            model=model,
            memory_model=model,
            lam=lam,
            batch_size=cfg.train.batch_size,
            eta=cfg.train.eta,
        )
        for i in range(cfg.n_source_clients)
    )


def _make_target_client(cfg: FederationConfig, train: LabeledDataset,
                        test: LabeledDataset, model: SplitModel,
                        client_id: str = "target") -> ClientState:
    return ClientState(
        client_id=client_id,
        role=Role.TARGET,
        train=train,
        test=test,
        model=model,
        memory_model=model,
        lam=0.0,
        batch_size=cfg.train.batch_size,
        eta=cfg.train.eta,
    )


def _pooled_source_accuracy(model: SplitModel, clients) -> float:
    correct = 0
    total = 0
    for client in clients:
        correct += accuracy(model, client.test) * len(client.test)
        total += len(client.test)
    return correct / total


def bootstrap_sources(cfg: FederationConfig, scenario: ScenarioData = None) -> BootstrapResult:
    """FedAvg over the source clients until pooled source accuracy plateaus.

    The final global model is distributed back to every client before their
    memory anchors are snapshotted: the anchor is the model a client holds
    at the moment a new client arrives.
    """
    if scenario is None:
        scenario = build_scenario(cfg)
    model = new_model(cfg.data.input_dim, cfg.model.hidden_dims, scenario.k_total,
                      child_seed(cfg.seed, "model"))
    clients = _make_source_clients(cfg, scenario, model)
    sizes = [len(c.train) for c in clients]

    history = []
    global_model = model
    rounds_run = 0
    for rnd in range(cfg.bootstrap_max_rounds):
        clients = tuple(
            c.with_model(train_plain_local(
                c.with_model(global_model), cfg.train.local_epochs,
                child_seed(cfg.seed, "bootstrap", rnd, c.client_id)))
            for c in clients
        )
        global_model = aggregate_fedavg([c.model for c in clients], sizes)
        history.append(_pooled_source_accuracy(global_model, clients))
        rounds_run = rnd + 1
        if len(history) > cfg.bootstrap_patience:
            window = history[-(cfg.bootstrap_patience + 1):]
            if max(window[1:]) - window[0] < cfg.bootstrap_min_improvement:
                break

    clients = tuple(snapshot_memory(c.with_model(global_model)) for c in clients)
    return BootstrapResult(
        global_model=global_model,
        clients=clients,
        source_acc_history=tuple(history),
        rounds_run=rounds_run,
    )


def calibration_reports(cfg: FederationConfig, scenario: ScenarioData,
                        global_model: SplitModel, source_classes=None) -> list:
    """Labeled DiffReports from synthetic probe joiners against the given global model."""
    source_classes = scenario.source_classes if source_classes is None else source_classes
    held_out = [c for c in range(cfg.data.n_classes) if c not in source_classes]
    kinds = [IN_DISTRIBUTION, DOMAIN_LABEL] + ([CLASS_LABEL] if held_out else [])
    labeled = []
    for kind in kinds:
        for idx in range(cfg.thresholds.probe_seeds):
            ds = build_probe_dataset(cfg, scenario.layout, kind, tuple(source_classes),
                                     scenario.source_domains,
                                     child_seed(cfg.seed, "probe", kind, idx))
            probe_model = run_sgd(global_model, ds, cfg.train.discovery_epochs,
                                  cfg.train.batch_size, cfg.train.eta,
                                  child_seed(cfg.seed, "probe-train", kind, idx))
            labeled.append((kind, compute_diffs(global_model, probe_model, scenario.public)))
    return labeled


def resolve_thresholds(cfg: FederationConfig, scenario: ScenarioData,
                       global_model: SplitModel, source_classes=None) -> Thresholds:
    if cfg.thresholds.mode == "preset":
        return Thresholds(t_f=cfg.thresholds.t_f, t_c=cfg.thresholds.t_c)
    return calibrate_thresholds(
        calibration_reports(cfg, scenario, global_model, source_classes)
    )


def admit_client(global_model: SplitModel, target: ClientState, cfg: FederationConfig,
                 public: LabeledDataset, thresholds: Thresholds) -> tuple:
    """Discovery phase: the joiner fine-tunes the global model, the server measures it.

    Returns (verdict, trained target model). On a no-new-knowledge verdict
    the caller keeps the original model for the joiner and skips adaptation.
    """
    target = target.with_model(global_model)
    trained = train_target_local(target, cfg.train.discovery_epochs,
                                 child_seed(cfg.seed, "discovery", target.client_id))
    report = compute_diffs(global_model, trained, public)
    return classify_knowledge(report, thresholds), trained


def _per_round_diffs(sources, target_model: SplitModel, public: LabeledDataset) -> tuple:
    """Per source client: feature gap vs the target upload, classifier gap likewise."""
    target_features = encode_public(target_model, public)
    diff_f = []
    diff_c = []
    for client in sources:
        diff_f.append(feature_gap(encode_public(client.model, public), target_features))
        diff_c.append(classifier_gap(client.model, target_model))
    return np.asarray(diff_f), np.asarray(diff_c)


def run_adaptation(verdict: KnowledgeVerdict, sources, target: ClientState,
                   cfg: FederationConfig, public: LabeledDataset,
                   source_classes, thresholds: Thresholds = None,
                   bootstrap: BootstrapResult = None) -> AdaptationOutcome:
    """Contribution-driven adaptation rounds following a positive verdict."""
    if verdict.kind is VerdictKind.NO_NEW_KNOWLEDGE:
        raise ConfigError("adaptation requires a domain- or class-increment verdict")
    sources = tuple(sources)
    if not sources:
        raise ConfigError("at least one source client is required")

    source_classes = tuple(sorted(int(c) for c in source_classes))
    target_new_classes = tuple(
        int(c) for c in np.unique(target.train.labels) if int(c) not in source_classes
    )
    sizes = [len(c.train) for c in sources]
    target_size = len(target.train)

    rounds = []
    contributions = []
    global_model = None
    for rnd in range(cfg.rounds):
        diff_f, diff_c = _per_round_diffs(sources, target.model, public)
        beta = target_fraction(sizes, target_size)
        enc_w = encoder_contributions(diff_f, sizes, target_size)
        if verdict.kind is VerdictKind.DOMAIN_INCREMENT:
            clf_w = classifier_contributions(diff_c, sizes, target_size)
            cs = ContributionSet(encoder_weights=enc_w, classifier_weights=clf_w,
                                 target_beta=beta, round_index=rnd)
            global_model = aggregate_domain([c.model for c in sources], target.model, cs)
        else:
            cs = ContributionSet(encoder_weights=enc_w, classifier_weights=None,
                                 target_beta=beta, round_index=rnd)
            encoder = aggregate_class_encoder([c.model for c in sources], target.model,
                                              enc_w, beta)
            classifier = aggregate_class_classifier([c.model for c in sources], target.model,
                                                    sizes, source_classes, target_new_classes)
            global_model = SplitModel(encoder=encoder, classifier=classifier)
        contributions.append(cs)
        rounds.append(evaluate(global_model, sources, target, round_index=rnd))

        sources = tuple(
            c.with_model(train_source_local(
                c.with_model(global_model), cfg.train.local_epochs,
                child_seed(cfg.seed, "adapt", rnd, c.client_id)))
            for c in sources
        )
        target = target.with_model(train_target_local(
            target.with_model(global_model), cfg.train.local_epochs,
            child_seed(cfg.seed, "adapt", rnd, target.client_id)))

    log = RunLog(
        config_echo=cfg.to_dict(),
        method=cfg.method,
        verdict=verdict,
        thresholds=thresholds,
        rounds=tuple(rounds),
        contributions=tuple(contributions),
        final_models_digest=models_digest(
            [global_model] + [c.model for c in sources] + [target.model]),
        bootstrap_rounds=bootstrap.rounds_run if bootstrap else 0,
        bootstrap_history=bootstrap.source_acc_history if bootstrap else (),
    )
    return AdaptationOutcome(log=log, global_model=global_model,
                             sources=sources, target=target)


def run_baseline(sources, target: ClientState, cfg: FederationConfig,
                 bootstrap: BootstrapResult = None) -> AdaptationOutcome:
    """FedAvg / FedProx rounds over the same admit-then-adapt protocol."""
    if cfg.method not in ("fedavg", "fedprox"):
        raise ConfigError(f"not a baseline method: {cfg.method!r}")
    sources = tuple(sources)
    sizes = [len(c.train) for c in sources]
    target_size = len(target.train)
    all_sizes = sizes + [target_size]
    beta = target_fraction(sizes, target_size)
    size_weights = np.asarray(sizes, dtype=np.float64)
    size_weights = size_weights / (size_weights.sum() + target_size)

    rounds = []
    contributions = []
    global_model = None
    for rnd in range(cfg.rounds):
        models = [c.model for c in sources] + [target.model]
        global_model = aggregate_fedavg(models, all_sizes)
        contributions.append(ContributionSet(
            encoder_weights=size_weights, classifier_weights=size_weights.copy(),
            target_beta=beta, round_index=rnd))
        rounds.append(evaluate(global_model, sources, target, round_index=rnd))

        new_states = []
        for c in list(sources) + [target]:
            seeded = child_seed(cfg.seed, "adapt", rnd, c.client_id)
            base = c.with_model(global_model)
            if cfg.method == "fedprox":
                trained = train_proximal_local(base, cfg.train.local_epochs, seeded,
                                               anchor=global_model, coeff=cfg.train.fedprox_mu)
            else:
                trained = train_plain_local(base, cfg.train.local_epochs, seeded)
            new_states.append(base.with_model(trained))
        sources = tuple(new_states[:-1])
        target = new_states[-1]

    log = RunLog(
        config_echo=cfg.to_dict(),
        method=cfg.method,
        verdict=None,
        thresholds=None,
        rounds=tuple(rounds),
        contributions=tuple(contributions),
        final_models_digest=models_digest(
            [global_model] + [c.model for c in sources] + [target.model]),
        bootstrap_rounds=bootstrap.rounds_run if bootstrap else 0,
        bootstrap_history=bootstrap.source_acc_history if bootstrap else (),
    )
    return AdaptationOutcome(log=log, global_model=global_model,
                             sources=sources, target=target)


def run(cfg: FederationConfig) -> RunLog:
    """The full pipeline for one joining client: bootstrap, admit, adapt."""
    scenario = build_scenario(cfg)
    bootstrap = bootstrap_sources(cfg, scenario)
    target = _make_target_client(cfg, scenario.target_train, scenario.target_test,
                                 bootstrap.global_model)

    if cfg.method in ("fedavg", "fedprox"):
        trained = train_target_local(target, cfg.train.discovery_epochs,
                                     child_seed(cfg.seed, "discovery", target.client_id))
        outcome = run_baseline(bootstrap.clients, target.with_model(trained), cfg,
                               bootstrap=bootstrap)
        return outcome.log

    thresholds = resolve_thresholds(cfg, scenario, bootstrap.global_model)
    verdict, trained = admit_client(bootstrap.global_model, target, cfg,
                                    scenario.public, thresholds)
    if verdict.kind is VerdictKind.NO_NEW_KNOWLEDGE:
        # The joiner only runs inference with the unmodified global model.
        return RunLog(
            config_echo=cfg.to_dict(),
            method=cfg.method,
            verdict=verdict,
            thresholds=thresholds,
            rounds=(),
            contributions=(),
            final_models_digest=models_digest([bootstrap.global_model]),
            bootstrap_rounds=bootstrap.rounds_run,
            bootstrap_history=bootstrap.source_acc_history,
            no_new_knowledge_acc=accuracy(bootstrap.global_model, target.test),
        )
    outcome = run_adaptation(verdict, bootstrap.clients, target.with_model(trained),
                             cfg, scenario.public, scenario.source_classes,
                             thresholds=thresholds, bootstrap=bootstrap)
    return outcome.log


def run_sequential(cfg: FederationConfig, arrivals=None) -> list:
    """Admit-adapt-promote loop over an ordered list of arrival specs.

    Each adapted target becomes a source client (memory snapshotted), and
    every incumbent source re-anchors its memory before the next arrival.
    """
    arrival_specs = cfg.arrivals if arrivals is None else tuple(arrivals)
    scenario = build_scenario(cfg)
    bootstrap = bootstrap_sources(cfg, scenario)
    sources = bootstrap.clients
    global_model = bootstrap.global_model
    source_classes = set(scenario.source_classes)

    logs = []
    for index, arrival in enumerate(arrival_specs):
        train, test, _ = build_arrival(cfg, scenario.layout, arrival, index)
        target = _make_target_client(cfg, train, test, global_model,
                                     client_id=f"arrival-{index}")
        thresholds = resolve_thresholds(
            replace_seed(cfg, child_seed(cfg.seed, "arrival-thresholds", index)),
            scenario, global_model, source_classes=tuple(sorted(source_classes)))
        verdict, trained = admit_client(global_model, target, cfg,
                                        scenario.public, thresholds)
        if verdict.kind is VerdictKind.NO_NEW_KNOWLEDGE:
            logs.append(RunLog(
                config_echo=cfg.to_dict(),
                method=cfg.method,
                verdict=verdict,
                thresholds=thresholds,
                rounds=(),
                contributions=(),
                final_models_digest=models_digest([global_model]),
                bootstrap_rounds=bootstrap.rounds_run,
                bootstrap_history=bootstrap.source_acc_history,
                no_new_knowledge_acc=accuracy(global_model, target.test),
            ))
            continue
        outcome = run_adaptation(verdict, sources, target.with_model(trained),
                                 replace_seed(cfg, child_seed(cfg.seed, "arrival", index)),
                                 scenario.public, tuple(sorted(source_classes)),
                                 thresholds=thresholds, bootstrap=bootstrap)
        logs.append(outcome.log)
        global_model = outcome.global_model
        promoted_lam = 0.0 if cfg.method == "contribution-noafm" else cfg.train.lam
        promoted = snapshot_memory(replace(
            outcome.target, role=Role.SOURCE, lam=promoted_lam))
        sources = tuple(snapshot_memory(c) for c in outcome.sources) + (promoted,)
        source_classes |= {int(c) for c in np.unique(train.labels)}
    return logs


def replace_seed(cfg: FederationConfig, seed: int) -> FederationConfig:
    return replace(cfg, seed=seed)


@dataclass(frozen=True)
class AblationResult:
    with_afm: RunLog
    without_afm: RunLog

    @property
    def s_acc_delta(self) -> float:
        if not self.with_afm.rounds or not self.without_afm.rounds:
            raise ConfigError("ablation runs recorded no adaptation rounds")
        return self.with_afm.rounds[-1].s_acc - self.without_afm.rounds[-1].s_acc


def run_ablation_afm(cfg: FederationConfig) -> AblationResult:
    """Paired runs with identical seeds: memory anchoring on vs. off."""
    cfg_on = replace(cfg, method="contribution")
    cfg_off = replace(cfg, method="contribution-noafm")
    return AblationResult(with_afm=run(cfg_on), without_afm=run(cfg_off))
