import json

import numpy as np
import pytest

from dataclasses import replace

from fedadapt import discovery as discovery_mod
from fedadapt import orchestrator
from fedadapt.config import (DataSpec, FederationConfig, ModelSpec, ScenarioKind,
                             ThresholdSpec, TrainSpec)
from fedadapt.discovery import DiffReport, KnowledgeVerdict, VerdictKind
from fedadapt.errors import ConfigError
from fedadapt.metrics import accuracy
from fedadapt.nn import flatten
from fedadapt.scenarios import build_scenario
from fedadapt.seeding import child_seed
from fedadapt.training import run_sgd


def small_config(**overrides):
    base = dict(
        scenario=ScenarioKind.MEDIUM,
        rounds=4,
        n_source_clients=2,
        seed=3,
        data=DataSpec(n_classes=4, input_dim=4, layout_radius=3.0, cluster_std=0.5,
                      train_per_client=60, test_per_client=40,
                      target_train_size=60, target_test_size=40,
                      public_per_class=8),
        train=TrainSpec(eta=0.05, batch_size=16, local_epochs=2,
                        discovery_epochs=3, lam=0.05),
        thresholds=ThresholdSpec(probe_seeds=1),
    )
    base.update(overrides)
    return FederationConfig(**base)


class TestBootstrap:
    def test_single_client_equals_plain_local_training(self):
        cfg = small_config(n_source_clients=1, bootstrap_max_rounds=3,
                           bootstrap_patience=3)
        scenario = build_scenario(cfg)
        result = orchestrator.bootstrap_sources(cfg, scenario)
        from fedadapt.nn import new_model
        model = new_model(cfg.data.input_dim, cfg.model.hidden_dims, scenario.k_total,
                          child_seed(cfg.seed, "model"))
        for rnd in range(result.rounds_run):
            model = run_sgd(model, scenario.source_train[0], cfg.train.local_epochs,
                            cfg.train.batch_size, cfg.train.eta,
                            child_seed(cfg.seed, "bootstrap", rnd, "src-0"))
        assert np.array_equal(flatten(result.global_model), flatten(model))

    def test_identical_clients_symmetry(self):
        # Two clients with the same data follow the same trajectory, so the
        # global model equals either local model every round.
        cfg = small_config(n_source_clients=2, bootstrap_max_rounds=3)
        scenario = build_scenario(cfg)
        scenario = replace(scenario,
                           source_train=(scenario.source_train[0],) * 2,
                           source_test=(scenario.source_test[0],) * 2)
        result = orchestrator.bootstrap_sources(cfg, scenario)
        assert np.array_equal(flatten(result.clients[0].memory_model),
                              flatten(result.clients[1].memory_model))

    def test_three_class_setup_reaches_95_percent(self):
        cfg = small_config(
            n_source_clients=2,
            data=DataSpec(n_classes=3, input_dim=3, layout_radius=3.0,
                          cluster_std=0.5, train_per_client=80, test_per_client=60,
                          target_train_size=60, target_test_size=40,
                          public_per_class=8),
        )
        scenario = build_scenario(cfg)
        result = orchestrator.bootstrap_sources(cfg, scenario)
        assert result.rounds_run <= 50
        assert result.source_acc_history[-1] >= 0.95

    def test_memory_snapshots_equal_final_global(self):
        cfg = small_config(bootstrap_max_rounds=4)
        result = orchestrator.bootstrap_sources(cfg)
        for client in result.clients:
            assert np.array_equal(flatten(client.memory_model),
                                  flatten(result.global_model))
            assert np.array_equal(flatten(client.model), flatten(result.global_model))


@pytest.fixture(scope="module")
def admitted():
    cfg = small_config()
    scenario = build_scenario(cfg)
    boot = orchestrator.bootstrap_sources(cfg, scenario)
    thresholds = orchestrator.resolve_thresholds(cfg, scenario, boot.global_model)
    return cfg, scenario, boot, thresholds


class TestAdmitClient:

    def test_in_distribution_joiner_brings_nothing(self, admitted):
        cfg, scenario, boot, thresholds = admitted
        from fedadapt.data import generate_synthetic
        same = generate_synthetic(scenario.layout, scenario.source_domains[0],
                                  cfg.data.target_train_size,
                                  child_seed(cfg.seed, "joiner-same"),
                                  classes=scenario.source_classes)
        target = orchestrator._make_target_client(cfg, same, scenario.target_test,
                                                  boot.global_model)
        verdict, _ = orchestrator.admit_client(boot.global_model, target, cfg,
                                               scenario.public, thresholds)
        assert verdict.kind is VerdictKind.NO_NEW_KNOWLEDGE

    def test_new_domain_joiner_detected(self, admitted):
        cfg, scenario, boot, thresholds = admitted
        target = orchestrator._make_target_client(cfg, scenario.target_train,
                                                  scenario.target_test,
                                                  boot.global_model)
        verdict, trained = orchestrator.admit_client(boot.global_model, target, cfg,
                                                     scenario.public, thresholds)
        assert verdict.kind is VerdictKind.DOMAIN_INCREMENT
        assert not np.array_equal(flatten(trained), flatten(boot.global_model))

    def test_new_class_joiner_detected(self):
        cfg = small_config(
            scenario=ScenarioKind.MILD,
            data=DataSpec(n_classes=4, input_dim=4, layout_radius=3.0, cluster_std=0.5,
                          source_classes=(0, 1, 2), target_classes=(3,),
                          train_per_client=60, test_per_client=40,
                          target_train_size=60, target_test_size=40,
                          public_per_class=8),
        )
        scenario = build_scenario(cfg)
        boot = orchestrator.bootstrap_sources(cfg, scenario)
        thresholds = orchestrator.resolve_thresholds(cfg, scenario, boot.global_model)
        target = orchestrator._make_target_client(cfg, scenario.target_train,
                                                  scenario.target_test,
                                                  boot.global_model)
        verdict, _ = orchestrator.admit_client(boot.global_model, target, cfg,
                                               scenario.public, thresholds)
        assert verdict.kind is VerdictKind.CLASS_INCREMENT


class TestRunAdaptation:
    def test_rejects_no_new_knowledge(self):
        cfg = small_config()
        verdict = KnowledgeVerdict(VerdictKind.NO_NEW_KNOWLEDGE,
                                   DiffReport(0, 0, 0, 1))
        with pytest.raises(ConfigError):
            orchestrator.run_adaptation(verdict, (), None, cfg, None, ())

    def test_degenerate_symmetry_matches_fedavg_weights(self):
        # Identical data and models everywhere: contribution weights collapse
        # to the uniform/size split and one round only moves by local training.
        cfg = small_config(rounds=1, n_source_clients=2)
        scenario = build_scenario(cfg)
        scenario = replace(scenario,
                           source_train=(scenario.source_train[0],) * 2,
                           source_test=(scenario.source_test[0],) * 2,
                           target_train=scenario.source_train[0],
                           target_test=scenario.source_test[0])
        boot = orchestrator.bootstrap_sources(cfg, scenario)
        target = orchestrator._make_target_client(cfg, scenario.target_train,
                                                  scenario.target_test,
                                                  boot.global_model)
        verdict = KnowledgeVerdict(VerdictKind.DOMAIN_INCREMENT,
                                   DiffReport(1.0, 1.0, 1.0, 1))
        out = orchestrator.run_adaptation(verdict, boot.clients, target, cfg,
                                          scenario.public, scenario.source_classes,
                                          bootstrap=boot)
        cs = out.log.contributions[0]
        n_total = len(scenario.source_train[0]) * 3
        expected = len(scenario.source_train[0]) / n_total
        assert cs.encoder_weights.tolist() == pytest.approx([expected] * 2, abs=1e-12)
        assert cs.target_beta == pytest.approx(expected, abs=1e-12)
        # All participants identical => round-0 aggregate scores exactly like
        # the bootstrap global model.
        from fedadapt.metrics import evaluate
        reference = evaluate(boot.global_model, boot.clients, target, round_index=0)
        assert out.log.rounds[0].g_acc == reference.g_acc
        assert out.log.rounds[0].global_loss == pytest.approx(reference.global_loss,
                                                              abs=1e-12)

    def test_domain_increment_run_reaches_90_within_10_rounds(self):
        cfg = FederationConfig(
            scenario=ScenarioKind.MEDIUM, rounds=10, n_source_clients=2, seed=5,
            data=DataSpec(layout_radius=3.0, cluster_std=0.5,
                          train_per_client=200, test_per_client=100,
                          target_train_size=150, target_test_size=100,
                          public_per_class=16),
            train=TrainSpec(eta=0.1, batch_size=16, local_epochs=8,
                            discovery_epochs=5, lam=0.001),
            thresholds=ThresholdSpec(probe_seeds=1),
        )
        log = orchestrator.run(cfg)
        assert log.verdict.kind is VerdictKind.DOMAIN_INCREMENT
        t_curve = [m.t_acc for m in log.rounds]
        assert t_curve[-1] >= 0.90
        dips = sum(1 for a, b in zip(t_curve, t_curve[1:]) if b < a - 1e-9)
        assert dips <= 1

    def test_discovery_cost_scales_linearly_in_clients(self, monkeypatch):
        # Per adaptation round: one public-set forward for the target plus one
        # per source client, and one classifier distance per source client.
        calls = {"encode": 0, "clf": 0}
        real_encode = discovery_mod.encode_public
        real_gap = discovery_mod.classifier_gap

        def counting_encode(model, public):
            calls["encode"] += 1
            return real_encode(model, public)

        def counting_gap(a, b):
            calls["clf"] += 1
            return real_gap(a, b)

        monkeypatch.setattr(orchestrator, "encode_public", counting_encode)
        monkeypatch.setattr(orchestrator, "classifier_gap", counting_gap)

        for n_clients in (2, 3):
            cfg = small_config(n_source_clients=n_clients, rounds=3)
            scenario = build_scenario(cfg)
            boot = orchestrator.bootstrap_sources(cfg, scenario)
            target = orchestrator._make_target_client(
                cfg, scenario.target_train, scenario.target_test, boot.global_model)
            verdict = KnowledgeVerdict(VerdictKind.DOMAIN_INCREMENT,
                                       DiffReport(1.0, 1.0, 1.0, 1))
            calls["encode"] = calls["clf"] = 0
            orchestrator.run_adaptation(verdict, boot.clients, target, cfg,
                                        scenario.public, scenario.source_classes,
                                        bootstrap=boot)
            assert calls["encode"] == cfg.rounds * (n_clients + 1)
            assert calls["clf"] == cfg.rounds * n_clients


class TestRun:
    def test_no_new_knowledge_branch_short_circuits(self):
        # Target drawn from the source distribution: the original model serves
        # the joiner for inference and no adaptation rounds run.
        cfg = small_config(
            data=replace(small_config().data, target_transform={"kind": "identity"}),
        )
        log = orchestrator.run(cfg)
        assert log.verdict.kind is VerdictKind.NO_NEW_KNOWLEDGE
        assert log.rounds == ()
        assert log.no_new_knowledge_acc is not None
        assert log.no_new_knowledge_acc > 0.8

    def test_rounds_recorded_equals_config(self):
        cfg = small_config(rounds=3)
        log = orchestrator.run(cfg)
        assert len(log.rounds) == 3
        assert [m.round_index for m in log.rounds] == [0, 1, 2]

    def test_full_run_determinism_byte_for_byte(self):
        cfg = small_config(rounds=2)
        doc_a = json.dumps(orchestrator.run(cfg).to_dict(), sort_keys=True)
        doc_b = json.dumps(orchestrator.run(cfg).to_dict(), sort_keys=True)
        assert doc_a == doc_b

    def test_seed_changes_outcome(self):
        cfg = small_config(rounds=2)
        log_a = orchestrator.run(cfg)
        log_b = orchestrator.run(replace(cfg, seed=cfg.seed + 1))
        assert log_a.final_models_digest != log_b.final_models_digest

    def test_baseline_methods_run(self):
        for method in ("fedavg", "fedprox"):
            log = orchestrator.run(small_config(method=method, rounds=2))
            assert log.method == method
            assert log.verdict is None
            assert len(log.rounds) == 2


class TestSequential:
    def seq_config(self, arrivals):
        return FederationConfig(
            scenario=ScenarioKind.MILD, rounds=3, n_source_clients=2, seed=11,
            data=DataSpec(n_classes=6, input_dim=6, layout_radius=3.0, cluster_std=0.5,
                          source_classes=(0, 1), target_classes=(2, 3),
                          train_per_client=60, test_per_client=40,
                          target_train_size=60, target_test_size=40,
                          public_per_class=8),
            train=TrainSpec(eta=0.08, batch_size=16, local_epochs=2,
                            discovery_epochs=3, lam=0.001),
            thresholds=ThresholdSpec(probe_seeds=1),
            arrivals=tuple(arrivals),
        )

    def test_empty_arrivals_is_noop(self):
        logs = orchestrator.run_sequential(self.seq_config([]))
        assert logs == []

    def test_single_arrival_reduces_to_run_adaptation(self):
        cfg = self.seq_config([{"classes": (2, 3)}])
        logs = orchestrator.run_sequential(cfg)
        assert len(logs) == 1
        assert logs[0].verdict.kind is VerdictKind.CLASS_INCREMENT
        assert len(logs[0].rounds) == cfg.rounds

    def test_promotion_grows_source_pool(self):
        cfg = self.seq_config([{"classes": (2, 3)}, {"classes": (4, 5)}])
        logs = orchestrator.run_sequential(cfg)
        assert len(logs) == 2
        assert logs[1].verdict.kind is VerdictKind.CLASS_INCREMENT
        # Second arrival's metrics average over three source clients now.
        assert logs[1].rounds[-1].s_acc is not None

    def test_sequential_matches_single_arrival_average(self):
        # Final pooled accuracy after three consecutive arrivals lands within
        # 5 points of the average over three single-arrival runs.
        pairs = [(2, 3), (4, 5)]
        seq_cfg = self.seq_config([{"classes": p} for p in pairs])
        seq_logs = orchestrator.run_sequential(seq_cfg)
        seq_final = seq_logs[-1].rounds[-1].g_acc

        singles = []
        for pair in pairs:
            cfg = replace(seq_cfg, arrivals=(),
                          data=replace(seq_cfg.data, target_classes=pair))
            log = orchestrator.run(cfg)
            assert log.rounds, "single-arrival run took the no-knowledge branch"
            singles.append(log.rounds[-1].g_acc)
        assert abs(seq_final - np.mean(singles)) < 0.05


class TestAblationControls:
    def test_zero_lambda_gives_zero_delta(self):
        cfg = small_config(rounds=2)
        cfg = replace(cfg, train=replace(cfg.train, lam=0.0))
        result = orchestrator.run_ablation_afm(cfg)
        assert result.with_afm.rounds and result.without_afm.rounds
        assert result.s_acc_delta == 0.0
        assert (result.with_afm.final_models_digest
                == result.without_afm.final_models_digest)


class TestFedProx:
    def test_proximal_term_changes_trajectory(self):
        cfg = small_config(rounds=2)
        avg = orchestrator.run(replace(cfg, method="fedavg"))
        prox = orchestrator.run(replace(
            cfg, method="fedprox", train=replace(cfg.train, fedprox_mu=5.0)))
        assert avg.final_models_digest != prox.final_models_digest


class TestThresholdModes:
    def test_preset_thresholds_drive_the_verdict(self):
        # A sky-high feature threshold forces the no-knowledge branch even for
        # a genuinely shifted target.
        cfg = small_config(thresholds=ThresholdSpec(mode="preset", t_f=1e9, t_c=1e9))
        log = orchestrator.run(cfg)
        assert log.verdict.kind is VerdictKind.NO_NEW_KNOWLEDGE
        assert log.thresholds.t_f == 1e9

    def test_tiny_preset_thresholds_trigger_adaptation(self):
        cfg = small_config(thresholds=ThresholdSpec(mode="preset", t_f=1e-6, t_c=1e9))
        log = orchestrator.run(cfg)
        assert log.verdict.kind is VerdictKind.DOMAIN_INCREMENT
        assert len(log.rounds) == cfg.rounds


class TestSequentialNoKnowledgeArrival:
    def test_uninformative_arrival_is_logged_not_promoted(self):
        cfg = FederationConfig(
            scenario=ScenarioKind.MILD, rounds=2, n_source_clients=2, seed=11,
            data=DataSpec(n_classes=6, input_dim=6, layout_radius=3.0, cluster_std=0.5,
                          source_classes=(0, 1), target_classes=(2, 3),
                          train_per_client=60, test_per_client=40,
                          target_train_size=60, target_test_size=40,
                          public_per_class=8),
            train=TrainSpec(eta=0.08, batch_size=16, local_epochs=2,
                            discovery_epochs=3, lam=0.001),
            thresholds=ThresholdSpec(probe_seeds=1),
            # First arrival replays the source distribution, second is new.
            arrivals=({"classes": (0, 1)}, {"classes": (2, 3)}),
        )
        logs = orchestrator.run_sequential(cfg)
        assert len(logs) == 2
        assert logs[0].verdict.kind is VerdictKind.NO_NEW_KNOWLEDGE
        assert logs[0].rounds == ()
        assert logs[0].no_new_knowledge_acc is not None
        assert logs[1].verdict.kind is VerdictKind.CLASS_INCREMENT
        assert logs[1].rounds
