"""Command-line surface.

Exit codes: 0 success, 2 configuration/input error, 3 numeric error.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

from .config import load_config
from .discovery import (Thresholds, calibrate_thresholds, classify_knowledge,
                        compute_diffs)
from .errors import ConfigError, NumericError
from .metrics import accuracy, emit_report
from .modelio import load_dataset, load_model, save_dataset, save_model
from .orchestrator import (bootstrap_sources, calibration_reports, run,
                           run_ablation_afm, run_sequential)
from .scenarios import build_scenario

# Reference preset thresholds from the published digit-benchmark setup;
# calibrated values are preferred for any other architecture.
REFERENCE_T_F = 1000.0
REFERENCE_T_C = 0.25


def _load_cfg(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _emit(log, out_dir):
    paths = emit_report(log, out_dir)
    print(json.dumps({"out": out_dir, "files": sorted(os.path.basename(p) for p in paths.values())}))


def _cmd_run(args) -> int:
    cfg = _load_cfg(args)
    log = run(cfg)
    _emit(log, args.out)
    return 0


def _cmd_bootstrap(args) -> int:
    cfg = _load_cfg(args)
    scenario = build_scenario(cfg)
    result = bootstrap_sources(cfg, scenario)
    os.makedirs(args.out, exist_ok=True)
    save_model(result.global_model, os.path.join(args.out, "global_model.json"))
    save_dataset(scenario.public, os.path.join(args.out, "public.json"))
    summary = {
        "rounds_run": result.rounds_run,
        "source_acc_history": list(result.source_acc_history),
        "final_source_acc": result.source_acc_history[-1] if result.source_acc_history else None,
    }
    with open(os.path.join(args.out, "bootstrap.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary))
    return 0


def _cmd_discover(args) -> int:
    source = load_model(args.source_checkpoint)
    target = load_model(args.target_checkpoint)
    public = load_dataset(args.public)
    report = compute_diffs(source, target, public)
    thresholds = Thresholds(t_f=args.t_f, t_c=args.t_c)
    verdict = classify_knowledge(report, thresholds)
    print(json.dumps({
        "diff_f": report.diff_f,
        "diff_c": report.diff_c,
        "diff_e": report.diff_e,
        "public_set_size": report.public_set_size,
        "verdict": verdict.kind.value,
        "t_f": thresholds.t_f,
        "t_c": thresholds.t_c,
    }))
    return 0


def _cmd_calibrate(args) -> int:
    cfg = _load_cfg(args)
    scenario = build_scenario(cfg)
    result = bootstrap_sources(cfg, scenario)
    labeled = calibration_reports(cfg, scenario, result.global_model)
    thresholds = calibrate_thresholds(labeled)
    print(json.dumps({
        "t_f": thresholds.t_f,
        "t_c": thresholds.t_c,
        "reports": [
            {"label": label, "diff_f": r.diff_f, "diff_c": r.diff_c, "diff_e": r.diff_e}
            for label, r in labeled
        ],
    }))
    return 0


def _cmd_ablate_afm(args) -> int:
    cfg = _load_cfg(args)
    result = run_ablation_afm(cfg)
    emit_report(result.with_afm, os.path.join(args.out, "with-afm"))
    emit_report(result.without_afm, os.path.join(args.out, "without-afm"))
    summary = {
        "s_acc_with_afm": result.with_afm.rounds[-1].s_acc if result.with_afm.rounds else None,
        "s_acc_without_afm": result.without_afm.rounds[-1].s_acc if result.without_afm.rounds else None,
        "s_acc_delta": result.s_acc_delta if result.with_afm.rounds else None,
    }
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary))
    return 0


def _cmd_sequential(args) -> int:
    cfg = _load_cfg(args)
    logs = run_sequential(cfg)
    summary = []
    for i, log in enumerate(logs):
        emit_report(log, os.path.join(args.out, f"arrival-{i}"))
        last = log.rounds[-1] if log.rounds else None
        summary.append({
            "arrival": i,
            "verdict": log.verdict.kind.value if log.verdict else None,
            "t_acc": last.t_acc if last else None,
            "s_acc": last.s_acc if last else None,
            "g_acc": last.g_acc if last else None,
        })
    with open(os.path.join(args.out, "sequential.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary))
    return 0


def _cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    dataset = load_dataset(args.dataset)
    print(json.dumps({
        "accuracy": accuracy(model, dataset),
        "samples": len(dataset),
        "domain_id": dataset.domain_id,
        "split": dataset.split,
    }))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedadapt",
        description="Federated simulation with fine-grained new-knowledge discovery.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if needs_out:
            p.add_argument("--out", default="out", help="output directory")

    p_run = sub.add_parser("run", help="full pipeline: bootstrap, admit, adapt")
    common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_boot = sub.add_parser("bootstrap", help="train the source federation only")
    common(p_boot)
    p_boot.set_defaults(func=_cmd_bootstrap)

    p_disc = sub.add_parser("discover", help="diff two checkpoints on a public set")
    p_disc.add_argument("source_checkpoint")
    p_disc.add_argument("target_checkpoint")
    p_disc.add_argument("public")
    p_disc.add_argument("--t-f", type=float, default=REFERENCE_T_F, dest="t_f")
    p_disc.add_argument("--t-c", type=float, default=REFERENCE_T_C, dest="t_c")
    p_disc.set_defaults(func=_cmd_discover)

    p_cal = sub.add_parser("calibrate", help="probe-based threshold calibration")
    common(p_cal, needs_out=False)
    p_cal.set_defaults(func=_cmd_calibrate)

    p_abl = sub.add_parser("ablate-afm", help="paired runs with and without anti-forgetting")
    common(p_abl)
    p_abl.set_defaults(func=_cmd_ablate_afm)

    p_seq = sub.add_parser("sequential", help="admit a list of arrivals one after another")
    common(p_seq)
    p_seq.set_defaults(func=_cmd_sequential)

    p_eval = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset cache")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("dataset")
    p_eval.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
