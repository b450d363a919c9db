"""Evaluation metrics and post-run report files.

Accuracies: t_acc on the target's test split, s_acc as the unweighted
mean over source clients' test splits (a sample-weighted variant rides
along for comparison), g_acc on the pooled union of every test split.
Loss and gradient norm are full-batch cross-entropy quantities of the
global model over the pooled train splits.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError
from .nn import SplitModel, flatten, flatten_grads, forward, loss_and_grad

CSV_HEADER = "round,t_acc,s_acc,g_acc,global_loss,grad_norm"
CONTRIB_HEADER = "round,client,encoder_weight,classifier_weight,target_beta"


@dataclass(frozen=True)
class RoundMetrics:
    round_index: int
    t_acc: float
    s_acc: float
    g_acc: float
    global_loss: float
    grad_norm: float
    s_acc_weighted: float

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "t_acc": self.t_acc,
            "s_acc": self.s_acc,
            "g_acc": self.g_acc,
            "global_loss": self.global_loss,
            "grad_norm": self.grad_norm,
            "s_acc_weighted": self.s_acc_weighted,
        }


def accuracy(model: SplitModel, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    _, logits = forward(model, dataset.samples)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def evaluate(model: SplitModel, source_clients, target_client, round_index: int = 0) -> RoundMetrics:
    """Score one global model against every participant's splits."""
    source_clients = list(source_clients)
    if target_client is None:
        raise ConfigError("target accuracy requested but no target client present")
    if not source_clients:
        raise ConfigError("at least one source client is required")

    per_source = [accuracy(model, c.test) for c in source_clients]
    source_sizes = [len(c.test) for c in source_clients]
    t_acc = accuracy(model, target_client.test)

    test_sets = [c.test for c in source_clients] + [target_client.test]
    pooled_correct = 0
    pooled_total = 0
    for ds in test_sets:
        _, logits = forward(model, ds.samples)
        pooled_correct += int(np.sum(np.argmax(logits, axis=1) == ds.labels))
        pooled_total += len(ds)

    train_sets = [c.train for c in source_clients] + [target_client.train]
    loss, grad_norm = global_loss_and_grad_norm(model, train_sets)

    return RoundMetrics(
        round_index=round_index,
        t_acc=t_acc,
        s_acc=float(np.mean(per_source)),
        g_acc=pooled_correct / pooled_total,
        global_loss=loss,
        grad_norm=grad_norm,
        s_acc_weighted=float(np.average(per_source, weights=source_sizes)),
    )


def global_loss_and_grad_norm(model: SplitModel, train_sets) -> tuple:
    """Full-batch CE loss and gradient L2 norm over the pooled train data."""
    samples = np.concatenate([ds.samples for ds in train_sets], axis=0)
    labels = np.concatenate([ds.labels for ds in train_sets])
    loss, grads = loss_and_grad(model, samples, labels)
    return loss, float(np.linalg.norm(flatten_grads(grads)))


def models_digest(models) -> str:
    """Hex digest over the concatenated flat parameters of the given models."""
    h = hashlib.sha256()
    for model in models:
        h.update(flatten(model).tobytes())
    return h.hexdigest()


# --- report files --------------------------------------------------------

def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def metrics_csv_text(rounds) -> str:
    lines = [CSV_HEADER]
    for m in rounds:
        lines.append(
            f"{m.round_index},{_fmt(m.t_acc)},{_fmt(m.s_acc)},{_fmt(m.g_acc)},"
            f"{_fmt(m.global_loss)},{_fmt(m.grad_norm)}"
        )
    return "\n".join(lines) + "\n"


def contributions_csv_text(contributions) -> str:
    lines = [CONTRIB_HEADER]
    for cs in contributions:
        clf = cs.classifier_weights
        for i, w in enumerate(cs.encoder_weights):
            clf_cell = _fmt(float(clf[i])) if clf is not None else ""
            lines.append(
                f"{cs.round_index},{i},{_fmt(float(w))},{clf_cell},{_fmt(cs.target_beta)}"
            )
    return "\n".join(lines) + "\n"


def curves_svg_text(rounds) -> str:
    """Accuracy-vs-round line chart as a static SVG string."""
    width, height = 640, 400
    left, right, top, bottom = 60, 20, 20, 40
    plot_w, plot_h = width - left - right, height - top - bottom
    n = len(rounds)

    def x_pos(i):
        return left + (plot_w * i / max(1, n - 1) if n > 1 else plot_w / 2)

    def y_pos(v):
        return top + plot_h * (1.0 - v)

    series = [
        ("t_acc", "#d62728", [m.t_acc for m in rounds]),
        ("s_acc", "#1f77b4", [m.s_acc for m in rounds]),
        ("g_acc", "#2ca02c", [m.g_acc for m in rounds]),
    ]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="{left - 10}" y="{top + 5}" text-anchor="end" font-size="12">1.0</text>',
        f'<text x="{left - 10}" y="{top + plot_h + 5}" text-anchor="end" font-size="12">0.0</text>',
        f'<text x="{left + plot_w / 2:.2f}" y="{height - 10}" text-anchor="middle" font-size="12">round</text>',
    ]
    for rank, (name, color, values) in enumerate(series):
        if n:
            points = " ".join(f"{x_pos(i):.2f},{y_pos(v):.2f}" for i, v in enumerate(values))
            parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{left + 10 + 80 * rank}" y="{top + 15}" fill="{color}" font-size="12">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(log, out_dir: str) -> dict:
    """Write metrics.csv, contributions.csv, run.json, and curves.svg for a run log.

    Returns the path map. Re-running on the same log produces byte-identical files.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"output directory {out_dir!r} is not writable: {exc}") from exc

    paths = {
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "contributions": os.path.join(out_dir, "contributions.csv"),
        "run": os.path.join(out_dir, "run.json"),
        "curves": os.path.join(out_dir, "curves.svg"),
    }
    with open(paths["metrics"], "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv_text(log.rounds))
    with open(paths["contributions"], "w", encoding="utf-8", newline="") as fh:
        fh.write(contributions_csv_text(log.contributions))
    with open(paths["run"], "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(log.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(paths["curves"], "w", encoding="utf-8", newline="") as fh:
        fh.write(curves_svg_text(log.rounds))
    return paths
