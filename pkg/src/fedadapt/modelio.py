"""Versioned JSON containers for model checkpoints and dataset caches.

Floats are serialized with Python's shortest round-trip repr, so a
write/read cycle is bit-exact for finite doubles.
"""

import json
import os

import numpy as np

from .errors import FormatError, NumericError
from .nn import SplitModel, flatten, model_shape, unflatten

CHECKPOINT_FORMAT = "split-model-checkpoint"
DATASET_FORMAT = "labeled-dataset"
FORMAT_VERSION = 1


def save_model(model: SplitModel, path: str):
    params = flatten(model)
    if not np.all(np.isfinite(params)):
        raise NumericError("refusing to checkpoint non-finite parameters")
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "shape": [[i, o, act] for i, o, act in model_shape(model)],
        "params": params.tolist(),
    }
    _write_json(doc, path)


def load_model(path: str) -> SplitModel:
    doc = _read_json(path, CHECKPOINT_FORMAT)
    try:
        shape = tuple((int(i), int(o), str(act)) for i, o, act in doc["shape"])
        params = np.asarray(doc["params"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint: {exc}") from exc
    return unflatten(params, shape)


def save_dataset(dataset, path: str):
    doc = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "domain_id": dataset.domain_id,
        "split": dataset.split,
        "rows": int(dataset.samples.shape[0]),
        "cols": int(dataset.samples.shape[1]),
        "samples": dataset.samples.ravel().tolist(),
        "labels": dataset.labels.tolist(),
    }
    _write_json(doc, path)


def load_dataset(path: str):
    from .data import LabeledDataset

    doc = _read_json(path, DATASET_FORMAT)
    try:
        rows, cols = int(doc["rows"]), int(doc["cols"])
        samples = np.asarray(doc["samples"], dtype=np.float64).reshape(rows, cols)
        labels = np.asarray(doc["labels"], dtype=np.int64)
        return LabeledDataset(
            samples=samples,
            labels=labels,
            domain_id=str(doc["domain_id"]),
            split=str(doc["split"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed dataset cache: {exc}") from exc


def _write_json(doc: dict, path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def _read_json(path: str, expected_format: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != expected_format:
        raise FormatError(f"{path}: not a {expected_format} file")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported version {doc.get('version')!r}, expected {FORMAT_VERSION}"
        )
    return doc
