"""Checkpoint document: config, parameters, BN statistics, the centroids of
every regularization step, normalization statistics and run settings in one
JSON file.

Floats are written with Python's shortest round-trip representation, so
save -> load is bit-exact.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from data import Normalizer
from model import SmateConfig, SmateModel
from regularizer import CentroidSet, Step
from tensor import ConfigurationError, Tensor

logger = logging.getLogger(__name__)

FORMAT = "smate-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    model: SmateModel
    normalizer: Normalizer = None
    label_set: list = None
    run: dict = field(default_factory=dict)


def _centroids_document(cs: CentroidSet):
    return {
        "class_ids": list(cs.class_ids),
        "step": cs.step.value,
        "labeled_counts": cs.labeled_counts.tolist(),
        "propagated_counts": cs.propagated_counts.tolist(),
        "values": cs.centroids.data.tolist(),
    }


def _centroids_from_document(c):
    return CentroidSet(
        centroids=Tensor(np.array(c["values"], dtype=np.float64)),
        class_ids=c["class_ids"],
        step=Step(c["step"]),
        labeled_counts=np.array(c["labeled_counts"], dtype=int),
        propagated_counts=np.array(c["propagated_counts"], dtype=int),
    )


def to_document(ckpt: Checkpoint):
    model = ckpt.model
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "run": dict(ckpt.run),
        "label_set": list(ckpt.label_set) if ckpt.label_set is not None else None,
        "parameters": {name: p.value.tolist() for name, p in model.named_parameters().items()},
        "buffers": {name: value.tolist() for name, value in model.buffers().items()},
        "normalizer": ckpt.normalizer.to_dict() if ckpt.normalizer is not None else None,
        "centroid_steps": [_centroids_document(cs) for cs in model.centroid_steps],
    }
    return doc


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_document(ckpt)) + "\n", encoding="utf-8")
    logger.info("checkpoint written to %s", path)
    return path


def from_document(doc):
    if doc.get("format") != FORMAT:
        raise ConfigurationError(f"not a checkpoint document (format={doc.get('format')!r})")
    model = SmateModel(SmateConfig.from_dict(doc["config"]))
    params = model.named_parameters()
    missing = set(params) - set(doc["parameters"])
    if missing:
        raise ConfigurationError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, values in doc["parameters"].items():
        if name not in params:
            raise ConfigurationError(f"checkpoint has unknown parameter {name!r}")
        array = np.array(values, dtype=np.float64)
        if array.shape != params[name].shape:
            raise ConfigurationError(
                f"parameter {name}: checkpoint shape {array.shape}, model shape {params[name].shape}"
            )
        params[name].value = array
        params[name].zero_grad()
    buffers = model.buffers()
    for name, values in doc.get("buffers", {}).items():
        if name in buffers:
            buffers[name][:] = values
    model.centroid_steps = [_centroids_from_document(c) for c in doc.get("centroid_steps") or []]
    normalizer = Normalizer.from_dict(doc["normalizer"]) if doc.get("normalizer") else None
    return Checkpoint(model, normalizer, doc.get("label_set"), doc.get("run") or {})


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid checkpoint document ({exc})") from exc
    return from_document(doc)
