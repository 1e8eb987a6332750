"""Model checkpoints (JSON) and round logs (CSV)."""

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .federation import FederationConfig, GlobalModel, _make_gaussians
from .model import LearnerParams, MixtureWeights

CHECKPOINT_VERSION = 1
ROUND_LOG_HEADER = ("round", "F", "delta_F", "mean_accuracy")


def checkpoint_dict(model, client_weights, cfg=None, extra=None):
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "d": model.dim,
        "K": model.n_classes,
        "M1": model.m1,
        "M2": model.m2,
        "round": model.round,
        "gaussians": [{"mu": g.mu.tolist(), "sigma": g.sigma.tolist()} for g in model.gaussians],
        "learners": None
        if model.learners is None
        else [{"weights": t.weights.tolist(), "biases": t.biases.tolist()} for t in model.learners],
        "client_pi": {str(cid): w.probs.tolist() for cid, w in sorted(client_weights.items())},
    }
    if cfg is not None:
        doc["config"] = asdict(cfg)
    if extra:
        doc.update(extra)
    return doc


def save_checkpoint(path, model, client_weights, cfg=None, extra=None):
    text = json.dumps(checkpoint_dict(model, client_weights, cfg, extra), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Returns (model, {client_id: MixtureWeights}, config or None, raw document)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"checkpoint is not valid JSON: {exc.msg}", exc.lineno) from None
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    try:
        cfg = FederationConfig(**doc["config"]) if "config" in doc else None
        floor = cfg.floor if cfg else 1e-6
        gaussians = _make_gaussians(
            [g["mu"] for g in doc["gaussians"]], [g["sigma"] for g in doc["gaussians"]], floor
        )
        learners = None
        if doc["learners"] is not None:
            learners = tuple(
                LearnerParams(np.asarray(t["weights"], dtype=np.float64), np.asarray(t["biases"], dtype=np.float64))
                for t in doc["learners"]
            )
        model = GlobalModel(gaussians, learners, int(doc["round"]))
        with np.errstate(divide="ignore"):
            weights = {int(k): MixtureWeights(np.log(np.asarray(v, dtype=np.float64))) for k, v in doc["client_pi"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed checkpoint: {exc}") from None
    if model.dim != doc["d"] or model.m1 != doc["M1"] or model.m2 != doc["M2"]:
        raise DataFormatError("checkpoint header disagrees with its parameters")
    return model, weights, cfg, doc


def write_round_log(path, logs, append=False):
    path = Path(path)
    fresh = not append or not path.exists()
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(ROUND_LOG_HEADER)
        for e in logs:
            w.writerow([e.round, repr(e.F), repr(e.delta_F), repr(e.mean_accuracy)])


def read_round_log(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "round" else float(v)) for k, v in r.items()} for r in rows]
