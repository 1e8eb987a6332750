"""Glue between datasets, training, adaptation and scoring, shared by the CLI
and the acceptance suite."""

import math

import numpy as np

from . import evaluation as ev
from . import federation as fed
from ._rng import stream
from .model import LabeledDataset


def holdout_ids(client_ids, fraction):
    """The last ceil(fraction * C) client ids, sorted."""
    ids = sorted(client_ids)
    if fraction <= 0:
        return []
    k = min(len(ids) - 1, math.ceil(fraction * len(ids)))
    return ids[len(ids) - k:] if k > 0 else []


def build_clients(client_data, cfg, ids=None):
    chosen = [c for c in client_data if ids is None or c.client_id in ids]
    return fed.make_clients(
        [c.train for c in chosen],
        cfg,
        tests={c.client_id: c.test for c in chosen},
        vals={c.client_id: c.val for c in chosen},
    )


def fit(client_data, cfg, n_classes=None, ids=None, track_accuracy=True, callback=None):
    """Initialise and train on the given clients; returns (model, clients, logs)."""
    clients = build_clients(client_data, cfg, ids)
    model = fed.init_model(clients, cfg, n_classes)
    model, logs = fed.train(model, clients, cfg, track_accuracy=track_accuracy, callback=callback)
    return model, clients, logs


def adaptation_split(cd, seed):
    """Pool a client's rows and split them 50/50 into (adaptation, test)."""
    pooled = cd.all()
    rng = stream(seed, "split", cd.client_id)
    order = rng.permutation(len(pooled))
    half = len(pooled) // 2
    a, b = order[:half], order[half:]
    return (
        LabeledDataset(pooled.x[a], pooled.y[a], cd.client_id, "adapt"),
        LabeledDataset(pooled.x[b], pooled.y[b], cd.client_id, "test"),
    )


def adaptation_curve(model, adapt_data, test_data, steps, mode):
    """Test accuracy after 0..steps pi-only updates; returns (final weights, [acc])."""
    accs = []
    weights = None
    for weights in fed.adapt_trajectory(adapt_data, model, steps, mode):
        accs.append(ev.client_accuracy(model, weights, test_data, mode))
    return weights, accs


def pooled_split(client_data, split="test"):
    xs = [c.split(split).x for c in client_data]
    ys = [c.split(split).y for c in client_data]
    return np.concatenate(xs), np.concatenate(ys)
