"""Accuracy, likelihood-based novelty scores, ranking metrics and the
max-softmax confidence baseline."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from . import model as mm
from .errors import DataError

log = logging.getLogger(__name__)

OOD_HEADER = ("sample_id", "log_px", "log_py_x", "log_joint", "is_novel")


@dataclass
class OodScore:
    sample_id: int
    log_px: float
    log_py_given_x: float
    log_joint: float
    is_novel: bool


@dataclass
class MetricReport:
    auroc: float = float("nan")
    ap: float = float("nan")
    max_f1: float = float("nan")
    accuracy_mean: float = float("nan")
    accuracy_per_client: dict = field(default_factory=dict)

    def as_items(self):
        items = [
            ("auroc", self.auroc),
            ("ap", self.ap),
            ("max_f1", self.max_f1),
            ("accuracy_mean", self.accuracy_mean),
        ]
        items += [(f"accuracy_client_{cid}", acc) for cid, acc in sorted(self.accuracy_per_client.items())]
        return items

    def to_text(self):
        return "".join(f"{k}={v!r}\n" for k, v in self.as_items())


def client_accuracy(model, weights, data, mode=mm.FULL):
    pred = mm.predict_label(data.x, weights, model.gaussians, model.learners, mode)
    return float(np.mean(np.asarray(pred) == data.y))


def accuracy(model, weights_by_client, test_sets, mode=mm.FULL):
    """Mean over clients of per-client test accuracy, each under its own weights.

    ``test_sets`` maps client id to a LabeledDataset; clients with an empty
    test set are skipped with a warning.
    """
    per_client = {}
    for cid in sorted(test_sets):
        data = test_sets[cid]
        if data is None or len(data) == 0:
            log.warning("client %s has no test samples; excluded from accuracy", cid)
            continue
        per_client[cid] = client_accuracy(model, weights_by_client[cid], data, mode)
    mean = float(np.mean(list(per_client.values()))) if per_client else float("nan")
    return MetricReport(accuracy_mean=mean, accuracy_per_client=per_client)


def score_ood(model, weights, x, y, is_novel=None, mode=mm.FULL):
    """Marginal, conditional and joint log-likelihood for each sample."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    is_novel = np.zeros(n, dtype=bool) if is_novel is None else np.asarray(is_novel, dtype=bool)
    scores = mm.joint_log_scores(x, weights, model.gaussians, model.learners, mode)
    log_joint = scores[np.arange(n), y]
    log_px = logsumexp(scores, axis=1)
    log_pyx = log_joint - log_px
    return [
        OodScore(i, float(log_px[i]), float(log_pyx[i]), float(log_joint[i]), bool(is_novel[i]))
        for i in range(n)
    ]


def write_ood_csv(path, scores):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OOD_HEADER)
        for s in scores:
            w.writerow([s.sample_id, repr(s.log_px), repr(s.log_py_given_x), repr(s.log_joint), int(s.is_novel)])


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if labels.all() or not labels.any():
        raise DataError("ranking metrics need both positive and negative labels")
    return scores, labels


def auroc(scores, labels):
    """Area under ROC via the Mann-Whitney rank statistic; ties count one half."""
    scores, labels = _check_binary(scores, labels)
    ranks = rankdata(scores)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _pr_points(scores, labels):
    """Precision and recall at each distinct score threshold, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    tp = np.cumsum(labels[order])
    fp = np.cumsum(~labels[order])
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp = tp[last], fp[last]
    return tp / (tp + fp), tp / labels.sum()


def average_precision(scores, labels):
    """sum_k (R_k - R_{k-1}) P_k over distinct thresholds."""
    scores, labels = _check_binary(scores, labels)
    precision, recall = _pr_points(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def max_f1(scores, labels):
    """Best F1 over all thresholds of the form score >= t."""
    scores, labels = _check_binary(scores, labels)
    precision, recall = _pr_points(scores, labels)
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return float(f1.max())


def ranking_report(scores, labels):
    return MetricReport(auroc(scores, labels), average_precision(scores, labels), max_f1(scores, labels))


def baseline_confidence_scores(model, weights_list, x, mode=mm.CONDITIONAL_ONLY):
    """Max-softmax confidence, maximised over the given clients' weights.

    For each sample and each weight grid, the conditional P(y|x) is formed
    under ``mode`` and its largest class probability taken; the score is the
    largest of these over clients.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    best = np.full(x.shape[0], -np.inf)
    for w in weights_list:
        scores = mm.joint_log_scores(x, w, model.gaussians, model.learners, mode)
        conf = np.exp(scores.max(axis=1) - logsumexp(scores, axis=1))
        best = np.maximum(best, conf)
    return best
