"""Weighted cross-entropy, the joint branch objective and evaluation metrics."""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import LABEL_NAMES, N_CLASSES, Label

PROB_FLOOR = 1e-12


def weighted_nll(log_probs, labels, weights=None):
    """Per-batch weight-normalized negative log-likelihood (torch, differentiable).

    ``sum_i w[y_i] * -log p_i[y_i] / sum_i w[y_i]``; with ``weights=None``
    this is the plain mean cross-entropy.
    """
    picked = -log_probs.gather(1, labels.view(-1, 1)).squeeze(1)
    if weights is None:
        return picked.mean()
    w = weights.to(log_probs.dtype)[labels]
    return (w * picked).sum() / w.sum()


@dataclass
class BatchLoss:
    value: float
    per_sample: list
    weight_normalizer: float
    clamped: bool = False


def wce(probs, labels, weights=None):
    """Weighted cross-entropy of a batch of class distributions.

    Probabilities at the true label are floored at 1e-12 before the log;
    ``clamped`` reports whether that happened.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] != y.shape[0]:
        raise ValueError("probs must be (batch, classes) matching labels")
    w = np.ones(p.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    true_p = p[np.arange(len(y)), y]
    clamped = bool(np.any(true_p < PROB_FLOOR))
    nll = -np.log(np.maximum(true_p, PROB_FLOOR))
    wy = w[y]
    per_sample = wy * nll
    norm = float(wy.sum())
    return BatchLoss(float(per_sample.sum() / norm), per_sample.tolist(), norm, clamped)


def wce_logit_grad(scores, labels, weights=None):
    """Closed-form gradient of the weighted NLL w.r.t. pre-softmax scores."""
    z = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    w = np.ones(z.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    onehot = np.eye(z.shape[1])[y]
    wy = w[y][:, None]
    return wy * (p - onehot) / wy.sum()


def joint_loss(fluent_loss, disfluent_loss):
    return fluent_loss + disfluent_loss


@dataclass
class EvalCounts:
    """Confusion matrix with rows = true class, columns = predicted class."""

    confusion: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), np.int64))

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        if np.any(self.confusion < 0):
            raise ValueError("negative counts")

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes=N_CLASSES):
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(y_true, int), np.asarray(y_pred, int)), 1)
        return cls(cm)

    @property
    def n(self):
        return int(self.confusion.sum())

    def __add__(self, other):
        return EvalCounts(self.confusion + other.confusion)


def macro_f1(counts):
    """Mean per-class F1 over all classes; classes with undefined P or R score 0."""
    cm = counts.confusion if isinstance(counts, EvalCounts) else np.asarray(counts)
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0).astype(np.float64)
    true = cm.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred > 0, tp / pred, 0.0)
        recall = np.where(true > 0, tp / true, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return float(f1.mean())


def per_class_accuracy(counts):
    """Recall of each class with support; unsupported classes are left out."""
    cm = counts.confusion if isinstance(counts, EvalCounts) else np.asarray(counts)
    out = {}
    for k in range(cm.shape[0]):
        support = cm[k].sum()
        if support > 0:
            out[k] = float(cm[k, k] / support)
    return out


def total_accuracy(counts):
    cm = counts.confusion if isinstance(counts, EvalCounts) else np.asarray(counts)
    return float(np.trace(cm) / cm.sum())


def combined_prediction(fluent_probs, disfluent_probs):
    """Gate the disfluent head with the fluent/disfluent head.

    Where the fluent head's argmax is Fluent (column 0) the prediction is
    Fluent; otherwise it is the disfluent head's best non-Fluent class.
    A 4-column disfluent head (R, P, B, In) is used as is. Accepts single
    distributions or batches; returns an int or an int array.
    """
    f = np.asarray(fluent_probs, dtype=np.float64)
    d = np.asarray(disfluent_probs, dtype=np.float64)
    single = f.ndim == 1
    f, d = np.atleast_2d(f), np.atleast_2d(d)
    stutter = d[:, : int(Label.Fluent)]
    pred = np.where(
        f.argmax(axis=1) == 0, int(Label.Fluent), stutter.argmax(axis=1)
    ).astype(np.int64)
    return int(pred[0]) if single else pred


@dataclass
class RunReport:
    per_class_accuracy: dict
    total_accuracy: float
    macro_f1: float
    confusion: list
    n: int
    fold: object = None
    config_hash: str = ""
    coverage: float = 1.0
    skipped: int = 0
    partial: bool = False
    n_folds: int = 1

    @classmethod
    def from_counts(cls, counts, fold=None, config_hash="", skipped=0):
        total = counts.n + skipped
        return cls(
            per_class_accuracy={LABEL_NAMES[k]: v for k, v in per_class_accuracy(counts).items()},
            total_accuracy=total_accuracy(counts) if counts.n else 0.0,
            macro_f1=macro_f1(counts) if counts.n else 0.0,
            confusion=counts.confusion.tolist(),
            n=counts.n, fold=fold, config_hash=config_hash,
            coverage=counts.n / total if total else 0.0, skipped=skipped,
        )

    def minority_recall(self, majority="Fluent"):
        vals = [v for k, v in self.per_class_accuracy.items() if k != majority]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def average_reports(reports, expected=None):
    """Unweighted fold mean of the scalar metrics; confusion matrices are summed."""
    if not reports:
        raise ValueError("no completed folds to average")
    classes = sorted({k for r in reports for k in r.per_class_accuracy},
                     key=LABEL_NAMES.index)
    per_class = {}
    for k in classes:
        vals = [r.per_class_accuracy[k] for r in reports if k in r.per_class_accuracy]
        per_class[k] = _mean(vals)
    confusion = np.sum([np.asarray(r.confusion) for r in reports], axis=0)
    return RunReport(
        per_class_accuracy=per_class,
        total_accuracy=_mean([r.total_accuracy for r in reports]),
        macro_f1=_mean([r.macro_f1 for r in reports]),
        confusion=confusion.tolist(),
        n=int(sum(r.n for r in reports)),
        fold="average",
        config_hash=reports[0].config_hash,
        coverage=_mean([r.coverage for r in reports]),
        skipped=int(sum(r.skipped for r in reports)),
        partial=expected is not None and len(reports) < expected,
        n_folds=len(reports),
    )


def _mean(values):
    # fsum is correctly rounded, so the mean does not depend on fold order
    return math.fsum(values) / len(values)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def to_tensor_weights(weights):
    return None if weights is None else torch.as_tensor(np.asarray(weights), dtype=torch.float32)
