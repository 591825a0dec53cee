"""Training objectives over per-class distances (or logits, for the softmax
baseline).

The margin losses take a distance matrix d of shape (batch, classes) living
on the autodiff tape, an integer label vector, and a margin ``lam`` > 0.
Labeled rows contribute their correct-class distance plus a penalty pushing
every wrong class's distance past the margin; rows labeled NEGATIVE carry
only the push-everything-out penalty and are accepted only through
``batch_loss``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rbf import NEGATIVE

LOSS_KINDS = ("ml", "softml", "lenet5", "lenet5-mse", "cross-entropy")


@dataclass
class LossSpec:
    """Which objective to train with, and its margin."""
    kind: str = "ml"
    margin: float = 550.0
    reduction: str = "mean"     # minibatch reduction for the margin losses

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind in ("ml", "softml", "lenet5") and not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")

    @property
    def needs_distances(self):
        return self.kind != "cross-entropy"

    def to_dict(self):
        return {"kind": self.kind, "margin": self.margin, "reduction": self.reduction}


def _check_labels(y, classes, where):
    y = np.asarray(y, dtype=np.intp)
    if y.ndim != 1:
        raise ValueError(f"{where}: labels must be a vector")
    if np.any(y < 0):
        raise ValueError(f"{where}: negative-class labels are not accepted here; "
                         "route them through batch_loss")
    if np.any(y >= classes):
        raise ValueError(f"{where}: label out of range 0..{classes - 1}")
    return y


def _wrong_class_mask(y, classes):
    mask = np.ones((y.size, classes))
    mask[np.arange(y.size), y] = 0.0
    return ad.constant(mask)


def _reduce(per_sample, reduction):
    total = ad.sum_(per_sample)
    if reduction == "mean":
        return total * (1.0 / per_sample.shape[0])
    return total


def ml_loss(d, y, lam, reduction="sum"):
    """Correct-class distance plus hinge penalties on every wrong class:
    sum_i [ d_{y_i} + sum_{j != y_i} max(0, lam - d_j) ].
    """
    y = _check_labels(y, d.shape[1], "ml_loss")
    mask = _wrong_class_mask(y, d.shape[1])
    penalties = ad.sum_(ad.hinge(lam - d) * mask, axis=1)
    return _reduce(ad.take_per_row(d, y) + penalties, reduction)


def softml_loss(d, y, lam, reduction="sum"):
    """The smooth variant: softplus replaces the hinge, making the loss the
    negative log-likelihood of the unnormalized smooth-margin output layer.
    """
    y = _check_labels(y, d.shape[1], "softml_loss")
    mask = _wrong_class_mask(y, d.shape[1])
    penalties = ad.sum_(ad.softplus(lam - d) * mask, axis=1)
    return _reduce(ad.take_per_row(d, y) + penalties, reduction)


def negative_loss(d, lam, reduction="sum"):
    """Penalty for negative samples: push every class's distance past the
    margin, sum_i sum_j max(0, lam - d_j).  Zero iff all distances >= lam.
    """
    return _reduce(ad.sum_(ad.hinge(lam - d), axis=1), reduction)


def lenet5_loss(d, y, lam):
    """(1/N) sum_i [ d_{y_i} + log(e^-lam + sum_j e^-d_j) ].

    The log term is a log-sum-exp over the negated distances with an extra
    constant -lam slot, so only the smallest distance inside the margin
    draws significant gradient.
    """
    y = _check_labels(y, d.shape[1], "lenet5_loss")
    margin_column = ad.constant(np.full((d.shape[0], 1), -float(lam)))
    lse = ad.logsumexp(ad.concat([margin_column, -d], axis=1), axis=1)
    return _reduce(ad.take_per_row(d, y) + lse, "mean")


def lenet5_mse_loss(d, y):
    """(1/N) sum_i d_{y_i}: the fixed-parameter-vector objective."""
    y = _check_labels(y, d.shape[1], "lenet5_mse_loss")
    return _reduce(ad.take_per_row(d, y), "mean")


def cross_entropy(logits, y):
    """Mean negative log softmax probability of the correct class."""
    y = _check_labels(y, logits.shape[1], "cross_entropy")
    lse = ad.logsumexp(logits, axis=1)
    return _reduce(lse - ad.take_per_row(logits, y), "mean")


def batch_loss(spec: LossSpec, scores, y):
    """Loss of a possibly mixed batch.

    ``scores`` is the distance matrix (or logit matrix for cross-entropy)
    on the tape.  Rows labeled NEGATIVE contribute the push-out penalty;
    the rest take the configured objective.  Both parts share the batch
    reduction so a mixed minibatch stays one objective.
    """
    y = np.asarray(y, dtype=np.intp)
    neg = y == NEGATIVE
    if spec.kind == "cross-entropy":
        if np.any(neg):
            raise ValueError("cross-entropy has no negative-class term")
        return cross_entropy(scores, y)

    parts = []
    if np.any(~neg):
        rows = np.flatnonzero(~neg)
        sub = scores if rows.size == y.size else ad.take_rows(scores, rows)
        parts.append(_labeled_sum(spec, sub, y[rows]))
    if np.any(neg):
        rows = np.flatnonzero(neg)
        parts.append(negative_loss(ad.take_rows(scores, rows), spec.margin,
                                   reduction="sum"))
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    if spec.reduction == "mean":
        total = total * (1.0 / y.size)
    return total


def _labeled_sum(spec, d, y):
    """Sum (not mean) of the configured objective over labeled rows."""
    if spec.kind == "ml":
        return ml_loss(d, y, spec.margin, reduction="sum")
    if spec.kind == "softml":
        return softml_loss(d, y, spec.margin, reduction="sum")
    if spec.kind == "lenet5":
        return lenet5_loss(d, y, spec.margin) * float(d.shape[0])
    if spec.kind == "lenet5-mse":
        return lenet5_mse_loss(d, y) * float(d.shape[0])
    raise ValueError(f"unsupported loss kind {spec.kind!r}")
