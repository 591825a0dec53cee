"""Per-class RBF output layer: distances, decision rule, rejection, and the
two probabilistic output layers with their threshold reparameterizations.

A head computes one distance per class, d_k(x) = ||A_k^T f(x) + b_k||_p^p,
on top of an n-dimensional feature vector f(x).  The predicted class is the
argmin; with a rejection policy, an input whose smallest distance exceeds
the threshold T gets the negative label instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

# Verdict value for the negative (reject) class.
NEGATIVE = -1


@dataclass
class RbfHeadConfig:
    """Hyperparameters of the distance layer.

    ``mode`` is "identity" (A_k fixed to I, output dim l = n, only the
    per-class bias trains) or "lowrank" (A_k is a trainable n x l matrix,
    1 <= l <= n).  ``p`` selects the norm, 1 or 2.
    """
    classes: int
    feature_dim: int
    p: int = 1
    mode: str = "lowrank"
    l: int = 2

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError(f"norm order p must be 1 or 2, got {self.p}")
        if self.mode not in ("identity", "lowrank"):
            raise ValueError(f"unknown covariance mode {self.mode!r}")
        if self.mode == "identity":
            self.l = self.feature_dim
        if not 1 <= self.l <= self.feature_dim:
            raise ValueError(
                f"output dim l={self.l} must lie in 1..{self.feature_dim}")

    def to_dict(self):
        return {"classes": self.classes, "feature_dim": self.feature_dim,
                "p": self.p, "mode": self.mode, "l": self.l}


class RbfHead:
    """Trainable per-class distance units over a feature space."""

    def __init__(self, config: RbfHeadConfig, seed=0, init_scale=1.0):
        self.config = config
        c, n, l = config.classes, config.feature_dim, config.l
        rng = np.random.default_rng(seed)
        if config.mode == "lowrank":
            # One matmul for all classes: columns grouped per class.
            self.projection = ad.parameter(rng.standard_normal((n, c * l)) * init_scale)
        else:
            self.projection = None
        self.bias = ad.parameter(np.zeros((c, l)))

    def parameters(self):
        named = {"head.bias": self.bias}
        if self.projection is not None:
            named["head.projection"] = self.projection
        return named

    def output_vectors(self, features):
        """z_k = A_k^T f(x) + b_k for every class, shape (batch, c, l)."""
        if not isinstance(features, ad.Tensor):
            features = ad.constant(np.asarray(features, dtype=np.float64))
        c, n, l = self.config.classes, self.config.feature_dim, self.config.l
        if features.shape[-1] != n:
            raise ad.ShapeError("rbf_head", features.shape, (n,))
        batch = features.shape[0]
        if self.config.mode == "lowrank":
            z = ad.reshape(ad.matmul(features, self.projection), (batch, c, l))
        else:
            z = ad.reshape(features, (batch, 1, n))
        return z + self.bias

    def distances_t(self, features):
        """d_k = ||z_k||_p^p on the tape, shape (batch, c); always >= 0."""
        z = self.output_vectors(features)
        per_dim = ad.absolute(z) if self.config.p == 1 else ad.square(z)
        return ad.sum_(per_dim, axis=2)

    def distances(self, features):
        """Distances as a plain array (no gradient bookkeeping)."""
        return self.distances_t(np.asarray(features, dtype=np.float64)).values


@dataclass
class Decision:
    """Classifier verdict for one sample: a class index or NEGATIVE."""
    verdict: int
    distances: np.ndarray
    confidences: np.ndarray | None = None


@dataclass
class RejectionPolicy:
    """How a minimum distance is turned into accept-or-reject.

    kind "none" never rejects; "fixed" compares against an explicit
    threshold; "lambda-eval" derives the threshold from the evaluation-time
    margin reparameterization (always yielding a positive threshold).
    """
    kind: str = "none"
    threshold: float | None = None
    lambda_eval: float | None = None

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def fixed(cls, threshold):
        return cls("fixed", threshold=float(threshold))

    @classmethod
    def from_lambda(cls, lambda_eval):
        return cls("lambda-eval", threshold=threshold_from_lambda(lambda_eval),
                   lambda_eval=float(lambda_eval))

    def resolve(self):
        """The concrete threshold T, or None when rejection is off."""
        if self.kind == "none":
            return None
        if self.threshold is None:
            raise ValueError(f"policy kind {self.kind!r} has no threshold")
        return self.threshold

    def to_dict(self):
        return {"kind": self.kind, "threshold": self.threshold,
                "lambda_eval": self.lambda_eval}


def decide(d):
    """Class of smallest distance; ties broken toward the lowest index."""
    d = np.asarray(d)
    if d.size == 0:
        raise ValueError("decide: empty distance vector")
    return int(np.argmin(d)) if d.ndim == 1 else np.argmin(d, axis=-1)


def decide_with_reject(d, policy):
    """Verdicts under a rejection policy: NEGATIVE iff min_k d_k > T."""
    d = np.asarray(d)
    threshold = policy.resolve()
    if d.ndim == 1:
        verdict = decide(d)
        if threshold is not None and d[verdict] > threshold:
            verdict = NEGATIVE
        return Decision(verdict, d)
    verdicts = np.argmin(d, axis=-1)
    if threshold is not None:
        verdicts = np.where(d.min(axis=-1) > threshold, NEGATIVE, verdicts)
    return verdicts


def threshold_from_lambda(lambda_eval):
    """Closed-form rejection threshold T of the smooth-margin output layer.

    Algebraically T = -log((-1 + sqrt(1 + 4 e^L)) / (2 e^L)); rationalizing
    gives the cancellation-free form log((1 + sqrt(1 + 4 e^L)) / 2), and the
    asymptotes L/2 and e^L cover the floating-point tails.  T > 0 for every
    finite L.
    """
    lam = float(lambda_eval)
    if lam > 600.0:
        return 0.5 * lam + math.log1p(0.5 * math.exp(-0.5 * lam))
    if lam < -10.0:
        # Series in u = e^lam; below the cut this beats the direct form,
        # whose 1 + 4u term rounds badly once u approaches machine epsilon.
        u = math.exp(lam)
        return u * (1.0 - 1.5 * u + (10.0 / 3.0) * u * u)
    return math.log(0.5 * (1.0 + math.sqrt(1.0 + 4.0 * math.exp(lam))))


def lambda_from_threshold(threshold):
    """Inverse of :func:`threshold_from_lambda` for T > 0."""
    t = float(threshold)
    if t <= 0:
        raise ValueError(f"threshold must be positive, got {t}")
    # e^L = e^T (e^T - 1)  =>  L = 2T + log(1 - e^-T)
    return 2.0 * t + math.log1p(-math.exp(-t))


def softml_log_probs(d, lam):
    """Log of the unnormalized smooth-margin output layer, shape (..., c+1).

    Column k < c holds log p(y=k|x) = -d_k + softplus(lam - d_k)
    - sum_j softplus(lam - d_j); the final column is the negative-class
    output log p(y=c+1|x) = -sum_j softplus(lam - d_j).  The c+1 entries are
    each in (0,1) but do not sum to one.
    """
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    d = np.maximum(d, 0.0)                     # scores O_k = e^-d stay in (0,1]
    sp = np.logaddexp(0.0, lam - d)            # log(1 + e^(lam - d))
    total = sp.sum(axis=-1, keepdims=True)
    log_neg = -total
    log_classes = -d + sp + log_neg
    return np.concatenate([log_classes, log_neg], axis=-1)


def softml_probs(d, lam):
    """Unnormalized confidences of the smooth-margin layer, length c+1."""
    out = np.exp(softml_log_probs(d, lam))
    return out[0] if np.asarray(d).ndim == 1 else out


def lenet5_log_probs(d, lam):
    """Log of the normalized sum-of-scores output layer, shape (..., c+1).

    p(y=k|x) = e^{-d_k} / (e^{-lam} + sum_j e^{-d_j}) with the negative
    class taking the e^{-lam} slot, so the c+1 entries sum to one and the
    argmax is the negative class exactly when min_k d_k > lam.
    """
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    scores = np.concatenate([-d, np.full((d.shape[0], 1), -float(lam))], axis=-1)
    m = scores.max(axis=-1, keepdims=True)
    log_denom = m + np.log(np.exp(scores - m).sum(axis=-1, keepdims=True))
    return scores - log_denom


def lenet5_probs(d, lam):
    """Normalized confidences of the sum-of-scores layer, length c+1."""
    out = np.exp(lenet5_log_probs(d, lam))
    return out[0] if np.asarray(d).ndim == 1 else out
