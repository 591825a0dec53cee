"""Complete classifiers: an extractor plus either the per-class distance
head (with optional rejection) or a plain softmax readout.

Both kinds expose the same evaluation surface — ``verdicts`` for decisions
(NEGATIVE included), ``log_confidences`` for the chosen-class confidence on
a log scale — so attacks, metrics and transfer studies treat them
uniformly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import rbf
from .layers import Extractor, softmax_probabilities
from .rbf import NEGATIVE, RbfHead, RbfHeadConfig, RejectionPolicy


class DeepRbfModel:
    """Extractor f(.) followed by per-class distance units.

    ``loss_kind`` selects which probabilistic output layer interprets the
    distances as confidences: the margin-trained models use the
    unnormalized smooth-margin layer, the sum-of-scores-trained models the
    normalized one.  ``policy`` is the rejection rule applied by
    ``verdicts``; replaceable after calibration.
    """

    kind = "deep-rbf"

    def __init__(self, extractor: Extractor, head: RbfHead, loss_kind="ml",
                 train_margin=550.0, policy=None):
        if extractor.output_dim != head.config.feature_dim:
            raise ad.ShapeError("deep_rbf_model", (extractor.output_dim,),
                                (head.config.feature_dim,))
        self.extractor = extractor
        self.head = head
        self.loss_kind = loss_kind
        self.train_margin = float(train_margin)
        self.policy = policy or RejectionPolicy.none()

    @property
    def classes(self):
        return self.head.config.classes

    def parameters(self):
        named = dict(self.extractor.params)
        named.update(self.head.parameters())
        return named

    def weight_parameters(self):
        named = dict(self.extractor.weight_parameters())
        if self.head.projection is not None:
            named["head.projection"] = self.head.projection
        return named

    def scores_t(self, batch, mode="eval"):
        """Distance matrix on the tape (used for training and attacks)."""
        return self.head.distances_t(self.extractor.forward(batch, mode=mode))

    def distances(self, batch, batch_size=512):
        """Distance matrix as a plain array, chunked to bound memory."""
        batch = np.asarray(batch, dtype=np.float64)
        rows = [self.scores_t(batch[i:i + batch_size]).values
                for i in range(0, batch.shape[0], batch_size)]
        return np.concatenate(rows, axis=0)

    def verdicts(self, batch, policy=None):
        """Per-sample class index or NEGATIVE under the rejection policy."""
        d = self.distances(batch)
        return rbf.decide_with_reject(d, policy or self.policy)

    def _effective_lambda(self, policy):
        """Margin parameter of the confidence layer matching the policy.

        For the normalized layer the threshold is the margin itself; for
        the unnormalized layer the threshold reparameterization is
        inverted.  Without rejection the training margin is used.
        """
        threshold = (policy or self.policy).resolve()
        if self.loss_kind in ("lenet5", "lenet5-mse"):
            return self.train_margin if threshold is None else threshold
        pol = policy or self.policy
        if pol.lambda_eval is not None:
            return pol.lambda_eval
        if threshold is None:
            return self.train_margin
        return rbf.lambda_from_threshold(threshold)

    def log_confidences(self, batch, policy=None):
        """Log confidence rows of length classes+1 (last = negative)."""
        d = self.distances(batch)
        lam = self._effective_lambda(policy)
        if self.loss_kind in ("lenet5", "lenet5-mse"):
            return rbf.lenet5_log_probs(d, lam)
        return rbf.softml_log_probs(d, lam)

    def config_dict(self):
        return {
            "kind": self.kind,
            "extractor": {
                "layers": self.extractor.layer_dicts(),
                "input_shape": list(self.extractor.input_shape),
                "init_scale": self.extractor.init_scale,
                "seed": self.extractor.seed,
            },
            "head": self.head.config.to_dict(),
            "loss_kind": self.loss_kind,
            "train_margin": self.train_margin,
        }


class SoftmaxModel:
    """Extractor ending in one logit per class, read through a softmax.

    ``confidence_threshold`` is only consulted when a caller explicitly
    asks for thresholded verdicts (the decision-surface baseline); plain
    evaluation never rejects.
    """

    kind = "cnn-softmax"

    def __init__(self, extractor: Extractor, confidence_threshold=None):
        self.extractor = extractor
        self.confidence_threshold = confidence_threshold
        self.policy = RejectionPolicy.none()

    @property
    def classes(self):
        return self.extractor.output_dim

    def parameters(self):
        return dict(self.extractor.params)

    def weight_parameters(self):
        return dict(self.extractor.weight_parameters())

    def scores_t(self, batch, mode="eval"):
        """Logits on the tape."""
        return self.extractor.forward(batch, mode=mode)

    def logits(self, batch, batch_size=512):
        batch = np.asarray(batch, dtype=np.float64)
        rows = [self.scores_t(batch[i:i + batch_size]).values
                for i in range(0, batch.shape[0], batch_size)]
        return np.concatenate(rows, axis=0)

    def verdicts(self, batch, policy=None, use_confidence_threshold=False):
        probs = softmax_probabilities(self.logits(batch))
        verdicts = probs.argmax(axis=1)
        if use_confidence_threshold and self.confidence_threshold is not None:
            verdicts = np.where(probs.max(axis=1) < self.confidence_threshold,
                                NEGATIVE, verdicts)
        return verdicts

    def log_confidences(self, batch, policy=None):
        """Log softmax rows, padded with a -inf negative column so the
        layout matches the rejecting models."""
        z = self.logits(batch)
        m = z.max(axis=1, keepdims=True)
        logp = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
        neg = np.full((z.shape[0], 1), -np.inf)
        return np.concatenate([logp, neg], axis=1)

    def config_dict(self):
        return {
            "kind": self.kind,
            "extractor": {
                "layers": self.extractor.layer_dicts(),
                "input_shape": list(self.extractor.input_shape),
                "init_scale": self.extractor.init_scale,
                "seed": self.extractor.seed,
            },
            "classes": self.classes,
        }


def model_from_config(cfg, seed=None):
    """Build a fresh (randomly initialized) model from a config dict."""
    ext_cfg = cfg["extractor"]
    extractor = Extractor(ext_cfg["layers"], ext_cfg["input_shape"],
                          seed=ext_cfg.get("seed", 0) if seed is None else seed,
                          init_scale=ext_cfg.get("init_scale", 0.05))
    if cfg["kind"] == "cnn-softmax":
        return SoftmaxModel(extractor)
    if cfg["kind"] == "deep-rbf":
        head_cfg = RbfHeadConfig(**cfg["head"])
        head = RbfHead(head_cfg, seed=extractor.seed + 1)
        return DeepRbfModel(extractor, head, loss_kind=cfg.get("loss_kind", "ml"),
                            train_margin=cfg.get("train_margin", 550.0))
    raise ValueError(f"unknown model kind {cfg['kind']!r}")
