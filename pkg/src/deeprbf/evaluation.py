"""Metrics and experiment protocols: accuracy under rejection, attack
suites with their summary statistics, confidence ratios, cross-model
transfer, threshold sweeps and calibration, decision-surface grids, and
feature/histogram exports.

Accuracy counts a rejected labeled sample as an error, so rejection always
trades accuracy; the confidence ratio works on log confidences throughout,
because adversarial confidences of rejecting models underflow any direct
representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rbf
from .attacks import AttackConfig, AttackGoal, run_attack
from .models import DeepRbfModel, SoftmaxModel
from .rbf import NEGATIVE, RejectionPolicy


def accuracy(model, dataset, policy=None):
    """Percent of samples whose verdict equals the label; NEGATIVE verdicts
    on labeled data count as errors."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    verdicts = model.verdicts(dataset.images, policy=policy)
    return 100.0 * float(np.mean(verdicts == dataset.labels))


def distortion_metrics(x, x_adv):
    """(RMSD, MAD, L-inf) between an input and its distorted version."""
    x, x_adv = np.asarray(x), np.asarray(x_adv)
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_adv.shape}")
    delta = x_adv - x
    return (float(np.sqrt(np.mean(delta ** 2))),
            float(np.mean(np.abs(delta))),
            float(np.max(np.abs(delta))))


def log_mean_exp(log_values):
    """log(mean(exp(v))) without leaving log space."""
    v = np.asarray(log_values, dtype=np.float64)
    m = v.max()
    if not np.isfinite(m):
        return m
    return float(m + np.log(np.mean(np.exp(v - m))))


def roc_from_logs(original_log_confidences, adversarial_log_confidences):
    """Ratio of mean confidences, mean(orig) / mean(adv), computed in log
    space; None when either side is empty."""
    if len(original_log_confidences) == 0 or len(adversarial_log_confidences) == 0:
        return None
    return math.exp(log_mean_exp(original_log_confidences)
                    - log_mean_exp(adversarial_log_confidences))


@dataclass
class SuiteSummary:
    """Aggregate statistics of one attack over one model."""
    attack: str
    mode: str
    samples: int
    success_rate: float               # percent of samples fooled at least once
    msps: float | None = None         # mean successful targets per sample
    rejected_rate: float | None = None  # untargeted only
    unfooled_rate: float | None = None  # untargeted only
    roc: float | None = None
    mean_rmsd: float | None = None
    mean_mad: float | None = None
    mean_linf: float | None = None

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "attack", "mode", "samples", "success_rate", "msps",
            "rejected_rate", "unfooled_rate", "roc", "mean_rmsd", "mean_mad",
            "mean_linf")}


def _summarize_distortions(records):
    succ = [r for r in records if r.success]
    if not succ:
        return None, None, None, None
    roc = roc_from_logs([r.log_confidence_original for r in succ],
                        [r.log_confidence_adversarial for r in succ])
    return (roc,
            float(np.mean([r.rmsd for r in succ])),
            float(np.mean([r.mad for r in succ])),
            float(np.mean([r.linf for r in succ])))


def targeted_suite(model, images, labels, attack_kind, classes=None,
                   config=None, progress=None):
    """Attack every sample toward every wrong class.

    Returns (records, summary): one record per (sample, target) in that
    order; success rate is the percent of samples fooled on at least one
    target and MSpS the mean number of fooled targets per sample, with
    confidence ratio and distortion means taken over successes only.
    """
    classes = classes or model.classes
    records, per_sample_hits = [], []
    for i, (x, y) in enumerate(zip(images, labels)):
        hits = 0
        for target in range(classes):
            if target == int(y):
                continue
            goal = AttackGoal("targeted", int(y), target=target)
            result = run_attack(attack_kind, model, x, goal, config)
            records.append((i, result))
            hits += int(result.success)
        per_sample_hits.append(hits)
        if progress:
            progress(i + 1, len(images))
    roc, rmsd, mad, linf = _summarize_distortions([r for _, r in records])
    summary = SuiteSummary(
        attack=attack_kind, mode="targeted", samples=len(per_sample_hits),
        success_rate=100.0 * float(np.mean([h > 0 for h in per_sample_hits])),
        msps=float(np.mean(per_sample_hits)),
        roc=roc, mean_rmsd=rmsd, mean_mad=mad, mean_linf=linf)
    return records, summary


def untargeted_suite(model, images, labels, attack_kind, config=None,
                     progress=None):
    """One untargeted attack per sample.

    The outcome of each sample is exactly one of fooled (non-rejected wrong
    class found), rejected (the attack only reached the negative class), or
    unfooled; the three percentages sum to 100.
    """
    records = []
    for i, (x, y) in enumerate(zip(images, labels)):
        goal = AttackGoal("untargeted", int(y))
        records.append((i, run_attack(attack_kind, model, x, goal, config)))
        if progress:
            progress(i + 1, len(images))
    results = [r for _, r in records]
    fooled = np.array([r.success for r in results])
    rejected = np.array([(not r.success) and r.rejected for r in results])
    unfooled = ~(fooled | rejected)
    roc, rmsd, mad, linf = _summarize_distortions(results)
    summary = SuiteSummary(
        attack=attack_kind, mode="untargeted", samples=len(results),
        success_rate=100.0 * float(fooled.mean()),
        rejected_rate=100.0 * float(rejected.mean()),
        unfooled_rate=100.0 * float(unfooled.mean()),
        roc=roc, mean_rmsd=rmsd, mean_mad=mad, mean_linf=linf)
    return records, summary


@dataclass
class TransferCell:
    source: str
    destination: str
    fooled_percent: float
    rejected_percent: float | None    # None for destinations that never reject
    count: int


def transfer_matrix(named_models, adversarial_sets):
    """Feed each source model's successful adversarials to every model.

    ``adversarial_sets`` maps source name -> (images, true_labels) of its
    successful attacks.  A destination cell reports the fraction it
    misclassifies without rejecting (fooled) and the fraction it rejects;
    softmax destinations have no rejection column.
    """
    cells = []
    for src_name, (images, labels) in adversarial_sets.items():
        for dst_name, dst_model in named_models.items():
            n = len(images)
            if n == 0:
                cells.append(TransferCell(src_name, dst_name, 0.0, None, 0))
                continue
            verdicts = np.asarray(dst_model.verdicts(np.asarray(images)))
            rejected = verdicts == NEGATIVE
            fooled = (~rejected) & (verdicts != np.asarray(labels))
            rejects = None if isinstance(dst_model, SoftmaxModel) \
                else 100.0 * float(rejected.mean())
            cells.append(TransferCell(src_name, dst_name,
                                      100.0 * float(fooled.mean()), rejects, n))
    return cells


def threshold_sweep(model, dataset, lambda_eval_grid):
    """Accuracy at each threshold reparameterization value.

    Precomputes argmin classes and minimum distances once, so the sweep is
    one comparison per grid point; larger values reject less, so the curve
    is non-decreasing and converges to the no-rejection accuracy.
    """
    d = model.distances(dataset.images)
    closest = d.argmin(axis=1)
    min_d = d.min(axis=1)
    correct = closest == dataset.labels
    out = []
    for lam in lambda_eval_grid:
        t = rbf.threshold_from_lambda(lam)
        out.append((float(lam), 100.0 * float(np.mean(correct & (min_d <= t)))))
    return out


class CalibrationError(ValueError):
    """The target accuracy exceeds what any threshold can reach."""


def calibrate_threshold(model, dataset, target_accuracy):
    """Smallest threshold T whose accuracy reaches the target.

    Accuracy is monotone non-decreasing in T, so bisection over the sorted
    per-sample minimum distances lands on the exact crossing.
    """
    d = model.distances(dataset.images)
    closest = d.argmin(axis=1)
    min_d = d.min(axis=1)
    correct = closest == dataset.labels
    best = 100.0 * float(correct.mean())
    if target_accuracy > best:
        raise CalibrationError(
            f"target accuracy {target_accuracy}% exceeds the no-rejection "
            f"accuracy {best:.2f}%")
    # candidate thresholds: minimum distances of correctly classified samples
    candidates = np.sort(min_d[correct])
    lo, hi = 0, candidates.size - 1

    def acc_at(t):
        return 100.0 * float(np.mean(correct & (min_d <= t)))

    if acc_at(candidates[0]) >= target_accuracy:
        return float(candidates[0])
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if acc_at(candidates[mid]) >= target_accuracy:
            hi = mid
        else:
            lo = mid
    return float(candidates[hi])


@dataclass
class SurfaceGrid:
    """Cellwise verdicts of a two-input model over a rectangle."""
    xs: np.ndarray
    ys: np.ndarray
    verdicts: np.ndarray        # (len(ys), len(xs)), NEGATIVE where rejected
    min_distance: np.ndarray | None


def surface_grid(model, extents, resolution, policy=None,
                 softmax_threshold=None):
    """Evaluate a 2-D-input model on a regular grid.

    ``extents`` is (xmin, xmax, ymin, ymax).  Distance models use their
    rejection policy; softmax models optionally reject where the largest
    probability falls below ``softmax_threshold``.
    """
    if tuple(getattr(model.extractor, "input_shape", ())) != (2,):
        raise ValueError("surface grids need a model with 2-vector inputs")
    xmin, xmax, ymin, ymax = extents
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymin, ymax, resolution)
    gx, gy = np.meshgrid(xs, ys)
    points = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    if isinstance(model, DeepRbfModel):
        d = model.distances(points)
        verdicts = rbf.decide_with_reject(d, policy or model.policy)
        min_d = d.min(axis=1).reshape(resolution, resolution)
    else:
        from .layers import softmax_probabilities
        probs = softmax_probabilities(model.logits(points))
        verdicts = probs.argmax(axis=1)
        if softmax_threshold is not None:
            verdicts = np.where(probs.max(axis=1) < softmax_threshold,
                                NEGATIVE, verdicts)
        min_d = None
    return SurfaceGrid(xs, ys, verdicts.reshape(resolution, resolution), min_d)


@dataclass
class ClassHistogram:
    """Green/red output histogram of one class's scalar unit."""
    class_index: int
    bin_edges: np.ndarray
    same_label_counts: np.ndarray     # samples whose label equals the class
    other_label_counts: np.ndarray


def export_diagnostics(model, dataset, bins=60):
    """Feature vectors plus, for one-dimensional-output heads, per-class
    green/red histograms of the scalar outputs z_k."""
    features = model.extractor.forward(dataset.images, mode="eval").values
    histograms = None
    if isinstance(model, DeepRbfModel):
        if model.head.config.l == 1:
            z = model.head.output_vectors(dataset.images
                                          if False else
                                          None) if False else None
        histograms = _class_histograms(model, dataset, features, bins) \
            if model.head.config.l == 1 else None
    return features, histograms


def _class_histograms(model, dataset, features, bins):
    z = model.head.output_vectors(features)().values if callable(
        model.head.output_vectors) is False else \
        model.head.output_vectors(features).values
    z = z[:, :, 0]                                  # (samples, classes)
    out = []
    for k in range(model.classes):
        column = z[:, k]
        edges = np.histogram_bin_edges(column, bins=bins)
        same = dataset.labels == k
        green, _ = np.histogram(column[same], bins=edges)
        red, _ = np.histogram(column[~same], bins=edges)
        out.append(ClassHistogram(k, edges, green, red))
    return out
