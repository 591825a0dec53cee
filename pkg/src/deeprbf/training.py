"""Optimization loop and model persistence.

Training is fully deterministic for a fixed seed: epoch shuffles, noise
draws and parameter updates all derive from one seeded generator.  Noise is
redrawn every epoch and applies only to training inputs; validation and
test evaluation always see clean data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import LossSpec, batch_loss
from .models import DeepRbfModel, SoftmaxModel, model_from_config
from .rbf import NEGATIVE

CHECKPOINT_FORMAT_VERSION = "1"


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    noise_std: float = 0.0
    weight_decay: float = 0.0
    loss: LossSpec = field(default_factory=LossSpec)
    validation_fraction: float = 5000 / 60000
    shuffle_split: bool = False

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise std must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)

    def to_dict(self):
        out = {k: getattr(self, k) for k in
               ("learning_rate", "batch_size", "epochs", "seed", "noise_std",
                "weight_decay", "validation_fraction", "shuffle_split")}
        out["loss"] = self.loss.to_dict()
        return out


def inject_noise(batch, sigma, rng):
    """Additive isotropic Gaussian noise, sigma >= 0; no clipping."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return batch
    return batch + rng.normal(0.0, sigma, size=batch.shape)


class Adam:
    """Standard first/second-moment adaptive optimizer with bias correction."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self, grads):
        """One in-place update from a GradientMap.

        Raises :class:`DivergenceError` on non-finite gradients; parameters
        are untouched in that case.
        """
        gs = [grads[p] for p in self.params]
        for i, g in enumerate(gs):
            if not np.all(np.isfinite(g)):
                raise DivergenceError(
                    f"non-finite gradient in parameter {i} at step {self.t + 1}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, gs):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.values -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


def weight_decay_term(weight_params, coefficient):
    """coefficient * sum of squared entries over weight matrices only."""
    total = None
    for w in weight_params:
        s = ad.sum_(ad.square(w))
        total = s if total is None else total + s
    if total is None:
        return ad.constant(0.0)
    return total * float(coefficient)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    best_state: dict
    final_state: dict
    history: list
    best_epoch: int
    aborted: bool = False


def _plain_accuracy(model, images, labels, batch_size=512):
    """No-rejection accuracy in percent (the validation metric)."""
    if isinstance(model, SoftmaxModel):
        pred = model.logits(images, batch_size).argmax(axis=1)
    else:
        pred = model.distances(images, batch_size).argmin(axis=1)
    return 100.0 * float(np.mean(pred == labels))


def capture_state(model):
    """Snapshot every parameter and running statistic as float64 arrays."""
    state = {name: t.values.copy() for name, t in model.parameters().items()}
    for name, arr in model.extractor.running_stats().items():
        state["stats." + name] = arr.copy()
    return state


def restore_state(model, state):
    for name, t in model.parameters().items():
        t.values[:] = state[name]
    for i, bn in model.extractor.bn_states.items():
        bn.running_mean[:] = state[f"stats.layer{i}.running_mean"]
        bn.running_var[:] = state[f"stats.layer{i}.running_var"]


def train(model, train_ds, val_ds, config: TrainConfig, log=None):
    """Minibatch training with per-epoch validation.

    Returns the best-validation state, the final state, and the per-epoch
    history.  On divergence the loop aborts and flags the result, keeping
    the last finite state.
    """
    rng = np.random.default_rng(config.seed)
    params = list(model.parameters().values())
    optimizer = Adam(params, learning_rate=config.learning_rate)
    weights = list(model.weight_parameters().values())
    n = len(train_ds)
    history = []
    best = (float("-inf"), None, -1)
    aborted = False

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        noisy = inject_noise(train_ds.images, config.noise_std, rng)
        epoch_loss, seen = 0.0, 0
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                scores = model.scores_t(noisy[idx], mode="train")
                loss = batch_loss(config.loss, scores, train_ds.labels[idx])
                if config.weight_decay > 0:
                    loss = loss + weight_decay_term(weights, config.weight_decay)
                if not np.isfinite(loss.values):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                optimizer.step(ad.backward(loss))
                epoch_loss += loss.item() * idx.size
                seen += idx.size
        except DivergenceError as exc:
            if log:
                log(f"aborting: {exc}")
            aborted = True
            break
        val_acc = _plain_accuracy(model, val_ds.images, val_ds.labels)
        record = EpochRecord(epoch, epoch_loss / seen, val_acc)
        history.append(record)
        if log:
            log(f"epoch {epoch}: loss {record.train_loss:.6g} "
                f"val accuracy {val_acc:.2f}%")
        if val_acc > best[0]:
            best = (val_acc, capture_state(model), epoch)

    final_state = capture_state(model)
    best_state = best[1] if best[1] is not None else final_state
    return TrainResult(best_state, final_state, history,
                       best_epoch=best[2], aborted=aborted)


# ---------------------------------------------------------------------------
# Checkpoints: a JSON manifest plus one blob file of named little-endian
# float32 arrays.
# ---------------------------------------------------------------------------

def save_checkpoint(path_prefix, model, state=None, train_config=None,
                    history=None, seed=None, epoch=None, extra=None):
    """Write ``<prefix>.json`` and ``<prefix>.bin``.

    Weights are stored as little-endian float32; the manifest carries the
    architecture, loss spec, training provenance and the blob index.
    """
    state = state if state is not None else capture_state(model)
    prefix = str(path_prefix)
    index = {}
    offset = 0
    with open(prefix + ".bin", "wb") as f:
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f4")
            index[name] = {"offset": offset, "shape": list(arr.shape)}
            f.write(arr.tobytes())
            offset += arr.nbytes
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": model.config_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "seed": seed,
        "epoch": epoch,
        "history": ([{"epoch": r.epoch, "train_loss": r.train_loss,
                      "val_accuracy": r.val_accuracy} for r in history]
                    if history else None),
        "blob_file": prefix.rsplit("/", 1)[-1] + ".bin",
        "blobs": index,
    }
    if extra:
        manifest.update(extra)
    with open(prefix + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return prefix + ".json"


def load_checkpoint(manifest_path):
    """Rebuild a model from a checkpoint; returns (model, manifest)."""
    manifest_path = str(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {manifest.get('format_version')!r}")
    blob_path = manifest_path.rsplit("/", 1)
    blob_path = (blob_path[0] + "/" if len(blob_path) == 2 else "") + manifest["blob_file"]
    with open(blob_path, "rb") as f:
        blob = f.read()
    state = {}
    for name, entry in manifest["blobs"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count,
                            offset=entry["offset"]).reshape(shape)
        state[name] = arr.astype(np.float64)
    model = model_from_config(manifest["model"])
    restore_state(model, state)
    return model, manifest
