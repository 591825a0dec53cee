"""Feature extractors: configurable conv/dense stacks with batch
normalization, plus the softmax logit path used by the baseline CNN.

An extractor is declared as a list of layer specs and an input shape; it
checks the full shape chain at build time, draws its weights from a scaled
standard normal, and exposes a differentiable ``forward`` with train/eval
batch-norm semantics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: str = "same"


@dataclass
class BatchNorm:
    momentum: float = 0.1
    epsilon: float = 1e-5


@dataclass
class Relu:
    pass


@dataclass
class MaxPool:
    kernel: int


@dataclass
class Flatten:
    pass


@dataclass
class Dense:
    out_dim: int


_LAYER_TYPES = {"conv": Conv, "batchnorm": BatchNorm, "relu": Relu,
                "maxpool": MaxPool, "flatten": Flatten, "dense": Dense}


def layer_from_dict(entry):
    """Build a layer spec from a config dict like {"type": "conv", ...}."""
    entry = dict(entry)
    kind = entry.pop("type", None)
    cls = _LAYER_TYPES.get(kind)
    if cls is None:
        raise ValueError(f"unknown layer type {kind!r}")
    try:
        return cls(**entry)
    except TypeError as exc:
        raise ValueError(f"bad arguments for layer {kind!r}: {exc}") from None


def layer_to_dict(layer):
    out = {"type": next(k for k, v in _LAYER_TYPES.items() if isinstance(layer, v))}
    out.update(vars(layer))
    return out


class BatchNormState:
    """Mutable per-layer normalization state.

    Scale and shift train with the network; running mean and variance are
    exponential moving averages updated only in train mode, and eval mode
    reads exclusively from them.
    """

    def __init__(self, channels, momentum, epsilon):
        self.gamma = ad.parameter(np.ones(channels))
        self.beta = ad.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.epsilon = epsilon

    def forward(self, x, mode):
        axes, shape = ((0, 2, 3), (1, -1, 1, 1)) if x.values.ndim == 4 else ((0,), (-1,))
        if mode == "train":
            mu = ad.mean(x, axis=axes, keepdims=True)
            var = ad.mean(ad.square(x - mu), axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.values.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.values.reshape(-1)
        else:
            mu = ad.constant(self.running_mean.reshape(shape))
            var = ad.constant(self.running_var.reshape(shape))
        norm = (x - mu) / ad.sqrt(var + self.epsilon)
        return norm * ad.reshape(self.gamma, shape) + ad.reshape(self.beta, shape)


class Extractor:
    """A parameterized feature extractor f(.)."""

    def __init__(self, layers, input_shape, seed=0, init_scale=0.05,
                 bn_momentum=0.1, bn_epsilon=1e-5):
        self.layers = [layer_from_dict(e) if isinstance(e, dict) else e
                       for e in layers]
        self.input_shape = tuple(input_shape)
        self.init_scale = float(init_scale)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.params = {}
        self.bn_states = {}
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = self._build_layer(i, layer, shape, rng, bn_momentum, bn_epsilon)
        if len(shape) != 1:
            raise ValueError(
                f"extractor must end in a flat feature vector, got shape {shape}")
        self.output_dim = shape[0]

    def _build_layer(self, i, layer, shape, rng, bn_momentum, bn_epsilon):
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise ad.ShapeError("conv2d", shape)
            cin, h, w = shape
            wv = rng.standard_normal((layer.out_channels, cin, layer.kernel,
                                      layer.kernel)) * self.init_scale
            self.params[f"layer{i}.weight"] = ad.parameter(wv)
            self.params[f"layer{i}.bias"] = ad.parameter(np.zeros(layer.out_channels))
            oh, ow, _ = ad._conv_geometry(h, w, layer.kernel, layer.kernel,
                                          layer.stride, layer.padding)
            return (layer.out_channels, oh, ow)
        if isinstance(layer, BatchNorm):
            channels = shape[0]
            state = BatchNormState(channels, bn_momentum, bn_epsilon)
            self.bn_states[i] = state
            self.params[f"layer{i}.gamma"] = state.gamma
            self.params[f"layer{i}.beta"] = state.beta
            return shape
        if isinstance(layer, Relu):
            return shape
        if isinstance(layer, MaxPool):
            if len(shape) != 3 or shape[1] % layer.kernel or shape[2] % layer.kernel:
                raise ad.ShapeError("maxpool2d", shape, (layer.kernel, layer.kernel))
            return (shape[0], shape[1] // layer.kernel, shape[2] // layer.kernel)
        if isinstance(layer, Flatten):
            return (int(np.prod(shape)),)
        if isinstance(layer, Dense):
            if len(shape) != 1:
                raise ad.ShapeError("matmul", shape)
            wv = rng.standard_normal((shape[0], layer.out_dim)) * self.init_scale
            self.params[f"layer{i}.weight"] = ad.parameter(wv)
            self.params[f"layer{i}.bias"] = ad.parameter(np.zeros(layer.out_dim))
            return (layer.out_dim,)
        raise ValueError(f"unknown layer {layer!r}")

    def forward(self, batch, mode="eval"):
        """Features for a batch, shape (batch, output_dim), on the tape.

        ``batch`` may be an ndarray or a tape tensor (the latter lets
        attack objectives differentiate with respect to the input).
        """
        x = batch if isinstance(batch, ad.Tensor) else ad.constant(
            np.asarray(batch, dtype=np.float64))
        if x.shape[0] == 0:
            raise ValueError("empty batch")
        if tuple(x.shape[1:]) != self.input_shape:
            raise ad.ShapeError("extractor_input", x.shape, ("batch",) + self.input_shape)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                x = ad.conv2d(x, self.params[f"layer{i}.weight"],
                              stride=layer.stride, padding=layer.padding)
                x = x + ad.reshape(self.params[f"layer{i}.bias"], (1, -1, 1, 1))
            elif isinstance(layer, BatchNorm):
                x = self.bn_states[i].forward(x, mode)
            elif isinstance(layer, Relu):
                x = ad.relu(x)
            elif isinstance(layer, MaxPool):
                x = ad.maxpool2d(x, layer.kernel)
            elif isinstance(layer, Flatten):
                x = ad.reshape(x, (x.shape[0], -1))
            elif isinstance(layer, Dense):
                x = ad.matmul(x, self.params[f"layer{i}.weight"]) + \
                    self.params[f"layer{i}.bias"]
        return x

    def weight_parameters(self):
        """Conv and dense weight matrices (L2 regularization targets)."""
        return {name: t for name, t in self.params.items()
                if name.endswith(".weight")}

    def running_stats(self):
        out = {}
        for i, state in self.bn_states.items():
            out[f"layer{i}.running_mean"] = state.running_mean
            out[f"layer{i}.running_var"] = state.running_var
        return out

    def layer_dicts(self):
        return [layer_to_dict(layer) for layer in self.layers]


def mnist_extractor_layers(feature_dim=10, channels=(8, 16)):
    """The default image extractor: two strided 5x5 convs, each batch
    normalized, feeding a dense feature layer."""
    layers = []
    for ch in channels:
        layers += [Conv(ch, 5, stride=2), BatchNorm(), Relu()]
    layers += [Flatten(), Dense(feature_dim)]
    return layers


def toy_extractor_layers(hidden=16, feature_dim=2):
    """One-hidden-layer MLP for 2-D inputs."""
    return [Dense(hidden), Relu(), Dense(feature_dim)]


def softmax_probabilities(logits):
    """Softmax rows of a logit array (plain numpy, stable)."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def cnn_logits(extractor, batch, mode="eval"):
    """Class scores and softmax probabilities of the baseline CNN.

    The extractor's terminal dense layer must already emit one logit per
    class.
    """
    logits = extractor.forward(batch, mode=mode)
    return logits, softmax_probabilities(logits.values)
