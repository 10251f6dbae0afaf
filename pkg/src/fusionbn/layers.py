"""Network building blocks: conv/dense/pool layers, batch normalization
with dual (source/target) running statistics, and the two toy heads.

Each layer exposes two forward paths. `forward_train` builds autodiff
graph nodes (batch-statistics normalization, running-average updates).
`forward_eval` is plain numpy and takes a `bn_apply(state, x)` callable so
that the caller chooses the test-time normalization rule without this
module knowing about adaptation policies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DegenerateBatchError
from .seeding import derive_rng

Array = np.ndarray
BnApply = Callable[["BatchNormState", Array], Array]


# ---------------------------------------------------------------------------
# batch-normalization state


@dataclass
class BatchNormState:
    """Affine parameters plus source and target running statistics.

    `source_mean/var` are exponential moving averages written during
    training. `target_mean/var` start at (0, 1) and are written only by an
    accumulation pass over unlabeled data, never by training.
    """

    gamma: Array
    alpha: Array
    source_mean: Array
    source_var: Array
    target_mean: Array
    target_var: Array
    eps: float = 1e-5
    momentum: float = 0.1
    target_steps: int = 0

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=np.float32),
            alpha=np.zeros(channels, dtype=np.float32),
            source_mean=np.zeros(channels, dtype=np.float64),
            source_var=np.ones(channels, dtype=np.float64),
            target_mean=np.zeros(channels, dtype=np.float64),
            target_var=np.ones(channels, dtype=np.float64),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def validate(self) -> None:
        if self.eps <= 0:
            raise ContractError(f"epsilon must be positive, got {self.eps}")
        if not 0 < self.momentum <= 1:
            raise ContractError(f"momentum must be in (0, 1], got {self.momentum}")
        if (self.source_var < 0).any() or (self.target_var < 0).any():
            raise ContractError("running variances must be non-negative")

    def clone(self) -> "BatchNormState":
        return replace(
            self,
            gamma=self.gamma.copy(),
            alpha=self.alpha.copy(),
            source_mean=self.source_mean.copy(),
            source_var=self.source_var.copy(),
            target_mean=self.target_mean.copy(),
            target_var=self.target_var.copy(),
        )

    def reset_target(self) -> None:
        self.target_mean = np.zeros_like(self.target_mean)
        self.target_var = np.ones_like(self.target_var)
        self.target_steps = 0


def standardize(x: Array, mean: Array, var: Array, eps: float) -> Array:
    """(x - mean) / sqrt(var + eps) per channel, computed in float64."""
    xd = np.asarray(x, dtype=np.float64)
    return (xd - mean[None, :, None, None]) / np.sqrt(var + eps)[None, :, None, None]


def affine(z: Array, state: BatchNormState, out_dtype) -> Array:
    g = state.gamma.astype(np.float64)
    a = state.alpha.astype(np.float64)
    return (g[None, :, None, None] * z + a[None, :, None, None]).astype(out_dtype)


def bn_forward_train(x: Array, state: BatchNormState) -> Array:
    """Normalize with this batch's moments and fold them into the source
    running averages: M <- (1-m) M + m batch_mean, V likewise."""
    mean, var = T.channel_moments(x)  # raises DegenerateBatchError when unusable
    z = standardize(x, mean, var, state.eps)
    out = affine(z, state, np.asarray(x).dtype)
    m = state.momentum
    state.source_mean = (1.0 - m) * state.source_mean + m * mean
    state.source_var = (1.0 - m) * state.source_var + m * var
    return out


def bn_forward_source(x: Array, state: BatchNormState) -> Array:
    """Inference with the source running statistics; state is untouched."""
    z = standardize(x, state.source_mean, state.source_var, state.eps)
    return affine(z, state, np.asarray(x).dtype)


# ---------------------------------------------------------------------------
# layers


class Conv:
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        ksize: int = 3,
        stride: int = 1,
        padding: int = 1,
        bias: bool = False,
    ):
        self.stride = stride
        self.padding = padding
        std = np.sqrt(2.0 / (in_channels * ksize * ksize))
        self.weight = T.parameter(
            (rng.standard_normal((out_channels, in_channels, ksize, ksize)) * std).astype(
                np.float32
            )
        )
        self.bias = T.parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward_train(self, x: T.Var) -> T.Var:
        return T.conv2d(x, self.weight, self.stride, self.padding,
                        bias=self.bias)

    def forward_eval(self, x: Array, bn_apply: BnApply) -> Array:
        b = self.bias.value if self.bias is not None else None
        return T.conv2d_array(x, self.weight.value, self.stride, self.padding, bias=b)

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def decayed_params(self):
        return [self.weight]


class BatchNorm:
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.state = BatchNormState.create(channels, eps=eps, momentum=momentum)
        self._gamma = T.parameter(self.state.gamma)
        self._alpha = T.parameter(self.state.alpha)

    def forward_train(self, x: T.Var) -> T.Var:
        out, mean, var = T.batchnorm_train(x, self._gamma, self._alpha, self.state.eps)
        m = self.state.momentum
        self.state.source_mean = (1.0 - m) * self.state.source_mean + m * mean
        self.state.source_var = (1.0 - m) * self.state.source_var + m * var
        return out

    def forward_eval(self, x: Array, bn_apply: BnApply) -> Array:
        return bn_apply(self.state, x)

    def params(self):
        return [self._gamma, self._alpha]

    def decayed_params(self):
        return []


class ReLU:
    def forward_train(self, x: T.Var) -> T.Var:
        return T.relu(x)

    def forward_eval(self, x: Array, bn_apply: BnApply) -> Array:
        return np.maximum(x, 0)

    def params(self):
        return []

    def decayed_params(self):
        return []


class MaxPool2(ReLU):
    def forward_train(self, x: T.Var) -> T.Var:
        return T.maxpool2(x)

    def forward_eval(self, x: Array, bn_apply: BnApply) -> Array:
        return T.maxpool2_array(x)[0]


class GlobalAvgPool(ReLU):
    def forward_train(self, x: T.Var) -> T.Var:
        return T.mean_spatial(x)

    def forward_eval(self, x: Array, bn_apply: BnApply) -> Array:
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)


class Dense:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / in_features)
        self.weight = T.parameter(
            (rng.standard_normal((in_features, out_features)) * std).astype(np.float32)
        )
        self.bias = T.parameter(np.zeros(out_features, dtype=np.float32))

    def forward_train(self, x: T.Var) -> T.Var:
        return T.add_rowvec(T.matmul(x, self.weight), self.bias)

    def forward_eval(self, x: Array, bn_apply: BnApply) -> Array:
        return x @ self.weight.value + self.bias.value[None, :]

    def params(self):
        return [self.weight, self.bias]

    def decayed_params(self):
        return [self.weight]


class PixelHead:
    """1x1 conv over the final feature map plus bilinear upsample back to
    the input resolution; the miniature dense-prediction head."""

    def __init__(self, in_channels: int, out_channels: int, out_size: int, rng):
        std = np.sqrt(2.0 / in_channels)
        self.weight = T.parameter(
            (rng.standard_normal((out_channels, in_channels)) * std).astype(np.float32)
        )
        self.bias = T.parameter(np.zeros(out_channels, dtype=np.float32))
        self.out_size = out_size

    def forward_train(self, x: T.Var) -> T.Var:
        y = T.conv1x1(x, self.weight, self.bias)
        return T.upsample_bilinear(y, self.out_size, self.out_size)

    def forward_eval(self, x: Array, bn_apply: BnApply) -> Array:
        y = np.einsum("nchw,fc->nfhw", x, self.weight.value, optimize=True)
        y += self.bias.value[None, :, None, None]
        return T.upsample_bilinear_array(y, self.out_size, self.out_size)

    def params(self):
        return [self.weight, self.bias]

    def decayed_params(self):
        return [self.weight]


# ---------------------------------------------------------------------------
# network description and assembly


TASK_CLASSIFICATION = "classification"
TASK_DENSE = "dense-prediction"


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of the toy backbone: conv-BN-ReLU blocks with max-pool
    between them, then a task head (dense on pooled features, or a
    pixel head for dense prediction)."""

    task: str = TASK_CLASSIFICATION
    in_channels: int = 3
    num_classes: int = 2
    channels: tuple = (16, 32, 64)
    input_size: int = 32

    def validate(self) -> None:
        if self.task not in (TASK_CLASSIFICATION, TASK_DENSE):
            raise ConfigurationError(f"unknown task kind: {self.task!r}")
        if not self.channels:
            raise ConfigurationError("network needs at least one conv block")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        down = 2 ** (len(self.channels) - 1)
        if self.input_size % down:
            raise ConfigurationError(
                f"input size {self.input_size} not divisible by pooling factor {down}"
            )


class Model:
    """An ordered stack of layers built from a NetworkSpec.

    Invariant by construction: every conv is immediately followed by a
    batch-normalization layer except the task head (test-time statistic
    adaptation has no effect otherwise).
    """

    def __init__(self, spec: NetworkSpec, layers: list):
        self.spec = spec
        self.layers = layers

    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params()]

    def decayed_params(self) -> list:
        return [p for layer in self.layers for p in layer.decayed_params()]

    def bn_states(self) -> list[BatchNormState]:
        return [l.state for l in self.layers if isinstance(l, BatchNorm)]

    def forward_train(self, x: Array) -> T.Var:
        node = T.Var(np.ascontiguousarray(x, dtype=np.float32))
        for layer in self.layers:
            node = layer.forward_train(node)
        return node

    def forward_eval(self, x: Array, bn_apply: BnApply) -> Array:
        out = np.ascontiguousarray(x, dtype=np.float32)
        for layer in self.layers:
            out = layer.forward_eval(out, bn_apply)
        return out

    def predict_proba(self, x: Array, bn_apply: BnApply) -> Array:
        """Class probabilities [N,K] or foreground probabilities [N,1,H,W]."""
        logits = self.forward_eval(x, bn_apply)
        if self.spec.task == TASK_CLASSIFICATION:
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-logits))

    def clone_for_adaptation(self) -> "Model":
        """Copy sharing parameters but owning fresh BN states, so a
        protocol run never mutates the trained model."""
        clone = Model(self.spec, list(self.layers))
        new_layers = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                twin = BatchNorm.__new__(BatchNorm)
                twin.state = layer.state.clone()
                twin._gamma = layer._gamma
                twin._alpha = layer._alpha
                new_layers.append(twin)
            else:
                new_layers.append(layer)
        clone.layers = new_layers
        return clone


def build_model(spec: NetworkSpec, seed: int) -> Model:
    spec.validate()
    rng = derive_rng(seed, "init")
    layers: list = []
    prev = spec.in_channels
    for i, ch in enumerate(spec.channels):
        layers.append(Conv(prev, ch, rng))
        layers.append(BatchNorm(ch))
        layers.append(ReLU())
        if i < len(spec.channels) - 1:
            layers.append(MaxPool2())
        prev = ch
    if spec.task == TASK_CLASSIFICATION:
        layers.append(GlobalAvgPool())
        layers.append(Dense(prev, spec.num_classes, rng))
    else:
        layers.append(PixelHead(prev, 1, spec.input_size, rng))
    return Model(spec, layers)


def source_apply(state: BatchNormState, x: Array) -> Array:
    """The vanilla inference rule: source running statistics."""
    return bn_forward_source(x, state)
