"""Dense layers, normalization and the encoder/classifier pair."""

from __future__ import annotations

import copy
import logging
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from enum import StrEnum
from typing import Any, Self

import numpy as np

from .const import DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM, DEFAULT_LAYER_NORM_EPS
from .errors import TensorError
from .tensor import Tensor, as_tensor, matmul, relu

_LOGGER = logging.getLogger(__name__)


class Mode(StrEnum):
    """Forward mode of layers with batch-dependent behavior."""

    TRAIN = "train"
    EVAL = "eval"


class Module:
    """Base class for layers and networks.

    ``state_arrays`` lists live arrays in wire registration order; trainable
    parameters are the subset returned by ``parameters``.
    """

    training: bool = True

    def parameters(self) -> list[Tensor]:
        """Return trainable parameters in registration order."""
        return [p for child in self.children() for p in child.parameters()]

    def state_arrays(self) -> list[np.ndarray]:
        """Return every serialized array in registration order."""
        return [a for child in self.children() for a in child.state_arrays()]

    def children(self) -> list[Module]:
        """Return direct sub-modules in registration order."""
        return []

    def set_mode(self, mode: Mode) -> None:
        """Switch this module and all children to ``mode``."""
        self.training = mode is Mode.TRAIN
        for child in self.children():
            child.set_mode(mode)

    @contextmanager
    def mode(self, mode: Mode) -> Iterator[Self]:
        """Temporarily switch to ``mode``."""
        previous = Mode.TRAIN if self.training else Mode.EVAL
        self.set_mode(mode)
        try:
            yield self
        finally:
            self.set_mode(previous)

    @contextmanager
    def frozen(self) -> Iterator[Self]:
        """Temporarily stop parameters from receiving gradients."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for param in params:
            param.requires_grad = False
        try:
            yield self
        finally:
            for param, flag in zip(params, flags, strict=True):
                param.requires_grad = flag

    def clone(self) -> Self:
        """Return an independent deep copy."""
        return copy.deepcopy(self)

    def zero_grad(self) -> None:
        """Drop the gradients of every parameter."""
        for param in self.parameters():
            param.grad = None

    def __call__(self, x: Any) -> Tensor:
        return self.forward(as_tensor(x))

    def forward(self, x: Tensor) -> Tensor:
        """Run the forward pass."""
        raise NotImplementedError


def state_size(module: Module) -> int:
    """Return the number of serialized scalars."""
    return sum(a.size for a in module.state_arrays())


def parameter_count(module: Module) -> int:
    """Return the number of trainable scalars."""
    return sum(p.size for p in module.parameters())


def flatten_state(module: Module) -> np.ndarray:
    """Concatenate every serialized array in registration order."""
    arrays = module.state_arrays()
    if not arrays:
        return np.zeros(0)
    return np.concatenate([a.reshape(-1) for a in arrays])


def load_state(module: Module, values: np.ndarray) -> None:
    """Overwrite every serialized array in place from a flat vector."""
    arrays = module.state_arrays()
    expected = sum(a.size for a in arrays)
    if values.size != expected:
        raise TensorError(f"state has {expected} values, got {values.size}")
    offset = 0
    for array in arrays:
        array[...] = values[offset : offset + array.size].reshape(array.shape)
        offset += array.size


def flatten_parameters(module: Module) -> np.ndarray:
    """Concatenate trainable parameters in registration order."""
    return np.concatenate([p.data.reshape(-1) for p in module.parameters()])


def load_parameters(module: Module, values: np.ndarray) -> None:
    """Overwrite trainable parameters in place from a flat vector."""
    params = module.parameters()
    expected = sum(p.size for p in params)
    if values.size != expected:
        raise TensorError(f"module has {expected} parameters, got {values.size}")
    offset = 0
    for param in params:
        param.data[...] = values[offset : offset + param.size].reshape(param.shape)
        offset += param.size


class LinearLayer(Module):
    """Dense layer ``y = x W^T + b`` with weight of shape (out, in)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator | None = None,
    ) -> None:
        """Initialize with uniform fan-in scaled weights (zeros without an rng)."""
        if in_features <= 0 or out_features <= 0:
            raise TensorError("layer widths must be positive")
        if rng is None:
            weight = np.zeros((out_features, in_features))
            bias = np.zeros(out_features)
        else:
            bound = 1.0 / np.sqrt(in_features)
            weight = rng.uniform(-bound, bound, size=(out_features, in_features))
            bias = rng.uniform(-bound, bound, size=out_features)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def from_arrays(cls, weight: Any, bias: Any) -> LinearLayer:
        """Build a layer with explicit weight and bias."""
        weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
        layer = cls(weight.shape[1], weight.shape[0])
        load_state(layer, np.concatenate([weight.reshape(-1), np.ravel(bias)]))
        return layer

    @property
    def in_features(self) -> int:
        """Return the input width."""
        return int(self.weight.shape[1])

    @property
    def out_features(self) -> int:
        """Return the output width."""
        return int(self.weight.shape[0])

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state_arrays(self) -> list[np.ndarray]:
        return [self.weight.data, self.bias.data]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise TensorError(
                f"linear layer expects (b, {self.in_features}), got {x.shape}"
            )
        return matmul(x, self.weight.T) + self.bias


class BatchNorm1d(Module):
    """Per-feature batch normalization with exponential running statistics."""

    def __init__(
        self,
        num_features: int,
        momentum: float = DEFAULT_BN_MOMENTUM,
        eps: float = DEFAULT_BN_EPS,
    ) -> None:
        """Initialize with identity affine parameters and (0, 1) statistics."""
        if not 0 < momentum < 1:
            raise TensorError("batch-norm momentum must lie in (0, 1)")
        if eps <= 0:
            raise TensorError("batch-norm eps must be positive")
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def state_arrays(self) -> list[np.ndarray]:
        return [self.gamma.data, self.beta.data, self.running_mean, self.running_var]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise TensorError(
                f"batch norm expects (b, {self.num_features}), got {x.shape}"
            )
        if not self.training:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            return (x - self.running_mean) * scale * self.gamma + self.beta

        batch = x.shape[0]
        if batch < 2:
            raise TensorError("batch norm in train mode needs at least 2 samples")
        mean = x.mean(axis=0, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=0, keepdims=True)
        normalized = centered * (var + self.eps) ** -0.5
        self._update_running(x.data)
        return normalized * self.gamma + self.beta

    def _update_running(self, batch: np.ndarray) -> None:
        rho = self.momentum
        self.running_mean[...] = (1 - rho) * self.running_mean + rho * batch.mean(0)
        self.running_var[...] = (1 - rho) * self.running_var + rho * batch.var(
            0, ddof=1
        )


class LayerNorm(Module):
    """Per-sample normalization over the feature axis."""

    def __init__(self, num_features: int, eps: float = DEFAULT_LAYER_NORM_EPS) -> None:
        """Initialize with identity affine parameters."""
        self.num_features = num_features
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def state_arrays(self) -> list[np.ndarray]:
        return [self.gamma.data, self.beta.data]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise TensorError(
                f"layer norm expects (b, {self.num_features}), got {x.shape}"
            )
        mean = x.mean(axis=1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=1, keepdims=True)
        return centered * (var + self.eps) ** -0.5 * self.gamma + self.beta


class Dropout(Module):
    """Inverted dropout; the identity outside train mode."""

    def __init__(self, p: float, rng: np.random.Generator) -> None:
        """Initialize with drop probability ``p``."""
        if not 0 <= p < 1:
            raise TensorError("dropout probability must lie in [0, 1)")
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0:
            return x
        keep = self.rng.random(x.shape) >= self.p
        return x * (keep / (1.0 - self.p))


class MlpEncoder(Module):
    """Dense encoder with ReLU between layers and a linear output."""

    def __init__(self, layers: Sequence[LinearLayer]) -> None:
        """Initialize from consecutive dense layers."""
        if not layers:
            raise TensorError("encoder needs at least one layer")
        for first, second in zip(layers, layers[1:], strict=False):
            if first.out_features != second.in_features:
                raise TensorError("encoder layer widths do not chain")
        self.layers = list(layers)

    @classmethod
    def build(
        cls,
        in_dim: int,
        hidden: Sequence[int],
        latent_dim: int,
        rng: np.random.Generator,
    ) -> MlpEncoder:
        """Create a randomly initialized encoder ``in_dim -> hidden... -> latent``."""
        widths = [in_dim, *hidden, latent_dim]
        return cls(
            [LinearLayer(a, b, rng) for a, b in zip(widths, widths[1:], strict=False)]
        )

    @property
    def in_dim(self) -> int:
        """Return the input width k."""
        return self.layers[0].in_features

    @property
    def latent_dim(self) -> int:
        """Return the latent width p."""
        return self.layers[-1].out_features

    def children(self) -> list[Module]:
        return list(self.layers)

    def forward(self, x: Tensor) -> Tensor:
        out = x
        for index, layer in enumerate(self.layers):
            out = layer(out)
            if index < len(self.layers) - 1:
                out = relu(out)
        return out


class ClassifierHead(Module):
    """Batch normalization followed by a single dense layer."""

    def __init__(
        self,
        latent_dim: int,
        classes: int,
        rng: np.random.Generator | None = None,
        momentum: float = DEFAULT_BN_MOMENTUM,
        eps: float = DEFAULT_BN_EPS,
    ) -> None:
        """Initialize the head for ``classes`` labels over ``latent_dim`` features."""
        self.bn = BatchNorm1d(latent_dim, momentum=momentum, eps=eps)
        self.fc = LinearLayer(latent_dim, classes, rng)

    @property
    def latent_dim(self) -> int:
        """Return the input width p."""
        return self.bn.num_features

    @property
    def classes(self) -> int:
        """Return the class count c."""
        return self.fc.out_features

    def children(self) -> list[Module]:
        return [self.bn, self.fc]

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.bn(x))


def forward_encoder(encoder: MlpEncoder, x: Any) -> Tensor:
    """Encode a (b, k) batch into (b, p) latent vectors."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != encoder.in_dim:
        raise TensorError(f"encoder expects (b, {encoder.in_dim}), got {x.shape}")
    return encoder(x)


def forward_classifier(head: ClassifierHead, z: Any, mode: Mode) -> Tensor:
    """Classify (b, p) latent vectors, using batch or running statistics."""
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != head.latent_dim:
        raise TensorError(f"head expects (b, {head.latent_dim}), got {z.shape}")
    with head.mode(mode):
        return head(z)
