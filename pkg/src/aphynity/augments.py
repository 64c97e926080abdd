"""Data-driven residual dynamics.

Two architectures cover the two state layouts: an MLP for flat vector
states and a small shape-preserving ConvNet for two-channel grid fields.
Both map a batch of states to a batch of state derivatives of the same
shape.  Weights start uniform in ``(-s, s)`` with ``s = 1/sqrt(fan_in)``;
biases start at zero, batch-norm at identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParamSet, Tensor

__all__ = ["MlpSpec", "ConvNetSpec", "MlpAugmentation", "ConvNetAugmentation",
           "make_augmentation"]


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int = 2
    hidden: int = 200
    depth: int = 3  # hidden layers
    out_dim: int = 2

    def to_dict(self) -> dict:
        return {"kind": "mlp", "in_dim": self.in_dim, "hidden": self.hidden,
                "depth": self.depth, "out_dim": self.out_dim}


@dataclass(frozen=True)
class ConvNetSpec:
    in_channels: int = 2
    hidden_channels: int = 16
    out_channels: int = 2
    padding: str = "circular"  # "circular" for periodic systems, "zero" otherwise

    def to_dict(self) -> dict:
        return {"kind": "convnet", "in_channels": self.in_channels,
                "hidden_channels": self.hidden_channels,
                "out_channels": self.out_channels, "padding": self.padding}


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


class MlpAugmentation:
    """ReLU MLP residual model on (B, in_dim) states, linear output layer."""

    def __init__(self, spec: MlpSpec, seed: int = 0):
        self.spec = spec
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        dims = [spec.in_dim] + [spec.hidden] * spec.depth + [spec.out_dim]
        self._layers = []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = self.params.add(f"w{i}", _uniform_fan_in(rng, (n_in, n_out), n_in))
            b = self.params.add(f"b{i}", np.zeros(n_out))
            self._layers.append((w, b))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected (B, {self.spec.in_dim}) state batch, got {x.shape}")
        h = x
        for w, b in self._layers[:-1]:
            h = dc.relu(dc.affine(h, w, b))
        w, b = self._layers[-1]
        return dc.affine(h, w, b)


class ConvNetAugmentation:
    """conv-bn-relu x2 then conv, all 3x3 and shape preserving."""

    def __init__(self, spec: ConvNetSpec, seed: int = 0):
        if spec.padding not in ("zero", "circular"):
            raise ValueError(f"padding must be 'zero' or 'circular', got {spec.padding!r}")
        self.spec = spec
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        chans = [spec.in_channels, spec.hidden_channels, spec.hidden_channels,
                 spec.out_channels]
        self._convs = []
        for i, (c_in, c_out) in enumerate(zip(chans[:-1], chans[1:])):
            k = self.params.add(f"k{i}", _uniform_fan_in(rng, (c_out, c_in, 3, 3), c_in * 9))
            b = self.params.add(f"c{i}", np.zeros(c_out))
            self._convs.append((k, b))
        self._norms = []
        for i in (0, 1):
            g = self.params.add(f"g{i}", np.ones(spec.hidden_channels))
            s = self.params.add(f"s{i}", np.zeros(spec.hidden_channels))
            self._norms.append((g, s))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected (B, {self.spec.in_channels}, H, W) state batch, got {x.shape}")
        h = x
        for (k, b), (g, s) in zip(self._convs[:2], self._norms):
            h = dc.conv2d(h, k, b, padding=self.spec.padding)
            h = dc.relu(dc.batchnorm2d(h, g, s))
        k, b = self._convs[2]
        return dc.conv2d(h, k, b, padding=self.spec.padding)


def make_augmentation(spec_dict: dict, seed: int = 0):
    """Build an augmentation from its serialized spec."""
    kind = spec_dict.get("kind")
    if kind == "mlp":
        spec = MlpSpec(**{k: v for k, v in spec_dict.items() if k != "kind"})
        return MlpAugmentation(spec, seed=seed)
    if kind == "convnet":
        spec = ConvNetSpec(**{k: v for k, v in spec_dict.items() if k != "kind"})
        return ConvNetAugmentation(spec, seed=seed)
    raise ValueError(f"unknown augmentation kind {kind!r}")
