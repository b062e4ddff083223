"""Small multi-stage convolutional feature extractor.

Each stage is a stride-2 3x3 convolution (+bias, relu) followed by
``blocks - 1`` stride-1 convolutions, so stage ``i`` halves the spatial
extent (ceil division).  Deliberately plain: no residual connections,
no normalization layers.  Outputs one H x W x C map per stage, shallow
to deep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .imageops import add_channel_bias, conv2d
from .tensor import Parameter, Tensor, relu

__all__ = ["BackboneConfig", "init_params", "backbone_forward", "uniform_fan_in"]


@dataclass(frozen=True)
class BackboneConfig:
    stages: int = 4
    channels: tuple[int, ...] = (8, 16, 32, 64)
    blocks: int = 1
    in_channels: int = 3

    def validate(self) -> None:
        if self.stages < 1 or self.blocks < 1:
            raise ConfigError(f"backbone needs stages >= 1 and blocks >= 1, got {self}")
        if len(self.channels) != self.stages:
            raise ConfigError(
                f"backbone channels list has {len(self.channels)} entries for {self.stages} stages"
            )


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Symmetric zero-mean init with standard deviation 1/sqrt(fan_in)."""
    bound = math.sqrt(3.0) / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: BackboneConfig, seed: int) -> dict[str, Parameter]:
    """Deterministic per-seed parameter dict; biases start at zero."""
    cfg.validate()
    return init_params_into(cfg, np.random.default_rng(seed), {}, prefix="backbone")


def init_params_into(
    cfg: BackboneConfig,
    rng: np.random.Generator,
    params: dict[str, Parameter],
    prefix: str = "backbone",
) -> dict[str, Parameter]:
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.channels):
        for b in range(cfg.blocks):
            src = cin if b == 0 else cout
            fan_in = 3 * 3 * src
            params[f"{prefix}.s{i}.b{b}.w"] = Parameter(
                f"{prefix}.s{i}.b{b}.w", uniform_fan_in(rng, (3, 3, src, cout), fan_in)
            )
            params[f"{prefix}.s{i}.b{b}.b"] = Parameter(
                f"{prefix}.s{i}.b{b}.b", np.zeros(cout)
            )
        cin = cout
    return params


def min_input_extent(stages: int) -> int:
    """Smallest H (or W) that keeps every stage output extent >= 2."""
    return 2 ** (stages + 1)


def backbone_forward(
    image: Tensor, cfg: BackboneConfig, params: dict[str, Parameter], prefix: str = "backbone"
) -> list[Tensor]:
    """Run all stages; returns per-stage feature maps, shallow to deep."""
    cfg.validate()
    if image.ndim != 3 or image.shape[2] != cfg.in_channels:
        raise DimensionError(
            f"backbone expects H x W x {cfg.in_channels} input, got shape {image.shape}"
        )
    h, w = image.shape[0], image.shape[1]
    need = min_input_extent(cfg.stages)
    if h < need or w < need:
        raise DimensionError(
            f"input {h}x{w} too small for {cfg.stages} halving stages; minimum is {need}x{need}"
        )
    maps: list[Tensor] = []
    x = image
    for i in range(cfg.stages):
        for b in range(cfg.blocks):
            stride = 2 if b == 0 else 1
            x = conv2d(x, params[f"{prefix}.s{i}.b{b}.w"], stride=stride, pad=1)
            x = add_channel_bias(x, params[f"{prefix}.s{i}.b{b}.b"])
            x = relu(x)
        maps.append(x)
    return maps
