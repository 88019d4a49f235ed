"""Siamese weight-shared encoder producing a five-stage feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

from . import ops
from .config import EncoderConfig
from .errors import ShapeError
from .nn import Network
from .tensor import Tensor

N_STAGES = 5


@dataclass
class FeaturePyramid:
    """``stages[i]`` holds the pair (F1, F2) of stage ``i + 1``."""

    stages: list[tuple[Tensor, Tensor]]

    def pair(self, stage: int) -> tuple[Tensor, Tensor]:
        return self.stages[stage - 1]

    def swapped(self) -> "FeaturePyramid":
        return FeaturePyramid([(b, a) for a, b in self.stages])


def init_encoder(net: Network, cfg: EncoderConfig) -> None:
    c_prev = cfg.input_channels
    for s, (width, n_convs) in enumerate(zip(cfg.stage_widths, cfg.convs_per_stage), start=1):
        for j in range(1, n_convs + 1):
            net.add_conv_bn(f"encoder/stage{s}/conv{j}", c_prev, width)
            c_prev = width


def encode(net: Network, cfg: EncoderConfig, x: Tensor) -> list[Tensor]:
    """Run one branch; returns the five stage outputs (pooling after stages 1-4)."""
    h, w = x.shape[-2:]
    if h % 16 or w % 16:
        raise ShapeError(f"input spatial size {h}x{w} must be divisible by 16")
    if x.shape[-3] != cfg.input_channels:
        raise ShapeError(f"expected {cfg.input_channels} input channels, got {x.shape[-3]}")
    feats = []
    for s, n_convs in enumerate(cfg.convs_per_stage, start=1):
        if s > 1:
            x = ops.maxpool2(x)
        for j in range(1, n_convs + 1):
            x = net.conv_bn_relu(f"encoder/stage{s}/conv{j}", x)
        feats.append(x)
    return feats


def encode_pair(net: Network, cfg: EncoderConfig, x1: Tensor, x2: Tensor) -> FeaturePyramid:
    if x1.shape != x2.shape:
        raise ShapeError(f"bitemporal inputs differ in shape: {x1.shape} vs {x2.shape}")
    f1 = encode(net, cfg, x1)
    f2 = encode(net, cfg, x2)
    return FeaturePyramid(list(zip(f1, f2)))
