"""Comprehensive-fusion decoder and the plain-concatenation ablation."""

from __future__ import annotations

from typing import Optional

from . import ops
from .config import DecoderConfig, EncoderConfig
from .encoder import N_STAGES, FeaturePyramid
from .errors import ShapeError
from .nn import Network
from .tensor import Tensor


def init_decoder(net: Network, enc: EncoderConfig, dec: DecoderConfig) -> None:
    widths = enc.stage_widths
    for i in range(N_STAGES, 0, -1):
        c = widths[i - 1]
        deeper = widths[i] if i < N_STAGES else 0
        if dec.fusion == "cf":
            net.add_conv_bn(f"decoder/cf{i}/f1", 2 * c, c)
            net.add_conv_bn(f"decoder/cf{i}/f2", c + deeper, c)
        else:
            net.add_conv_bn(f"decoder/concat{i}/f", 2 * c + deeper, c)
    net.add_conv("decoder/head", widths[0], 2, 1)


def _check_mask(mask: Optional[Tensor], like: Tensor) -> None:
    if mask is not None and mask.shape[-2:] != like.shape[-2:]:
        raise ShapeError(f"mask spatial dims {mask.shape[-2:]} differ from features {like.shape[-2:]}")


def cf_block(net: Network, stage: int, f1: Tensor, f2: Tensor, mask: Optional[Tensor] = None, upsampled: Optional[Tensor] = None) -> Tensor:
    """``f2(Concat(f1(Concat(F1, F2)) * mask, up))``.

    A missing mask acts as all-ones; a missing deeper feature (stage 5)
    drops the second concatenation operand.
    """
    _check_mask(mask, f1)
    y = net.conv_bn_relu(f"decoder/cf{stage}/f1", ops.concat_channels(f1, f2))
    if mask is not None:
        y = ops.mul(y, mask)
    if upsampled is not None:
        y = ops.concat_channels(y, upsampled)
    return net.conv_bn_relu(f"decoder/cf{stage}/f2", y)


def concat_block(net: Network, stage: int, f1: Tensor, f2: Tensor, mask: Optional[Tensor] = None, upsampled: Optional[Tensor] = None) -> Tensor:
    """Single conv over ``Concat(Concat(F1, F2) * mask, up)``."""
    _check_mask(mask, f1)
    y = ops.concat_channels(f1, f2)
    if mask is not None:
        y = ops.mul(y, mask)
    if upsampled is not None:
        y = ops.concat_channels(y, upsampled)
    return net.conv_bn_relu(f"decoder/concat{stage}/f", y)


def decode(net: Network, dec: DecoderConfig, pyramid: FeaturePyramid, masks: dict[int, Tensor]) -> Tensor:
    """Fuse deep-to-shallow and return 2-class logits at input resolution.

    ``masks`` maps stage index to a single-channel retrieval mask; absent
    stages are unmasked.
    """
    block = cf_block if dec.fusion == "cf" else concat_block
    up = None
    fused = None
    for i in range(N_STAGES, 0, -1):
        f1, f2 = pyramid.pair(i)
        fused = block(net, i, f1, f2, masks.get(i), up)
        if i > 1:
            up = ops.upsample2x(fused, dec.upsample)
    return net.conv("decoder/head", fused)
