"""Deeply supervised feature retrieval with dual modern-Hopfield layers.

The absolute difference of a stage's feature pair is the state pattern
(query); each branch's raw feature is a set of stored patterns. Both
retrievals share one pair of projections, are summed and squashed through a
sigmoid. The channel-mean of that map is the spatial mask handed to the
decoder and the input of a 1x1 head producing 2-class intermediate logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import ops
from .errors import ShapeError
from .nn import Network
from .tensor import Tensor

DSFR_STAGES = (4, 5)


@dataclass
class HopfieldParams:
    w_d: Tensor  # [c, d] projects the state pattern
    w_s: Tensor  # [c, d] projects the stored patterns
    beta: float


@dataclass
class DsfrOutput:
    retrieved_map: Tensor  # [(n,) 1, h, w], values in (0, 1)
    intermediate_map: Tensor  # [(n,) 2, h, w] logits
    retrieved_features: Tensor  # [(n,) d, h, w] sigmoid of the summed retrievals
    attention: tuple[Tensor, Tensor]  # row-stochastic [(n,) hw, hw] for j = 1, 2


def init_dsfr(net: Network, stage: int, channels: int, proj_dim: int) -> None:
    net.add_matrix(f"dsfr{stage}/w_d", channels, proj_dim)
    net.add_matrix(f"dsfr{stage}/w_s", channels, proj_dim)
    net.add_conv(f"dsfr{stage}/head", 1, 2, 1)


def hopfield_params(net: Network, stage: int, beta: float) -> HopfieldParams:
    return HopfieldParams(net.params[f"dsfr{stage}/w_d"], net.params[f"dsfr{stage}/w_s"], beta)


def hopfield_retrieve(
    state: Tensor, stored: Tensor, hp: HopfieldParams, return_attention: bool = False
):
    """One Hopfield update: ``softmax(beta * S W_d W_s^T Y^T) Y W_s``.

    ``state`` and ``stored`` are ``[n, c]`` (or batched ``[b, n, c]``) with
    positions as rows. Each output row is a convex combination of the
    projected stored rows.
    """
    if state.shape[-1] != stored.shape[-1] or state.shape[:-2] != stored.shape[:-2]:
        raise ShapeError(f"state {state.shape} and stored {stored.shape} patterns do not conform")
    if hp.w_d.shape[0] != state.shape[-1] or hp.w_s.shape != hp.w_d.shape:
        raise ShapeError(f"projections {hp.w_d.shape}/{hp.w_s.shape} do not match {state.shape[-1]} channels")
    query = ops.matmul(state, hp.w_d)
    keys = ops.matmul(stored, hp.w_s)
    axes = tuple(range(keys.ndim - 2)) + (keys.ndim - 1, keys.ndim - 2)
    scores = ops.matmul(query, ops.transpose(keys, axes))
    attn = ops.softmax_rows(ops.mul(scores, hp.beta))
    out = ops.matmul(attn, keys)
    return (out, attn) if return_attention else out


def dsfr_forward(net: Network, stage: int, f1: Tensor, f2: Tensor, beta: float, hp: Optional[HopfieldParams] = None) -> DsfrOutput:
    if f1.shape != f2.shape:
        raise ShapeError(f"dsfr feature pair differs in shape: {f1.shape} vs {f2.shape}")
    hp = hp or hopfield_params(net, stage, beta)
    h, w = f1.shape[-2:]
    state = ops.reshape_matrix(ops.abs_diff(f1, f2))
    r1, a1 = hopfield_retrieve(state, ops.reshape_matrix(f1), hp, return_attention=True)
    r2, a2 = hopfield_retrieve(state, ops.reshape_matrix(f2), hp, return_attention=True)
    merged = ops.sigmoid(ops.add(r1, r2))
    features = ops.matrix_to_map(merged, h, w)
    mask = ops.channel_mean(features)
    logits = net.conv(f"dsfr{stage}/head", mask)
    return DsfrOutput(mask, logits, features, (a1, a2))
