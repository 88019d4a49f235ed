"""Full change-detection network: encoder, two DSFR modules, fusion decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .config import RunConfig
from .decoder import decode, init_decoder
from .dsfr import DSFR_STAGES, DsfrOutput, dsfr_forward, init_dsfr
from .encoder import FeaturePyramid, encode_pair, init_encoder
from .nn import Network
from .tensor import Tensor, as_tensor


@dataclass
class ForwardOutput:
    logits: Tensor  # [n, 2, h, w]
    dsfr: dict[int, DsfrOutput]  # empty when retrieval is disabled
    pyramid: FeaturePyramid


class DsferNet(Network):
    def __init__(self, cfg: RunConfig, seed: Optional[int] = None):
        super().__init__(cfg.loop.seed if seed is None else seed)
        self.cfg = cfg
        init_encoder(self, cfg.encoder)
        if cfg.dsfr.enabled:
            for stage in DSFR_STAGES:
                init_dsfr(self, stage, cfg.encoder.stage_widths[stage - 1], cfg.dsfr.proj_dim)
        init_decoder(self, cfg.encoder, cfg.decoder)

    def forward(self, x1, x2) -> ForwardOutput:
        x1, x2 = as_tensor(x1), as_tensor(x2)
        pyramid = encode_pair(self, self.cfg.encoder, x1, x2)
        retrieved: dict[int, DsfrOutput] = {}
        if self.cfg.dsfr.enabled:
            beta = self.cfg.dsfr.effective_beta
            for stage in DSFR_STAGES:
                f1, f2 = pyramid.pair(stage)
                retrieved[stage] = dsfr_forward(self, stage, f1, f2, beta)
        masks = {s: out.retrieved_map for s, out in retrieved.items()}
        logits = decode(self, self.cfg.decoder, pyramid, masks)
        return ForwardOutput(logits, retrieved, pyramid)

    __call__ = forward
