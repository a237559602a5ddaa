from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import Backbone
from .config import ModelConfig
from .excavating import ObjectExcavating
from .masks import MaskLearning
from .perceiving import SemanticsPerceiving
from .purifying import AffinityHead


@dataclass
class Features:
    pyramid: list[torch.Tensor]
    logits: list[torch.Tensor]  # per stage [B, C_P, H_s, W_s]
    fields: list[torch.Tensor]  # per stage [B, C_D, H_s, W_s]
    basis: torch.Tensor  # [B, C_B, H_1, W_1]

    def image(self, b: int):
        """Per-image views: (stage features, probabilities, fields, basis)."""
        return ([p[b] for p in self.pyramid],
                [torch.softmax(z[b], dim=0) for z in self.logits],
                [f[b] for f in self.fields],
                self.basis[b])


class PEPModel(nn.Module):
    """Backbone plus the four subnetworks; disabled mechanisms own no parameters."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.perceiving = SemanticsPerceiving(cfg)
        self.excavating = ObjectExcavating(cfg) if cfg.enable_excavating else None
        self.purifying = AffinityHead(cfg) if cfg.enable_purifying else None
        self.masks = MaskLearning(cfg)

    def features(self, images: torch.Tensor) -> Features:
        pyramid = self.backbone(images)
        logits, fields = self.perceiving(pyramid)
        basis = self.masks(pyramid)
        return Features(pyramid, logits, fields, basis)
