"""General feature basis and dynamic 1x1 mask rendering."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import SubnetHead, apply_head, conv_init_, coord_channels
from .config import ModelConfig


@dataclass(eq=False)
class InstanceMask:
    logits: torch.Tensor  # [H_m, W_m]
    descriptor_id: int

    @property
    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


class MaskLearning(nn.Module):
    """Shared tower over every stage, fused at stage-1 resolution, with coordinates folded in."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tower = SubnetHead(cfg.feat_channels, cfg.head_channels, cfg.head_layers, cfg.norm)
        self.fold = nn.Conv2d(cfg.head_channels + 2, cfg.head_channels, 3, padding=1)
        self.basis = nn.Conv2d(cfg.head_channels, cfg.descriptor_dim, 1)
        conv_init_(self.fold)
        conv_init_(self.basis)

    def forward(self, pyramid) -> torch.Tensor:
        return general_features(self, pyramid)


def general_features(module: MaskLearning, pyramid) -> torch.Tensor:
    """Basis [B, C_B, H_1, W_1] at the stride-4 mask resolution."""
    size = pyramid[0].shape[-2:]
    fused = None
    for feat in pyramid:
        t = apply_head(module.tower, feat)
        if t.shape[-2:] != size:
            t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
        fused = t if fused is None else fused + t
    coords = coord_channels(size[0], size[1], fused).expand(fused.shape[0], -1, -1, -1)
    x = F.relu(module.fold(torch.cat([fused, coords], dim=1)))
    return module.basis(x)


def render_logits(vectors: torch.Tensor, basis: torch.Tensor) -> torch.Tensor:
    """[N, C] descriptors against one basis [C, H, W] -> [N, H, W] logits (1x1 dynamic conv)."""
    if vectors.shape[-1] != basis.shape[0]:
        raise ValueError(f"width mismatch: descriptor {vectors.shape[-1]} vs basis {basis.shape[0]}")
    return F.conv2d(basis[None], vectors[:, :, None, None])[0]


def render_mask(descriptor, basis: torch.Tensor) -> InstanceMask:
    logits = render_logits(descriptor.vector[None], basis)[0]
    return InstanceMask(logits, descriptor.id)


def dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    p = torch.sigmoid(logits).flatten(1)
    t = target.flatten(1).to(p.dtype)
    return (1 - (2 * (p * t).sum(1) + eps) / (p.sum(1) + t.sum(1) + eps)).sum()


def loss_mask(mask_logits: torch.Tensor, targets: torch.Tensor, reduction: str = "mean",
              dice_weight: float = 0.0) -> torch.Tensor:
    """Sum over descriptors of per-pixel BCE ([N, H, W] logits vs binary targets)."""
    targets = torch.as_tensor(targets, dtype=mask_logits.dtype, device=mask_logits.device)
    if mask_logits.shape != targets.shape:
        raise ValueError(
            f"resolution mismatch: {tuple(mask_logits.shape)} vs {tuple(targets.shape)}"
        )
    if mask_logits.shape[0] == 0:
        return mask_logits.sum()
    per = F.binary_cross_entropy_with_logits(mask_logits, targets, reduction="none")
    per = per.flatten(1).mean(1) if reduction == "mean" else per.flatten(1).sum(1)
    loss = per.sum()
    if dice_weight:
        loss = loss + dice_weight * dice_loss(mask_logits, targets)
    return loss
