"""Miniature five-stage pyramid encoder and the shared 3x3 conv towers."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import NUM_STAGES, STRIDES, ModelConfig

FeaturePyramid = list  # list of 5 tensors [B, C_feat, H_s, W_s], stage 1 first


class ShapeError(ValueError):
    pass


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "gn":
        groups = math.gcd(channels, 8)
        while groups > 1 and channels // groups < 2:
            groups //= 2
        return nn.GroupNorm(groups, channels)
    return nn.Identity()


def conv_init_(conv: nn.Conv2d) -> None:
    # fan-in scaled normal
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1] // conv.groups
    nn.init.normal_(conv.weight, std=math.sqrt(2.0 / fan_in))
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def coord_channels(height: int, width: int, like: torch.Tensor) -> torch.Tensor:
    """Two channels [2, H, W]: row and column coordinates mapped to [-1, 1]."""
    ys = torch.linspace(-1.0, 1.0, height, dtype=like.dtype, device=like.device)
    xs = torch.linspace(-1.0, 1.0, width, dtype=like.dtype, device=like.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gy, gx])


def normalized_coord(index: int, size: int) -> float:
    """Scalar version of coord_channels for one grid index."""
    if size <= 1:
        return -1.0
    return -1.0 + 2.0 * index / (size - 1)


class SubnetHead(nn.Module):
    """Stack of 3x3 conv (+ norm) + ReLU layers; spatial shape preserved."""

    def __init__(self, in_channels: int, width: int, num_layers: int = 4, norm: str = "gn"):
        super().__init__()
        self.in_channels = in_channels
        self.width = width
        layers = []
        c = in_channels
        for _ in range(num_layers):
            conv = nn.Conv2d(c, width, 3, padding=1)
            conv_init_(conv)
            layers += [conv, _norm(norm, width), nn.ReLU(inplace=False)]
            c = width
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


def apply_head(head: SubnetHead, stage_feature: torch.Tensor) -> torch.Tensor:
    if stage_feature.dim() != 4:
        raise ShapeError(f"expected [B, C, H, W], got {tuple(stage_feature.shape)}")
    if stage_feature.shape[1] != head.in_channels:
        raise ShapeError(
            f"channel mismatch: head expects {head.in_channels}, got {stage_feature.shape[1]}"
        )
    return head(stage_feature)


class _Down(nn.Module):
    def __init__(self, cin: int, cout: int, norm: str):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm1 = _norm(norm, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _norm(norm, cout)
        conv_init_(self.conv1)
        conv_init_(self.conv2)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class Backbone(nn.Module):
    """Strided-conv encoder with top-down lateral fusion; stage s has stride 2**(s+1)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.encoder_widths
        self.in_channels = cfg.in_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, w[0], 3, stride=2, padding=1), _norm(cfg.norm, w[0]), nn.ReLU()
        )
        conv_init_(self.stem[0])
        cins = [w[0]] + list(w[:-1])
        self.down = nn.ModuleList(_Down(ci, co, cfg.norm) for ci, co in zip(cins, w))
        self.lateral = nn.ModuleList(nn.Conv2d(c, cfg.feat_channels, 1) for c in w)
        self.output = nn.ModuleList(
            nn.Conv2d(cfg.feat_channels, cfg.feat_channels, 3, padding=1) for _ in w
        )
        for conv in [*self.lateral, *self.output]:
            conv_init_(conv)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        return extract_pyramid(self, images)


def extract_pyramid(backbone: Backbone, images: torch.Tensor) -> FeaturePyramid:
    if images.dim() != 4:
        raise ShapeError(f"images must be [B, C, H, W], got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"image size {h}x{w} is not divisible by 32")
    if images.shape[1] == 1:
        images = images.expand(-1, 3, -1, -1)
    elif images.shape[1] != 3:
        raise ShapeError(f"expected 1 or 3 input channels, got {images.shape[1]}")

    x = backbone.stem(images)
    encoded = []
    for block in backbone.down:
        x = block(x)
        encoded.append(x)

    laterals = [lat(e) for lat, e in zip(backbone.lateral, encoded)]
    fused = [None] * NUM_STAGES
    fused[-1] = laterals[-1]
    for s in range(NUM_STAGES - 2, -1, -1):
        up = F.interpolate(fused[s + 1], size=laterals[s].shape[-2:], mode="nearest")
        fused[s] = laterals[s] + up
    return [conv(f) for conv, f in zip(backbone.output, fused)]


def stage_sizes(image_size: int) -> list[int]:
    return [-(-image_size // s) for s in STRIDES]
