"""Per-stage semantic classification, the descriptor field, and original-descriptor selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import SubnetHead, apply_head, conv_init_, coord_channels
from .config import ModelConfig

EPS = 1e-12

ORIGINAL = "original"
MINED = "mined"


@dataclass(eq=False)
class InstanceDescriptor:
    vector: torch.Tensor  # [C_D]
    stage: int  # 1..5
    location: tuple[int, int]
    class_id: int
    confidence: float
    provenance: str = ORIGINAL
    id: int = 0
    source_id: int | None = None
    score: float | None = None  # key-pixel score for mined descriptors

    @property
    def is_original(self) -> bool:
        return self.provenance == ORIGINAL


@dataclass
class DescriptorSet:
    items: list[InstanceDescriptor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def n_ori(self) -> int:
        return sum(d.is_original for d in self.items)

    @property
    def n_mined(self) -> int:
        return len(self.items) - self.n_ori

    @property
    def ids(self) -> list[int]:
        return [d.id for d in self.items]

    def vectors(self) -> torch.Tensor:
        return torch.stack([d.vector for d in self.items])


class SemanticsPerceiving(nn.Module):
    """Shared tower feeding a C_P-way classifier and a coordinate-aware descriptor branch."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tower = SubnetHead(cfg.feat_channels, cfg.head_channels, cfg.head_layers, cfg.norm)
        self.cls = nn.Conv2d(cfg.head_channels, cfg.num_outputs, 3, padding=1)
        self.desc = nn.Conv2d(cfg.head_channels + 2, cfg.descriptor_dim, 3, padding=1)
        conv_init_(self.desc)
        nn.init.normal_(self.cls.weight, std=0.01)
        # background logit chosen so each foreground class starts near p = 0.01
        with torch.no_grad():
            self.cls.bias.zero_()
            self.cls.bias[0] = math.log(max(100.0 - cfg.num_classes, 1.0))

    def forward(self, pyramid):
        logits, fields = [], []
        for feat in pyramid:
            t = apply_head(self.tower, feat)
            logits.append(self.cls(t))
            coords = coord_channels(t.shape[-2], t.shape[-1], t).expand(t.shape[0], -1, -1, -1)
            fields.append(self.desc(torch.cat([t, coords], dim=1)))
        return logits, fields


def perceive(module: SemanticsPerceiving, pyramid) -> list[torch.Tensor]:
    """Per-stage class probabilities [B, C_P, H_s, W_s] (softmax over channels)."""
    logits, _ = module(pyramid)
    return [F.softmax(z, dim=1) for z in logits]


def extract_descriptor_field(module: SemanticsPerceiving, pyramid) -> list[torch.Tensor]:
    _, fields = module(pyramid)
    return fields


def cross_entropy(P: torch.Tensor, G: torch.Tensor, reduction: str = "sum",
                  eps: float = EPS) -> torch.Tensor:
    """-sum_i sum_j G_ij log P_ij over a channel-first map ``[C, ...]``.

    ``reduction="mean"`` divides by the number of pixels (numel / C).
    """
    if P.shape != G.shape:
        raise ValueError(f"shape mismatch: P {tuple(P.shape)} vs G {tuple(G.shape)}")
    total = -(G * torch.log(P.clamp(min=eps))).sum()
    if reduction == "mean":
        return total / (P.numel() // P.shape[0])
    return total


def loss_perceiving(maps, targets, reduction: str = "mean") -> torch.Tensor:
    """Sum over the five stages of the (per-stage normalized) cross-entropy."""
    if len(maps) != len(targets):
        raise ValueError(f"stage-count mismatch: {len(maps)} maps vs {len(targets)} targets")
    return sum(cross_entropy(P, G, reduction) for P, G in zip(maps, targets))


def local_peaks(score: torch.Tensor, threshold: float) -> list[tuple[int, int]]:
    """Cells >= threshold that dominate their 3x3 neighborhood.

    Equal neighbors are resolved lexicographically: a cell must be strictly
    greater than equal-valued neighbors that precede it in (row, col) order,
    so a plateau keeps only its first cell.
    """
    s = score.detach()
    h, w = s.shape
    padded = F.pad(s[None, None], (1, 1, 1, 1), value=-math.inf)[0, 0]
    keep = s >= threshold
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            if (dr, dc) < (0, 0):
                keep &= s > nb
            else:
                keep &= s >= nb
    return [tuple(rc) for rc in torch.nonzero(keep).tolist()]


def select_original_descriptors(maps, fields, tau_conf: float, n_cap: int) -> DescriptorSet:
    """Confident local maxima of the foreground probability across all stages of one image.

    ``maps[s]`` is [C_P, H_s, W_s] probabilities, ``fields[s]`` is [C_D, H_s, W_s].
    """
    candidates = []
    for s, (probs, fld) in enumerate(zip(maps, fields), start=1):
        fg = probs.detach()[1:]
        if fg.shape[0] == 0:
            continue
        conf, cls = fg.max(dim=0)
        for r, c in local_peaks(conf, tau_conf):
            candidates.append((-float(conf[r, c]), s, r, c, int(cls[r, c]) + 1))
    candidates.sort()
    out = DescriptorSet()
    for i, (neg_conf, s, r, c, cls_id) in enumerate(candidates[:n_cap]):
        out.items.append(InstanceDescriptor(
            vector=fields[s - 1][:, r, c], stage=s, location=(r, c), class_id=cls_id,
            confidence=-neg_conf, provenance=ORIGINAL, id=i,
        ))
    return out
