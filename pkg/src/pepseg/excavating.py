"""Object excavation: conditional center detection around each original descriptor,
key-pixel extraction, and minting of mined descriptors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import conv_init_, coord_channels, normalized_coord
from .config import ModelConfig
from .losses import binary_cross_entropy, softmax_cross_entropy
from .perceiving import MINED, InstanceDescriptor, local_peaks
from .supervision import Window, window_for


@dataclass(eq=False)
class CenterMap:
    logits: torch.Tensor  # [h_w, w_w]
    window: Window
    source_id: int
    stage: int

    @property
    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    @property
    def window_origin(self) -> tuple[int, int]:
        return self.window.row0, self.window.col0


@dataclass(frozen=True)
class KeyPixel:
    location: tuple[int, int]
    score: float
    source_id: int


def _tap_validity(h: int, w: int, like: torch.Tensor) -> torch.Tensor:
    """[9, H, W]: 1 where 3x3 tap k of a padding-1 conv reads an in-bounds pixel."""
    ones = torch.ones(1, 1, h, w, dtype=like.dtype, device=like.device)
    padded = F.pad(ones, (1, 1, 1, 1))
    taps = [padded[0, 0, i:i + h, j:j + w] for i in range(3) for j in range(3)]
    return torch.stack(taps)


class ObjectExcavating(nn.Module):
    """Center-map head conditioned on a descriptor, plus the minting and key-pixel classifier layers.

    The first conv sees [stage feature, coordinates, descriptor, source coordinates]
    with the last two broadcast over the map. Because the broadcast part is spatially
    constant, its contribution is computed per tap rather than by materializing the
    concatenated tensor; :meth:`first_layer_reference` is the literal version.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = cfg.excavate_hidden
        self.cond_dim = cfg.descriptor_dim + 2
        self.conv1 = nn.Conv2d(cfg.feat_channels + 2, hidden, 3, padding=1)
        self.cond_weight = nn.Parameter(torch.empty(hidden, self.cond_dim, 3, 3))
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 1, 3, padding=1)
        fan_in = (cfg.feat_channels + 2 + self.cond_dim) * 9
        nn.init.normal_(self.conv1.weight, std=math.sqrt(2.0 / fan_in))
        nn.init.normal_(self.cond_weight, std=math.sqrt(2.0 / fan_in))
        nn.init.zeros_(self.conv1.bias)
        conv_init_(self.conv2)
        nn.init.normal_(self.out.weight, std=0.01)
        nn.init.constant_(self.out.bias, -math.log(99.0))

        d = cfg.descriptor_dim
        self.mint = nn.Sequential(nn.Linear(d + 2, d), nn.ReLU(), nn.Linear(d, d))
        self.classifier = nn.Linear(d, cfg.num_outputs)
        # key pixels are object candidates by construction, so start from a uniform class prior
        nn.init.normal_(self.classifier.weight, std=0.01)
        nn.init.zeros_(self.classifier.bias)

    def _conditions(self, vectors: torch.Tensor, locations, grid) -> torch.Tensor:
        coords = torch.tensor(
            [[normalized_coord(r, grid[0]), normalized_coord(c, grid[1])] for r, c in locations],
            dtype=vectors.dtype, device=vectors.device,
        )
        return torch.cat([vectors, coords], dim=1)

    def first_layer(self, feat: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """feat [C, H, W], cond [N, C_D+2] -> pre-activation [N, hidden, H, W]."""
        h, w = feat.shape[-2:]
        x = torch.cat([feat, coord_channels(h, w, feat)], dim=0)[None]
        base = self.conv1(x)
        taps = torch.einsum("ock,nc->nok", self.cond_weight.flatten(2), cond)
        return base + torch.einsum("nok,khw->nohw", taps, _tap_validity(h, w, feat))

    def first_layer_reference(self, feat: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h, w = feat.shape[-2:]
        n = cond.shape[0]
        x = torch.cat([feat, coord_channels(h, w, feat)], dim=0)[None].expand(n, -1, -1, -1)
        bc = cond[:, :, None, None].expand(-1, -1, h, w)
        weight = torch.cat([self.conv1.weight, self.cond_weight], dim=1)
        return F.conv2d(torch.cat([x, bc], dim=1), weight, self.conv1.bias, padding=1)

    def center_logits(self, feat: torch.Tensor, vectors: torch.Tensor, locations) -> torch.Tensor:
        """Full-stage center logits [N, H, W] for N descriptors sharing one stage map."""
        grid = feat.shape[-2:]
        cond = self._conditions(vectors, locations, grid)
        x = F.relu(self.first_layer(feat, cond))
        x = F.relu(self.conv2(x))
        return self.out(x)[:, 0]


def excavate_many(module: ObjectExcavating, descriptors, stage_features, radius: int | None):
    """Center maps for descriptors of one image; ``stage_features[s-1]`` is [C, H_s, W_s]."""
    by_stage: dict[int, list[InstanceDescriptor]] = {}
    for d in descriptors:
        by_stage.setdefault(d.stage, []).append(d)
    maps: dict[int, CenterMap] = {}
    for stage, group in by_stage.items():
        feat = stage_features[stage - 1]
        grid = tuple(feat.shape[-2:])
        vectors = torch.stack([d.vector for d in group])
        logits = module.center_logits(feat, vectors, [d.location for d in group])
        for d, full in zip(group, logits):
            win = window_for(d.location, radius, grid)
            maps[d.id] = CenterMap(full[win.row0:win.row1, win.col0:win.col1], win, d.id, stage)
    return [maps[d.id] for d in descriptors]


def excavate(module: ObjectExcavating, descriptor: InstanceDescriptor, stage_features,
             radius: int | None = 8) -> CenterMap:
    return excavate_many(module, [descriptor], stage_features, radius)[0]


def loss_excavating(center_maps, targets, reduction: str = "mean") -> torch.Tensor:
    """Sum over windows of per-pixel BCE (mean within each window by default)."""
    if len(center_maps) != len(targets):
        raise ValueError("one target per center map required")
    total = None
    for cm, t in zip(center_maps, targets):
        t = torch.as_tensor(t, dtype=cm.logits.dtype, device=cm.logits.device)
        if t.shape != cm.logits.shape:
            raise ValueError(f"geometry mismatch: map {tuple(cm.logits.shape)} vs target {tuple(t.shape)}")
        term = binary_cross_entropy(cm.logits, t, reduction)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def extract_key_pixels(center_map: CenterMap, tau_key: float, k_max: int = 8) -> list[KeyPixel]:
    probs = center_map.probs.detach()
    r0, c0 = center_map.window_origin
    peaks = [(-float(probs[r, c]), r + r0, c + c0) for r, c in local_peaks(probs, tau_key)]
    peaks.sort()
    return [KeyPixel((r, c), -neg, center_map.source_id) for neg, r, c in peaks[:k_max]]


def mint_mined_descriptors(module: ObjectExcavating, source: InstanceDescriptor, keys,
                           grid: tuple[int, int], first_id: int = 0) -> list[InstanceDescriptor]:
    """Copy the source vector per key pixel, append its normalized coordinates, project to C_D."""
    if not keys:
        return []
    coords = torch.tensor(
        [[normalized_coord(k.location[0], grid[0]), normalized_coord(k.location[1], grid[1])]
         for k in keys],
        dtype=source.vector.dtype, device=source.vector.device,
    )
    copies = source.vector[None].expand(len(keys), -1)
    vectors = module.mint(torch.cat([copies, coords], dim=1))
    return [
        InstanceDescriptor(
            vector=v, stage=source.stage, location=k.location, class_id=source.class_id,
            confidence=k.score, provenance=MINED, id=first_id + i, source_id=source.id,
            score=k.score,
        )
        for i, (v, k) in enumerate(zip(vectors, keys))
    ]


def classify_key_pixels(module: ObjectExcavating, mined) -> torch.Tensor:
    """Class logits [N, C_P] for mined descriptors (softmax gives the distribution)."""
    return module.classifier(torch.stack([d.vector for d in mined]))


def loss_excavating_cls(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Sum over mined descriptors of the C_P-way cross-entropy; targets are one-hot [N, C_P]."""
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(targets.shape)}")
    return softmax_cross_entropy(logits, targets.to(logits.dtype), reduction="sum", dim=1)
