"""Descriptor affinity graph: learned similarity, its same-instance target, and grouping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .losses import binary_cross_entropy, probability_logit


@dataclass(eq=False)
class AffinityMatrix:
    logits: torch.Tensor  # [N, N], symmetric
    ids: list[int]

    @property
    def values(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    @classmethod
    def from_values(cls, values, ids=None) -> "AffinityMatrix":
        values = torch.as_tensor(values, dtype=torch.float64)
        ids = list(range(values.shape[0])) if ids is None else list(ids)
        return cls(probability_logit(values), ids)


@dataclass
class AffinityTarget:
    values: np.ndarray  # binary [N, N]


@dataclass
class PurifiedSet:
    groups: list[list[int]]
    representatives: list[int]


class AffinityHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.descriptor_dim, cfg.descriptor_dim)
        self.self_bias = float(cfg.affinity_self_bias)
        # unrelated (orthogonal) projections would otherwise sit exactly at sigmoid(0) = 0.5;
        # a learned off-diagonal offset lets distinct instances fall below the merge threshold
        self.offset = nn.Parameter(torch.zeros(()))


def affinity_logits(head: AffinityHead, vectors: torch.Tensor) -> torch.Tensor:
    p = head.proj(vectors)
    s = p @ p.T / math.sqrt(p.shape[1])
    s = 0.5 * (s + s.T)
    eye = torch.eye(s.shape[0], dtype=s.dtype, device=s.device)
    s = s + head.offset * (1 - eye)
    if head.self_bias:
        s = s + head.self_bias * eye
    return s


def compute_affinity(head: AffinityHead, descriptors) -> AffinityMatrix:
    items = list(descriptors)
    if not items:
        raise ValueError("no descriptors")
    vectors = torch.stack([d.vector for d in items])
    return AffinityMatrix(affinity_logits(head, vectors), [d.id for d in items])


def build_affinity_target(assignments: Sequence[int | None]) -> AffinityTarget:
    """G[i, j] = 1 iff i and j share a ground-truth instance; ``None`` is a unique singleton."""
    labels = [("gt", a) if a is not None else ("solo", i) for i, a in enumerate(assignments)]
    n = len(labels)
    g = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            g[i, j] = float(labels[i] == labels[j])
    return AffinityTarget(g)


def loss_purifying(M: AffinityMatrix, G: AffinityTarget, reduction: str = "mean") -> torch.Tensor:
    target = torch.as_tensor(G.values, dtype=M.logits.dtype, device=M.logits.device)
    if target.shape != M.logits.shape:
        raise ValueError(f"size mismatch: M {tuple(M.logits.shape)} vs G {tuple(target.shape)}")
    return binary_cross_entropy(M.logits, target, reduction)


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


def components(adjacent: np.ndarray) -> list[list[int]]:
    """Connected components of a boolean adjacency matrix, ordered by smallest member."""
    n = adjacent.shape[0]
    uf = UnionFind(n)
    rows, cols = np.nonzero(adjacent)
    for i, j in zip(rows.tolist(), cols.tolist()):
        if i != j:
            uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def purify(M, descriptors, tau_merge: float = 0.5) -> PurifiedSet:
    """Merge descriptors joined by an edge M_ij >= tau_merge (either direction)."""
    values = M.values if isinstance(M, AffinityMatrix) else torch.as_tensor(M)
    v = values.detach().cpu().numpy()
    items = list(descriptors)
    if v.shape != (len(items), len(items)):
        raise ValueError(f"matrix {v.shape} does not match {len(items)} descriptors")
    adjacent = (v >= tau_merge) | (v.T >= tau_merge)
    groups, reps = [], []
    for comp in components(adjacent):
        members = [items[i] for i in comp]
        best = min(members, key=lambda d: (-d.confidence, not d.is_original, d.id))
        groups.append([d.id for d in members])
        reps.append(best.id)
    return PurifiedSet(groups, reps)


def mask_iou_matrix(masks: np.ndarray) -> np.ndarray:
    flat = masks.reshape(masks.shape[0], -1).astype(np.float64)
    inter = flat @ flat.T
    area = flat.sum(1)
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def mask_nms(masks: np.ndarray, scores: Sequence[float], classes: Sequence[int],
             iou_threshold: float = 0.5) -> list[int]:
    """Greedy score-ranked NMS over binary masks within each class; returns kept indices."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    if not order:
        return []
    iou = mask_iou_matrix(np.asarray(masks))
    kept: list[int] = []
    for i in order:
        if all(classes[i] != classes[k] or iou[i, k] <= iou_threshold for k in kept):
            kept.append(i)
    return kept
