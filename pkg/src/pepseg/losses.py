from __future__ import annotations

import torch
import torch.nn.functional as F


def binary_cross_entropy(logits: torch.Tensor, target: torch.Tensor,
                         reduction: str = "mean") -> torch.Tensor:
    """Element-wise BCE of sigmoid(logits) against a {0,1} target, from logits for stability."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), reduction=reduction)


def softmax_cross_entropy(logits: torch.Tensor, G: torch.Tensor, reduction: str = "mean",
                          dim: int = 0) -> torch.Tensor:
    """Logit form of -sum G log softmax(logits); ``mean`` divides by the non-channel size."""
    if logits.shape != G.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(G.shape)}")
    total = -(G * F.log_softmax(logits, dim=dim)).sum()
    if reduction == "mean":
        return total / (logits.numel() // logits.shape[dim])
    return total


def probability_logit(p: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    p = p.clamp(eps, 1.0 - eps)
    return torch.log(p) - torch.log1p(-p)
