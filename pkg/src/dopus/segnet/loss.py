"""Soft dice loss with +1 smoothing."""

from __future__ import annotations

import torch

__all__ = ["soft_dice_loss"]


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """L = 1 - (2 sum(p y) + s) / (sum(p^2) + sum(y^2) + s), summed over the whole tensor."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    target = target.to(pred.dtype)
    inter = (pred * target).sum()
    denom = (pred * pred).sum() + (target * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)
