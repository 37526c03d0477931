"""Training objective: soft Dice on the gas channel plus label-smoothed cross-entropy.

Logits are laid out B×2×H×W (channel 0 background, channel 1 gas); targets are
binary B×H×W masks.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import LossValidationError
from .models import LossConfig


def _check_target(target: torch.Tensor, shape: torch.Size, what: str) -> None:
    if target.shape != shape:
        raise LossValidationError(f"target shape {tuple(target.shape)} does not match {what} {tuple(shape)}")


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 − (2Σpg + eps) / (Σp + Σg + eps), per sample, averaged over the batch."""
    if probs.dim() == 2:
        probs, target = probs.unsqueeze(0), target.unsqueeze(0)
    _check_target(target, probs.shape, "probs")
    if not torch.isfinite(probs).all() or probs.min() < 0 or probs.max() > 1:
        raise LossValidationError("dice_loss probabilities must lie in [0, 1]")
    if eps <= 0:
        raise LossValidationError(f"dice eps must be positive, got {eps}")
    p = probs.flatten(1)
    g = target.to(probs.dtype).flatten(1)
    inter = (p * g).sum(dim=1)
    denom = p.sum(dim=1) + g.sum(dim=1)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def soft_ce_loss(logits: torch.Tensor, target: torch.Tensor, smoothing: float = 0.1) -> torch.Tensor:
    """Cross-entropy against targets smoothed to [ε, 1−ε] (gas) / [1−ε, ε] (background); mean over pixels."""
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise LossValidationError(f"logits must be B×2×H×W, got {tuple(logits.shape)}")
    _check_target(target, logits.shape[:1] + logits.shape[2:], "logits")
    if not torch.isfinite(logits).all():
        raise LossValidationError("soft_ce_loss received non-finite logits")
    if not 0.0 <= smoothing < 0.5:
        raise LossValidationError(f"label smoothing must lie in [0, 0.5), got {smoothing}")
    gas = target.to(logits.dtype)
    q_gas = gas * (1.0 - smoothing) + (1.0 - gas) * smoothing
    q = torch.stack([1.0 - q_gas, q_gas], dim=1)
    return -(q * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def combined_loss(logits: torch.Tensor, target: torch.Tensor, config: LossConfig | None = None) -> torch.Tensor:
    config = config or LossConfig()
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    sce = soft_ce_loss(logits, target, config.label_smoothing)
    gas_probs = torch.softmax(logits, dim=1)[:, 1]
    dice = dice_loss(gas_probs, target, config.dice_epsilon)
    return config.dice_weight * dice + config.sce_weight * sce
