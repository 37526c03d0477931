"""Dice, soft cross-entropy and their weighted combination."""

import math

import pytest
import torch

from rtcan.errors import LossValidationError
from rtcan.losses import combined_loss, dice_loss, soft_ce_loss
from rtcan.models import LossConfig

TINY = 1e-12


def _half_gas(b: int = 2, h: int = 4, w: int = 4) -> torch.Tensor:
    target = torch.zeros(b, h, w, dtype=torch.int64)
    target[:, :, : w // 2] = 1
    return target


def test_dice_perfect_overlap_is_zero() -> None:
    target = _half_gas()
    loss = dice_loss(target.double(), target, eps=1.0)
    assert float(loss) <= 1e-9


def test_dice_uniform_half_on_half_gas() -> None:
    """probs ≡ 0.5 on a half-gas target -> 0.5."""
    target = _half_gas()
    probs = torch.full(target.shape, 0.5, dtype=torch.float64)
    assert abs(float(dice_loss(probs, target, eps=TINY)) - 0.5) <= 1e-9


def test_dice_empty_empty_is_zero() -> None:
    probs = torch.zeros(1, 4, 4, dtype=torch.float64)
    target = torch.zeros(1, 4, 4, dtype=torch.int64)
    assert float(dice_loss(probs, target)) == 0.0


def test_dice_out_of_range_raises() -> None:
    target = _half_gas()
    with pytest.raises(LossValidationError):
        dice_loss(torch.full(target.shape, 1.5), target)
    with pytest.raises(LossValidationError):
        dice_loss(torch.full(target.shape, -0.1), target)


def test_dice_per_sample_average() -> None:
    """Batch reduction averages per-sample Dice: one perfect and one disjoint sample give 0.5."""
    target = torch.zeros(2, 2, 2, dtype=torch.int64)
    target[:, 0, 0] = 1
    probs = torch.zeros(2, 2, 2, dtype=torch.float64)
    probs[0, 0, 0] = 1.0
    probs[1, 1, 1] = 1.0
    assert abs(float(dice_loss(probs, target, eps=TINY)) - 0.5) <= 1e-9


def test_dice_monotone_toward_target() -> None:
    target = _half_gas(1)
    probs = torch.full(target.shape, 0.3, dtype=torch.float64)
    previous = float(dice_loss(probs, target))
    for value in (0.4, 0.6, 0.8, 1.0):
        probs[0, 0, 0] = value  # a gas pixel moving toward 1
        current = float(dice_loss(probs, target))
        assert current < previous
        previous = current


def test_soft_ce_uniform_logits_is_ln2() -> None:
    target = _half_gas()
    logits = torch.zeros(2, 2, 4, 4, dtype=torch.float64)
    for eps in (0.0, 0.1, 0.3):
        assert abs(float(soft_ce_loss(logits, target, eps)) - math.log(2)) <= 1e-9


def test_soft_ce_saturation_limit() -> None:
    target = _half_gas()
    sign = target.double() * 2 - 1
    logits = torch.stack([-sign, sign], dim=1) * 50.0
    assert float(soft_ce_loss(logits, target, 0.0)) < 1e-12


def test_soft_ce_smoothing_floor() -> None:
    """With ε=0.1 the loss stays above the smoothed-target entropy and decreases with margin."""
    eps = 0.1
    floor = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    target = _half_gas()
    sign = target.double() * 2 - 1
    losses = []
    # margins stay below ln(9)/2, where the smoothed loss reaches its floor
    for margin in (0.25, 0.5, 1.0):
        logits = torch.stack([-sign, sign], dim=1) * margin
        losses.append(float(soft_ce_loss(logits, target, eps)))
    assert all(loss >= floor - 1e-12 for loss in losses)
    assert losses[-1] >= 0.325
    assert losses[0] > losses[1] > losses[2]


def test_soft_ce_non_finite_raises() -> None:
    target = _half_gas()
    logits = torch.zeros(2, 2, 4, 4)
    logits[0, 0, 0, 0] = float("nan")
    with pytest.raises(LossValidationError):
        soft_ce_loss(logits, target)
    logits[0, 0, 0, 0] = float("inf")
    with pytest.raises(LossValidationError):
        soft_ce_loss(logits, target)


def test_combined_uniform_half_gas() -> None:
    """0.5·0.5 + 0.5·ln 2."""
    config = LossConfig(label_smoothing=0.0, dice_epsilon=TINY)
    target = _half_gas()
    logits = torch.zeros(2, 2, 4, 4, dtype=torch.float64)
    expected = 0.25 + 0.5 * math.log(2)
    assert abs(float(combined_loss(logits, target, config)) - expected) <= 1e-9


def test_combined_saturated_correct_is_zero() -> None:
    config = LossConfig(label_smoothing=0.0, dice_epsilon=TINY)
    target = _half_gas()
    sign = target.double() * 2 - 1
    logits = torch.stack([-sign, sign], dim=1) * 60.0
    assert float(combined_loss(logits, target, config)) < 1e-9


def test_combined_is_weighted_sum() -> None:
    config = LossConfig(dice_weight=0.3, sce_weight=0.7, label_smoothing=0.05)
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 2, 5, 6, generator=g, dtype=torch.float64)
    target = (torch.rand(3, 5, 6, generator=g) < 0.3).to(torch.int64)
    d = dice_loss(torch.softmax(logits, dim=1)[:, 1], target, config.dice_epsilon)
    s = soft_ce_loss(logits, target, config.label_smoothing)
    assert abs(float(combined_loss(logits, target, config)) - (0.3 * float(d) + 0.7 * float(s))) <= 1e-9


def test_combined_gradient_matches_finite_differences() -> None:
    """Analytic gradient vs central differences on 4×4 instances, 1e-4 relative."""
    config = LossConfig()
    g = torch.Generator().manual_seed(1)
    target = (torch.rand(1, 4, 4, generator=g) < 0.5).to(torch.int64)
    logits = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    combined_loss(logits, target, config).backward()
    analytic = logits.grad.detach().flatten()

    h = 1e-6
    base = logits.detach().clone()
    numeric = torch.zeros_like(analytic)
    for i in range(base.numel()):
        plus, minus = base.clone().flatten(), base.clone().flatten()
        plus[i] += h
        minus[i] -= h
        lp = float(combined_loss(plus.view_as(base), target, config))
        lm = float(combined_loss(minus.view_as(base), target, config))
        numeric[i] = (lp - lm) / (2 * h)
    scale = max(float(analytic.abs().max()), 1e-12)
    assert float((analytic - numeric).abs().max()) / scale <= 1e-4


def test_losses_permutation_invariant() -> None:
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)
    target = (torch.rand(1, 4, 4, generator=g) < 0.5).to(torch.int64)
    perm = torch.randperm(16, generator=g)
    logits_p = logits.flatten(2)[:, :, perm].view(1, 2, 4, 4)
    target_p = target.flatten(1)[:, perm].view(1, 4, 4)
    config = LossConfig()
    assert abs(float(combined_loss(logits, target, config)) - float(combined_loss(logits_p, target_p, config))) <= 1e-12


def test_loss_config_weights_must_sum_to_one() -> None:
    with pytest.raises(ValueError):
        LossConfig(dice_weight=0.6, sce_weight=0.6)
