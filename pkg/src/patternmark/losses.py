"""Stage losses: message BCE, visual MSE+SSIM terms, mask BCE."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .media import SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW

_EPS = 1e-6


def _gaussian_kernel2d(window, sigma, dtype, device):
    half = (window - 1) / 2.0
    x = torch.arange(window, dtype=dtype, device=device) - half
    k1 = torch.exp(-(x ** 2) / (2.0 * sigma ** 2))
    k1 = k1 / k1.sum()
    return torch.outer(k1, k1)


def ssim_index(a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW,
               sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Differentiable mean local SSIM (valid windows, Gaussian weighting)."""
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if min(a.shape[-2:]) < window:
        # toy resolutions shrink the window; the float64 metric stays strict
        window = min(a.shape[-2:]) | 1 if min(a.shape[-2:]) % 2 == 0 \
            else min(a.shape[-2:])
        window = min(window, min(a.shape[-2:]))
    c = a.shape[1]
    k = _gaussian_kernel2d(window, sigma, a.dtype, a.device)
    k = k.view(1, 1, window, window).expand(c, 1, -1, -1)

    def filt(x):
        return F.conv2d(x, k, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


def _mask_bce(target, pred):
    pred = pred.clamp(_EPS, 1.0 - _EPS)
    return F.binary_cross_entropy(pred, target)


def loss_stage1(messages: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy between bit targets and unbounded scores."""
    if messages.shape != scores.shape:
        raise ConfigError(f"shape mismatch: {tuple(messages.shape)} vs {tuple(scores.shape)}")
    return F.binary_cross_entropy_with_logits(scores, messages.to(scores.dtype))


def _fidelity(a, b):
    return F.mse_loss(a, b) + (1.0 - ssim_index(a, b))


def loss_stage2(cover, encoded, gt_mask, pred_mask, gt_pattern, decoded_pattern, lambdas):
    """Weighted visual + localization + pattern loss; returns (total, breakdown)."""
    l1, l2, l3 = lambdas[:3]
    breakdown = {
        "vis": l1 * _fidelity(cover, encoded),
        "loc": l2 * _mask_bce(gt_mask, pred_mask),
        "pattern": l3 * _fidelity(gt_pattern, decoded_pattern),
    }
    return sum(breakdown.values()), breakdown


def loss_stage3(cover, encoded, gt_mask, pred_mask, gt_pattern, decoded_pattern,
                messages, scores, lambdas):
    """Stage-2 loss extended with the end-to-end message term."""
    total, breakdown = loss_stage2(cover, encoded, gt_mask, pred_mask,
                                   gt_pattern, decoded_pattern, lambdas)
    l4 = lambdas[3]
    breakdown["msg"] = l4 * loss_stage1(messages, scores)
    return total + breakdown["msg"], breakdown
