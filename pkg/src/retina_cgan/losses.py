"""Segmentation and adversarial objectives."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError

GAN_LOSS_FORMS = ("non_saturating", "minimax")


@dataclass
class LossConfig:
    beta: float = 10.0
    lambda_gan: float = 0.01
    eps: float = 1e-7
    gan_loss_form: str = "non_saturating"

    def validate(self):
        if self.beta <= 0:
            raise ConfigError("loss.beta: must be > 0")
        if self.lambda_gan < 0:
            raise ConfigError("loss.lambda_gan: must be >= 0")
        if not 0 < self.eps < 1e-3:
            raise ConfigError("loss.eps: must lie in (0, 1e-3)")
        if self.gan_loss_form not in GAN_LOSS_FORMS:
            raise ConfigError(f"loss.gan_loss_form: expected one of {GAN_LOSS_FORMS}")
        return self


def _check_finite(name, *tensors):
    for t in tensors:
        if torch.isnan(t).any():
            raise ValueError(f"{name}: NaN in input")


def weighted_bce(p, y, beta=10.0, eps=1e-7):
    """Pixel-mean of ``-(beta * y * log p + (1 - y) * log(1 - p))``.

    ``beta`` up-weights the positive (lesion) term only.
    """
    if p.shape != y.shape:
        raise ValueError(f"weighted_bce: shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    _check_finite("weighted_bce", p, y)
    p = p.clamp(eps, 1.0 - eps)
    return -(beta * y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def deep_supervision_loss(outs, y, beta=10.0, eps=1e-7):
    """Equal-weight mean of the weighted BCE over every side map and the fused map."""
    maps = outs.all_maps()
    terms = []
    for i, p in enumerate(maps):
        try:
            terms.append(weighted_bce(p, y, beta, eps))
        except ValueError as exc:
            name = "fused" if i == len(maps) - 1 else f"side {i}"
            raise ValueError(f"{name} map: {exc}") from exc
    return torch.stack(terms).mean()


def gan_discriminator_loss(logits_real, logits_fake):
    _check_finite("gan_discriminator_loss", logits_real, logits_fake)
    real = F.binary_cross_entropy_with_logits(logits_real, torch.ones_like(logits_real))
    fake = F.binary_cross_entropy_with_logits(logits_fake, torch.zeros_like(logits_fake))
    return real + fake


def gan_generator_loss(logits_fake, form="non_saturating"):
    """``non_saturating``: BCE against the real label. ``minimax``: ``-BCE`` against the fake label."""
    _check_finite("gan_generator_loss", logits_fake)
    if form == "non_saturating":
        return F.binary_cross_entropy_with_logits(logits_fake, torch.ones_like(logits_fake))
    if form == "minimax":
        return -F.binary_cross_entropy_with_logits(logits_fake, torch.zeros_like(logits_fake))
    raise ValueError(f"unknown gan loss form {form!r}")


def generator_total_loss(seg_loss, gan_loss, lambda_gan=0.01):
    if lambda_gan < 0:
        raise ValueError("lambda_gan must be >= 0")
    return seg_loss + lambda_gan * gan_loss
