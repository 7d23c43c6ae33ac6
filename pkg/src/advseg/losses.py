"""Scalar objectives: smoothness regularizers, WGAN pair, targeted attack
loss, masked cross-entropy, and the combined generator/critic totals.

All functions accept numpy arrays or torch tensors (class channel last for
segmentation tensors) and return 0-dim torch tensors so gradients can flow
when inputs track them. Use ``float(...)`` for plain numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_FLOOR = 1e-7


@dataclass
class LossWeights:
    lambda_d: float = 0.1
    lambda_v: float = 0.01
    xi: float = 2.0
    norm_mode: str = "mean"  # "mean" | "sum"

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_v < 0 or self.xi < 0:
            raise ValueError("lambda_d, lambda_v, and xi must be non-negative")
        if self.norm_mode not in ("mean", "sum"):
            raise ValueError(f"unknown norm_mode {self.norm_mode!r}")


def _reduce_sq(x: torch.Tensor, weight: float, mode: str) -> torch.Tensor:
    if mode == "mean":
        return weight * (x * x).mean()
    if mode == "sum":
        return weight * (x * x).sum()
    raise ValueError(f"unknown norm_mode {mode!r}")


def reg_deformation(d, lambda_d: float = 0.1, mode: str = "mean") -> torch.Tensor:
    """Squared-norm penalty on the displacement field (both channels)."""
    return _reduce_sq(torch.as_tensor(d), lambda_d, mode)


def reg_intensity(v, lambda_v: float = 0.01, mode: str = "mean") -> torch.Tensor:
    """Squared-norm penalty on the additive intensity perturbation."""
    return _reduce_sq(torch.as_tensor(v), lambda_v, mode)


def wgan_pair(score_real, score_fake):
    """Wasserstein losses: (generator, critic) from batch-mean critic scores."""
    real = torch.as_tensor(score_real, dtype=torch.get_default_dtype()) \
        if not torch.is_tensor(score_real) else score_real
    fake = torch.as_tensor(score_fake, dtype=torch.get_default_dtype()) \
        if not torch.is_tensor(score_fake) else score_fake
    return real - fake, fake - real


def xent(pred, target_onehot) -> torch.Tensor:
    """Mean per-pixel cross-entropy (natural log), class channel last."""
    p = torch.as_tensor(pred)
    t = torch.as_tensor(target_onehot, dtype=p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    p = p.clamp(PROB_FLOOR, 1.0)
    return -(t * p.log()).sum(dim=-1).mean()


def masked_xent(s_dv, s_0) -> torch.Tensor:
    """Cross-entropy between attacked and clean predictions, weighted per
    pixel by the clean prediction's soft foreground probability."""
    p = torch.as_tensor(s_dv)
    q = torch.as_tensor(s_0, dtype=p.dtype)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    mask = q[..., 1:].sum(dim=-1)
    ce = -(q * p.clamp(PROB_FLOOR, 1.0).log()).sum(dim=-1)
    return (mask * ce).mean()


def target_loss(s_0, s_dv, xi: float) -> torch.Tensor:
    """Drives the masked cross-entropy toward the requested strength xi."""
    if xi < 0:
        raise ValueError("xi must be non-negative")
    return (xi - masked_xent(s_dv, s_0)) ** 2


def total_losses(gen_adv, target, reg_d, reg_v, disc_adv):
    """Combined objectives: generator sums its four terms, critic stands alone."""
    as_t = lambda x: x if torch.is_tensor(x) else torch.as_tensor(float(x))
    l_gen = as_t(gen_adv) + as_t(target) + as_t(reg_d) + as_t(reg_v)
    return l_gen, as_t(disc_adv)
