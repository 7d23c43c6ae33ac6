"""Differentiable dense warping: bilinear pull-resampling of a 2D image."""

from __future__ import annotations

import numpy as np
import torch


def apply_deformation(img, field):
    """Pull-warp `img` by a dense displacement field.

    img: (H, W) or (B, H, W); field: (2, H, W) or (B, 2, H, W) with channel 0
    the horizontal displacement dx (columns) and channel 1 the vertical dy
    (rows), both in pixel units. output(r, c) samples img bilinearly at
    (r + dy[r, c], c + dx[r, c]); coordinates are clamped to the border.
    Differentiable w.r.t. both inputs. Accepts numpy or torch, returns same.
    """
    as_numpy = not torch.is_tensor(img)
    t_img = torch.as_tensor(img)
    t_field = torch.as_tensor(field, dtype=t_img.dtype)
    squeeze = t_img.dim() == 2
    if squeeze:
        t_img = t_img[None]
        t_field = t_field[None]
    if t_img.dim() != 3 or t_field.dim() != 4 or t_field.shape[1] != 2:
        raise ValueError(f"bad shapes: img {tuple(t_img.shape)}, field {tuple(t_field.shape)}")
    if t_img.shape[-2:] != t_field.shape[-2:] or t_img.shape[0] != t_field.shape[0]:
        raise ValueError(
            f"image {tuple(t_img.shape)} and field {tuple(t_field.shape)} do not align"
        )
    B, H, W = t_img.shape
    rows = torch.arange(H, dtype=t_img.dtype).view(1, H, 1)
    cols = torch.arange(W, dtype=t_img.dtype).view(1, 1, W)
    r = (rows + t_field[:, 1]).clamp(0, H - 1)
    c = (cols + t_field[:, 0]).clamp(0, W - 1)

    r0 = r.floor().clamp(0, H - 2)
    c0 = c.floor().clamp(0, W - 2)
    fr = r - r0
    fc = c - c0
    r0 = r0.long()
    c0 = c0.long()

    flat = t_img.reshape(B, H * W)
    idx = r0 * W + c0
    batch = torch.arange(B).view(B, 1, 1)
    i00 = flat[batch, idx]
    i01 = flat[batch, idx + 1]
    i10 = flat[batch, idx + W]
    i11 = flat[batch, idx + W + 1]
    out = ((1 - fr) * (1 - fc) * i00 + (1 - fr) * fc * i01
           + fr * (1 - fc) * i10 + fr * fc * i11)
    if squeeze:
        out = out[0]
    return out.numpy() if as_numpy else out


def warp_jacobian_check(img, field, eps: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    Probe loss is a fixed random weighting of the warped image; gradients are
    taken w.r.t. the displacement field at double precision. Sample
    coordinates must stay at least `eps` away from integers (caller's job).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    img_t = torch.as_tensor(np.asarray(img), dtype=torch.float64)
    d = torch.as_tensor(np.asarray(field), dtype=torch.float64).clone().requires_grad_(True)
    gen = torch.Generator().manual_seed(seed)
    weights = torch.rand(img_t.shape, generator=gen, dtype=torch.float64)

    def probe(f):
        return (weights * apply_deformation(img_t, f)).sum()

    probe(d).backward()
    analytic = d.grad.detach().numpy()

    fd = np.zeros_like(analytic)
    base = d.detach().numpy()
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        dp = base.copy(); dp[ix] += eps
        dm = base.copy(); dm[ix] -= eps
        hi = probe(torch.from_numpy(dp)).item()
        lo = probe(torch.from_numpy(dm)).item()
        fd[ix] = (hi - lo) / (2 * eps)
        it.iternext()

    denom = np.maximum(np.abs(analytic) + np.abs(fd), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))
