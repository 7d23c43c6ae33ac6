"""Attack generator (shared encoder, two latent heads, twin decoders for the
deformation field and the intensity perturbation) and the Wasserstein critic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .warp import apply_deformation

N_DOWN = 4  # encoder/decoder resolution halvings


@dataclass
class LatentCode:
    mu: torch.Tensor
    log_var: torch.Tensor
    sample: torch.Tensor


def _conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 4, stride=2, padding=1),
        nn.BatchNorm2d(c_out),
        nn.LeakyReLU(0.2, inplace=True),
    )


class _Decoder(nn.Module):
    """Latent vector -> 2-channel full-resolution map via transposed convs."""

    def __init__(self, latent_dim, base_channels, bottom_hw):
        super().__init__()
        c = base_channels
        chans = [c * 4, c * 4, c * 2, c]
        self.bottom_hw = bottom_hw
        self.bottom_channels = chans[0]
        self.fc = nn.Linear(latent_dim, chans[0] * bottom_hw[0] * bottom_hw[1])
        ups = []
        for i in range(N_DOWN):
            c_in = chans[i]
            c_out = chans[i + 1] if i + 1 < len(chans) else c
            ups += [
                nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        self.up = nn.Sequential(*ups)
        self.out = nn.Conv2d(c, 2, 3, padding=1)

    def forward(self, z):
        h = self.fc(z).view(z.shape[0], self.bottom_channels, *self.bottom_hw)
        return self.out(self.up(h))


class AttackerModel(nn.Module):
    """f_gen: image -> (deformation, intensity perturbation, attacked image).

    The two decoders share an architecture but not weights; outputs are
    bounded by scaled tanh (d_max pixels, v_max intensity units). Both
    decoders emit 2 channels to keep their parameter layout identical; the
    intensity branch uses only the first.
    """

    def __init__(self, image_size=(64, 64), latent_dim=64, base_channels=16,
                 d_max=8.0, v_max=0.3, seed=0):
        super().__init__()
        H, W = image_size
        if H % (2 ** N_DOWN) or W % (2 ** N_DOWN):
            raise ValueError(f"image size {image_size} must be divisible by {2 ** N_DOWN}")
        torch.manual_seed(seed)
        self.image_size = tuple(image_size)
        self.latent_dim = latent_dim
        self.d_max = float(d_max)
        self.v_max = float(v_max)
        c = base_channels
        self.encoder = nn.Sequential(
            _conv_block(1, c), _conv_block(c, c * 2),
            _conv_block(c * 2, c * 4), _conv_block(c * 4, c * 4),
            nn.Flatten(),
        )
        bottom = (H // 2 ** N_DOWN, W // 2 ** N_DOWN)
        feat = c * 4 * bottom[0] * bottom[1]
        self.head_mu_d = nn.Linear(feat, latent_dim)
        self.head_lv_d = nn.Linear(feat, latent_dim)
        self.head_mu_v = nn.Linear(feat, latent_dim)
        self.head_lv_v = nn.Linear(feat, latent_dim)
        self.decoder_d = _Decoder(latent_dim, c, bottom)
        self.decoder_v = _Decoder(latent_dim, c, bottom)


class CriticModel(nn.Module):
    """f_disc: image -> unbounded realism scalar."""

    def __init__(self, image_size=(64, 64), base_channels=16, seed=0):
        super().__init__()
        H, W = image_size
        torch.manual_seed(seed)
        c = base_channels
        self.features = nn.Sequential(
            _conv_block(1, c), _conv_block(c, c * 2),
            _conv_block(c * 2, c * 4), _conv_block(c * 4, c * 4),
            nn.Flatten(),
        )
        self.head = nn.Linear(c * 4 * (H // 16) * (W // 16), 1)


def _as_batch(img) -> tuple[torch.Tensor, bool]:
    t = img if torch.is_tensor(img) else torch.as_tensor(np.asarray(img, dtype=np.float32))
    if t.dim() == 2:
        return t[None], True
    if t.dim() == 3:
        return t, False
    raise ValueError(f"expected (H, W) or (B, H, W) image, got {tuple(t.shape)}")


def encode(model: AttackerModel, img, rng: torch.Generator | None = None,
           noise: tuple | None = None) -> tuple[LatentCode, LatentCode]:
    """Posterior codes for the deformation and intensity branches.

    Noise comes either from `rng` or explicitly via `noise=(eps_d, eps_v)`;
    samples are mu + exp(log_var / 2) * eps.
    """
    x, _ = _as_batch(img)
    feat = model.encoder(x[:, None])
    codes = []
    for i, (mu_head, lv_head) in enumerate(
        [(model.head_mu_d, model.head_lv_d), (model.head_mu_v, model.head_lv_v)]
    ):
        mu = mu_head(feat)
        lv = lv_head(feat)
        if noise is not None:
            eps = torch.as_tensor(noise[i], dtype=mu.dtype).reshape(mu.shape)
        else:
            eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype)
        codes.append(LatentCode(mu, lv, mu + torch.exp(0.5 * lv) * eps))
    return codes[0], codes[1]


def _z_of(z) -> torch.Tensor:
    t = z.sample if isinstance(z, LatentCode) else torch.as_tensor(z)
    return t[None] if t.dim() == 1 else t


def decode_deformation(model: AttackerModel, z) -> torch.Tensor:
    """(B, 2, H, W) displacement field bounded to [-d_max, d_max] pixels."""
    zt = _z_of(z)
    if zt.shape[-1] != model.latent_dim:
        raise ValueError(f"latent length {zt.shape[-1]} != {model.latent_dim}")
    return model.d_max * torch.tanh(model.decoder_d(zt))


def decode_intensity(model: AttackerModel, z) -> torch.Tensor:
    """(B, H, W) additive perturbation bounded to [-v_max, v_max]."""
    zt = _z_of(z)
    if zt.shape[-1] != model.latent_dim:
        raise ValueError(f"latent length {zt.shape[-1]} != {model.latent_dim}")
    return model.v_max * torch.tanh(model.decoder_v(zt)[:, 0])


def generate(model: AttackerModel, img, rng: torch.Generator | None = None,
             noise: tuple | None = None):
    """(D, V, I_DV) for a batch: warp by D, then add V."""
    x, squeeze = _as_batch(img)
    z_d, z_v = encode(model, x, rng=rng, noise=noise)
    d = decode_deformation(model, z_d)
    v = decode_intensity(model, z_v)
    i_dv = apply_deformation(x, d) + v
    if squeeze:
        return d[0], v[0], i_dv[0]
    return d, v, i_dv


def critic_score(model: CriticModel, img) -> torch.Tensor:
    """One unbounded scalar per image."""
    x, squeeze = _as_batch(img)
    s = model.head(model.features(x[:, None]))[:, 0]
    return s[0] if squeeze else s


def sample_attacks(model: AttackerModel, img, n: int, seed: int):
    """n posterior draws for one image, deterministic given seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for _ in range(n):
            out.append(generate(model, img, rng=gen))
    model.train(was_training)
    return out


def zero_init_outputs(model: AttackerModel):
    """Zero both decoders' output layers so D = 0, V = 0, I_DV = I_0."""
    for dec in (model.decoder_d, model.decoder_v):
        nn.init.zeros_(dec.out.weight)
        nn.init.zeros_(dec.out.bias)
    return model
