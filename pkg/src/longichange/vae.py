"""Convolutional VAE used to produce perturbed reconstructions of a scan."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volume import Volume


@dataclass
class VaeConfig:
    encoder_downsampling: str = "max_pool"  # or "strided_conv"
    channels: Tuple[int, ...] = (16, 32, 64)
    latent_channels: int = 8
    kl_weight: float = 1e-3
    delta: float = 5.0
    elementwise_delta: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.encoder_downsampling not in ("max_pool", "strided_conv"):
            raise ValueError(f"encoder_downsampling: unknown value {self.encoder_downsampling!r}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels: must be >= 1")
        if self.delta < 0:
            raise ValueError("delta: must be >= 0")
        if self.kl_weight < 0:
            raise ValueError("kl_weight: must be >= 0")
        if not self.channels:
            raise ValueError("channels: need at least one level")

    @property
    def downsampling_factor(self) -> int:
        return 2 ** len(self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class LatentCode:
    mu: torch.Tensor
    log_var: torch.Tensor
    z: Optional[torch.Tensor] = None
    z_tilde: Optional[torch.Tensor] = None
    scale: Optional[torch.Tensor] = field(default=None, repr=False)


class VAE(nn.Module):
    """Three-level 3D conv encoder/decoder with a spatial latent map.

    Input and output tensors are (B, 1, H, W, D); every spatial axis must be
    divisible by ``2 ** len(cfg.channels)``.
    """

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        enc = []
        in_ch = 1
        for ch in cfg.channels:
            enc.append(nn.Conv3d(in_ch, ch, 3, padding=1))
            enc.append(nn.LeakyReLU(0.2))
            if cfg.encoder_downsampling == "max_pool":
                enc.append(nn.MaxPool3d(2))
            else:
                enc.append(nn.Conv3d(ch, ch, 2, stride=2))
            in_ch = ch
        self.encoder = nn.Sequential(*enc)
        self.to_mu = nn.Conv3d(in_ch, cfg.latent_channels, 1)
        self.to_log_var = nn.Conv3d(in_ch, cfg.latent_channels, 1)

        rev = list(cfg.channels[::-1])
        dec = [nn.Conv3d(cfg.latent_channels, rev[0], 1), nn.LeakyReLU(0.2)]
        for ch_in, ch_out in zip(rev, rev[1:] + [rev[-1]]):
            dec.append(nn.ConvTranspose3d(ch_in, ch_out, 2, stride=2))
            dec.append(nn.LeakyReLU(0.2))
            dec.append(nn.Conv3d(ch_out, ch_out, 3, padding=1))
            dec.append(nn.LeakyReLU(0.2))
        dec.append(nn.Conv3d(rev[-1], 1, 1))
        self.decoder = nn.Sequential(*dec)

    def check_shape(self, shape: Sequence[int]):
        f = self.cfg.downsampling_factor
        for axis, n in zip("HWD", shape):
            if n % f:
                raise ValueError(f"axis {axis} has size {n}, not divisible by {f}")

    def encode(self, x: torch.Tensor) -> LatentCode:
        self.check_shape(x.shape[2:])
        h = self.encoder(x)
        return LatentCode(self.to_mu(h), self.to_log_var(h))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 5 or z.shape[1] != self.cfg.latent_channels:
            raise ValueError(
                f"latent must be (B, {self.cfg.latent_channels}, h, w, d), got {tuple(z.shape)}")
        return torch.sigmoid(self.decoder(z))

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        code = self.encode(x)
        code.z = sample_latent(code, generator)
        return self.decode(code.z), code


def sample_latent(code: LatentCode, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Reparameterised draw ``mu + exp(log_var / 2) * eps``."""
    eps = torch.randn(code.mu.shape, generator=generator, dtype=code.mu.dtype)
    return code.mu + torch.exp(0.5 * code.log_var) * eps


def perturb_latent(z: torch.Tensor, delta: float, generator: Optional[torch.Generator] = None,
                   elementwise: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """Scale ``z`` by a factor drawn from U(-delta, delta).

    One factor per batch sample unless ``elementwise``. Returns the perturbed
    code and the factors used.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    shape = z.shape if elementwise else (z.shape[0],) + (1,) * (z.ndim - 1)
    u = torch.rand(shape, generator=generator, dtype=z.dtype)
    scale = (2.0 * u - 1.0) * delta
    return z * scale, scale


def kl_divergence(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    return -0.5 * torch.mean(1 + log_var - mu ** 2 - torch.exp(log_var))


def vae_loss(x: torch.Tensor, x_recon: torch.Tensor, code: LatentCode, cfg: VaeConfig):
    """Return ``(total, recon_l1, kl)``; both terms are means over elements."""
    if x.shape != x_recon.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_recon.shape)}")
    recon = torch.mean(torch.abs(x - x_recon))
    kl = kl_divergence(code.mu, code.log_var)
    return recon + cfg.kl_weight * kl, recon, kl


def encode(vae: VAE, x: Volume) -> LatentCode:
    with torch.no_grad():
        return vae.encode(volume_to_tensor(x))


def perturbed_reconstruction(vae: VAE, x: Volume, rng: np.random.Generator,
                             delta: Optional[float] = None) -> Volume:
    """Encode ``x``, sample and perturb the latent, and decode it back."""
    delta = vae.cfg.delta if delta is None else delta
    gen = torch.Generator().manual_seed(int(rng.integers(0, 2 ** 63 - 1)))
    with torch.no_grad():
        code = vae.encode(volume_to_tensor(x))
        z = sample_latent(code, gen)
        z_tilde, _ = perturb_latent(z, delta, gen, vae.cfg.elementwise_delta)
        out = vae.decode(z_tilde)
    return Volume(out[0, 0].numpy(), x.spacing, "intensity")


def volume_to_tensor(v: Volume) -> torch.Tensor:
    return torch.from_numpy(np.asarray(v.data, dtype=np.float32).copy())[None, None]
