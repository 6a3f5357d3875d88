"""Siamese 3D U-net for change detection.

Both inputs are 2-channel stacks (image, |difference|). In siamese mode one
encoder (one weight set) processes each stack and the two feature maps are
fused per level by concatenation followed by a 1x1x1 convolution. In
single-stream mode the two stacks are concatenated into a 4-channel input.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DetectorConfig:
    levels: int = 4
    base_channels: int = 16
    use_inception: bool = True
    use_attention_gates: bool = True
    use_multiscale_inputs: bool = True
    use_deep_supervision: bool = True
    siamese: bool = True
    l2_weight: float = 1e-6
    in_channels: int = 2
    # initial output probability of every head; matches the expected
    # positive fraction 1 - tau of SuperMix targets
    head_prior: float = 0.02

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels: must be >= 2")
        if self.base_channels < 1:
            raise ValueError("base_channels: must be >= 1")
        if self.l2_weight < 0:
            raise ValueError("l2_weight: must be >= 0")
        if not 0.0 < self.head_prior < 1.0:
            raise ValueError("head_prior: must lie in (0, 1)")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DetectorOutput:
    final: torch.Tensor
    side_outputs: List[torch.Tensor]  # coarse to fine


# convolutions feeding an InstanceNorm carry no bias: the norm would cancel it
def conv_block(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.InstanceNorm3d(out_ch, affine=True),
        nn.LeakyReLU(0.1),
        nn.Conv3d(out_ch, out_ch, 3, padding=1, bias=False),
        nn.InstanceNorm3d(out_ch, affine=True),
        nn.LeakyReLU(0.1),
    )


class InceptionModule(nn.Module):
    """Parallel 1^3, 3^3 and 5^3 branches; the larger ones behind a 1^3 reduction."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        c1 = max(1, out_ch // 4)
        c5 = max(1, out_ch // 4)
        c3 = out_ch - c1 - c5
        if c3 < 1:
            raise ValueError(f"inception module needs at least 3 output channels, got {out_ch}")
        red = max(1, out_ch // 2)
        self.branch1 = nn.Conv3d(in_ch, c1, 1, bias=False)
        self.branch3 = nn.Sequential(nn.Conv3d(in_ch, red, 1),
                                     nn.Conv3d(red, c3, 3, padding=1, bias=False))
        self.branch5 = nn.Sequential(nn.Conv3d(in_ch, red, 1),
                                     nn.Conv3d(red, c5, 5, padding=2, bias=False))
        self.norm = nn.InstanceNorm3d(out_ch, affine=True)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, x):
        y = torch.cat([self.branch1(x), self.branch3(x), self.branch5(x)], dim=1)
        return self.act(self.norm(y))


def inception_block(in_ch, out_ch):
    return nn.Sequential(InceptionModule(in_ch, out_ch), InceptionModule(out_ch, out_ch))


class AttentionGate(nn.Module):
    """Additive attention on a skip connection, gated by coarser decoder features.

    alpha = sigmoid(psi(relu(W_s skip + up(W_g gating)))), output = alpha * skip.
    """

    def __init__(self, skip_ch, gating_ch, inter_ch=None):
        super().__init__()
        inter_ch = inter_ch or max(1, skip_ch // 2)
        self.skip_ch, self.gating_ch = skip_ch, gating_ch
        self.w_skip = nn.Conv3d(skip_ch, inter_ch, 1)
        self.w_gate = nn.Conv3d(gating_ch, inter_ch, 1)
        self.psi = nn.Conv3d(inter_ch, 1, 1)

    def coefficients(self, skip, gating):
        if skip.shape[1] != self.skip_ch or gating.shape[1] != self.gating_ch:
            raise ValueError(
                f"attention gate expects {self.skip_ch}/{self.gating_ch} channels, "
                f"got {skip.shape[1]}/{gating.shape[1]}")
        g = F.interpolate(self.w_gate(gating), size=skip.shape[2:], mode="trilinear",
                          align_corners=False)
        return torch.sigmoid(self.psi(F.relu(self.w_skip(skip) + g)))

    def forward(self, skip, gating):
        return self.coefficients(skip, gating) * skip


class Encoder(nn.Module):
    def __init__(self, cfg: DetectorConfig, in_ch: int):
        super().__init__()
        block = inception_block if cfg.use_inception else conv_block
        self.multiscale = cfg.use_multiscale_inputs
        self.blocks = nn.ModuleList()
        prev = in_ch
        for k in range(cfg.levels):
            extra = in_ch if (self.multiscale and k > 0) else 0
            self.blocks.append(block(prev + extra, cfg.channels(k)))
            prev = cfg.channels(k)

    def forward(self, x):
        feats = []
        h = x
        for k, blk in enumerate(self.blocks):
            if k > 0:
                h = F.max_pool3d(h, 2)
                if self.multiscale:
                    h = torch.cat([h, F.avg_pool3d(x, 2 ** k)], dim=1)
            h = blk(h)
            feats.append(h)
        return feats


class SiameseUNet3D(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        L = cfg.levels
        block = inception_block if cfg.use_inception else conv_block
        in_ch = cfg.in_channels if cfg.siamese else 2 * cfg.in_channels
        self.encoder = Encoder(cfg, in_ch)
        if cfg.siamese:
            self.fuse = nn.ModuleList(
                nn.Sequential(nn.Conv3d(2 * cfg.channels(k), cfg.channels(k), 1), nn.LeakyReLU(0.1))
                for k in range(L))
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        self.gates = nn.ModuleList()
        for k in range(L - 2, -1, -1):
            c, c_up = cfg.channels(k), cfg.channels(k + 1)
            self.up.append(nn.ConvTranspose3d(c_up, c, 2, stride=2))
            self.dec.append(block(2 * c, c))
            if cfg.use_attention_gates:
                self.gates.append(AttentionGate(c, c_up))
        self.head = nn.Conv3d(cfg.channels(0), 1, 1)
        if cfg.use_deep_supervision:
            self.side_heads = nn.ModuleList(
                nn.Conv3d(cfg.channels(k), 1, 1) for k in range(L - 1, 0, -1))
        # start every head near the target prior so the first steps do not
        # settle on the all-positive optimum of an FN-weighted loss
        prior_logit = math.log(cfg.head_prior / (1.0 - cfg.head_prior))
        for h in self.heads():
            nn.init.constant_(h.bias, prior_logit)

    def heads(self):
        return [self.head] + (list(self.side_heads) if self.cfg.use_deep_supervision else [])

    @property
    def streams(self):
        """The encoders applied to x1 and x2; one shared module when siamese."""
        return (self.encoder, self.encoder) if self.cfg.siamese else (self.encoder,)

    @property
    def divisor(self) -> int:
        return 2 ** (self.cfg.levels - 1)

    def check_input(self, x1, x2):
        for name, x in (("x1", x1), ("x2", x2)):
            if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
                raise ValueError(
                    f"{name} must be (B, {self.cfg.in_channels}, H, W, D), got {tuple(x.shape)}")
        if x1.shape != x2.shape:
            raise ValueError(f"x1 {tuple(x1.shape)} and x2 {tuple(x2.shape)} differ in shape")
        for axis, n in zip("HWD", x1.shape[2:]):
            if n % self.divisor:
                raise ValueError(f"axis {axis} has size {n}, not divisible by {self.divisor}")

    def encode(self, x1, x2):
        if not self.cfg.siamese:
            return self.encoder(torch.cat([x1, x2], dim=1))
        f1 = self.encoder(x1)
        f2 = self.encoder(x2)
        return [fuse(torch.cat([a, b], dim=1)) for fuse, a, b in zip(self.fuse, f1, f2)]

    def forward(self, x1, x2) -> DetectorOutput:
        self.check_input(x1, x2)
        feats = self.encode(x1, x2)
        d = feats[-1]
        decoded = [d]
        for i, k in enumerate(range(self.cfg.levels - 2, -1, -1)):
            skip = feats[k]
            if self.cfg.use_attention_gates:
                skip = self.gates[i](skip, d)
            d = self.dec[i](torch.cat([self.up[i](d), skip], dim=1))
            decoded.append(d)
        final = torch.sigmoid(self.head(d))
        sides = []
        if self.cfg.use_deep_supervision:
            sides = [torch.sigmoid(h(f)) for h, f in zip(self.side_heads, decoded[:-1])]
        return DetectorOutput(final, sides)

    def kernel_l2(self) -> torch.Tensor:
        """Sum of squared convolution kernels; biases and norm gains excluded."""
        total = torch.zeros(())
        for m in self.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                total = total + (m.weight ** 2).sum()
        return total


def build_detector(cfg: DetectorConfig) -> SiameseUNet3D:
    return SiameseUNet3D(cfg)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def siamese_inputs(x, x_hat):
    """Build ``x1 = (x, |x - x_hat|)`` and ``x2 = (x_hat, |x - x_hat|)``.

    Accepts arrays or tensors shaped (H, W, D) or (B, H, W, D) and returns
    float32 tensors shaped (B, 2, H, W, D).
    """
    x = torch.as_tensor(x, dtype=torch.float32)
    x_hat = torch.as_tensor(x_hat, dtype=torch.float32)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.ndim == 3:
        x, x_hat = x[None], x_hat[None]
    diff = (x - x_hat).abs()
    return torch.stack([x, diff], dim=1), torch.stack([x_hat, diff], dim=1)
