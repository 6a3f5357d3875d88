"""SuperMix: synthetic lesion changes built from super-voxels.

Each super-voxel of a scan is kept with probability ``tau`` and otherwise
replaced by the same region of a perturbed VAE reconstruction. The replaced
regions form the pseudo-label.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .superpixel import SuperpixelSegmentation, slic3d
from .volume import ScanPair, Volume, VolumeError


@dataclass
class SuperMixConfig:
    tau: float = 0.98
    n_seg_min: int = 200
    n_seg_max: int = 5000
    delta: float = 5.0
    compactness: float = 0.1
    slic_max_iter: int = 10
    # "volume": super-voxels on the whole scan, then cropped; "crop": on the crop
    superpixel_scope: str = "volume"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau: must lie in [0, 1]")
        if not 1 <= self.n_seg_min <= self.n_seg_max:
            raise ValueError("n_seg_min/n_seg_max: need 1 <= n_seg_min <= n_seg_max")
        if self.delta < 0:
            raise ValueError("delta: must be >= 0")
        if self.superpixel_scope not in ("volume", "crop"):
            raise ValueError(f"superpixel_scope: unknown value {self.superpixel_scope!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SynthSample:
    x_prime: Volume
    x_hat: Volume
    y_hat: Volume
    lambda_draws: np.ndarray
    tau: float
    n_seg_used: int
    x_tilde: Optional[Volume] = None
    segmentation: Optional[SuperpixelSegmentation] = None

    @property
    def flipped_fraction(self) -> float:
        return float(1.0 - self.lambda_draws.mean())


def sample_nseg(cfg: SuperMixConfig, rng: np.random.Generator) -> int:
    """Log-uniform draw between ``n_seg_min`` and ``n_seg_max``."""
    u = rng.uniform(math.log(cfg.n_seg_min), math.log(cfg.n_seg_max))
    return int(min(max(round(math.exp(u)), cfg.n_seg_min), cfg.n_seg_max))


def synthesize(x: Volume, x_tilde: Volume, seg: SuperpixelSegmentation, tau: float,
               rng: np.random.Generator, x_hat: Optional[Volume] = None) -> SynthSample:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if x.shape != x_tilde.shape or x.shape != seg.labels.shape:
        raise VolumeError(
            f"shape mismatch: x {x.shape}, x_tilde {x_tilde.shape}, labels {seg.labels.shape}")
    u = rng.random(seg.n_actual)
    keep = u < tau
    y = ~keep[seg.labels.data]
    x_prime = np.where(y, x_tilde.data, x.data)
    return SynthSample(
        x_prime=x.replace(data=x_prime, role="intensity"),
        x_hat=x if x_hat is None else x_hat,
        y_hat=Volume(y.astype(np.uint8), x.spacing, "binary_mask"),
        lambda_draws=keep.astype(np.uint8),
        tau=float(tau),
        n_seg_used=seg.n_actual,
        x_tilde=x_tilde,
        segmentation=seg,
    )


def _crop_segmentation(seg: SuperpixelSegmentation, sl) -> SuperpixelSegmentation:
    _, inv = np.unique(seg.labels.data[sl], return_inverse=True)
    inv = inv.reshape(seg.labels.data[sl].shape)
    return SuperpixelSegmentation(
        labels=seg.labels.replace(data=inv),
        n_requested=seg.n_requested,
        n_actual=int(inv.max()) + 1,
        compactness=seg.compactness,
        iterations_run=seg.iterations_run,
        energy_history=seg.energy_history,
    )


def make_training_triple(pair: ScanPair, vae, cfg: SuperMixConfig, rng: np.random.Generator,
                         crop_shape: Optional[Sequence[int]] = None) -> SynthSample:
    """Turn a NoChange pair into a (mixed baseline, followup, pseudo-label) triple."""
    from .vae import perturbed_reconstruction

    if pair.label != "NoChange":
        raise ValueError("synthesis only valid on no-change pairs")
    shape = pair.baseline.shape
    n_seg = sample_nseg(cfg, rng)
    if crop_shape is None:
        sl = tuple(slice(0, n) for n in shape)
    else:
        crop_shape = tuple(int(c) for c in crop_shape)
        if any(c > n for c, n in zip(crop_shape, shape)):
            raise VolumeError(f"crop {crop_shape} does not fit inside volume {shape}")
        origin = [int(rng.integers(0, n - c + 1)) for n, c in zip(shape, crop_shape)]
        sl = tuple(slice(o, o + c) for o, c in zip(origin, crop_shape))
    x = pair.baseline.replace(data=pair.baseline.data[sl])
    x_hat = pair.followup.replace(data=pair.followup.data[sl])

    if cfg.superpixel_scope == "volume":
        n = min(n_seg, pair.baseline.data.size)
        seg = _crop_segmentation(
            slic3d(pair.baseline, n, cfg.compactness, cfg.slic_max_iter), sl)
    else:
        seg = slic3d(x, min(n_seg, x.data.size), cfg.compactness, cfg.slic_max_iter)
    x_tilde = perturbed_reconstruction(vae, x, rng, cfg.delta)
    return synthesize(x, x_tilde, seg, cfg.tau, rng, x_hat=x_hat)


def save_synth_sample(s: SynthSample, directory, stem: str = "sample"):
    """Dump a triple (and the reconstruction, if kept) in the native format."""
    from .io import save_volume

    directory = Path(directory)
    paths = {
        "x_prime": save_volume(s.x_prime, directory / f"{stem}_x_prime")[0],
        "x_hat": save_volume(s.x_hat, directory / f"{stem}_x_hat")[0],
        "y_hat": save_volume(s.y_hat, directory / f"{stem}_y_hat")[0],
    }
    if s.x_tilde is not None:
        paths["x_tilde"] = save_volume(s.x_tilde, directory / f"{stem}_x_tilde")[0]
    if s.segmentation is not None:
        paths["labels"] = save_volume(s.segmentation.labels, directory / f"{stem}_labels")[0]
    return paths
