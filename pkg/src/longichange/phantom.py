"""Synthetic longitudinal scans with known lesion changes.

Each subject is a textured ellipsoidal "brain" with a darker core and a few
bright static lesions. Both scans of a pair get independent Gaussian noise
and a mild multiplicative bias field. Change pairs also gain new lesions, or
enlarged existing ones, in the follow-up scan. The changed voxels are recorded
exactly as the ground-truth mask.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .volume import ScanPair, Volume


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomConfig:
    shape: Tuple[int, int, int] = (48, 48, 16)
    n_pairs: int = 10
    lesion_count_range: Tuple[int, int] = (2, 5)
    lesion_radius_range: Tuple[int, int] = (2, 4)
    change_count_range: Tuple[int, int] = (1, 3)
    lesion_intensity: float = 0.9
    noise_sigma: float = 0.02
    bias_strength: float = 0.01
    change_probability: float = 0.5
    seed: int = 0
    id_prefix: str = "sub"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.lesion_count_range = tuple(int(v) for v in self.lesion_count_range)
        self.lesion_radius_range = tuple(int(v) for v in self.lesion_radius_range)
        self.change_count_range = tuple(int(v) for v in self.change_count_range)
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ValueError("shape: need three axes of at least 4 voxels")
        if self.lesion_radius_range[0] < 1 or self.lesion_radius_range[0] > self.lesion_radius_range[1]:
            raise ValueError("lesion_radius_range: need 1 <= min <= max")
        if not 0.0 <= self.lesion_intensity <= 1.0:
            raise ValueError("lesion_intensity: must lie in [0, 1]")
        if not 0.0 <= self.change_probability <= 1.0:
            raise ValueError("change_probability: must lie in [0, 1]")
        if self.change_count_range[0] < 1:
            raise ValueError("change_count_range: a change pair needs at least one change")
        if self.n_pairs < 0 or self.noise_sigma < 0 or self.bias_strength < 0:
            raise ValueError("n_pairs/noise_sigma/bias_strength: must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PhantomSubject:
    pair: ScanPair
    clean_baseline: np.ndarray
    clean_followup: np.ndarray
    brain: np.ndarray
    # one boolean mask per inserted change
    change_regions: List[np.ndarray] = field(default_factory=list)


def _ball(shape, centre, radius):
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, centre))
    return d2 <= radius ** 2


def _anatomy(shape, rng):
    centre = [(n - 1) / 2 + rng.uniform(-0.03, 0.03) * n for n in shape]
    semi = [n * rng.uniform(0.40, 0.45) for n in shape]
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, centre, semi))
    brain = r <= 1.0
    core = r <= 0.2
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), 2.0)
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    img = np.where(brain, 0.35 + 0.25 * tex, 0.0)
    img[core] = 0.2 + 0.05 * tex[core]
    return img, brain


def _place(rng, brain, occupied, radius, margin=2, attempts=100):
    """Centre of a ball inside ``brain`` that stays ``margin`` voxels clear of ``occupied``."""
    shape = brain.shape
    inner = ndimage.binary_erosion(brain, iterations=radius)
    blocked = ndimage.binary_dilation(occupied, iterations=radius + margin) if occupied.any() \
        else np.zeros_like(occupied)
    free = np.argwhere(inner & ~blocked)
    for _ in range(attempts):
        if len(free) == 0:
            break
        c = free[rng.integers(len(free))]
        ball = _ball(shape, c, radius)
        if np.all(brain[ball]) and not np.any(ball & ndimage.binary_dilation(occupied, iterations=margin)):
            return c, ball
    raise PhantomError(f"could not place a lesion of radius {radius} after {attempts} attempts")


def _scan(clean, brain, cfg, rng):
    shape = clean.shape
    coords = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    w = rng.uniform(-1, 1, size=3)
    field_ = sum(wi * ci for wi, ci in zip(w, coords)) / 3.0
    out = clean * (1.0 + cfg.bias_strength * field_)
    out = out + cfg.noise_sigma * rng.standard_normal(shape) * brain
    return np.clip(np.where(brain, out, 0.0), 0.0, 1.0).astype(np.float32)


def generate_subject(cfg: PhantomConfig, index: int, change: Optional[bool] = None) -> PhantomSubject:
    rng = np.random.default_rng([cfg.seed, index])
    is_change = rng.random() < cfg.change_probability
    if change is not None:
        is_change = change
    shape = cfg.shape
    img, brain = _anatomy(shape, rng)
    occupied = np.zeros(shape, dtype=bool)
    lesions = []
    r_lo, r_hi = cfg.lesion_radius_range
    for _ in range(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1)):
        radius = int(rng.integers(r_lo, r_hi + 1))
        c, ball = _place(rng, brain, occupied, radius)
        occupied |= ball
        lesions.append((c, radius))
        img[ball] = cfg.lesion_intensity
    baseline = img.copy()
    followup = img.copy()

    regions = []
    if is_change:
        n_changes = int(rng.integers(cfg.change_count_range[0], cfg.change_count_range[1] + 1))
        expandable = list(range(len(lesions)))
        for _ in range(n_changes):
            if expandable and rng.random() < 0.3:
                # enlarge an existing lesion; the shell is the change
                j = expandable.pop(int(rng.integers(len(expandable))))
                c, radius = lesions[j]
                grown = _ball(shape, c, radius + r_lo)
                others = occupied & ~_ball(shape, c, radius)
                if np.all(brain[grown]) and not np.any(
                        ndimage.binary_dilation(grown, iterations=2) & others):
                    region = grown & ~_ball(shape, c, radius)
                    occupied |= grown
                    followup[region] = cfg.lesion_intensity
                    regions.append(region)
                    continue
            radius = int(rng.integers(r_lo, r_hi + 1))
            _, ball = _place(rng, brain, occupied, radius)
            occupied |= ball
            followup[ball] = cfg.lesion_intensity
            regions.append(ball)

    subject_id = f"{cfg.id_prefix}{index:04d}"
    b = Volume(_scan(baseline, brain, cfg, rng), role="intensity")
    f = Volume(_scan(followup, brain, cfg, rng), role="intensity")
    mask = None
    if is_change:
        union = np.zeros(shape, dtype=np.uint8)
        for region in regions:
            union[region] = 1
        mask = Volume(union, role="binary_mask")
    pair = ScanPair(b, f, subject_id, mask, "Change" if is_change else "NoChange")
    return PhantomSubject(pair, baseline, followup, brain, regions)


def generate_dataset(cfg: PhantomConfig) -> Tuple[List[ScanPair], List[ScanPair]]:
    """Return ``(no_change_pairs, change_pairs)`` for ``cfg.n_pairs`` subjects."""
    no_change, change = [], []
    for i in range(cfg.n_pairs):
        pair = generate_subject(cfg, i).pair
        (change if pair.label == "Change" else no_change).append(pair)
    return no_change, change
