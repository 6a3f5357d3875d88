"""Desk-scale end-to-end benchmark on phantom data.

Trains the VAE and a small detector on synthetic NoChange pairs, runs
inference on synthetic Change pairs and scores them lesion-wise. Everything
is sized to finish in minutes on one CPU core; counts shrink relative to the
full-scale schedules but the procedure is unchanged.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .detector import DetectorConfig, SiameseUNet3D
from .evaluation import PairMetrics, aggregate, match_lesions, pair_metrics
from .inference import Blob, BlobSet, connected_components, postprocess, predict_change
from .losses import LossConfig
from .phantom import PhantomConfig, generate_dataset
from .supermix import SuperMixConfig
from .training import detector_schedule, train_detector, train_vae, vae_schedule
from .vae import VaeConfig
from .volume import ScanPair

log = logging.getLogger(__name__)


@dataclass
class DeskSettings:
    shape: tuple = (48, 48, 16)
    n_train: int = 40
    n_test: int = 20
    train_seed: int = 1
    test_seed: int = 2
    vae_iterations: int = 10
    vae_samples: int = 20
    # far fewer steps than the full schedule, so a larger step size
    vae_lr: float = 1e-3
    detector_iterations: int = 15
    detector_samples: int = 40
    detector_lr: float = 2e-4
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(
        levels=3, base_channels=8, use_inception=False))
    kappa: float = 0.1
    min_blob: int = 20
    iou_min: float = 0.01
    baseline_draws: int = 20
    seed: int = 0

    @property
    def detector_steps(self) -> int:
        return self.detector_iterations * -(-self.detector_samples // 2)


class SlimCache(dict):
    """Synth cache that drops the reconstruction and tessellation to save memory."""

    def __setitem__(self, key, s):
        super().__setitem__(key, replace(s, x_tilde=None, segmentation=None))


def _nearest_blob(brain_idx: np.ndarray, shape, size: int, rng) -> np.ndarray:
    centre = brain_idx[rng.integers(len(brain_idx))]
    d = ((brain_idx - centre) ** 2).sum(axis=1)
    pick = np.argsort(d, kind="stable")[:size]
    return brain_idx[pick]


def random_mask_baseline(pred: BlobSet, support: np.ndarray, rng) -> BlobSet:
    """Replace each predicted blob by a compact blob of equal size at a random spot in ``support``.

    The blob is the ``size`` support voxels nearest to a uniformly drawn
    support voxel, so the random mask has the prediction's blob count and
    voxel budget but no information about where change happened.
    """
    idx = np.argwhere(support)
    blobs = [Blob(i, _nearest_blob(idx, pred.source_shape, b.size, rng), b.size)
             for i, b in enumerate(pred.blobs)]
    return BlobSet(blobs, pred.source_shape, pred.connectivity)


def score(net: SiameseUNet3D, pairs: Sequence[ScanPair], s: DeskSettings):
    per_pair: List[PairMetrics] = []
    preds: List[BlobSet] = []
    for p in pairs:
        blobs = postprocess(predict_change(p, net), s.kappa, s.min_blob)
        gt = connected_components(p.change_mask)
        per_pair.append(pair_metrics(match_lesions(gt, blobs, s.iou_min), p.subject_id))
        preds.append(blobs)
    return per_pair, preds


def baseline_ltpr(pairs: Sequence[ScanPair], preds: Sequence[BlobSet], s: DeskSettings) -> float:
    rng = np.random.default_rng([s.seed, 99])
    vals = []
    for _ in range(s.baseline_draws):
        for p, pred in zip(pairs, preds):
            rnd = random_mask_baseline(pred, p.baseline.data > 0, rng)
            gt = connected_components(p.change_mask)
            vals.append(pair_metrics(match_lesions(gt, rnd, s.iou_min)).ltpr)
    return float(np.mean(vals))


def run(s: Optional[DeskSettings] = None, losses: Sequence[str] = ("focal_tversky", "bce")) -> Dict:
    """Train once per loss kind (sharing the VAE and synthesised samples) and score each."""
    s = s or DeskSettings()
    t0 = time.time()
    train, _ = generate_dataset(PhantomConfig(shape=s.shape, n_pairs=s.n_train, change_probability=0.0,
                                              seed=s.train_seed))
    _, test = generate_dataset(PhantomConfig(shape=s.shape, n_pairs=s.n_test, change_probability=1.0,
                                             seed=s.test_seed, id_prefix="test"))
    vae, vae_hist = train_vae(train, VaeConfig(), vae_schedule(
        outer_iterations=s.vae_iterations, samples_per_iteration=s.vae_samples, lr_initial=s.vae_lr,
        seed=s.seed), s.shape)
    log.info("vae trained in %.0fs (recon %.4f)", time.time() - t0, vae_hist[-1]["recon_l1"])
    cache = SlimCache()
    sched = detector_schedule(outer_iterations=s.detector_iterations,
                              samples_per_iteration=s.detector_samples, lr_initial=s.detector_lr,
                              seed=s.seed)
    out = {"settings": s, "vae_history": vae_hist, "runs": {}}
    for kind in losses:
        t1 = time.time()
        net, hist = train_detector(train, vae, s.detector, LossConfig(kind=kind), SuperMixConfig(),
                                   sched, synth_cache=cache)
        per_pair, preds = score(net, test, s)
        summary = aggregate(per_pair)
        run_out = {"history": hist, "per_pair": per_pair, "summary": summary,
                   "train_time_s": time.time() - t1}
        if kind == losses[0]:
            run_out["random_baseline_ltpr"] = baseline_ltpr(test, preds, s)
        out["runs"][kind] = run_out
        log.info("%s: LTPR %.3f PPV %.3f", kind, summary["ltpr"]["mean"], summary["ppv"]["mean"])
    out["wall_time_s"] = time.time() - t0
    return out
