"""Two-stage training: the VAE on NoChange crops, then the detector on SuperMix triples.

One outer iteration streams ``samples_per_iteration`` freshly drawn samples
through the optimiser in mini-batches. Every sample draws from its own RNG
stream keyed by ``(seed, stage, global sample index)``. The run is therefore
fixed by the seed, config and data, whatever order the samples are produced in.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, MutableMapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .detector import DetectorConfig, SiameseUNet3D, siamese_inputs
from .losses import LossConfig, detector_loss
from .supermix import SuperMixConfig, SynthSample, make_training_triple
from .vae import VAE, VaeConfig, vae_loss
from .volume import ScanPair, random_crop_pair

log = logging.getLogger(__name__)

_VAE_STREAM = 1
_DETECTOR_STREAM = 2


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    stage: str = "detector"
    outer_iterations: int = 60
    samples_per_iteration: int = 100
    mini_batch: int = 2
    lr_initial: float = 2e-4
    lr_decay: float = 1e-3
    optimizer: str = "adam"
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.stage not in ("vae", "detector"):
            raise ValueError(f"stage: unknown stage {self.stage!r}")
        for name in ("outer_iterations", "samples_per_iteration", "mini_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial: must be > 0")
        if self.lr_decay < 0:
            raise ValueError("lr_decay: must be >= 0")
        if self.optimizer != "adam":
            raise ValueError("optimizer: only 'adam' is supported")

    @property
    def steps_per_iteration(self) -> int:
        return math.ceil(self.samples_per_iteration / self.mini_batch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def vae_schedule(**overrides) -> TrainSchedule:
    base = dict(stage="vae", outer_iterations=200, samples_per_iteration=4096, mini_batch=2,
                lr_initial=5e-5, lr_decay=0.0)
    base.update(overrides)
    return TrainSchedule(**base)


def detector_schedule(**overrides) -> TrainSchedule:
    base = dict(stage="detector", outer_iterations=60, samples_per_iteration=100, mini_batch=2,
                lr_initial=2e-4, lr_decay=1e-3)
    base.update(overrides)
    return TrainSchedule(**base)


def inverse_time_lr(lr_initial: float, decay: float, step: int) -> float:
    return lr_initial / (1.0 + decay * step)


def sample_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def _optimizer(model, sched: TrainSchedule):
    opt = torch.optim.Adam(model.parameters(), lr=sched.lr_initial, betas=sched.adam_betas)
    lr_sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: inverse_time_lr(1.0, sched.lr_decay, s))
    return opt, lr_sched


def _init_model(factory: Callable[[], torch.nn.Module], seed: int) -> torch.nn.Module:
    # weight init draws from torch's global RNG; keep that draw local to this call
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def _check_finite(loss: torch.Tensor, stage: str, iteration: int, step: int, parts: dict):
    if not torch.isfinite(loss):
        raise TrainingError(
            f"{stage}: non-finite loss at iteration {iteration}, step {step} (components {parts})")


def write_history(history: Sequence[dict], path) -> Path:
    """Loss history as CSV: iteration, stage, loss, then the component columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: List[str] = []
    for row in history:
        for k in row:
            if k not in keys and k not in ("iteration", "stage", "loss"):
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "stage", "loss"] + keys)
        for row in history:
            w.writerow([row["iteration"], row["stage"], repr(row["loss"])] +
                       [repr(row[k]) if k in row else "" for k in keys])
    return path


def train_vae(pairs: Sequence[ScanPair], cfg: VaeConfig, sched: TrainSchedule,
              crop_shape: Sequence[int], checkpoint_path=None,
              model: Optional[VAE] = None) -> Tuple[VAE, List[dict]]:
    """Fit the VAE on random crops of NoChange scans (both time points)."""
    if not pairs:
        raise TrainingError("train_vae: empty dataset")
    crop_shape = tuple(int(c) for c in crop_shape)
    model = model or _init_model(lambda: VAE(cfg), sched.seed)
    model.check_shape(crop_shape)
    model.train()
    opt, lr_sched = _optimizer(model, sched)
    history: List[dict] = []
    index = 0
    step = 0
    for it in range(1, sched.outer_iterations + 1):
        totals = np.zeros(3)
        n_batches = 0
        remaining = sched.samples_per_iteration
        while remaining > 0:
            bs = min(sched.mini_batch, remaining)
            crops = []
            for _ in range(bs):
                rng = sample_rng(sched.seed, _VAE_STREAM, index)
                index += 1
                pair = pairs[int(rng.integers(len(pairs)))]
                cropped = random_crop_pair(pair, crop_shape, rng)
                vol = cropped.baseline if rng.random() < 0.5 else cropped.followup
                crops.append(np.asarray(vol.data, dtype=np.float32))
            x = torch.from_numpy(np.stack(crops))[:, None]
            gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
            recon, code = model(x, gen)
            total, rec, kl = vae_loss(x, recon, code, cfg)
            rec, kl = float(rec.detach()), float(kl.detach())
            _check_finite(total, "vae", it, step, {"recon_l1": rec, "kl": kl})
            opt.zero_grad()
            total.backward()
            opt.step()
            lr_sched.step()
            step += 1
            totals += [float(total.detach()), rec, kl]
            n_batches += 1
            remaining -= bs
        mean = totals / n_batches
        history.append({"iteration": it, "stage": "vae", "loss": mean[0],
                        "recon_l1": mean[1], "kl": mean[2], "steps": step})
        log.info("vae iteration %d loss %.5f recon %.5f kl %.5f", it, *mean)
        if checkpoint_path and sched.checkpoint_every and it % sched.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path, "vae", cfg.to_dict(), {"iteration": it})
    model.eval()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, "vae", cfg.to_dict(),
                        {"iteration": sched.outer_iterations, "steps": step})
    return model, history


def synth_stream(pairs: Sequence[ScanPair], vae: VAE, smx_cfg: SuperMixConfig, seed: int,
                 index: int, crop_shape=None) -> SynthSample:
    """The training triple for global sample ``index``; a pure function of its inputs."""
    rng = sample_rng(seed, _DETECTOR_STREAM, index)
    pair = pairs[int(rng.integers(len(pairs)))]
    return make_training_triple(pair, vae, smx_cfg, rng, crop_shape)


def train_detector(pairs: Sequence[ScanPair], vae: VAE, det_cfg: DetectorConfig,
                   loss_cfg: LossConfig, smx_cfg: SuperMixConfig, sched: TrainSchedule,
                   crop_shape: Optional[Sequence[int]] = None, checkpoint_path=None,
                   synth_cache: Optional[MutableMapping] = None,
                   model: Optional[SiameseUNet3D] = None) -> Tuple[SiameseUNet3D, List[dict]]:
    """Fit the change detector on SuperMix triples synthesised on the fly.

    ``synth_cache`` (optional) memoises triples by ``(seed, index)``. Runs that
    share a seed, VAE, SuperMix config and data can pass the same dict to skip
    re-synthesis. The result is identical either way.
    """
    if not pairs:
        raise TrainingError("train_detector: empty dataset")
    bad = [p.subject_id for p in pairs if p.label != "NoChange"]
    if bad:
        raise TrainingError(f"train_detector: Change pairs in training data: {bad[:5]}")
    vae.check_shape(crop_shape or pairs[0].baseline.shape)
    model = model or _init_model(lambda: SiameseUNet3D(det_cfg), sched.seed)
    model.train()
    opt, lr_sched = _optimizer(model, sched)
    history: List[dict] = []
    index = 0
    step = 0
    for it in range(1, sched.outer_iterations + 1):
        sums: Dict[str, float] = {}
        n_batches = 0
        empty = 0
        t0 = time.time()
        remaining = sched.samples_per_iteration
        while remaining > 0:
            bs = min(sched.mini_batch, remaining)
            samples = []
            for _ in range(bs):
                key = (sched.seed, index)
                if synth_cache is not None and key in synth_cache:
                    s = synth_cache[key]
                else:
                    s = synth_stream(pairs, vae, smx_cfg, sched.seed, index, crop_shape)
                    if synth_cache is not None:
                        synth_cache[key] = s
                index += 1
                empty += int(not s.y_hat.data.any())
                samples.append(s)
            xs = np.stack([s.x_prime.data for s in samples])
            hs = np.stack([s.x_hat.data for s in samples])
            y = torch.from_numpy(np.stack([s.y_hat.data for s in samples]).astype(np.float32))[:, None]
            x1, x2 = siamese_inputs(xs, hs)
            out = model(x1, x2)
            loss, parts = detector_loss(out, y, loss_cfg)
            parts["detector_loss"] = float(loss.detach())
            if det_cfg.l2_weight > 0:
                l2 = model.kernel_l2()
                parts["l2"] = float(l2.detach())
                loss = loss + det_cfg.l2_weight * l2
            _check_finite(loss, "detector", it, step, parts)
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            step += 1
            parts["loss"] = float(loss.detach())
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
            remaining -= bs
        row = {"iteration": it, "stage": "detector"}
        row.update({k: v / n_batches for k, v in sums.items()})
        row["empty_targets"] = empty
        row["steps"] = step
        row["lr"] = opt.param_groups[0]["lr"]
        history.append(row)
        log.info("detector iteration %d loss %.5f (%d empty targets, %.1fs)",
                 it, row["loss"], empty, time.time() - t0)
        if checkpoint_path and sched.checkpoint_every and it % sched.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path, "detector", det_cfg.to_dict(),
                            {"iteration": it, "loss": loss_cfg.to_dict()})
    model.eval()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, "detector", det_cfg.to_dict(),
                        {"iteration": sched.outer_iterations, "steps": step,
                         "loss": loss_cfg.to_dict()})
    return model, history
