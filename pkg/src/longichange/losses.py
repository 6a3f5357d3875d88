"""Tversky index, focal Tversky loss and the deep-supervision objective.

Five-dimensional inputs are read as (B, C, H, W, D) batches and reduced per
sample; anything else is a single sample. numpy arrays are accepted and
promoted to float64.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class LossConfig:
    alpha: float = 0.75
    beta: float = 0.25
    gamma_final: float = 1.0
    gamma_intermediate: float = 0.75
    epsilon: float = 1e-6
    ds_weights: Tuple[float, ...] = field(default=(0.5,))
    kind: str = "focal_tversky"  # or "bce"

    def __post_init__(self):
        self.ds_weights = tuple(float(w) for w in self.ds_weights)
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ValueError(f"alpha/beta: must sum to 1, got {self.alpha} + {self.beta}")
        if self.gamma_final <= 0 or self.gamma_intermediate <= 0:
            raise ValueError("gamma_final/gamma_intermediate: must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon: must be > 0")
        if any(w < 0 for w in self.ds_weights):
            raise ValueError("ds_weights: must be nonnegative")
        if self.kind not in ("focal_tversky", "bce"):
            raise ValueError(f"kind: unknown loss {self.kind!r}")

    def side_weight(self, k: int) -> float:
        # a single weight is broadcast to every side head
        if len(self.ds_weights) == 1:
            return self.ds_weights[0]
        return self.ds_weights[k]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ds_weights"] = list(self.ds_weights)
        return d


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1) if x.ndim == 5 else x.reshape(1, -1)


def soft_counts(y_true, y_pred):
    """Per-sample soft (TP, FN, FP)."""
    p = _batched(_as_tensor(y_pred))
    t = _batched(_as_tensor(y_true)).to(p.dtype)
    tp = (t * p).sum(1)
    fn = (t * (1 - p)).sum(1)
    fp = ((1 - t) * p).sum(1)
    return tp, fn, fp


def tversky_index(y_true, y_pred, alpha=0.75, beta=0.25, epsilon=1e-6) -> torch.Tensor:
    """``(TP + eps) / (TP + alpha*FN + beta*FP + eps)`` for each sample."""
    tp, fn, fp = soft_counts(y_true, y_pred)
    return (tp + epsilon) / (tp + alpha * fn + beta * fp + epsilon)


def focal_tversky(y_true, y_pred, alpha=0.75, beta=0.25, gamma=1.0, epsilon=1e-6) -> torch.Tensor:
    ti = tversky_index(y_true, y_pred, alpha, beta, epsilon)
    # clamp guards the fractional power against -0 from rounding when TI == 1
    return torch.clamp(1 - ti, min=0).pow(gamma).mean()


def bce(y_true, y_pred, eps=1e-7) -> torch.Tensor:
    t = _as_tensor(y_true)
    p = _as_tensor(y_pred)
    p = p.clamp(eps, 1 - eps)
    return F.binary_cross_entropy(p, t.to(p.dtype))


def downsample_target(y_true: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    """Max-pool a (B, 1, H, W, D) target down to ``shape``."""
    shape = tuple(shape)
    if tuple(y_true.shape[2:]) == shape:
        return y_true
    factors = [n // m for n, m in zip(y_true.shape[2:], shape)]
    if any(f * m != n for f, m, n in zip(factors, shape, y_true.shape[2:])):
        raise ValueError(f"cannot pool target {tuple(y_true.shape[2:])} to {shape}")
    return F.max_pool3d(y_true, kernel_size=factors)


def head_loss(y_true, y_pred, cfg: LossConfig, gamma: float) -> torch.Tensor:
    if cfg.kind == "bce":
        return bce(y_true, y_pred)
    return focal_tversky(y_true, y_pred, cfg.alpha, cfg.beta, gamma, cfg.epsilon)


def detector_loss(out, y_true: torch.Tensor, cfg: LossConfig) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Final-head loss plus weighted side-head losses.

    ``out`` is a DetectorOutput; side targets are max-pooled copies of
    ``y_true``. Returns the total and a per-head breakdown.
    """
    y_true = _as_tensor(y_true)
    if y_true.shape != out.final.shape:
        raise ValueError(f"target {tuple(y_true.shape)} does not match final head "
                         f"{tuple(out.final.shape)}")
    y_true = y_true.to(out.final.dtype)
    total = head_loss(y_true, out.final, cfg, cfg.gamma_final)
    parts = {"final": float(total.detach())}
    for k, side in enumerate(out.side_outputs):
        target = downsample_target(y_true, side.shape[2:])
        if target.shape != side.shape:
            raise ValueError(f"side head {k} has shape {tuple(side.shape)}")
        loss_k = head_loss(target, side, cfg, cfg.gamma_intermediate)
        parts[f"side{k}"] = float(loss_k.detach())
        total = total + cfg.side_weight(k) * loss_k
    return total, parts
