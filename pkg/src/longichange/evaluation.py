"""Lesion-wise matching and the LTPR / LFPR / PPV metrics.

Matching is coverage based. A ground-truth blob counts as detected when at
least one predicted blob overlaps it with IoU >= ``iou_min``. A predicted
blob is a false positive when it reaches that IoU with no ground-truth
blob. Nothing is assigned one-to-one.

Zero-denominator conventions: LTPR is 1 when there is no ground truth, and
when nothing is predicted LFPR is 0 and PPV is 1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .inference import Blob, BlobSet

METRICS = ("ltpr", "lfpr", "ppv")


@dataclass(frozen=True)
class LesionMatchResult:
    ltp: int
    lfn: int
    lfp: int
    matches: List[Tuple[int, int, float]] = field(default_factory=list)


@dataclass(frozen=True)
class PairMetrics:
    ltpr: float
    lfpr: float
    ppv: float
    subject_id: str = ""
    ltp: int = 0
    lfn: int = 0
    lfp: int = 0


def blob_iou(a: Blob, b: Blob, shape) -> float:
    ia = a.flat_indices(shape)
    ib = b.flat_indices(shape)
    inter = np.intersect1d(ia, ib, assume_unique=True).size
    union = ia.size + ib.size - inter
    return inter / union if union else 0.0


def iou_matrix(gt: BlobSet, pred: BlobSet) -> np.ndarray:
    """IoU for every (gt, pred) blob pair, computed from the two label maps."""
    if gt.source_shape != pred.source_shape:
        raise ValueError(f"shape mismatch: {gt.source_shape} vs {pred.source_shape}")
    n_g, n_p = len(gt), len(pred)
    if n_g == 0 or n_p == 0:
        return np.zeros((n_g, n_p))
    lg = gt.label_map().ravel()
    lp = pred.label_map().ravel()
    both = (lg > 0) & (lp > 0)
    inter = np.zeros((n_g + 1, n_p + 1))
    np.add.at(inter, (lg[both], lp[both]), 1)
    inter = inter[1:, 1:]
    sg = np.asarray(gt.sizes, dtype=float)[:, None]
    sp = np.asarray(pred.sizes, dtype=float)[None, :]
    return inter / (sg + sp - inter)


def match_lesions(gt: BlobSet, pred: BlobSet, iou_min: float = 0.01) -> LesionMatchResult:
    iou = iou_matrix(gt, pred)
    hit = iou >= iou_min
    ltp = int(hit.any(axis=1).sum())
    lfn = len(gt) - ltp
    lfp = len(pred) - int(hit.any(axis=0).sum())
    matches = [(int(g), int(p), float(iou[g, p])) for g, p in zip(*np.nonzero(hit))]
    return LesionMatchResult(ltp, lfn, lfp, matches)


def pair_metrics(m: LesionMatchResult, subject_id: str = "") -> PairMetrics:
    ltpr = m.ltp / (m.ltp + m.lfn) if (m.ltp + m.lfn) else 1.0
    if m.ltp + m.lfp:
        lfpr = m.lfp / (m.ltp + m.lfp)
        ppv = m.ltp / (m.ltp + m.lfp)
    else:
        lfpr, ppv = 0.0, 1.0
    return PairMetrics(ltpr, lfpr, ppv, subject_id, m.ltp, m.lfn, m.lfp)


def aggregate(per_pair: Sequence[PairMetrics]) -> Dict[str, Dict[str, float]]:
    """Unweighted mean plus median and quartiles of each metric across pairs."""
    if not per_pair:
        raise ValueError("cannot aggregate an empty list of pairs")
    out = {}
    for name in METRICS:
        vals = np.array([getattr(p, name) for p in per_pair], dtype=float)
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out[name] = {"mean": float(vals.mean()), "median": float(med), "q1": float(q1),
                     "q3": float(q3), "min": float(vals.min()), "max": float(vals.max())}
    out["n_pairs"] = len(per_pair)
    return out


def write_pair_csv(per_pair: Sequence[PairMetrics], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "ltp", "lfn", "lfp", "ltpr", "lfpr", "ppv"])
        for p in per_pair:
            w.writerow([p.subject_id, p.ltp, p.lfn, p.lfp,
                        f"{p.ltpr:.6f}", f"{p.lfpr:.6f}", f"{p.ppv:.6f}"])
    return path


def read_pair_csv(path) -> List[PairMetrics]:
    with open(path, newline="") as fh:
        return [PairMetrics(float(r["ltpr"]), float(r["lfpr"]), float(r["ppv"]), r["subject_id"],
                            int(r["ltp"]), int(r["lfn"]), int(r["lfp"]))
                for r in csv.DictReader(fh)]


def write_summary(summary: dict, path, settings: dict = None) -> Path:
    path = Path(path)
    doc = dict(summary)
    doc["settings"] = settings or {}
    doc["conventions"] = {
        "ltpr_without_ground_truth": 1.0,
        "lfpr_without_predictions": 0.0,
        "ppv_without_predictions": 1.0,
        "matching": "coverage (IoU >= iou_min with any blob), not one-to-one",
    }
    path.write_text(json.dumps(doc, indent=2))
    return path


def write_quartile_table(summary: dict, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "min", "q1", "median", "q3", "max", "mean"])
        for name in METRICS:
            s = summary[name]
            w.writerow([name] + [f"{s[k]:.6f}" for k in ("min", "q1", "median", "q3", "max", "mean")])
    return path


def evaluate_pair(gt_mask, pred_mask, iou_min=0.01, min_size=0, connectivity=26,
                  subject_id="") -> PairMetrics:
    """Label both masks, drop predicted blobs under ``min_size`` and score."""
    from .inference import connected_components, filter_blobs

    gt = connected_components(gt_mask, connectivity)
    pred = filter_blobs(connected_components(pred_mask, connectivity), min_size)
    return pair_metrics(match_lesions(gt, pred, iou_min), subject_id)
