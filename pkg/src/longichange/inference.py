"""From a trained detector to lesion blobs: predict, threshold, label, filter."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from .detector import SiameseUNet3D, siamese_inputs
from .volume import ScanPair, Volume

_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class Blob:
    id: int
    coords: np.ndarray  # (n, 3) integer voxel indices
    size: int

    @property
    def centroid(self) -> Tuple[float, float, float]:
        return tuple(float(c) for c in self.coords.mean(axis=0))

    def flat_indices(self, shape) -> np.ndarray:
        return np.ravel_multi_index(tuple(self.coords.T), shape)


@dataclass(frozen=True)
class BlobSet:
    blobs: List[Blob]
    source_shape: Tuple[int, int, int]
    connectivity: int = 26

    def __len__(self):
        return len(self.blobs)

    @property
    def sizes(self) -> List[int]:
        return [b.size for b in self.blobs]

    def to_mask(self) -> np.ndarray:
        mask = np.zeros(self.source_shape, dtype=np.uint8)
        for b in self.blobs:
            mask[tuple(b.coords.T)] = 1
        return mask

    def label_map(self) -> np.ndarray:
        lab = np.zeros(self.source_shape, dtype=np.int64)
        for i, b in enumerate(self.blobs, start=1):
            lab[tuple(b.coords.T)] = i
        return lab


def binarize(p: Volume, kappa: float = 0.1) -> Volume:
    """Strict threshold: voxels with probability exactly ``kappa`` are excluded."""
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    return Volume((np.asarray(p.data) > kappa).astype(np.uint8), p.spacing, "binary_mask")


def connected_components(mask, connectivity: int = 26) -> BlobSet:
    """Label maximal connected sets of nonzero voxels.

    Blob ids follow the C-order position of each blob's first voxel.
    """
    if connectivity not in _STRUCTURE_RANK:
        raise ValueError(f"connectivity must be one of 6, 18, 26, got {connectivity}")
    data = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    data = data != 0
    structure = ndimage.generate_binary_structure(3, _STRUCTURE_RANK[connectivity])
    lab, n = ndimage.label(data, structure=structure)
    shape = tuple(int(s) for s in data.shape)
    if n == 0:
        return BlobSet([], shape, connectivity)
    flat = lab.ravel()
    idx = np.flatnonzero(flat)
    order = np.argsort(flat[idx], kind="stable")
    idx = idx[order]
    bounds = np.searchsorted(flat[idx], np.arange(1, n + 2))
    groups = [idx[bounds[i]:bounds[i + 1]] for i in range(n)]
    groups.sort(key=lambda g: g[0])
    blobs = []
    for i, g in enumerate(groups):
        coords = np.stack(np.unravel_index(g, shape), axis=1)
        blobs.append(Blob(i, coords, int(g.size)))
    return BlobSet(blobs, shape, connectivity)


def filter_blobs(bs: BlobSet, min_size: int) -> BlobSet:
    if min_size < 0:
        raise ValueError("min_size must be >= 0")
    kept = [b for b in bs.blobs if b.size >= min_size]
    return BlobSet(kept, bs.source_shape, bs.connectivity)


def _pad_amounts(shape, divisor):
    return [(0, (-n) % divisor) for n in shape]


def _pad(a: np.ndarray, pads) -> np.ndarray:
    if not any(p for _, p in pads):
        return a
    mode = "reflect" if min(a.shape) > 1 else "edge"
    return np.pad(a, pads, mode=mode)


def predict_batch(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], net: SiameseUNet3D) -> List[np.ndarray]:
    """Run the detector on (x, x_hat) array pairs of one common shape."""
    shape = pairs[0][0].shape
    pads = _pad_amounts(shape, net.divisor)
    xs = np.stack([_pad(np.asarray(a, np.float32), pads) for a, _ in pairs])
    hs = np.stack([_pad(np.asarray(b, np.float32), pads) for _, b in pairs])
    x1, x2 = siamese_inputs(xs, hs)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        out = net(x1, x2).final[:, 0].numpy()
    net.train(was_training)
    crop = tuple(slice(0, n) for n in shape)
    return [o[crop] for o in out]


def predict_change(pair: ScanPair, net: SiameseUNet3D) -> Volume:
    """Change probability map for ``pair`` (baseline in stream 1, follow-up in stream 2)."""
    x, x_hat = pair.baseline.data, pair.followup.data
    for name, a in (("baseline", x), ("followup", x_hat)):
        if a.min() < 0 or a.max() > 1:
            warnings.warn(f"{name} intensities fall outside [0, 1]; was it normalised?")
    prob = predict_batch([(x, x_hat)], net)[0]
    return Volume(np.clip(prob, 0.0, 1.0), pair.baseline.spacing, "probability")


def postprocess(prob: Volume, kappa: float = 0.1, min_size: int = 20,
                connectivity: int = 26) -> BlobSet:
    return filter_blobs(connected_components(binarize(prob, kappa), connectivity), min_size)


def write_blob_table(bs: BlobSet, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "size", "centroid_x", "centroid_y", "centroid_z"])
        for b in bs.blobs:
            w.writerow([b.id, b.size, *(f"{c:.3f}" for c in b.centroid)])
    return path
