"""3D SLIC super-voxels.

Clustering runs in a joint (intensity, position) feature space. Each voxel
only competes for the clusters seeded in its own grid cell and the 26
neighbouring cells, plus the cluster it currently belongs to. Keeping the
current cluster in the candidate set makes the k-means energy monotone.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _graph_components

from .volume import Volume, VolumeError


@dataclass(frozen=True)
class SuperpixelSegmentation:
    labels: Volume
    n_requested: int
    n_actual: int
    compactness: float
    iterations_run: int
    # squared-distance k-means energy after each iteration, before the connectivity pass
    energy_history: Tuple[float, ...] = ()

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.data.ravel(), minlength=self.n_actual)


def _grid_counts(shape, n_seg):
    step = (np.prod(shape) / n_seg) ** (1.0 / 3.0)
    counts = [int(min(n, max(1, round(n / step)))) for n in shape]
    while np.prod(counts) > n_seg:
        # drop a cell along the axis whose cells are currently thinnest
        cand = [a for a in range(3) if counts[a] > 1]
        a = min(cand, key=lambda a: shape[a] / counts[a])
        counts[a] -= 1
    return counts, step


def _offsets():
    offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    return [(0, 0, 0)] + offs


def _seed_centres(img, counts, grad):
    shape = np.asarray(img.shape)
    axes = []
    for n, c in zip(img.shape, counts):
        edges = (np.arange(c + 1) * n) // c
        axes.append((edges[:-1] + edges[1:] - 1) // 2)
    seeds = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    # move each seed to the lowest-gradient voxel of its 3x3x3 neighbourhood;
    # the unshifted position wins ties
    moved = np.clip(seeds[:, None, :] + np.asarray(_offsets())[None], 0, shape - 1)
    g = grad[moved[..., 0], moved[..., 1], moved[..., 2]]
    best = moved[np.arange(len(seeds)), np.argmin(g, axis=1)]
    vals = img[best[:, 0], best[:, 1], best[:, 2]]
    return np.concatenate([vals[:, None], best.astype(np.float64)], axis=1)


def _candidates(shape, counts):
    grids = np.meshgrid(*[(np.arange(n) * c) // n for n, c in zip(shape, counts)], indexing="ij")
    cell = np.stack([g.ravel() for g in grids], axis=1)
    cols = []
    for off in sorted(itertools.product((-1, 0, 1), repeat=3)):
        nb = cell + np.asarray(off)
        ok = np.all((nb >= 0) & (nb < np.asarray(counts)), axis=1)
        cid = (nb[:, 0] * counts[1] + nb[:, 1]) * counts[2] + nb[:, 2]
        cols.append(np.where(ok, cid, -1))
    own = (cell[:, 0] * counts[1] + cell[:, 1]) * counts[2] + cell[:, 2]
    return np.stack(cols, axis=1), own


def _update(feats, labels, centres):
    k = centres.shape[0]
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    new = centres.copy()
    filled = counts > 0
    for j in range(feats.shape[1]):
        sums = np.bincount(labels, weights=feats[:, j], minlength=k)
        new[filled, j] = sums[filled] / counts[filled]
    return new


def _sq_dist(feats, centres, idx, spatial_w2):
    c = centres[idx]
    d_int = (feats[:, None, 0] - c[..., 0]) ** 2
    d_sp = ((feats[:, None, 1:] - c[..., 1:]) ** 2).sum(-1)
    return d_int + spatial_w2 * d_sp


def _energy(feats, labels, centres, spatial_w2):
    return float(_sq_dist(feats, centres, labels[:, None], spatial_w2).sum())


def enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Make every label a single 6-connected region.

    For each label only its largest component keeps the label; the other
    fragments are merged into the adjacent label with the largest size.
    Labels are renumbered to 0..n-1 in increasing order of the surviving ids.
    """
    shape = labels.shape
    n = labels.size
    flat = labels.ravel()
    index = np.arange(n).reshape(shape)
    src, dst = [], []
    for ax in range(3):
        a = np.take(index, np.arange(shape[ax] - 1), axis=ax).ravel()
        b = np.take(index, np.arange(1, shape[ax]), axis=ax).ravel()
        src.append(a)
        dst.append(b)
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    same = flat[src] == flat[dst]
    graph = coo_matrix((np.ones(same.sum()), (src[same], dst[same])), shape=(n, n))
    n_comp, comp = _graph_components(graph, directed=False)
    comp_size = np.bincount(comp, minlength=n_comp)
    comp_label = np.zeros(n_comp, dtype=np.int64)
    comp_label[comp] = flat

    # largest component per label; ties go to the lowest component id
    order = np.lexsort((np.arange(n_comp), -comp_size, comp_label))
    first = np.ones(n_comp, dtype=bool)
    first[1:] = comp_label[order][1:] != comp_label[order][:-1]
    final = np.full(n_comp, -1, dtype=np.int64)
    mains = order[first]
    final[mains] = comp_label[mains]
    orphans = np.flatnonzero(final < 0)
    if orphans.size == 0:
        return np.unique(flat, return_inverse=True)[1].reshape(shape)

    label_size = {}
    for c in mains:
        label_size[int(comp_label[c])] = int(comp_size[c])
    diff = ~same
    ca, cb = comp[src[diff]], comp[dst[diff]]
    is_orphan = final < 0
    pairs = np.concatenate([np.stack([ca, cb], 1), np.stack([cb, ca], 1)])
    pairs = np.unique(pairs[is_orphan[pairs[:, 0]]], axis=0)
    neighbours = {int(c): [] for c in orphans}
    for a, b in pairs:
        neighbours[int(a)].append(int(b))

    pending = sorted(neighbours, key=lambda c: (-comp_size[c], c))
    while pending:
        rest = []
        for c in pending:
            settled = [final[nb] for nb in neighbours[c] if final[nb] >= 0]
            if not settled:
                rest.append(c)
                continue
            target = min(settled, key=lambda lab: (-label_size[int(lab)], int(lab)))
            final[c] = target
            label_size[int(target)] += int(comp_size[c])
        if len(rest) == len(pending):
            raise RuntimeError("connectivity enforcement could not place every fragment")
        pending = rest
    merged = final[comp]
    return np.unique(merged, return_inverse=True)[1].reshape(shape)


def slic3d(v: Volume, n_seg: int, compactness: float = 0.1, max_iter: int = 10,
           tol: float = 1e-3) -> SuperpixelSegmentation:
    """Partition ``v`` into roughly ``n_seg`` compact, connected super-voxels.

    The distance between a voxel and a cluster centre is
    ``sqrt(d_int**2 + (compactness / S)**2 * d_xyz**2)`` with grid step
    ``S = (H*W*D / n_seg) ** (1/3)``. Iteration stops after ``max_iter`` rounds
    or once fewer than ``tol`` of the voxels change cluster.
    """
    n_seg = int(n_seg)
    if n_seg < 1:
        raise VolumeError("n_seg must be at least 1")
    img = np.asarray(v.data, dtype=np.float64)
    if n_seg > img.size:
        raise VolumeError(f"n_seg={n_seg} exceeds the voxel count {img.size}")
    shape = img.shape
    counts, step = _grid_counts(shape, n_seg)
    spatial_w2 = (compactness / step) ** 2

    grad = np.zeros_like(img)
    for ax in range(3):
        if shape[ax] > 1:
            grad += np.gradient(img, axis=ax) ** 2
    centres = _seed_centres(img, counts, grad)

    pos = np.indices(shape).reshape(3, -1).T.astype(np.float64)
    feats = np.concatenate([img.reshape(-1, 1), pos], axis=1)
    cand, labels = _candidates(shape, counts)
    cell = np.asarray([n / c for n, c in zip(shape, counts)])
    half = np.maximum(step, cell) + 1.0

    energies: List[float] = []
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        idx = np.concatenate([cand, labels[:, None]], axis=1)
        safe = np.where(idx < 0, 0, idx)
        d = (feats[:, 0, None] - centres[:, 0][safe]) ** 2
        d_sp = np.zeros_like(d)
        valid = idx >= 0
        for ax in range(3):
            off = pos[:, ax, None] - centres[:, ax + 1][safe]
            d_sp += off * off
            valid &= np.abs(off) <= half[ax]
        d += spatial_w2 * d_sp
        valid[:, -1] = True
        d[~valid] = np.inf
        new_labels = safe[np.arange(len(safe)), np.argmin(d, axis=1)]
        changed = np.count_nonzero(new_labels != labels)
        labels = new_labels
        centres = _update(feats, labels, centres)
        energies.append(_energy(feats, labels, centres, spatial_w2))
        if changed < tol * labels.size:
            break

    final = enforce_connectivity(labels.reshape(shape))
    n_actual = int(final.max()) + 1
    return SuperpixelSegmentation(
        labels=Volume(final, v.spacing, "label_map"),
        n_requested=n_seg,
        n_actual=n_actual,
        compactness=float(compactness),
        iterations_run=iterations,
        energy_history=tuple(energies),
    )


def binary_maps(seg: SuperpixelSegmentation) -> List[Volume]:
    """One indicator volume per super-voxel, in label order."""
    lab = seg.labels.data
    return [Volume((lab == t).astype(np.uint8), seg.labels.spacing, "binary_mask")
            for t in range(seg.n_actual)]
