import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from longichange.phantom import PhantomConfig, generate_subject
from longichange.superpixel import binary_maps, enforce_connectivity, slic3d
from longichange.volume import Volume, VolumeError


def _vol(seed, shape=(12, 12, 8)):
    rng = np.random.default_rng(seed)
    return Volume(ndimage.gaussian_filter(rng.random(shape), 1.0))


def test_constant_volume_grid():
    seg = slic3d(Volume(np.zeros((16, 16, 16))), 8)
    assert seg.n_actual == 8
    assert np.all(seg.sizes() == 512)


def test_single_segment():
    seg = slic3d(_vol(0), 1)
    assert seg.n_actual == 1 and not seg.labels.data.any()


@pytest.mark.parametrize("n_seg", [1, 8, 200])
def test_partition_of_unity(n_seg):
    for seed in range(5):
        v = _vol(seed)
        seg = slic3d(v, n_seg)
        maps = binary_maps(seg)
        assert len(maps) == seg.n_actual <= max(n_seg, 1) * 2
        total = np.sum([m.data for m in maps], axis=0)
        assert np.all(total == 1)
        assert np.array_equal(np.unique(seg.labels.data), np.arange(seg.n_actual))


def test_segments_are_six_connected():
    seg = slic3d(_vol(3, (16, 16, 10)), 60)
    for t in range(seg.n_actual):
        _, n = ndimage.label(seg.labels.data == t)
        assert n == 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 120))
def test_energy_non_increasing(seed, n_seg):
    seg = slic3d(_vol(seed), n_seg, max_iter=8, tol=0.0)
    e = np.asarray(seg.energy_history)
    assert np.all(np.diff(e) <= 1e-9 * max(1.0, e[0]))


def test_deterministic_on_phantom():
    subj = generate_subject(PhantomConfig(), 0)
    a = slic3d(subj.pair.baseline, 40)
    b = slic3d(subj.pair.baseline, 40)
    assert np.array_equal(a.labels.data, b.labels.data)
    assert a.energy_history == b.energy_history


def test_follows_intensity_edges():
    data = np.zeros((16, 16, 8))
    data[8:] = 1.0
    seg = slic3d(Volume(data), 8, compactness=0.1)
    for t in range(seg.n_actual):
        vals = np.unique(data[seg.labels.data == t])
        assert vals.size == 1


def test_label_map_round_trip(tmp_path):
    from longichange.io import load_volume, save_volume

    seg = slic3d(_vol(1), 20)
    save_volume(seg.labels, tmp_path / "lab")
    back = load_volume(tmp_path / "lab")
    assert back.role == "label_map" and np.array_equal(back.data, seg.labels.data)


def test_enforce_connectivity_merges_fragments():
    lab = np.zeros((6, 6, 1), dtype=np.int64)
    lab[:, 3:] = 1
    lab[0, 0] = 1  # detached fragment of label 1 inside label 0
    out = enforce_connectivity(lab)
    assert out[0, 0, 0] == out[1, 1, 0]
    assert len(np.unique(out)) == 2


def test_invalid_nseg():
    with pytest.raises(VolumeError):
        slic3d(_vol(0), 0)
    with pytest.raises(VolumeError):
        slic3d(Volume(np.zeros((2, 2, 2))), 9)
