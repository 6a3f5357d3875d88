import numpy as np
import pytest

from longichange.io import load_nifti, load_volume, save_nifti, save_volume
from longichange.volume import (
    ScanPair,
    Volume,
    VolumeError,
    abs_difference,
    normalize_intensity,
    random_crop_pair,
    resample_isotropic,
)


def _pair(shape=(10, 10, 10), seed=0, mask=False):
    rng = np.random.default_rng(seed)
    b = Volume(rng.random(shape))
    f = Volume(rng.random(shape))
    m = Volume((rng.random(shape) > 0.8).astype(np.uint8), role="binary_mask") if mask else None
    return ScanPair(b, f, "s0", m)


def test_volume_invariants():
    with pytest.raises(VolumeError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(VolumeError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(VolumeError):
        Volume(np.full((2, 2, 2), 1.5), role="probability")
    with pytest.raises(VolumeError):
        Volume(np.full((2, 2, 2), 2), role="binary_mask")
    with pytest.raises(VolumeError):
        Volume(np.full((2, 2, 2), -1), role="label_map")
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_scan_pair_invariants():
    a = Volume(np.zeros((4, 4, 4)))
    with pytest.raises(VolumeError):
        ScanPair(a, Volume(np.zeros((4, 4, 3))))
    with pytest.raises(VolumeError):
        ScanPair(a, Volume(np.zeros((4, 4, 4)), spacing=(2, 1, 1)))
    with pytest.raises(VolumeError):
        ScanPair(a, a, label="Change")
    with pytest.raises(VolumeError):
        ScanPair(a, a, change_mask=Volume(np.zeros((4, 4, 4)), role="binary_mask"), label="NoChange")
    assert ScanPair(a, a).label == "NoChange"


def test_normalize_foreground_ramp():
    data = np.zeros((10, 10, 2))
    data[:, :, 1] = np.arange(100).reshape(10, 10)  # zeros plus a ramp whose nonzero part is 1..99
    out = normalize_intensity(Volume(data), 0, 99)
    fg = data[data != 0]
    q0, q99 = np.percentile(fg, [0, 99])
    expected = np.clip((data - q0) / (q99 - q0), 0, 1)
    np.testing.assert_allclose(out.data, expected, atol=1e-6)
    assert out.data.max() == 1.0
    assert out.data[:, :, 1].min() == 0.0


def test_normalize_identity_on_unit_range():
    rng = np.random.default_rng(0)
    data = rng.random((6, 6, 6)) * 0.98 + 0.01
    data.flat[0], data.flat[1] = 0.0, 1.0
    # zero is background by construction, so the foreground spans [min nonzero, 1]
    data.flat[2] = 1e-9
    v = Volume(data)
    once = normalize_intensity(v, 0, 100)
    np.testing.assert_allclose(once.data, data, atol=1e-6)


def test_normalize_degenerate():
    with pytest.raises(VolumeError, match="degenerate intensity range"):
        normalize_intensity(Volume(np.full((3, 3, 3), 0.4)))


def test_resample_identity():
    v = Volume(np.random.default_rng(1).random((5, 6, 7)))
    out = resample_isotropic(v, 1.0)
    assert np.array_equal(out.data, v.data)


def test_resample_linear_ramp_oracle():
    i, j, k = np.indices((4, 4, 4))
    ramp = 1.0 * i + 2.0 * j + 3.0 * k
    out = resample_isotropic(Volume(ramp, spacing=(2, 2, 2)), 1.0)
    assert out.shape == (8, 8, 8)
    assert out.spacing == (1.0, 1.0, 1.0)
    # corners align, so output index n maps to input coordinate n * 3 / 7
    oi, oj, ok = np.indices((8, 8, 8)) * (3.0 / 7.0)
    np.testing.assert_allclose(out.data, oi + 2 * oj + 3 * ok, atol=1e-4)
    for corner in [(0, 0, 0), (7, 7, 7), (0, 7, 0), (7, 0, 7)]:
        src = tuple(3 if c == 7 else 0 for c in corner)
        assert out.data[corner] == pytest.approx(ramp[src], abs=1e-4)


def test_resample_mask_stays_binary_and_anisotropic_shape():
    m = (np.random.default_rng(2).random((5, 5, 3)) > 0.5).astype(np.uint8)
    out = resample_isotropic(Volume(m, spacing=(1.0, 1.0, 3.0), role="binary_mask"), 1.0)
    assert out.shape == (5, 5, 9)
    assert set(np.unique(out.data)) <= {0, 1}


def test_abs_difference():
    rng = np.random.default_rng(3)
    a, b = Volume(rng.random((4, 4, 4))), Volume(rng.random((4, 4, 4)))
    assert np.array_equal(abs_difference(a, b).data, abs_difference(b, a).data)
    assert not abs_difference(a, a).data.any()
    ones, zeros = Volume(np.ones((2, 2, 2))), Volume(np.zeros((2, 2, 2)))
    assert np.all(abs_difference(ones, zeros).data == 1)
    with pytest.raises(VolumeError):
        abs_difference(a, Volume(np.zeros((4, 4, 3))))


def test_random_crop_full_and_determinism():
    p = _pair(mask=True)
    full = random_crop_pair(p, (10, 10, 10), np.random.default_rng(0))
    assert np.array_equal(full.baseline.data, p.baseline.data)
    c1 = random_crop_pair(p, (4, 5, 6), np.random.default_rng(7))
    c2 = random_crop_pair(p, (4, 5, 6), np.random.default_rng(7))
    assert np.array_equal(c1.baseline.data, c2.baseline.data)
    assert np.array_equal(c1.change_mask.data, c2.change_mask.data)
    with pytest.raises(VolumeError):
        random_crop_pair(p, (11, 4, 4), np.random.default_rng(0))


def test_random_crop_shares_window():
    p = _pair(mask=True)
    c = random_crop_pair(p, (4, 4, 4), np.random.default_rng(5))
    # locate the window through the baseline and check the other volumes agree
    hits = [(i, j, k) for i in range(7) for j in range(7) for k in range(7)
            if np.array_equal(p.baseline.data[i:i + 4, j:j + 4, k:k + 4], c.baseline.data)]
    assert len(hits) == 1
    i, j, k = hits[0]
    assert np.array_equal(p.followup.data[i:i + 4, j:j + 4, k:k + 4], c.followup.data)
    assert np.array_equal(p.change_mask.data[i:i + 4, j:j + 4, k:k + 4], c.change_mask.data)
    # crop of the difference equals the difference of the crops
    d = abs_difference(p.baseline, p.followup).data[i:i + 4, j:j + 4, k:k + 4]
    assert np.array_equal(d, abs_difference(c.baseline, c.followup).data)


def test_random_crop_uniform_origins():
    idx = np.arange(1000, dtype=float).reshape(10, 10, 10)
    p = ScanPair(Volume(idx), Volume(idx), "u")
    rng = np.random.default_rng(11)
    counts = {}
    for _ in range(10000):
        c = random_crop_pair(p, (4, 4, 4), rng)
        o = c.baseline.data[0, 0, 0]
        counts[o] = counts.get(o, 0) + 1
    expected = 10000 / 7 ** 3
    assert len(counts) == 7 ** 3
    assert all(expected / 5 <= n <= expected * 5 for n in counts.values())


def test_native_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    v = Volume(rng.standard_normal((7, 5, 3)).astype(np.float32), spacing=(0.5, 1.0, 2.5))
    save_volume(v, tmp_path / "vol", subject_id="abc")
    back = load_volume(tmp_path / "vol.raw")
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == v.spacing and back.role == "intensity"
    # x-fastest on disk
    raw = np.frombuffer((tmp_path / "vol.raw").read_bytes(), dtype="<f4")
    assert raw[1] == v.data[1, 0, 0]


def test_native_label_map_round_trip(tmp_path):
    lab = Volume(np.arange(24).reshape(2, 3, 4), role="label_map")
    save_volume(lab, tmp_path / "lab")
    back = load_volume(tmp_path / "lab")
    assert back.role == "label_map" and np.array_equal(back.data, lab.data)


@pytest.mark.parametrize("code", [2, 4, 16])
def test_nifti_round_trip(tmp_path, code):
    data = np.arange(60, dtype=np.float32).reshape(3, 4, 5)
    v = Volume(data, spacing=(0.9, 1.1, 3.0))
    save_nifti(v, tmp_path / "x.nii", datatype=code)
    back = load_nifti(tmp_path / "x.nii")
    assert np.array_equal(back.data, data)
    np.testing.assert_allclose(back.spacing, (0.9, 1.1, 3.0), rtol=1e-6)


def test_nifti_rejects_bad_magic(tmp_path):
    save_nifti(Volume(np.zeros((2, 2, 2))), tmp_path / "x.nii")
    raw = bytearray((tmp_path / "x.nii").read_bytes())
    raw[344:348] = b"ni1\x00"
    (tmp_path / "bad.nii").write_bytes(bytes(raw))
    with pytest.raises(VolumeError, match="magic"):
        load_nifti(tmp_path / "bad.nii")
