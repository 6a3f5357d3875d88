import numpy as np
import pytest
import torch
from scipy import ndimage

from longichange.phantom import PhantomConfig, generate_subject
from longichange.superpixel import SuperpixelSegmentation, slic3d
from longichange.supermix import (
    SuperMixConfig,
    make_training_triple,
    sample_nseg,
    save_synth_sample,
    synthesize,
)
from longichange.vae import VAE, VaeConfig
from longichange.volume import Volume


def _grid_seg(shape=(8, 8, 8), cells=4):
    lab = np.zeros(shape, dtype=np.int64)
    step = shape[0] // cells
    for i in range(shape[0]):
        lab[i] = np.add.outer(np.arange(shape[1]) // step * cells, np.arange(shape[2]) // step) \
            + (i // step) * cells * cells
    n = int(lab.max()) + 1
    return SuperpixelSegmentation(Volume(lab, role="label_map"), n, n, 0.1, 0, ())


@pytest.fixture(scope="module")
def vae():
    torch.manual_seed(0)
    return VAE(VaeConfig(channels=(4, 8), latent_channels=2)).eval()


def test_exactness_and_measurability():
    rng = np.random.default_rng(0)
    seg = _grid_seg()
    for _ in range(100):
        x = Volume(rng.random((8, 8, 8)))
        xt = Volume(rng.random((8, 8, 8)))
        s = synthesize(x, xt, seg, 0.7, rng)
        y = s.y_hat.data.astype(bool)
        assert np.array_equal(s.x_prime.data[~y], x.data[~y])
        assert np.array_equal(s.x_prime.data[y], xt.data[y])
        for t in range(seg.n_actual):
            vals = np.unique(y[seg.labels.data == t])
            assert vals.size == 1
            assert bool(vals[0]) == (s.lambda_draws[t] == 0)


def test_tau_extremes():
    rng = np.random.default_rng(1)
    seg = _grid_seg()
    x, xt = Volume(rng.random((8, 8, 8))), Volume(rng.random((8, 8, 8)))
    keep_all = synthesize(x, xt, seg, 1.0, rng)
    assert not keep_all.y_hat.data.any()
    assert np.array_equal(keep_all.x_prime.data, x.data)
    swap_all = synthesize(x, xt, seg, 0.0, rng)
    assert swap_all.y_hat.data.all()
    assert np.array_equal(swap_all.x_prime.data, xt.data)
    with pytest.raises(ValueError):
        synthesize(x, xt, seg, 1.5, rng)


def test_flipped_fraction_monte_carlo():
    rng = np.random.default_rng(2)
    seg = _grid_seg()
    x = Volume(np.zeros((8, 8, 8)))
    fr = [synthesize(x, x, seg, 0.98, rng).flipped_fraction for _ in range(1000)]
    assert np.mean(fr) == pytest.approx(0.02, abs=0.005)


def test_nseg_log_uniform():
    cfg = SuperMixConfig()
    rng = np.random.default_rng(3)
    draws = np.array([sample_nseg(cfg, rng) for _ in range(20000)])
    assert draws.min() >= 200 and draws.max() <= 5000
    assert np.median(draws) == pytest.approx(np.sqrt(200 * 5000), rel=0.05)
    logs = np.log(draws)
    # log-uniform: each half of the log range holds about half the mass
    mid = (np.log(200) + np.log(5000)) / 2
    assert np.mean(logs < mid) == pytest.approx(0.5, abs=0.02)


def test_training_triple(vae, tmp_path):
    subj = generate_subject(PhantomConfig(change_probability=0.0), 0)
    cfg = SuperMixConfig(n_seg_min=50, n_seg_max=100, tau=0.8, slic_max_iter=3)
    s = make_training_triple(subj.pair, vae, cfg, np.random.default_rng(4), crop_shape=(16, 16, 8))
    assert s.x_prime.shape == s.x_hat.shape == s.y_hat.shape == (16, 16, 8)
    y = s.y_hat.data.astype(bool)
    assert np.array_equal(s.x_prime.data[y], s.x_tilde.data[y])
    # the followup is never altered; the baseline slot carries the mix
    found = [np.array_equal(subj.pair.followup.data[i:i + 16, j:j + 16, k:k + 8], s.x_hat.data)
             for i in range(33) for j in range(33) for k in range(9)]
    assert sum(found) == 1
    again = make_training_triple(subj.pair, vae, cfg, np.random.default_rng(4), crop_shape=(16, 16, 8))
    assert np.array_equal(again.x_prime.data, s.x_prime.data)
    paths = save_synth_sample(s, tmp_path)
    assert {"x_prime", "x_hat", "y_hat", "x_tilde", "labels"} <= set(paths)


def test_crop_scope_uses_crop_tessellation(vae):
    subj = generate_subject(PhantomConfig(change_probability=0.0), 1)
    cfg = SuperMixConfig(n_seg_min=20, n_seg_max=20, superpixel_scope="crop", slic_max_iter=3)
    s = make_training_triple(subj.pair, vae, cfg, np.random.default_rng(5), crop_shape=(16, 16, 8))
    lab = s.segmentation.labels.data
    for t in range(s.segmentation.n_actual):
        _, n = ndimage.label(lab == t)
        assert n == 1


def test_rejects_change_pairs(vae):
    subj = generate_subject(PhantomConfig(), 2, change=True)
    with pytest.raises(ValueError, match="synthesis only valid on no-change pairs"):
        make_training_triple(subj.pair, vae, SuperMixConfig(), np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        SuperMixConfig(tau=1.2)
    with pytest.raises(ValueError):
        SuperMixConfig(n_seg_min=500, n_seg_max=100)
    with pytest.raises(ValueError):
        SuperMixConfig(superpixel_scope="slab")
