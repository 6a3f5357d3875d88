import json

import pytest

from longichange.config import DEFAULTS, ConfigError, SEED_ENV, load_config, parse_override


def test_defaults_carry_published_values():
    cfg = load_config(env={})
    assert cfg.supermix.tau == 0.98
    assert cfg.supermix.delta == 5.0 and cfg.vae.delta == 5.0
    assert (cfg.supermix.n_seg_min, cfg.supermix.n_seg_max) == (200, 5000)
    assert cfg.inference["kappa"] == 0.1
    assert cfg.inference["min_blob"] == 20
    assert cfg.evaluation["iou_min"] == 0.01
    assert (cfg.loss.alpha, cfg.loss.beta) == (0.75, 0.25)
    assert (cfg.loss.gamma_final, cfg.loss.gamma_intermediate) == (1.0, 0.75)
    assert cfg.vae_schedule.lr_initial == 5e-5
    assert cfg.detector_schedule.lr_initial == 2e-4 and cfg.detector_schedule.lr_decay == 1e-3
    assert cfg.detector.l2_weight == 1e-6
    assert cfg.vae.encoder_downsampling == "max_pool"


def test_full_file_round_trip(tmp_path):
    path = tmp_path / "c.json"
    doc = json.loads(json.dumps(DEFAULTS))
    doc["supermix"]["tau"] = 0.9
    path.write_text(json.dumps(doc))
    cfg = load_config(path, env={})
    assert cfg.supermix.tau == 0.9
    assert load_config(path, [("supermix.tau", 0.5)], env={}).supermix.tau == 0.5


def test_missing_field_is_named(tmp_path):
    doc = json.loads(json.dumps(DEFAULTS))
    del doc["loss"]["gamma_final"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError) as err:
        load_config(path, env={})
    assert err.value.field == "loss.gamma_final"


@pytest.mark.parametrize("key,value,field", [
    ("supermix.tau", 1.5, "supermix.tau"),
    ("loss.alpha", 0.5, "loss.alpha/beta"),
    ("inference.kappa", "high", "inference.kappa"),
    ("inference.kappa", 0.0, "inference.kappa"),
    ("vae.nonsense", 1, "vae.nonsense"),
    ("detector.levels", 1, "detector.levels"),
    ("detector_schedule.mini_batch", 0, "detector_schedule.mini_batch"),
    ("phantom.lesion_intensity", 2.0, "phantom.lesion_intensity"),
    ("crop_shape", [4, 4], "crop_shape"),
    ("detector.siamese", 1, "detector.siamese"),
])
def test_field_level_errors(key, value, field):
    with pytest.raises(ConfigError) as err:
        load_config(overrides=[(key, value)], env={})
    assert err.value.field == field
    assert str(err.value).startswith(field)


def test_seed_precedence():
    assert load_config(env={SEED_ENV: "11"}).seed == 11
    assert load_config(overrides=[("seed", 3)], env={SEED_ENV: "11"}).seed == 3
    with pytest.raises(ConfigError):
        load_config(env={SEED_ENV: "abc"})
    assert load_config(env={SEED_ENV: "5"}).phantom.seed == 5


def test_parse_override():
    assert parse_override("supermix.tau=0.5") == ("supermix.tau", 0.5)
    assert parse_override("loss.kind=bce") == ("loss.kind", "bce")
    assert parse_override("crop_shape=[8,8,8]") == ("crop_shape", [8, 8, 8])
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path, env={})
