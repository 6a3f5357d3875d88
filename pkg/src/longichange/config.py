"""JSON run configuration.

One document holds every knob of the pipeline, grouped into sections that map
onto the library's config dataclasses. A config file must be complete (start
from ``longichange --print-default-config``); single values are changed with
overrides. Missing keys, unknown keys, wrong types and out-of-range values are
rejected with a ``ConfigError`` naming the offending ``section.field``.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .detector import DetectorConfig
from .losses import LossConfig
from .phantom import PhantomConfig
from .supermix import SuperMixConfig
from .training import TrainSchedule, detector_schedule, vae_schedule
from .vae import VaeConfig

SEED_ENV = "LONGICHANGE_SEED"


class ConfigError(ValueError):
    """A config value failed validation; ``field`` is the dotted key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _schedule_defaults(sched: TrainSchedule) -> dict:
    d = sched.to_dict()
    del d["stage"], d["seed"]
    return d


DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "crop_shape": None,  # null trains on whole volumes
    "phantom": {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in PhantomConfig().to_dict().items() if k != "seed"},
    "preprocess": {"target_mm": 1.0, "p_low": 0.0, "p_high": 99.0},
    "vae": VaeConfig().to_dict(),
    "vae_schedule": dict(_schedule_defaults(vae_schedule()), crop_shape=[48, 48, 16]),
    "supermix": SuperMixConfig().to_dict(),
    "detector": DetectorConfig().to_dict(),
    "loss": LossConfig().to_dict(),
    "detector_schedule": _schedule_defaults(detector_schedule()),
    "inference": {"kappa": 0.1, "min_blob": 20, "connectivity": 26},
    "evaluation": {"iou_min": 0.01},
}


def _check_type(field: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(field, f"expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(field, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(field, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(field, f"expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(field, f"expected a list, got {value!r}")
        value = list(value)
    return value


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        field = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(field, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(field, "expected a section (JSON object)")
            out[key] = _merge(base[key], value, field + ".")
        else:
            out[key] = _check_type(field, value, base[key])
    return out


def _missing(base: dict, user: dict, prefix: str = ""):
    for key, value in base.items():
        field = f"{prefix}{key}"
        if key not in user:
            return field
        if isinstance(value, dict) and isinstance(user[key], dict):
            found = _missing(value, user[key], field + ".")
            if found:
                return found
    return None


def _build(section: str, factory, values: dict):
    try:
        return factory(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        key, sep, rest = msg.partition(": ")
        if sep and key.split("/")[0] in values:
            raise ConfigError(f"{section}.{key}", rest) from None
        raise ConfigError(section, msg) from None


@dataclass
class RunConfig:
    """A validated configuration document plus typed views of its sections."""

    doc: dict

    def __post_init__(self):
        d = self.doc
        _check_type("seed", d["seed"], 0)
        crop = d["crop_shape"]
        if crop is not None and (len(crop) != 3 or any(not isinstance(c, int) or c < 1 for c in crop)):
            raise ConfigError("crop_shape", "expected null or three positive integers")
        inf = d["inference"]
        if not 0.0 < inf["kappa"] < 1.0:
            raise ConfigError("inference.kappa", "must lie in (0, 1)")
        if inf["min_blob"] < 0:
            raise ConfigError("inference.min_blob", "must be >= 0")
        if inf["connectivity"] not in (6, 18, 26):
            raise ConfigError("inference.connectivity", "must be 6, 18 or 26")
        if not 0.0 <= d["evaluation"]["iou_min"] <= 1.0:
            raise ConfigError("evaluation.iou_min", "must lie in [0, 1]")
        pre = d["preprocess"]
        if pre["target_mm"] <= 0:
            raise ConfigError("preprocess.target_mm", "must be > 0")
        if not 0.0 <= pre["p_low"] < pre["p_high"] <= 100.0:
            raise ConfigError("preprocess.p_low", "need 0 <= p_low < p_high <= 100")
        vs = d["vae_schedule"]["crop_shape"]
        if len(vs) != 3 or any(not isinstance(c, int) or c < 1 for c in vs):
            raise ConfigError("vae_schedule.crop_shape", "expected three positive integers")
        # build every section once so range errors surface at load time
        self.phantom
        self.vae
        self.supermix
        self.detector
        self.loss
        self.vae_schedule
        self.detector_schedule

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def crop_shape(self):
        c = self.doc["crop_shape"]
        return None if c is None else tuple(c)

    @property
    def phantom(self) -> PhantomConfig:
        return _build("phantom", PhantomConfig, dict(self.doc["phantom"], seed=self.seed))

    @property
    def vae(self) -> VaeConfig:
        return _build("vae", VaeConfig, self.doc["vae"])

    @property
    def supermix(self) -> SuperMixConfig:
        return _build("supermix", SuperMixConfig, self.doc["supermix"])

    @property
    def detector(self) -> DetectorConfig:
        return _build("detector", DetectorConfig, self.doc["detector"])

    @property
    def loss(self) -> LossConfig:
        return _build("loss", LossConfig, self.doc["loss"])

    @property
    def vae_schedule(self) -> TrainSchedule:
        d = dict(self.doc["vae_schedule"])
        d.pop("crop_shape")
        return _build("vae_schedule", TrainSchedule, dict(d, stage="vae", seed=self.seed))

    @property
    def vae_crop_shape(self):
        return tuple(self.doc["vae_schedule"]["crop_shape"])

    @property
    def detector_schedule(self) -> TrainSchedule:
        return _build("detector_schedule", TrainSchedule,
                      dict(self.doc["detector_schedule"], stage="detector", seed=self.seed))

    @property
    def inference(self) -> dict:
        return dict(self.doc["inference"])

    @property
    def evaluation(self) -> dict:
        return dict(self.doc["evaluation"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)


def parse_override(item: str):
    """``section.key=value`` with a JSON value (bare words are taken as strings)."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(item, "override must look like section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _nest(key: str, value) -> dict:
    out: Dict[str, Any] = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path: Optional[os.PathLike] = None, overrides: Iterable = (),
                env: Optional[dict] = None) -> RunConfig:
    """Defaults, then the JSON file, then the seed env var, then ``overrides`` (flags).

    ``overrides`` holds ``(dotted_key, value)`` pairs.
    """
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path} is not valid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError("config", f"{path} must hold a JSON object")
        doc = _merge(doc, user)
        missing = _missing(DEFAULTS, user)
        if missing:
            raise ConfigError(missing, f"missing from {path}")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            doc["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError("seed", f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
    for key, value in overrides:
        doc = _merge(doc, _nest(key, value))
    return RunConfig(doc)


def default_config_text() -> str:
    return json.dumps(DEFAULTS, indent=2)
