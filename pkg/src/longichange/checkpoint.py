"""Checkpoint container shared by the VAE and the change detector.

A checkpoint is an ``.npz`` archive: one array per state-dict entry plus a
``__meta__`` entry holding JSON with the format version, model kind and the
config needed to rebuild the network.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np
import torch

FORMAT_VERSION = 1


def save_checkpoint(model: torch.nn.Module, path: Union[str, Path], kind: str,
                    config: dict, extra: dict = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, "kind": kind, "config": config,
            "extra": extra or {}}
    arrays = {f"w:{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path: Union[str, Path]):
    """Return ``(meta, state_dict)`` without building a model."""
    with np.load(Path(path)) as npz:
        meta = json.loads(npz["__meta__"].tobytes().decode())
        if meta.get("format_version", 0) > FORMAT_VERSION:
            raise ValueError(f"{path}: checkpoint version {meta['format_version']} unsupported")
        state = {k[2:]: torch.from_numpy(npz[k].copy()) for k in npz.files if k.startswith("w:")}
    return meta, state


def load_vae(path):
    from .vae import VAE, VaeConfig

    meta, state = read_checkpoint(path)
    if meta["kind"] != "vae":
        raise ValueError(f"{path}: expected a vae checkpoint, found {meta['kind']!r}")
    model = VAE(VaeConfig(**meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model


def load_detector(path):
    from .detector import DetectorConfig, SiameseUNet3D

    meta, state = read_checkpoint(path)
    if meta["kind"] != "detector":
        raise ValueError(f"{path}: expected a detector checkpoint, found {meta['kind']!r}")
    model = SiameseUNet3D(DetectorConfig(**meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model
