"""On-disk formats.

The native format is a raw little-endian float32 stream in x-fastest
(Fortran) order, ``<stem>.raw``, next to a JSON sidecar ``<stem>.json``
holding shape, spacing, role and subject id. A small NIfTI-1 reader covers
single-file ``.nii`` volumes.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .volume import Volume, VolumeError

FORMAT_NAME = "longichange-volume"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


def _stem(path: PathLike) -> Path:
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        path = path.with_suffix("")
    return path


def save_volume(v: Volume, path: PathLike, subject_id: str = "") -> Tuple[Path, Path]:
    """Write ``v`` in the native format; returns the (raw, sidecar) paths."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    raw_path, meta_path = stem.with_suffix(".raw"), stem.with_suffix(".json")
    data = np.asarray(v.data, dtype="<f4")
    raw_path.write_bytes(data.tobytes(order="F"))
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "dtype": "float32",
        "byte_order": "little",
        "order": "x-fastest",
        "dtype_role": v.role,
        "subject_id": subject_id,
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return raw_path, meta_path


def read_sidecar(path: PathLike) -> dict:
    return json.loads(_stem(path).with_suffix(".json").read_text())


def load_volume(path: PathLike) -> Volume:
    stem = _stem(path)
    meta = read_sidecar(stem)
    if meta.get("format") != FORMAT_NAME:
        raise VolumeError(f"{stem}: not a {FORMAT_NAME} sidecar")
    if meta.get("version", 0) > FORMAT_VERSION:
        raise VolumeError(f"{stem}: format version {meta['version']} is newer than supported")
    shape = tuple(meta["shape"])
    buf = stem.with_suffix(".raw").read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(buf) != expected:
        raise VolumeError(f"{stem}: expected {expected} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4").reshape(shape, order="F")
    return Volume(data, tuple(meta["spacing"]), meta.get("dtype_role", "intensity"))


_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def load_nifti(path: PathLike, role: str = "intensity") -> Volume:
    """Read a single-file NIfTI-1 volume (uint8, int16 or float32 data).

    Only ``dim``, ``pixdim``, ``datatype``, ``vox_offset`` and the
    scaling slope/intercept are honoured; orientation is ignored.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 348:
        raise VolumeError(f"{path}: truncated NIfTI header")
    endian = "<"
    if struct.unpack("<i", raw[:4])[0] != 348:
        endian = ">"
        if struct.unpack(">i", raw[:4])[0] != 348:
            raise VolumeError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise VolumeError(f"{path}: unsupported NIfTI magic {magic!r}")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    scl_slope, scl_inter = struct.unpack(endian + "2f", raw[112:120])
    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4:ndim + 1]):
        raise VolumeError(f"{path}: only 3D volumes are supported (dim={dim[:ndim + 1]})")
    if datatype not in _NIFTI_DTYPES:
        raise VolumeError(f"{path}: unsupported datatype code {datatype}")
    shape = tuple(int(d) for d in dim[1:4])
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").astype(np.float32)
    if scl_slope != 0.0 and (scl_slope, scl_inter) != (1.0, 0.0):
        data = data * np.float32(scl_slope) + np.float32(scl_inter)
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    return Volume(data, spacing, role)


def save_nifti(v: Volume, path: PathLike, datatype: int = 16) -> Path:
    """Write a minimal single-file NIfTI-1 volume; mostly for fixtures and export."""
    path = Path(path)
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *v.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(v.data).astype(dtype).tobytes(order="F")
    path.write_bytes(bytes(hdr) + body)
    return path


def load_any(path: PathLike, role: Optional[str] = None) -> Volume:
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        return load_nifti(path, role or "intensity")
    v = load_volume(path)
    return v if role is None or role == v.role else v.replace(role=role)


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def save_pairs(pairs, directory: PathLike, manifest_name: str = "manifest.json") -> Path:
    """Write each pair in the native format and list them in a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        sid = p.subject_id
        entry = {
            "subject_id": sid,
            "label": p.label,
            "baseline": _rel(save_volume(p.baseline, directory / sid / "baseline", sid)[0], directory),
            "followup": _rel(save_volume(p.followup, directory / sid / "followup", sid)[0], directory),
            "change_mask": None,
        }
        if p.change_mask is not None:
            entry["change_mask"] = _rel(
                save_volume(p.change_mask, directory / sid / "change_mask", sid)[0], directory)
        entries.append(entry)
    path = directory / manifest_name
    path.write_text(json.dumps({"format": "longichange-dataset", "version": 1, "pairs": entries},
                               indent=2))
    return path


def load_pairs(manifest: PathLike, label: Optional[str] = None):
    """Read the pairs listed in a manifest, optionally keeping only one label."""
    from .volume import ScanPair

    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    doc = json.loads(manifest.read_text())
    root = manifest.parent
    pairs = []
    for e in doc["pairs"]:
        if label is not None and e["label"] != label:
            continue
        mask = load_any(root / e["change_mask"], "binary_mask") if e.get("change_mask") else None
        pairs.append(ScanPair(load_any(root / e["baseline"]), load_any(root / e["followup"]),
                              e["subject_id"], mask, e["label"]))
    return pairs
