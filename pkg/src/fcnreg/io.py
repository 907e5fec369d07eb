"""Raw volume files: a JSON header ``<name>.vjson`` beside ``<name>.raw``.

The raw file holds little-endian float32 values, channel-major, then z, y, x
with x fastest.  Single-channel files load as :class:`Volume`, 3-channel
files as :class:`DisplacementField`.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from .volume import DisplacementField, Volume

FORMAT_VERSION = 1
HEADER_SUFFIX = ".vjson"
DATA_SUFFIX = ".raw"


class VolumeFormatError(ValueError):
    """Malformed header, unknown version or data/header length mismatch."""


def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (HEADER_SUFFIX, DATA_SUFFIX):
        p = p.with_suffix("")
    return p


def volume_paths(path) -> tuple:
    stem = _stem(path)
    return stem.with_name(stem.name + HEADER_SUFFIX), stem.with_name(stem.name + DATA_SUFFIX)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def make_header(dims, channels: int) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "dims": [int(n) for n in dims],
        "channels": int(channels),
        "dtype": "f32le",
        "order": "c,z,y,x",
        "spacing": [1, 1, 1],
    }


def write_volume(path, obj: Union[Volume, DisplacementField]) -> None:
    if isinstance(obj, DisplacementField):
        data, channels = obj.data, 3
    elif isinstance(obj, Volume):
        data, channels = obj.channel_first(), obj.channels
    else:
        raise TypeError(f"cannot write {type(obj).__name__}")
    header = make_header(obj.dims, channels)
    head_path, raw_path = volume_paths(path)
    atomic_write_bytes(raw_path, np.ascontiguousarray(data, dtype="<f4").tobytes())
    atomic_write_text(head_path, json.dumps(header, indent=2) + "\n")


def validate_header(header) -> None:
    if not isinstance(header, dict):
        raise VolumeFormatError("header must be a JSON object")
    required = ("format_version", "dims", "channels", "dtype", "order")
    missing = [k for k in required if k not in header]
    if missing:
        raise VolumeFormatError(f"header missing keys: {', '.join(missing)}")
    if header["format_version"] != FORMAT_VERSION:
        raise VolumeFormatError(f"unknown format_version {header['format_version']!r}")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(n, int) and n > 0 for n in dims)):
        raise VolumeFormatError(f"dims must be three positive integers, got {dims!r}")
    if header["channels"] not in (1, 3):
        raise VolumeFormatError(f"channels must be 1 or 3, got {header['channels']!r}")
    if header["dtype"] != "f32le":
        raise VolumeFormatError(f"unsupported dtype {header['dtype']!r}")
    if header["order"] != "c,z,y,x":
        raise VolumeFormatError(f"unsupported order {header['order']!r}")


def read_volume(path) -> Union[Volume, DisplacementField]:
    head_path, raw_path = volume_paths(path)
    try:
        header = json.loads(head_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"volume header not found: {head_path}") from None
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed header {head_path}: {exc}") from None
    validate_header(header)
    raw = raw_path.read_bytes()
    dims, channels = header["dims"], header["channels"]
    expected = 4 * channels * int(np.prod(dims))
    if len(raw) != expected:
        raise VolumeFormatError(f"{raw_path}: expected {expected} bytes for {channels}x"
                                f"{'x'.join(map(str, dims))} float32, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(channels, *dims)
    if channels == 3:
        return DisplacementField(data)
    return Volume(data[0])
