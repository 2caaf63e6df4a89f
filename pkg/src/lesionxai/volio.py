"""Bit-exact volume container and plain-text config files.

A MetaVolume is a dense channel-first array (C, Z, Y, X) with physical
spacing, stored on disk as a structured-text header plus a raw little-endian
payload (``<path>`` and ``<path>.raw``). The round trip is lossless.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

FORMAT_VERSION = 1


class VolumeFormatError(ValueError):
    """Malformed header, unknown dtype, or payload length mismatch."""


@dataclass
class MetaVolume:
    data: np.ndarray  # (C, Z, Y, X)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # mm per (z, y, x)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise VolumeFormatError(
                f"expected 4 axes (C, Z, Y, X), got shape {self.data.shape}"
            )
        if self.data.dtype not in _DTYPE_NAMES:
            self.data = self.data.astype(np.float32)
        if any(s <= 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing
        return sz * sy * sx


def write_metavolume(vol: MetaVolume, path: str | Path) -> None:
    path = Path(path)
    c, z, y, x = vol.shape
    dtype_name = _DTYPE_NAMES[np.dtype(vol.data.dtype)]
    lines = [
        f"metavolume {FORMAT_VERSION}",
        f"dims {c} {z} {y} {x}",
        "spacing {} {} {}".format(*(repr(float(s)) for s in vol.spacing)),
        f"dtype {dtype_name}",
        "byteorder little",
    ]
    for key in sorted(vol.meta):
        val = str(vol.meta[key])
        if "\n" in val:
            raise VolumeFormatError(f"metadata value for {key!r} contains newline")
        lines.append(f"meta {key} {val}")
    path.write_text("\n".join(lines) + "\n")
    payload = np.ascontiguousarray(vol.data)
    if sys.byteorder != "little":  # pragma: no cover
        payload = payload.astype(payload.dtype.newbyteorder("<"))
    Path(str(path) + ".raw").write_bytes(payload.tobytes())


def read_metavolume(path: str | Path) -> MetaVolume:
    path = Path(path)
    dims = None
    spacing = (1.0, 1.0, 1.0)
    dtype = None
    meta: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        tag, _, rest = line.partition(" ")
        if tag == "metavolume":
            if rest.split()[0] != str(FORMAT_VERSION):
                raise VolumeFormatError(f"unsupported format version {rest!r}")
        elif tag == "dims":
            parts = rest.split()
            if len(parts) != 4:
                raise VolumeFormatError(f"line {lineno}: dims needs 4 entries")
            dims = tuple(int(p) for p in parts)
        elif tag == "spacing":
            spacing = tuple(float(p) for p in rest.split())
        elif tag == "dtype":
            if rest not in _DTYPES:
                raise VolumeFormatError(f"unknown dtype {rest!r}")
            dtype = _DTYPES[rest]
        elif tag == "byteorder":
            if rest != "little":
                raise VolumeFormatError(f"unsupported byte order {rest!r}")
        elif tag == "meta":
            key, _, val = rest.partition(" ")
            meta[key] = val
        else:
            raise VolumeFormatError(f"line {lineno}: unknown tag {tag!r}")
    if dims is None or dtype is None:
        raise VolumeFormatError(f"{path}: header missing dims or dtype")
    raw = Path(str(path) + ".raw").read_bytes()
    expected = int(np.prod(dims)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(raw)} bytes, expected {expected}"
        )
    data = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(
        dtype, copy=True
    )
    return MetaVolume(data.reshape(dims), spacing=spacing, meta=meta)


def write_keyvalue(pairs: dict, path: str | Path) -> None:
    """Plain-text ``key value`` config file, one pair per line."""
    lines = [f"{k} {pairs[k]}" for k in pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def read_keyvalue(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition(" ")
        out[key] = val.strip()
    return out
