"""Artifact files: latent containers, PNG images, and the run manifest."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .tensor import Latent, validate_latent

LATENT_MAGIC = b"PFLT"
LATENT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")  # magic, version, c, H, W


def write_latent(path: str | Path, z: Latent) -> Path:
    """Write a latent file: magic, version, dims, then row-major float32 LE."""
    validate_latent(z)
    c, h, w = z.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(LATENT_MAGIC, LATENT_VERSION, c, h, w))
        fh.write(z.astype("<f4", copy=False).tobytes())
    return path


def read_latent(path: str | Path) -> Latent:
    """Read a latent file back, bit-exactly; malformed files raise FormatError."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: {len(raw)} bytes is too short for a header")
    magic, version, c, h, w = _HEADER.unpack_from(raw)
    if magic != LATENT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {LATENT_MAGIC!r}")
    if version != LATENT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if c <= 0 or h <= 0 or w <= 0:
        raise FormatError(f"{path}: non-positive dims {(c, h, w)}")
    expected = c * h * w * 4
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise FormatError(f"{path}: payload holds {actual} bytes, "
                          f"expected {expected} for {c}x{h}x{w} float32")
    z = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, h, w)
    return z.astype(np.float32, copy=True)


def write_png(path: str | Path, image: np.ndarray) -> Path:
    """Write an 8-bit RGB image given as uint8 (3, H, W)."""
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise ValueError(f"image must be uint8 (3, H, W), got {image.dtype} "
                         f"{image.shape}")
    path = Path(path)
    Image.fromarray(np.moveaxis(image, 0, 2), mode="RGB").save(path, format="PNG")
    return path


@dataclass
class RunManifest:
    """Everything needed to reproduce a run with the same backend kind."""

    seed: int
    config: dict
    backend: str
    engine_version: str
    phase_seconds: dict[str, float] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)
