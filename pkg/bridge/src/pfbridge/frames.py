"""Frame codec for the binary wire protocol, written to the protocol
description (magic, u32 LE header length, JSON header, raw payload) without
importing the engine: the conformance suite checks this implementation
against the engine's validator."""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PFD1"


class FrameError(ValueError):
    """Raised for malformed frames; the service maps it to HTTP 400."""


def parse_frame(buf: bytes) -> tuple[dict, bytes]:
    if len(buf) < 8:
        raise FrameError(f"frame too short ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise FrameError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise FrameError("declared header length exceeds frame")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"header is not UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FrameError("header must be a JSON object")
    return header, buf[8 + hlen:]


def build_frame(header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def floats_from(payload: bytes, shape: list[int]) -> np.ndarray:
    n = int(np.prod(shape))
    if len(payload) != 4 * n:
        raise FrameError(f"payload holds {len(payload)} bytes, expected {4 * n} "
                         f"for shape {shape}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def bytes_from(payload: bytes, shape: list[int]) -> np.ndarray:
    n = int(np.prod(shape))
    if len(payload) != n:
        raise FrameError(f"payload holds {len(payload)} bytes, expected {n} "
                         f"for shape {shape}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


def shape_of(header: dict, rank: int) -> list[int]:
    shape = header.get("shape")
    if (not isinstance(shape, list) or len(shape) != rank
            or not all(isinstance(v, int) and v > 0 for v in shape)):
        raise FrameError(f"shape must be {rank} positive ints, got {shape!r}")
    return shape


def request_id_of(header: dict) -> str:
    rid = header.get("request_id")
    if not isinstance(rid, str) or not rid:
        raise FrameError("request_id must be a non-empty string")
    return rid
