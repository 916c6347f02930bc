"""Binary wire protocol for denoiser/decoder/encoder backends.

One frame layout for requests and responses:

    bytes 0..4    magic "PFD1"
    bytes 4..8    unsigned 32-bit little-endian JSON header length L
    bytes 8..8+L  UTF-8 JSON header
    remainder     payload: raw little-endian float32, row-major,
                  concatenated patches (rgb8 payloads are raw uint8)

Denoise request headers carry {"op","t","shape":[b,c,h,w],"conditionings",
"extras","request_id"}; the response shape is [b*k,c,h,w] with k the number
of conditionings, ordered patch-major then conditioning. HTTP endpoints:
POST /v1/denoise, /v1/decode (latent -> rgb8), /v1/encode (rgb8 -> latent).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ProtocolError
from .tensor import Latent

MAGIC = b"PFD1"

_FLOAT_OPS_REQUEST = {"denoise": True, "decode": True, "encode": False}
_FLOAT_OPS_RESPONSE = {"denoise": True, "decode": False, "encode": True}


def encode_frame(header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def decode_frame(buf: bytes) -> tuple[dict, bytes]:
    """Split a frame into (header, payload); structural checks only."""
    if len(buf) < 8:
        raise ProtocolError(f"frame too short: {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise ProtocolError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise ProtocolError(f"declared header length {hlen} exceeds frame")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ProtocolError("header must be a JSON object")
    return header, buf[8 + hlen:]


def _check_shape(header: dict, rank: int) -> tuple[int, ...]:
    shape = header.get("shape")
    if (not isinstance(shape, list) or len(shape) != rank
            or not all(isinstance(v, int) and v > 0 for v in shape)):
        raise ProtocolError(f"shape must be {rank} positive ints, got {shape!r}")
    return tuple(shape)


def _payload_array(payload: bytes, shape: tuple[int, ...], rgb8: bool) -> np.ndarray:
    n = int(np.prod(shape))
    itemsize = 1 if rgb8 else 4
    if len(payload) != n * itemsize:
        raise ProtocolError(f"payload holds {len(payload)} bytes, "
                            f"expected {n * itemsize} for shape {shape}")
    dtype = np.uint8 if rgb8 else np.dtype("<f4")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def validate_frame(buf: bytes, *, kind: str, expect_op: str | None = None) -> dict:
    """Full structural validation of a frame; returns the header.

    ``kind`` is "request" or "response". Raises ProtocolError on any
    violation. This is the conformance check any backend must pass.
    """
    if kind not in ("request", "response"):
        raise ValueError(f"kind must be request|response, got {kind!r}")
    header, payload = decode_frame(buf)
    op = header.get("op")
    if op not in ("denoise", "decode", "encode"):
        raise ProtocolError(f"unknown op {op!r}")
    if expect_op is not None and op != expect_op:
        raise ProtocolError(f"expected op {expect_op!r}, got {op!r}")
    if not isinstance(header.get("request_id"), str) or not header["request_id"]:
        raise ProtocolError("request_id must be a non-empty string")

    floats = (_FLOAT_OPS_REQUEST if kind == "request" else _FLOAT_OPS_RESPONSE)[op]
    if not floats and header.get("format") != "rgb8":
        raise ProtocolError(f"{op} {kind} must declare format rgb8")

    if op == "denoise":
        shape = _check_shape(header, 4)
        if kind == "request":
            if not isinstance(header.get("t"), int) or header["t"] < 0:
                raise ProtocolError("t must be a nonnegative integer")
            conds = header.get("conditionings")
            if (not isinstance(conds, list) or not conds
                    or not all(isinstance(c, str) for c in conds)):
                raise ProtocolError("conditionings must be a non-empty string list")
            if not isinstance(header.get("extras"), dict):
                raise ProtocolError("extras must be a JSON object")
            if shape[0] % 1 != 0:
                raise ProtocolError("bad batch dim")
    else:
        shape = _check_shape(header, 3)
        if not floats and shape[0] != 3:
            raise ProtocolError(f"rgb8 payload must have 3 channels, got {shape[0]}")
    _payload_array(payload, shape, rgb8=not floats)
    return header


def _stack_batch(batch: list[Latent]) -> np.ndarray:
    if not batch:
        raise ValueError("empty batch")
    shapes = {p.shape for p in batch}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent patch shapes {sorted(shapes)}")
    return np.stack(batch).astype("<f4", copy=False)


def encode_denoise_request(batch: list[Latent], t: int, conditionings: list[str],
                           extras: dict, request_id: str) -> bytes:
    arr = _stack_batch(batch)
    header = {"op": "denoise", "t": int(t), "shape": [int(v) for v in arr.shape],
              "conditionings": list(conditionings), "extras": extras,
              "request_id": request_id}
    return encode_frame(header, arr.tobytes())


def decode_denoise_request(buf: bytes) -> tuple[dict, np.ndarray]:
    """Returns (header, batch array of shape (b, c, h, w))."""
    header = validate_frame(buf, kind="request", expect_op="denoise")
    _, payload = decode_frame(buf)
    arr = _payload_array(payload, tuple(header["shape"]), rgb8=False)
    return header, arr.astype(np.float32, copy=False)


def encode_denoise_response(eps: np.ndarray, request_id: str) -> bytes:
    if eps.ndim != 4:
        raise ValueError(f"eps must be (b*k, c, h, w), got shape {eps.shape}")
    header = {"op": "denoise", "shape": [int(v) for v in eps.shape],
              "request_id": request_id}
    return encode_frame(header, eps.astype("<f4", copy=False).tobytes())


def decode_denoise_response(buf: bytes, *, expect_rows: int,
                            expect_patch_shape: tuple[int, int, int],
                            request_id: str) -> list[np.ndarray]:
    """Returns the b*k epsilon patches, validated against expectations."""
    header = validate_frame(buf, kind="response", expect_op="denoise")
    if header["request_id"] != request_id:
        raise ProtocolError(f"response request_id {header['request_id']!r} "
                            f"does not match {request_id!r}")
    shape = tuple(header["shape"])
    if shape != (expect_rows, *expect_patch_shape):
        raise ProtocolError(f"response shape {shape} != "
                            f"{(expect_rows, *expect_patch_shape)}")
    _, payload = decode_frame(buf)
    arr = _payload_array(payload, shape, rgb8=False).astype(np.float32, copy=False)
    return [arr[i] for i in range(shape[0])]


def encode_decode_request(z: Latent, request_id: str) -> bytes:
    header = {"op": "decode", "shape": [int(v) for v in z.shape],
              "request_id": request_id}
    return encode_frame(header, z.astype("<f4", copy=False).tobytes())


def decode_decode_request(buf: bytes) -> tuple[dict, np.ndarray]:
    header = validate_frame(buf, kind="request", expect_op="decode")
    _, payload = decode_frame(buf)
    arr = _payload_array(payload, tuple(header["shape"]), rgb8=False)
    return header, arr.astype(np.float32, copy=False)


def encode_decode_response(image: np.ndarray, request_id: str) -> bytes:
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise ValueError(f"image must be uint8 (3, H, W), got {image.dtype} {image.shape}")
    header = {"op": "decode", "format": "rgb8",
              "shape": [int(v) for v in image.shape], "request_id": request_id}
    return encode_frame(header, image.tobytes())


def decode_decode_response(buf: bytes, request_id: str) -> np.ndarray:
    header = validate_frame(buf, kind="response", expect_op="decode")
    if header["request_id"] != request_id:
        raise ProtocolError("response request_id mismatch")
    _, payload = decode_frame(buf)
    return _payload_array(payload, tuple(header["shape"]), rgb8=True)


def encode_encode_request(image: np.ndarray, request_id: str) -> bytes:
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise ValueError(f"image must be uint8 (3, H, W), got {image.dtype} {image.shape}")
    header = {"op": "encode", "format": "rgb8",
              "shape": [int(v) for v in image.shape], "request_id": request_id}
    return encode_frame(header, image.tobytes())


def decode_encode_request(buf: bytes) -> tuple[dict, np.ndarray]:
    header = validate_frame(buf, kind="request", expect_op="encode")
    _, payload = decode_frame(buf)
    return header, _payload_array(payload, tuple(header["shape"]), rgb8=True)


def encode_encode_response(z: Latent, request_id: str) -> bytes:
    header = {"op": "encode", "shape": [int(v) for v in z.shape],
              "request_id": request_id}
    return encode_frame(header, z.astype("<f4", copy=False).tobytes())


def decode_encode_response(buf: bytes, request_id: str) -> np.ndarray:
    header = validate_frame(buf, kind="response", expect_op="encode")
    if header["request_id"] != request_id:
        raise ProtocolError("response request_id mismatch")
    _, payload = decode_frame(buf)
    arr = _payload_array(payload, tuple(header["shape"]), rgb8=False)
    return arr.astype(np.float32, copy=False)


def conformance_requests(channels: int, native_h: int, native_w: int) -> list[tuple[str, bytes]]:
    """Deterministic request frames covering all three ops.

    Used to exercise any backend implementation against the validator.
    """
    rng = np.random.default_rng(20240)
    vectors: list[tuple[str, bytes]] = []
    for b in (1, 2, 5):
        batch = [rng.standard_normal((channels, native_h, native_w)).astype(np.float32)
                 for _ in range(b)]
        vectors.append((
            f"denoise-b{b}",
            encode_denoise_request(batch, t=1000 - 20 * b, conditionings=["", "a cat"],
                                   extras={"path": "local", "phase": 2,
                                           "tops": [0] * b, "lefts": [0] * b},
                                   request_id=f"conf-denoise-{b}"),
        ))
    z = rng.standard_normal((channels, native_h, native_w)).astype(np.float32)
    vectors.append(("decode", encode_decode_request(z, request_id="conf-decode")))
    img = rng.integers(0, 256, size=(3, native_h * 8, native_w * 8)).astype(np.uint8)
    vectors.append(("encode", encode_encode_request(img, request_id="conf-encode")))
    return vectors
