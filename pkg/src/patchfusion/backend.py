"""Denoiser/decoder backends: deterministic mocks for verification, a
recording/replay pair for golden tests, and a remote client speaking the
wire protocol. Guidance is combined engine-side, so every request carries
the conditioning tokens and backends return one epsilon per (patch,
conditioning), patch-major.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import requests

from . import wire
from .errors import BackendError, BackendUnreachable, ProtocolError
from .patching import make_dilation_set
from .schedule import NoiseSchedule
from .tensor import Latent, validate_latent


@dataclass
class DenoiseRequest:
    """One mini-batch of native-size patches to denoise at timestep t."""

    batch: list[Latent]
    t: int
    conditionings: list[str]
    extras: dict = field(default_factory=dict)
    request_id: str = ""


@dataclass(frozen=True)
class TileSpec:
    """Decoder tiling: core tile dims plus margin context in latent cells."""

    tile_h: int
    tile_w: int
    margin: int = 8

    def __post_init__(self):
        if self.tile_h <= 0 or self.tile_w <= 0:
            raise ValueError("tile dims must be positive")
        if not 0 <= self.margin < min(self.tile_h, self.tile_w):
            raise ValueError(f"margin {self.margin} must be in [0, min(tile dims))")


DEFAULT_TILE = TileSpec(tile_h=64, tile_w=64, margin=8)


def oracle_epsilon(z_t: Latent, t: int, target: Latent,
                   schedule: NoiseSchedule) -> Latent:
    """The unique epsilon for which the one-step clean-latent prediction
    equals ``target``: (z_t - sqrt(abar_t) target) / sqrt(1 - abar_t)."""
    if t == 0:
        raise ValueError("t=0 has zero noise scale; oracle epsilon undefined")
    if target.shape != z_t.shape:
        raise ValueError(f"target shape {target.shape} != z_t shape {z_t.shape}")
    a = schedule.alpha_bar(t)
    return (z_t - math.sqrt(a) * target) / math.sqrt(1.0 - a)


class DenoiserHandle:
    """Abstract epsilon-prediction backend.

    ``denoise_batch`` returns one epsilon patch per (patch, conditioning),
    ordered patch-major then conditioning. ``decoder`` (optional) exposes
    .factor and .decode(latent) -> uint8 (3, H*factor, W*factor).
    """

    kind = "abstract"

    def __init__(self, channels: int, native_h: int, native_w: int,
                 max_batch: int | None = None, decoder=None):
        if channels <= 0 or native_h <= 0 or native_w <= 0:
            raise ValueError("native dims must be positive")
        self.channels = channels
        self.native_h = native_h
        self.native_w = native_w
        self.max_batch = max_batch
        self.decoder = decoder

    def identity(self) -> str:
        return f"{self.kind}@{self.channels}x{self.native_h}x{self.native_w}"

    def _validate(self, req: DenoiseRequest) -> None:
        if not req.batch:
            raise ValueError("empty denoise batch")
        if self.max_batch is not None and len(req.batch) > self.max_batch:
            raise ValueError(f"batch of {len(req.batch)} exceeds max_batch "
                             f"{self.max_batch}")
        want = (self.channels, self.native_h, self.native_w)
        for p in req.batch:
            if p.shape != want:
                raise ValueError(f"patch shape {p.shape} != native {want}")
        if not req.conditionings:
            raise ValueError("at least one conditioning required")

    def denoise_batch(self, req: DenoiseRequest) -> list[Latent]:
        self._validate(req)
        return self._denoise(req)

    def _denoise(self, req: DenoiseRequest) -> list[Latent]:
        raise NotImplementedError


def denoise_batch(handle: DenoiserHandle, req: DenoiseRequest) -> list[Latent]:
    """Module-level alias for ``handle.denoise_batch(req)``."""
    return handle.denoise_batch(req)


class ZeroDenoiser(DenoiserHandle):
    """Predicts epsilon = 0 for every patch and conditioning."""

    kind = "zero"

    def _denoise(self, req: DenoiseRequest) -> list[Latent]:
        shape = (self.channels, self.native_h, self.native_w)
        k = len(req.conditionings)
        return [np.zeros(shape, dtype=np.float32) for _ in range(len(req.batch) * k)]


class OracleDenoiser(DenoiserHandle):
    """Returns the exact epsilon that drives each patch toward a per-phase
    target latent, using the geometry the engine passes in extras.

    extras contract: {"path": "full"|"local"|"global", "phase": s} plus
    per-patch geometry ("tops"/"lefts" for local crops, "dilation"/"offsets"
    for dilated samples). The same epsilon is returned for every
    conditioning, which makes guidance arithmetic value-neutral.
    """

    kind = "oracle"

    def __init__(self, schedule: NoiseSchedule, targets: dict[int, Latent],
                 channels: int, native_h: int, native_w: int,
                 max_batch: int | None = None, decoder=None):
        super().__init__(channels, native_h, native_w, max_batch, decoder)
        self.schedule = schedule
        self.targets = {int(s): validate_latent(z, f"target[{s}]")
                        for s, z in targets.items()}

    def _target_patch(self, extras: dict, index: int) -> Latent:
        phase = extras.get("phase")
        if phase not in self.targets:
            raise ValueError(f"no oracle target for phase {phase!r}")
        target = self.targets[phase]
        path = extras.get("path")
        if path == "full":
            return target
        if path == "local":
            top = extras["tops"][index]
            left = extras["lefts"][index]
            return np.ascontiguousarray(
                target[:, top:top + self.native_h, left:left + self.native_w])
        if path == "global":
            s = extras["dilation"]
            i, j = extras["offsets"][index]
            _ = make_dilation_set(s)  # validates s
            return np.ascontiguousarray(target[:, i::s, j::s])
        raise ValueError(f"unknown path kind {path!r} in extras")

    def _denoise(self, req: DenoiseRequest) -> list[Latent]:
        out = []
        for i, patch in enumerate(req.batch):
            target = self._target_patch(req.extras, i)
            eps = oracle_epsilon(patch, req.t, target, self.schedule)
            out.extend(eps.copy() for _ in req.conditionings)
        return out


class RecordingDenoiser(DenoiserHandle):
    """Wraps another handle and records request/response frames to a file.

    Keys exclude the request id, so a recording replays across runs that
    generate fresh ids.
    """

    kind = "recording"

    def __init__(self, inner: DenoiserHandle, path: str):
        super().__init__(inner.channels, inner.native_h, inner.native_w,
                         inner.max_batch, inner.decoder)
        self.inner = inner
        self.path = path
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"kind": "recording",
                                 "channels": inner.channels,
                                 "native_h": inner.native_h,
                                 "native_w": inner.native_w}) + "\n")

    def _denoise(self, req: DenoiseRequest) -> list[Latent]:
        eps = self.inner.denoise_batch(req)
        response = wire.encode_denoise_response(np.stack(eps), req.request_id or "rec")
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({
                "key": request_digest(req),
                "response": base64.b64encode(response).decode("ascii"),
            }) + "\n")
        return eps


class ReplayDenoiser(DenoiserHandle):
    """Serves recorded response frames keyed by request content digest."""

    kind = "replay"

    def __init__(self, path: str):
        with open(path, encoding="utf-8") as fh:
            meta = json.loads(fh.readline())
            if meta.get("kind") != "recording":
                raise BackendError(f"{path} is not a denoiser recording")
            self._frames: dict[str, bytes] = {}
            for line in fh:
                entry = json.loads(line)
                self._frames[entry["key"]] = base64.b64decode(entry["response"])
        super().__init__(meta["channels"], meta["native_h"], meta["native_w"])

    def response_frame(self, req: DenoiseRequest) -> bytes:
        key = request_digest(req)
        if key not in self._frames:
            raise BackendError(f"no recorded response for request digest {key[:12]}")
        return self._frames[key]

    def _denoise(self, req: DenoiseRequest) -> list[Latent]:
        frame = self.response_frame(req)
        rows = len(req.batch) * len(req.conditionings)
        return wire.decode_denoise_response(
            frame, expect_rows=rows,
            expect_patch_shape=(self.channels, self.native_h, self.native_w),
            request_id=wire.decode_frame(frame)[0]["request_id"])


def request_digest(req: DenoiseRequest) -> str:
    """Content hash of a denoise request, excluding the request id."""
    frame = wire.encode_denoise_request(req.batch, req.t, req.conditionings,
                                        req.extras, request_id="digest")
    return hashlib.sha256(frame).hexdigest()


class RemoteDenoiser(DenoiserHandle):
    """HTTP client for a wire-protocol backend.

    Reads native dims from GET /v1/info when available. Denoise requests
    are idempotent (stable request ids) and retried once on transport
    failure.
    """

    kind = "remote"

    def __init__(self, endpoint: str, timeout: float = 60.0,
                 channels: int = 4, native_h: int = 128, native_w: int = 128,
                 max_batch: int | None = None, session: requests.Session | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self._session = session or requests.Session()
        self._counter = 0
        self.decode_factor = 8
        info = self._fetch_info()
        if info is not None:
            channels = int(info.get("channels", channels))
            native_h = int(info.get("native_h", native_h))
            native_w = int(info.get("native_w", native_w))
            max_batch = info.get("max_batch", max_batch)
            self.decode_factor = int(info.get("decode_factor", self.decode_factor))
        super().__init__(channels, native_h, native_w,
                         None if max_batch is None else int(max_batch))
        self.decoder = _RemoteDecoder(self)

    def identity(self) -> str:
        return f"remote:{self.endpoint}@{self.channels}x{self.native_h}x{self.native_w}"

    def _fetch_info(self) -> dict | None:
        try:
            resp = self._session.get(self.endpoint + "/v1/info", timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendUnreachable(f"cannot reach {self.endpoint}: {exc}") from exc
        if resp.status_code == 404:
            return None
        if resp.status_code != 200:
            raise BackendError(f"/v1/info returned {resp.status_code}: {resp.text}")
        return resp.json()

    def _next_id(self) -> str:
        self._counter += 1
        return f"q-{self._counter:08d}"

    def _post(self, path: str, frame: bytes, request_id: str) -> bytes:
        url = self.endpoint + path
        last_exc: Exception | None = None
        for attempt in range(2):  # idempotent: one retry, same request id
            try:
                resp = self._session.post(
                    url, data=frame, timeout=self.timeout,
                    headers={"Content-Type": "application/octet-stream"})
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_exc = exc
                continue
            if resp.status_code != 200:
                raise BackendError(f"{path} returned {resp.status_code}: "
                                   f"{resp.text[:500]}")
            return resp.content
        raise BackendError(f"{path} failed after retry (request {request_id}): "
                           f"{last_exc}", retryable=True)

    def _denoise(self, req: DenoiseRequest) -> list[Latent]:
        request_id = req.request_id or self._next_id()
        frame = wire.encode_denoise_request(req.batch, req.t, req.conditionings,
                                            req.extras, request_id)
        raw = self._post("/v1/denoise", frame, request_id)
        rows = len(req.batch) * len(req.conditionings)
        return wire.decode_denoise_response(
            raw, expect_rows=rows,
            expect_patch_shape=(self.channels, self.native_h, self.native_w),
            request_id=request_id)

    def decode_latent(self, z: Latent) -> np.ndarray:
        request_id = self._next_id()
        raw = self._post("/v1/decode", wire.encode_decode_request(z, request_id),
                         request_id)
        return wire.decode_decode_response(raw, request_id)

    def encode_image(self, image: np.ndarray) -> Latent:
        request_id = self._next_id()
        raw = self._post("/v1/encode", wire.encode_encode_request(image, request_id),
                         request_id)
        return wire.decode_encode_response(raw, request_id)

    def register_conditioning(self, text: str) -> str:
        """Exchange prompt text for an opaque token; falls back to the raw
        text when the backend has no registration endpoint."""
        url = self.endpoint + "/v1/conditioning"
        try:
            resp = self._session.post(url, json={"text": text}, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"conditioning registration failed: {exc}",
                               retryable=True) from exc
        if resp.status_code == 404:
            return text
        if resp.status_code != 200:
            raise BackendError(f"/v1/conditioning returned {resp.status_code}: "
                               f"{resp.text[:500]}")
        return resp.json()["token"]


class _RemoteDecoder:
    def __init__(self, handle: RemoteDenoiser):
        self._handle = handle

    @property
    def factor(self) -> int:
        return self._handle.decode_factor

    def decode(self, z: Latent) -> np.ndarray:
        return self._handle.decode_latent(z)


class LinearMockDecoder:
    """Spatially local decoder: per-cell affine map to RGB, then a factor-8
    nearest upscale. Locality makes tiled and whole-latent decoding
    bit-identical, which the tiling tests rely on."""

    def __init__(self, channels: int, factor: int = 8):
        self.channels = channels
        self.factor = factor
        self._A = np.array([[math.sin(1.7 * (i + 1) * (j + 2))
                             for j in range(channels)] for i in range(3)],
                           dtype=np.float64)
        self._bias = np.array([0.1, -0.2, 0.05], dtype=np.float64)

    def decode(self, z: Latent) -> np.ndarray:
        validate_latent(z)
        if z.shape[0] != self.channels:
            raise ValueError(f"decoder expects {self.channels} channels, got {z.shape[0]}")
        rgb = np.einsum("ij,jhw->ihw", self._A, z.astype(np.float64))
        rgb += self._bias[:, None, None]
        px = np.clip(np.rint(128.0 + 40.0 * rgb), 0, 255).astype(np.uint8)
        return np.repeat(np.repeat(px, self.factor, axis=1), self.factor, axis=2)


def tiled_decode(z: Latent, decoder, tiles: TileSpec) -> np.ndarray:
    """Decode a large latent in tiles with margin context, then stitch.

    Each tile is extended by ``margin`` cells (clamped at borders) before
    decoding; the margin's decoded extent is cropped away, so seams carry
    full context. Returns uint8 (3, H*factor, W*factor).
    """
    validate_latent(z)
    _, H, W = z.shape
    f = decoder.factor
    if H <= tiles.tile_h and W <= tiles.tile_w:
        return decoder.decode(z)

    out = np.zeros((3, H * f, W * f), dtype=np.uint8)
    m = tiles.margin
    for r0 in range(0, H, tiles.tile_h):
        r1 = min(r0 + tiles.tile_h, H)
        er0, er1 = max(0, r0 - m), min(H, r1 + m)
        for c0 in range(0, W, tiles.tile_w):
            c1 = min(c0 + tiles.tile_w, W)
            ec0, ec1 = max(0, c0 - m), min(W, c1 + m)
            try:
                dec = decoder.decode(np.ascontiguousarray(z[:, er0:er1, ec0:ec1]))
            except Exception as exc:
                raise BackendError(
                    f"decoder failed on tile rows {r0}:{r1} cols {c0}:{c1}: {exc}"
                ) from exc
            expect = (3, (er1 - er0) * f, (ec1 - ec0) * f)
            if dec.shape != expect:
                raise ProtocolError(f"decoded tile shape {dec.shape} != {expect}")
            out[:, r0 * f:r1 * f, c0 * f:c1 * f] = dec[
                :, (r0 - er0) * f:(r1 - er0) * f, (c0 - ec0) * f:(c1 - ec0) * f]
    return out


def make_mock_backend(name: str, *, channels: int, native_h: int, native_w: int,
                      schedule: NoiseSchedule | None = None,
                      targets: dict[int, Latent] | None = None,
                      max_batch: int | None = None,
                      recording_path: str | None = None) -> DenoiserHandle:
    """Factory for the built-in mock kinds (with a linear decoder attached)."""
    decoder = LinearMockDecoder(channels)
    if name == "mock-zero":
        handle: DenoiserHandle = ZeroDenoiser(channels, native_h, native_w,
                                              max_batch, decoder)
    elif name == "mock-oracle":
        if schedule is None or targets is None:
            raise ValueError("mock-oracle needs a schedule and per-phase targets")
        handle = OracleDenoiser(schedule, targets, channels, native_h, native_w,
                                max_batch, decoder)
    elif name == "mock-replay":
        if recording_path is None or not os.path.exists(recording_path):
            raise ValueError("mock-replay needs an existing recording path")
        handle = ReplayDenoiser(recording_path)
        handle.decoder = decoder
    else:
        raise ValueError(f"unknown mock backend {name!r}")
    return handle
