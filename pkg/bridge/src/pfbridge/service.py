"""FastAPI service exposing a BridgeModel over the wire protocol.

Endpoints: POST /v1/denoise, /v1/decode, /v1/encode (binary frames),
POST /v1/conditioning (prompt registration returning an opaque token),
GET /v1/info (native dims, batch limit, decode factor). Responses are
cached by request id, so an idempotent retry returns equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import threading
from collections import OrderedDict

from fastapi import FastAPI, Request, Response

from . import frames
from .model import BridgeModel

RESPONSE_CACHE_SIZE = 64


class _Registry:
    """Token registry: prompt text is transported once, then referenced."""

    def __init__(self):
        self._by_token: dict[str, str] = {}
        self.register("")  # the null conditioning is always known

    def register(self, text: str) -> str:
        token = "" if text == "" else (
            "c-" + hashlib.sha1(text.encode("utf-8")).hexdigest()[:16])
        self._by_token[token] = text
        return token

    def resolve(self, token: str) -> str | None:
        return self._by_token.get(token)


def create_app(model: BridgeModel, max_batch: int = 8) -> FastAPI:
    app = FastAPI(title="patchfusion bridge")
    registry = _Registry()
    cache: OrderedDict[str, bytes] = OrderedDict()
    lock = threading.Lock()  # single-model worker: serialize network calls
    cfg = model.cfg

    def cached(request_id: str) -> bytes | None:
        with lock:
            return cache.get(request_id)

    def remember(request_id: str, body: bytes) -> None:
        with lock:
            cache[request_id] = body
            while len(cache) > RESPONSE_CACHE_SIZE:
                cache.popitem(last=False)

    def frame_response(body: bytes) -> Response:
        return Response(content=body, media_type="application/octet-stream")

    def error(status: int, message: str, **extra) -> Response:
        payload = {"error": message, **extra}
        return Response(content=json.dumps(payload), status_code=status,
                        media_type="application/json")

    @app.get("/v1/info")
    def info():
        return {"native_h": cfg.native_h, "native_w": cfg.native_w,
                "channels": cfg.channels, "max_batch": max_batch,
                "decode_factor": cfg.decode_factor,
                "concurrency": 1}  # single-model worker

    @app.post("/v1/conditioning")
    async def conditioning(request: Request):
        try:
            text = json.loads(await request.body())["text"]
        except (json.JSONDecodeError, KeyError, TypeError):
            return error(400, "body must be JSON with a 'text' field")
        return {"token": registry.register(str(text))}

    @app.post("/v1/denoise")
    async def denoise(request: Request):
        body = await request.body()
        try:
            header, payload = frames.parse_frame(body)
            request_id = frames.request_id_of(header)
            hit = cached(request_id)
            if hit is not None:
                return frame_response(hit)
            shape = frames.shape_of(header, 4)
            batch = frames.floats_from(payload, shape)
        except frames.FrameError as exc:
            return error(400, str(exc))
        b, c, h, w = shape
        if (c, h, w) != (cfg.channels, cfg.native_h, cfg.native_w):
            return error(400, f"patch dims {(c, h, w)} do not match model "
                              f"{(cfg.channels, cfg.native_h, cfg.native_w)}")
        if b > max_batch:
            return error(503, f"batch of {b} exceeds serving capacity",
                         max_batch=max_batch)
        t = header.get("t")
        if not isinstance(t, int) or t < 0:
            return error(400, "t must be a nonnegative integer")
        tokens = header.get("conditionings")
        if not isinstance(tokens, list) or not tokens:
            return error(400, "conditionings must be a non-empty list")
        texts = []
        for token in tokens:
            text = registry.resolve(str(token))
            if text is None:
                return error(400, f"unknown conditioning token {token!r}; "
                                  "register it via /v1/conditioning")
            texts.append(text)
        with lock:
            eps = model.denoise(batch, t, texts)
        out = frames.build_frame(
            {"op": "denoise", "shape": list(eps.shape), "request_id": request_id},
            eps.astype("<f4").tobytes())
        remember(request_id, out)
        return frame_response(out)

    @app.post("/v1/decode")
    async def decode(request: Request):
        body = await request.body()
        try:
            header, payload = frames.parse_frame(body)
            request_id = frames.request_id_of(header)
            hit = cached(request_id)
            if hit is not None:
                return frame_response(hit)
            shape = frames.shape_of(header, 3)
            z = frames.floats_from(payload, shape)
        except frames.FrameError as exc:
            return error(400, str(exc))
        if shape[0] != cfg.channels:
            return error(400, f"latent has {shape[0]} channels, model wants "
                              f"{cfg.channels}")
        with lock:
            image = model.decode(z)
        out = frames.build_frame(
            {"op": "decode", "format": "rgb8", "shape": list(image.shape),
             "request_id": request_id}, image.tobytes())
        remember(request_id, out)
        return frame_response(out)

    @app.post("/v1/encode")
    async def encode(request: Request):
        body = await request.body()
        try:
            header, payload = frames.parse_frame(body)
            request_id = frames.request_id_of(header)
            hit = cached(request_id)
            if hit is not None:
                return frame_response(hit)
            shape = frames.shape_of(header, 3)
            image = frames.bytes_from(payload, shape)
        except frames.FrameError as exc:
            return error(400, str(exc))
        f = cfg.decode_factor
        if shape[0] != 3 or shape[1] % f or shape[2] % f:
            return error(400, f"image must be (3, H, W) with H, W divisible "
                              f"by {f}, got {shape}")
        with lock:
            z = model.encode(image)
        out = frames.build_frame(
            {"op": "encode", "shape": list(z.shape), "request_id": request_id},
            z.astype("<f4").tobytes())
        remember(request_id, out)
        return frame_response(out)

    return app
