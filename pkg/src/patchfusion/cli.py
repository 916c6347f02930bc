"""Command-line front end: configuration, generation runs, previews, and
deterministic re-runs.

Settings resolve as flags > config file > defaults; the effective settings
are echoed by --show-config in the same flat key=value format the config
file uses, and snapshotted into the run manifest.

Exit codes: 0 success, 2 configuration error, 3 backend unreachable,
4 pipeline abort (partial artifacts are left in place).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .backend import (DEFAULT_TILE, DenoiserHandle, RemoteDenoiser,
                      make_mock_backend, tiled_decode)
from .errors import BackendUnreachable, EngineError
from .pipeline import (PipelineConfig, RunStats, init_from_latent,
                       make_phase_plan, run_pipeline)
from .schedule import DecayParams, GuidanceSpec
from .storage import RunManifest, read_latent, write_latent, write_png
from .tensor import PURPOSE_ORACLE_TARGET, RngStream, upsample_bicubic

DEFAULTS: dict[str, str] = {
    "prompt": "sample",
    "factor": "",
    "phases": "1",
    "seed": "0",
    "backend": "",
    "batch_size": "16",
    "inflight": "1",
    "out": "",
    "steps": "50",
    "t_train": "1000",
    "beta_start": "0.00085",
    "beta_end": "0.012",
    "guidance": "7.5",
    "alpha1": "3.0",
    "alpha2": "1.0",
    "alpha3": "1.0",
    "sigma1": "1.0",
    "sigma2": "0.01",
    "stride": "auto",
    "jitter": "auto",
    "skip_residual": "true",
    "dilated": "true",
    "progressive": "true",
    "start_t": "none",
    "init_latent": "",
    "init_image": "",
    "native_h": "16",
    "native_w": "16",
    "channels": "4",
}


class SettingsError(ValueError):
    pass


def load_config_file(path: str) -> dict[str, str]:
    """Flat key=value file; '#' starts a comment; unknown keys rejected."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SettingsError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SettingsError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise SettingsError(f"{path}:{lineno}: unknown setting {key!r}")
        values[key] = value
    return values


def _parse_int(settings: dict[str, str], key: str) -> int:
    try:
        return int(settings[key])
    except ValueError as exc:
        raise SettingsError(f"{key} must be an integer, got {settings[key]!r}") from exc


def _parse_float(settings: dict[str, str], key: str) -> float:
    try:
        return float(settings[key])
    except ValueError as exc:
        raise SettingsError(f"{key} must be a number, got {settings[key]!r}") from exc


def _parse_bool(settings: dict[str, str], key: str) -> bool:
    value = settings[key].lower()
    if value in ("true", "1", "yes", "on"):
        return True
    if value in ("false", "0", "no", "off"):
        return False
    raise SettingsError(f"{key} must be true/false, got {settings[key]!r}")


def resolve_phase_count(settings: dict[str, str]) -> int:
    if settings["factor"]:
        K = _parse_int(settings, "factor")
        if K < 1:
            raise SettingsError(f"factor must be >= 1, got {K}")
        S = math.isqrt(K)
        if S * S != K:
            raise SettingsError(
                f"factor {K} is not a perfect square; the area factor must be "
                "S^2 for integer side factor S - pass --phases S directly instead")
        return S
    S = _parse_int(settings, "phases")
    if S < 1:
        raise SettingsError(f"phases must be >= 1, got {S}")
    return S


def build_pipeline_config(settings: dict[str, str]) -> PipelineConfig:
    S = resolve_phase_count(settings)
    stride = settings["stride"]
    stride_v = None if stride == "auto" else _parse_int(settings, "stride")
    if stride_v is not None and stride_v < 1:
        raise SettingsError(f"stride must be >= 1, got {stride_v}")
    jitter = settings["jitter"]
    if jitter == "auto":
        jitter_on, jitter_max = True, None
    elif jitter == "off":
        jitter_on, jitter_max = False, None
    else:
        jitter_on, jitter_max = True, _parse_int(settings, "jitter")
        if jitter_max < 0:
            raise SettingsError(f"jitter must be >= 0, got {jitter_max}")
    start_t = settings["start_t"]
    start_v = None if start_t in ("none", "") else _parse_int(settings, "start_t")
    try:
        decay = DecayParams(alpha1=_parse_float(settings, "alpha1"),
                            alpha2=_parse_float(settings, "alpha2"),
                            alpha3=_parse_float(settings, "alpha3"),
                            sigma1=_parse_float(settings, "sigma1"),
                            sigma2=_parse_float(settings, "sigma2"))
        guidance = GuidanceSpec(scale=_parse_float(settings, "guidance"))
        return PipelineConfig(
            seed=_parse_int(settings, "seed"),
            phases=S,
            steps=_parse_int(settings, "steps"),
            t_train=_parse_int(settings, "t_train"),
            beta_start=_parse_float(settings, "beta_start"),
            beta_end=_parse_float(settings, "beta_end"),
            decay=decay,
            guidance=guidance,
            stride_h=stride_v,
            stride_w=stride_v,
            jitter=jitter_on,
            jitter_max_h=jitter_max,
            jitter_max_w=jitter_max,
            batch_size=_parse_int(settings, "batch_size"),
            inflight=_parse_int(settings, "inflight"),
            skip_residual=_parse_bool(settings, "skip_residual"),
            dilated=_parse_bool(settings, "dilated"),
            progressive=_parse_bool(settings, "progressive"),
            start_t=start_v,
        )
    except ValueError as exc:
        raise SettingsError(str(exc)) from exc


def build_backend(settings: dict[str, str], config: PipelineConfig) -> DenoiserHandle:
    name = settings["backend"] or os.environ.get("PF_BACKEND_URL", "") or "mock-oracle"
    if name.startswith("http://") or name.startswith("https://"):
        return RemoteDenoiser(name)
    channels = _parse_int(settings, "channels")
    nh = _parse_int(settings, "native_h")
    nw = _parse_int(settings, "native_w")
    if name == "mock-oracle":
        schedule = config.build_schedule()
        base = RngStream(config.seed).child(PURPOSE_ORACLE_TARGET)
        plan = make_phase_plan(config.phases, nh, nw)
        targets = {}
        prev = base.standard_normal((channels, nh, nw))
        targets[1] = prev
        for s, H, W in plan.phases[1:]:
            prev = upsample_bicubic(prev, H, W)
            targets[s] = prev
        return make_mock_backend("mock-oracle", channels=channels, native_h=nh,
                                 native_w=nw, schedule=schedule, targets=targets)
    if name == "mock-zero":
        return make_mock_backend("mock-zero", channels=channels, native_h=nh,
                                 native_w=nw)
    raise SettingsError(f"unknown backend {name!r}: expected mock-oracle, "
                        "mock-zero, or an http(s) URL")


def format_settings(settings: dict[str, str]) -> str:
    return "\n".join(f"{key} = {settings[key]}" for key in DEFAULTS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchfusion",
        description="Progressive patch-fusion generation over a latent "
                    "diffusion backend")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("generate", help="run a generation")
    gen.add_argument("--config", help="flat key=value settings file")
    gen.add_argument("--show-config", action="store_true",
                     help="print effective settings and exit")
    gen.add_argument("--prompt")
    gen.add_argument("--factor", type=int, help="area magnification K (= S^2)")
    gen.add_argument("--phases", type=int, help="side-length factor S")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--backend",
                     help="mock-oracle | mock-zero | http(s) URL "
                          "(default: $PF_BACKEND_URL or mock-oracle)")
    gen.add_argument("--batch-size", type=int, dest="batch_size")
    gen.add_argument("--inflight", type=int)
    gen.add_argument("--out", help="output directory")
    gen.add_argument("--steps", type=int)
    gen.add_argument("--guidance", type=float)
    gen.add_argument("--alpha1", type=float)
    gen.add_argument("--alpha2", type=float)
    gen.add_argument("--alpha3", type=float)
    gen.add_argument("--sigma1", type=float)
    gen.add_argument("--sigma2", type=float)
    gen.add_argument("--stride", type=int)
    gen.add_argument("--jitter", type=int, help="max offset in latent cells")
    gen.add_argument("--no-jitter", action="store_true")
    gen.add_argument("--no-skip-residual", action="store_true")
    gen.add_argument("--no-dilated", action="store_true")
    gen.add_argument("--no-progressive", action="store_true")
    gen.add_argument("--start-t", type=int, dest="start_t")
    gen.add_argument("--init-latent", dest="init_latent",
                     help="latent file to use as the phase-1 output")
    gen.add_argument("--init-image", dest="init_image",
                     help="image to encode (via the backend) as the "
                          "phase-1 output")
    gen.add_argument("--native-h", type=int, dest="native_h",
                     help="mock backend patch height (latent cells)")
    gen.add_argument("--native-w", type=int, dest="native_w")
    gen.add_argument("--channels", type=int)
    return parser


def _merge_settings(args: argparse.Namespace) -> dict[str, str]:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(load_config_file(args.config))
    direct = ("prompt", "seed", "backend", "batch_size", "inflight", "out",
              "steps", "guidance", "alpha1", "alpha2", "alpha3", "sigma1",
              "sigma2", "stride", "start_t", "init_latent", "init_image",
              "native_h", "native_w", "channels", "factor", "phases")
    for key in direct:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = str(value)
    if getattr(args, "factor", None) is not None:
        settings["phases"] = DEFAULTS["phases"]  # factor wins over file phases
    if args.no_jitter:
        settings["jitter"] = "off"
    elif args.jitter is not None:
        settings["jitter"] = str(args.jitter)
    if args.no_skip_residual:
        settings["skip_residual"] = "false"
    if args.no_dilated:
        settings["dilated"] = "false"
    if args.no_progressive:
        settings["progressive"] = "false"
    return settings


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        settings = _merge_settings(args)
        config = build_pipeline_config(settings)
    except SettingsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.show_config:
        print(format_settings(settings))
        return 0
    if not settings["out"]:
        print("error: --out directory is required", file=sys.stderr)
        return 2

    try:
        backend = build_backend(settings, config)
    except SettingsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackendUnreachable as exc:
        print(f"error: backend unreachable: {exc}", file=sys.stderr)
        return 3

    prompt = settings["prompt"]
    uncond = ""
    if isinstance(backend, RemoteDenoiser):
        try:
            prompt_token = backend.register_conditioning(prompt)
            uncond = backend.register_conditioning("")
        except EngineError as exc:
            print(f"error: backend unreachable: {exc}", file=sys.stderr)
            return 3
    else:
        prompt_token = prompt
    config = replace(config, guidance=replace(config.guidance,
                                              unconditional_id=uncond))

    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    rng = RngStream(config.seed)
    stats = RunStats()
    if settings["init_latent"] and settings["init_image"]:
        print("error: pass either --init-latent or --init-image, not both",
              file=sys.stderr)
        return 2
    try:
        if settings["init_image"]:
            if not isinstance(backend, RemoteDenoiser):
                print("error: --init-image needs a backend with an encode "
                      "endpoint; mock backends accept --init-latent only",
                      file=sys.stderr)
                return 2
            rgb = np.moveaxis(
                np.asarray(Image.open(settings["init_image"]).convert("RGB")),
                2, 0)
            z_init = backend.encode_image(rgb)
            results = init_from_latent(z_init, config, backend, rng,
                                       prompt_conditioning=prompt_token,
                                       out_dir=out, stats=stats)
        elif settings["init_latent"]:
            z_init = read_latent(settings["init_latent"])
            results = init_from_latent(z_init, config, backend, rng,
                                       prompt_conditioning=prompt_token,
                                       out_dir=out, stats=stats)
        else:
            results = run_pipeline(prompt_token, config, backend, rng,
                                   out_dir=out, stats=stats)
    except ValueError as exc:  # settings rejected at run time
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EngineError as exc:
        print(f"error: pipeline aborted: {exc}", file=sys.stderr)
        print(f"partial artifacts preserved under {out}", file=sys.stderr)
        return 4

    final = results[-1]
    artifacts = {f"phase_{r.phase}": str(out / f"phase_{r.phase}.pflt")
                 for r in results}
    final_latent = out / "final.pflt"
    write_latent(final_latent, final.latent)
    artifacts["final_latent"] = str(final_latent)
    if backend.decoder is not None:
        image = tiled_decode(final.latent, backend.decoder, DEFAULT_TILE)
        final_image = out / "final.png"
        write_png(final_image, image)
        artifacts["final_image"] = str(final_image)

    manifest = RunManifest(seed=config.seed, config=settings,
                           backend=backend.identity(),
                           engine_version=__version__,
                           phase_seconds={str(k): v
                                          for k, v in stats.phase_seconds.items()},
                           artifacts=artifacts)
    manifest.save(out / "manifest.json")

    for r in results:
        c, h, w = r.latent.shape
        print(f"phase {r.phase}: {r.wall_time:.3f} s  ({c}x{h}x{w} latent)")
    print(f"total: {sum(r.wall_time for r in results):.3f} s, "
          f"{stats.denoise_calls} denoiser calls, "
          f"peak {stats.max_inflight_patches} in-flight patches")
    print(f"final latent: {final_latent}")
    if "final_image" in artifacts:
        print(f"final image: {artifacts['final_image']}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "generate":
        code = cmd_generate(args)
    else:  # pragma: no cover - argparse enforces the command set
        parser.error(f"unknown command {args.command}")
        code = 2
    if argv is None:  # invoked as a console script
        sys.exit(code)
    return code


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
