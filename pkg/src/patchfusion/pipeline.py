"""Progressive patch-fusion orchestrator.

Phase 1 samples at the backend's native resolution. Every later phase s
runs an upsample-diffuse-denoise loop: the previous result is bicubically
upscaled, re-noised along a stored stochastic trajectory, and then denoised
step by step while being pulled toward that trajectory (skip residual) and
fused from two families of denoising paths — overlapping local crops and
interleaved dilated global views — each weighted by a scaled cosine decay.
"""

from __future__ import annotations

import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import storage
from .backend import DEFAULT_TILE, DenoiseRequest, DenoiserHandle, tiled_decode
from .errors import CoverageError, EngineError, PipelineError
from .patching import (DilatedAccumulator, LocalAccumulator, jitter_crops,
                       make_dilation_set, plan_crops)
from .schedule import (DecayParams, GuidanceSpec, NoiseSchedule, build_schedule,
                       cfg_combine, cosine_decay, ddim_step, diffuse_trajectory,
                       sigma_at)
from .tensor import (PURPOSE_JITTER, PURPOSE_PHASE1_INIT, PURPOSE_TRAJECTORY,
                     Latent, RngStream, gaussian_filter, gaussian_kernel,
                     kernel_size_for_dilation, randn, upsample_bicubic,
                     validate_latent)


@dataclass(frozen=True)
class PhasePlan:
    """Per-phase latent dims: phase s runs at (s*base_h, s*base_w) with
    dilation factor s. Phase 1 is the backend's native resolution."""

    S: int
    base_h: int
    base_w: int
    phases: tuple[tuple[int, int, int], ...]  # (s, H_s, W_s)


def make_phase_plan(S: int, base_h: int, base_w: int) -> PhasePlan:
    if S < 1:
        raise ValueError(f"phase count must be >= 1, got {S}")
    if base_h <= 0 or base_w <= 0:
        raise ValueError("base dims must be positive")
    phases = tuple((s, s * base_h, s * base_w) for s in range(1, S + 1))
    return PhasePlan(S=S, base_h=base_h, base_w=base_w, phases=phases)


def plan_phases(K: int, base_h: int, base_w: int) -> PhasePlan:
    """Phase plan for an area magnification factor K (side factor sqrt(K))."""
    if K < 1:
        raise ValueError(f"factor must be >= 1, got {K}")
    S = math.isqrt(K)
    if S * S != K:
        raise ValueError(f"factor {K} is not a perfect square; pass the side "
                         "factor directly as a phase count instead")
    return make_phase_plan(S, base_h, base_w)


@dataclass(frozen=True)
class PipelineConfig:
    """Run parameters. Defaults: 50-step schedule over 1000 training steps,
    guidance 7.5, stride = half patch, jitter bound = patch/16, decay
    exponents 3/1/1 with sigma 1 -> 0.01."""

    seed: int = 0
    phases: int = 1                     # S, the side-length factor
    steps: int = 50
    t_train: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    decay: DecayParams = field(default_factory=DecayParams)
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    stride_h: int | None = None         # None -> native_h // 2
    stride_w: int | None = None
    jitter: bool = True
    jitter_max_h: int | None = None     # None -> patch_h // 16
    jitter_max_w: int | None = None
    jitter_per_step: bool = True        # False freezes draws for the phase
    batch_size: int = 16
    inflight: int = 1
    skip_residual: bool = True
    dilated: bool = True
    progressive: bool = True
    start_t: int | None = None          # phases >= 2 denoise from here down
    keep_trajectories: bool = False

    def __post_init__(self):
        if self.phases < 1:
            raise ValueError("phases must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.inflight < 1:
            raise ValueError("inflight must be >= 1")

    def build_schedule(self) -> NoiseSchedule:
        return build_schedule(self.t_train, self.beta_start, self.beta_end,
                              self.steps)


@dataclass
class PhaseResult:
    phase: int
    latent: Latent
    timesteps: tuple[int, ...]
    trajectory: dict[int, Latent] | None
    wall_time: float
    preview_path: str | None = None


class RunStats:
    """Instrumentation: denoiser traffic and peak in-flight patch count
    (full-canvas latents excluded)."""

    def __init__(self):
        self.denoise_calls = 0
        self.path_steps = 0
        self.max_inflight_patches = 0
        self.phase_seconds: dict[int, float] = {}
        self._inflight = 0

    def _acquire(self, n: int) -> None:
        self._inflight += n
        self.max_inflight_patches = max(self.max_inflight_patches, self._inflight)

    def _release(self, n: int) -> None:
        self._inflight -= n


def skip_residual_blend(z_denoise: Latent, z_diffused: Latent, t: int, T: int,
                        alpha1: float) -> Latent:
    """Convex blend toward the stored diffused latent, weight c1 decaying
    from 1 (t = T) to 0 (t = 0)."""
    if z_denoise.shape != z_diffused.shape:
        raise ValueError(f"shape mismatch {z_denoise.shape} != {z_diffused.shape}")
    c1 = cosine_decay(t, T, alpha1)
    if c1 == 0.0:
        return z_denoise.copy()
    if c1 == 1.0:
        return z_diffused.copy()
    return c1 * z_diffused + (1.0 - c1) * z_denoise


def fuse_global_local(z_global: Latent, z_local: Latent, t: int, T: int,
                      alpha2: float) -> Latent:
    """Convex blend of the two reconstructions, global weight c2 decaying
    from 1 (t = T) to 0 (t = 0)."""
    if z_global.shape != z_local.shape:
        raise ValueError(f"shape mismatch {z_global.shape} != {z_local.shape}")
    c2 = cosine_decay(t, T, alpha2)
    if c2 == 0.0:
        return z_local.copy()
    if c2 == 1.0:
        return z_global.copy()
    return c2 * z_global + (1.0 - c2) * z_local


class _BatchRunner:
    """Feeds native-size denoising paths through the backend in mini-batches.

    Patches are materialized per batch and scattered immediately after their
    DDIM step, so at most batch_size patches (times the in-flight window)
    exist at once. Results are consumed in submission order, so the output
    is independent of backend completion order.
    """

    def __init__(self, handle: DenoiserHandle, schedule: NoiseSchedule,
                 guidance: GuidanceSpec, batch_size: int, inflight: int,
                 stats: RunStats, phase: int):
        self.handle = handle
        self.schedule = schedule
        self.guidance = guidance
        # never exceed what the backend advertises it can serve
        if handle.max_batch is not None:
            batch_size = min(batch_size, handle.max_batch)
        self.batch_size = batch_size
        self.inflight = inflight
        self.stats = stats
        self.phase = phase
        self._req_counter = 0

    def _next_id(self) -> str:
        self._req_counter += 1
        return f"p{self.phase}-{self._req_counter:06d}"

    def _build(self, indices: list[int], get_patch, extras_for, t: int):
        patches = [get_patch(i) for i in indices]
        self.stats._acquire(len(patches))
        return DenoiseRequest(batch=patches, t=t,
                              conditionings=[self.guidance.unconditional_id,
                                             self.guidance.conditioning_id],
                              extras=extras_for(indices),
                              request_id=self._next_id())

    def _consume(self, indices, req, eps, t, t_prev, sink, batch_index):
        if len(eps) != 2 * len(indices):
            raise PipelineError(
                f"backend returned {len(eps)} rows for {len(indices)} patches",
                phase=self.phase, timestep=t, batch_index=batch_index)
        for li, i in enumerate(indices):
            e = cfg_combine(eps[2 * li], eps[2 * li + 1], self.guidance.scale)
            sink(i, ddim_step(req.batch[li], e, t, t_prev, self.schedule))
        self.stats._release(len(indices))

    def run(self, count: int, get_patch, extras_for, t: int, t_prev: int,
            sink) -> None:
        self.stats.path_steps += count
        batches = [list(range(b, min(b + self.batch_size, count)))
                   for b in range(0, count, self.batch_size)]
        if self.inflight <= 1:
            for bi, indices in enumerate(batches):
                req = self._build(indices, get_patch, extras_for, t)
                eps = self._call(req, t, bi)
                self._consume(indices, req, eps, t, t_prev, sink, bi)
            return
        with ThreadPoolExecutor(max_workers=self.inflight) as pool:
            pending: deque = deque()
            for bi, indices in enumerate(batches):
                req = self._build(indices, get_patch, extras_for, t)
                pending.append((bi, indices, req,
                                pool.submit(self.handle.denoise_batch, req)))
                if len(pending) >= self.inflight:
                    self._drain_one(pending, t, t_prev, sink)
            while pending:
                self._drain_one(pending, t, t_prev, sink)

    def _call(self, req: DenoiseRequest, t: int, batch_index: int):
        try:
            eps = self.handle.denoise_batch(req)
            self.stats.denoise_calls += 1
            return eps
        except Exception as exc:
            raise PipelineError(
                f"denoiser failed at phase {self.phase}, t={t}, "
                f"batch {batch_index}: {exc}",
                phase=self.phase, timestep=t, batch_index=batch_index) from exc

    def _drain_one(self, pending: deque, t, t_prev, sink) -> None:
        bi, indices, req, fut = pending.popleft()
        try:
            eps = fut.result()
            self.stats.denoise_calls += 1
        except Exception as exc:
            raise PipelineError(
                f"denoiser failed at phase {self.phase}, t={t}, batch {bi}: {exc}",
                phase=self.phase, timestep=t, batch_index=bi) from exc
        self._consume(indices, req, eps, t, t_prev, sink, bi)


def _ensure_finite(z: Latent, phase: int, t: int) -> None:
    if not np.isfinite(z).all():
        raise PipelineError(f"non-finite latent at phase {phase}, t={t}",
                            phase=phase, timestep=t)


def _denoise_timesteps(schedule: NoiseSchedule, start_t: int | None) -> list[int]:
    seq = list(schedule.timestep_sequence)
    if start_t is None:
        return seq
    seq = [t for t in seq if t <= start_t]
    if not seq:
        raise ValueError(f"start_t={start_t} leaves no denoising steps")
    return seq


def run_phase1(config: PipelineConfig, backend: DenoiserHandle, rng: RngStream,
               stats: RunStats | None = None) -> PhaseResult:
    """Base generation: pure-noise init, 50 guided DDIM steps, one path."""
    stats = stats or RunStats()
    schedule = config.build_schedule()
    shape = (backend.channels, backend.native_h, backend.native_w)
    started = time.perf_counter()
    z = randn(shape, rng.child(PURPOSE_PHASE1_INIT))
    runner = _BatchRunner(backend, schedule, config.guidance,
                          config.batch_size, config.inflight, stats, phase=1)
    seq = list(schedule.timestep_sequence)
    state = {"z": z}
    for k, t in enumerate(seq):
        t_prev = seq[k + 1] if k + 1 < len(seq) else 0

        def sink(_i, stepped, state=state):
            state["z"] = stepped

        runner.run(1, lambda _i, state=state: state["z"],
                   lambda _idx: {"path": "full", "phase": 1}, t, t_prev, sink)
        _ensure_finite(state["z"], 1, t)
    elapsed = time.perf_counter() - started
    stats.phase_seconds[1] = elapsed
    return PhaseResult(phase=1, latent=state["z"],
                       timesteps=tuple(seq), trajectory=None, wall_time=elapsed)


def run_phase(s: int, prev: PhaseResult, config: PipelineConfig,
              backend: DenoiserHandle, rng: RngStream,
              stats: RunStats | None = None) -> PhaseResult:
    """One upsample-diffuse-denoise phase at scale factor s (s >= 2)."""
    if s < 2:
        raise ValueError(f"phase scale must be >= 2, got {s}")
    stats = stats or RunStats()
    schedule = config.build_schedule()
    T = schedule.T_train
    c = backend.channels
    nh, nw = backend.native_h, backend.native_w
    H, W = s * nh, s * nw
    want_prev = (c, prev.phase * nh, prev.phase * nw)
    if prev.latent.shape != want_prev:
        raise ValueError(f"previous phase latent shape {prev.latent.shape} != "
                         f"{want_prev}")
    validate_latent(prev.latent, "previous phase latent")

    started = time.perf_counter()
    z0_up = upsample_bicubic(prev.latent, H, W)
    trajectory = dict(diffuse_trajectory(z0_up, schedule,
                                         rng.child(PURPOSE_TRAJECTORY, s)))
    seq = _denoise_timesteps(schedule, config.start_t)
    current = trajectory[seq[0]].copy()

    d_h = config.stride_h if config.stride_h is not None else max(1, nh // 2)
    d_w = config.stride_w if config.stride_w is not None else max(1, nw // 2)
    plan = plan_crops(H, W, nh, nw, d_h, d_w,
                      jitter_max_h=config.jitter_max_h,
                      jitter_max_w=config.jitter_max_w)
    dil = make_dilation_set(s)
    runner = _BatchRunner(backend, schedule, config.guidance,
                          config.batch_size, config.inflight, stats, phase=s)

    for k, t in enumerate(seq):
        t_prev = seq[k + 1] if k + 1 < len(seq) else 0
        if config.skip_residual:
            zhat = skip_residual_blend(current, trajectory[t], t, T,
                                       config.decay.alpha1)
        else:
            zhat = current

        if config.jitter:
            jitter_step = k if config.jitter_per_step else 0
            crops = jitter_crops(plan, rng.child(PURPOSE_JITTER, s, jitter_step))
        else:
            crops = plan
        local_acc = LocalAccumulator(c, H, W)

        def get_local(i, zhat=zhat, crops=crops):
            top, left = crops.crops[i]
            return zhat[:, top:top + nh, left:left + nw].copy()

        def local_extras(indices, crops=crops):
            return {"path": "local", "phase": s,
                    "tops": [crops.crops[i][0] for i in indices],
                    "lefts": [crops.crops[i][1] for i in indices]}

        def local_sink(i, stepped, acc=local_acc, crops=crops):
            top, left = crops.crops[i]
            acc.add(stepped, top, left)

        runner.run(len(crops), get_local, local_extras, t, t_prev, local_sink)
        z_local = local_acc.finalize()

        if config.dilated:
            sigma = sigma_at(t, T, config.decay)
            kernel = gaussian_kernel(kernel_size_for_dilation(s), sigma)
            blurred = gaussian_filter(zhat, kernel)
            global_acc = DilatedAccumulator(c, H, W, dil)

            def get_global(m, blurred=blurred):
                i, j = dil.offsets[m]
                return blurred[:, i::s, j::s].copy()

            def global_extras(indices):
                return {"path": "global", "phase": s, "dilation": s,
                        "offsets": [list(dil.offsets[m]) for m in indices]}

            def global_sink(m, stepped, acc=global_acc):
                acc.add(stepped, dil.offsets[m])

            runner.run(len(dil.offsets), get_global, global_extras, t, t_prev,
                       global_sink)
            z_global = global_acc.finalize()
            current = fuse_global_local(z_global, z_local, t, T,
                                        config.decay.alpha2)
        else:
            current = z_local
        _ensure_finite(current, s, t)

    elapsed = time.perf_counter() - started
    stats.phase_seconds[s] = elapsed
    return PhaseResult(phase=s, latent=current, timesteps=tuple(seq),
                       trajectory=trajectory if config.keep_trajectories else None,
                       wall_time=elapsed)


def _phase_scales(config: PipelineConfig) -> list[int]:
    S = config.phases
    if config.progressive or S == 1:
        return list(range(1, S + 1))
    return [1, S]


def _emit_preview(result: PhaseResult, backend: DenoiserHandle,
                  out_dir: str | Path | None) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    latent_path = out / f"phase_{result.phase}.pflt"
    storage.write_latent(latent_path, result.latent)
    result.preview_path = str(latent_path)
    if backend.decoder is not None:
        image = tiled_decode(result.latent, backend.decoder, DEFAULT_TILE)
        storage.write_png(out / f"phase_{result.phase}.png", image)


def _run_upscale_phases(first: PhaseResult, config: PipelineConfig,
                        backend: DenoiserHandle, rng: RngStream,
                        out_dir, stats: RunStats) -> list[PhaseResult]:
    results = [first]
    _emit_preview(first, backend, out_dir)
    for s in _phase_scales(config)[1:]:
        try:
            result = run_phase(s, results[-1], config, backend, rng, stats)
        except PipelineError as exc:
            exc.partial_results = results
            raise
        except CoverageError:
            raise  # a broken crop plan; surfaced as-is
        results.append(result)
        _emit_preview(result, backend, out_dir)
    return results


def run_pipeline(prompt_conditioning: str, config: PipelineConfig,
                 backend: DenoiserHandle, rng: RngStream,
                 out_dir: str | Path | None = None,
                 stats: RunStats | None = None) -> list[PhaseResult]:
    """Full generation: phase 1, then every upscale phase, emitting one
    preview artifact per phase (latent file, plus PNG when the backend has
    a decoder)."""
    stats = stats or RunStats()
    config = replace(config, guidance=replace(config.guidance,
                                              conditioning_id=prompt_conditioning))
    try:
        first = run_phase1(config, backend, rng, stats)
    except PipelineError as exc:
        exc.partial_results = []
        raise
    return _run_upscale_phases(first, config, backend, rng, out_dir, stats)


def init_from_latent(z_init: Latent, config: PipelineConfig,
                     backend: DenoiserHandle, rng: RngStream,
                     prompt_conditioning: str | None = None,
                     out_dir: str | Path | None = None,
                     stats: RunStats | None = None) -> list[PhaseResult]:
    """Skip phase-1 sampling: use an encoded latent as the phase-1 output.

    Later phases draw from the same substreams as a normal run, so phase-2
    trajectories are identical for identical z_init values and seed.
    """
    stats = stats or RunStats()
    if prompt_conditioning is not None:
        config = replace(config, guidance=replace(
            config.guidance, conditioning_id=prompt_conditioning))
    validate_latent(z_init, "z_init")
    want = (backend.channels, backend.native_h, backend.native_w)
    if z_init.shape != want:
        raise ValueError(f"init latent shape {z_init.shape} != phase-1 shape {want}")
    schedule = config.build_schedule()
    first = PhaseResult(phase=1, latent=z_init.copy(),
                        timesteps=tuple(schedule.timestep_sequence),
                        trajectory=None, wall_time=0.0)
    stats.phase_seconds[1] = 0.0
    return _run_upscale_phases(first, config, backend, rng, out_dir, stats)
