"""Sampling geometries and their inverses.

Local: an overlapping crop grid with optional per-step jitter, reconstructed
by averaging overlaps. Global: strided dilated subsampling producing s^2
interleaved views that partition the latent, reconstructed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CoverageError
from .tensor import Latent, RngStream, validate_latent


@dataclass(frozen=True)
class CropSet:
    """An ordered crop grid over a canvas_h x canvas_w latent."""

    canvas_h: int
    canvas_w: int
    patch_h: int
    patch_w: int
    stride_h: int
    stride_w: int
    crops: tuple[tuple[int, int], ...]  # (top, left), row-major
    jitter_max_h: int
    jitter_max_w: int

    def __post_init__(self):
        for top, left in self.crops:
            if not (0 <= top <= self.canvas_h - self.patch_h
                    and 0 <= left <= self.canvas_w - self.patch_w):
                raise ValueError(f"crop ({top}, {left}) outside canvas "
                                 f"{self.canvas_h}x{self.canvas_w} for patch "
                                 f"{self.patch_h}x{self.patch_w}")

    def __len__(self) -> int:
        return len(self.crops)


@dataclass(frozen=True)
class DilationSet:
    """The s^2 shift offsets of a dilation-factor-s subsampling."""

    dilation: int
    offsets: tuple[tuple[int, int], ...]  # (i, j), row-major

    def __len__(self) -> int:
        return len(self.offsets)


def make_dilation_set(s: int) -> DilationSet:
    if s < 1:
        raise ValueError(f"dilation factor must be >= 1, got {s}")
    offsets = tuple((i, j) for i in range(s) for j in range(s))
    return DilationSet(dilation=s, offsets=offsets)


def _axis_positions(total: int, size: int, stride: int) -> list[int]:
    # 0, stride, 2*stride, ... with the final position clamped to total-size
    # so coverage holds even when the stride does not divide evenly.
    last = total - size
    positions = []
    k = 0
    while k * stride < last:
        positions.append(k * stride)
        k += 1
    positions.append(last)
    return positions


def plan_crops(H: int, W: int, h: int, w: int, d_h: int, d_w: int,
               jitter_max_h: int | None = None,
               jitter_max_w: int | None = None) -> CropSet:
    """Row-major grid of crop positions with strides (d_h, d_w).

    Jitter bounds default to floor(h/16) and floor(w/16).
    """
    if h > H or w > W:
        raise ValueError(f"patch {h}x{w} larger than canvas {H}x{W}")
    if h <= 0 or w <= 0 or d_h <= 0 or d_w <= 0:
        raise ValueError("patch dims and strides must be positive")
    tops = _axis_positions(H, h, d_h)
    lefts = _axis_positions(W, w, d_w)
    crops = tuple((t, l) for t in tops for l in lefts)
    return CropSet(canvas_h=H, canvas_w=W, patch_h=h, patch_w=w,
                   stride_h=d_h, stride_w=d_w, crops=crops,
                   jitter_max_h=h // 16 if jitter_max_h is None else jitter_max_h,
                   jitter_max_w=w // 16 if jitter_max_w is None else jitter_max_w)


def jitter_crops(crops: CropSet, rng: RngStream) -> CropSet:
    """Perturb each position by independent uniform integer offsets.

    Two draws per crop (vertical then horizontal) in crop order, each in
    [-jitter_max, +jitter_max]; results are clamped to the canvas. Crops
    sitting on a canvas edge only draw toward that edge (where the clamp
    pins them), so the jittered set still covers border cells — free jitter
    there could move every covering crop inward at once and open a hole.
    """
    jh, jw = crops.jitter_max_h, crops.jitter_max_w
    if jh < 0 or jw < 0:
        raise ValueError("jitter bounds must be nonnegative")
    max_top = crops.canvas_h - crops.patch_h
    max_left = crops.canvas_w - crops.patch_w

    def draw(pos: int, max_pos: int, j: int) -> int:
        lo = 0 if pos == max_pos else -j
        hi = 0 if pos == 0 else j
        offset = rng.integers(lo, hi + 1)
        return min(max(pos + offset, 0), max_pos)

    jittered = [(draw(top, max_top, jh), draw(left, max_left, jw))
                for top, left in crops.crops]
    return replace(crops, crops=tuple(jittered))


def extract_crops(z: Latent, crops: CropSet) -> list[Latent]:
    """Copy out each crop window, in crop order."""
    validate_latent(z)
    _, H, W = z.shape
    if (H, W) != (crops.canvas_h, crops.canvas_w):
        raise ValueError(f"latent {H}x{W} does not match crop canvas "
                         f"{crops.canvas_h}x{crops.canvas_w}")
    h, w = crops.patch_h, crops.patch_w
    out = []
    for top, left in crops.crops:
        if top + h > H or left + w > W:
            raise ValueError(f"crop ({top}, {left}) out of bounds")
        out.append(z[:, top:top + h, left:left + w].copy())
    return out


class LocalAccumulator:
    """Scatter-add canvas for overlap-averaged reconstruction.

    Patches must be added in canonical crop order; sums are held in float64
    and rounded to float32 once at the end, so the result is deterministic.
    """

    def __init__(self, channels: int, H: int, W: int):
        self._sum = np.zeros((channels, H, W), dtype=np.float64)
        self._count = np.zeros((H, W), dtype=np.float64)

    def add(self, patch: Latent, top: int, left: int) -> None:
        _, h, w = patch.shape
        self._sum[:, top:top + h, left:left + w] += patch
        self._count[top:top + h, left:left + w] += 1.0

    def finalize(self) -> Latent:
        if (self._count == 0).any():
            holes = int((self._count == 0).sum())
            raise CoverageError(f"{holes} latent cells not covered by any crop")
        return (self._sum / self._count[None, :, :]).astype(np.float32)


def reconstruct_local(patches: list[Latent], crops: CropSet,
                      H: int, W: int) -> Latent:
    """Average overlapping patches back into an H x W canvas."""
    if len(patches) != len(crops.crops):
        raise ValueError(f"{len(patches)} patches for {len(crops.crops)} crops")
    if not patches:
        raise ValueError("no patches to reconstruct")
    c = patches[0].shape[0]
    acc = LocalAccumulator(c, H, W)
    for patch, (top, left) in zip(patches, crops.crops):
        if patch.shape != (c, crops.patch_h, crops.patch_w):
            raise ValueError(f"patch shape {patch.shape} != "
                             f"{(c, crops.patch_h, crops.patch_w)}")
        acc.add(patch, top, left)
    return acc.finalize()


def dilated_sample(z: Latent, dil: DilationSet) -> list[Latent]:
    """The s^2 interleaved subsamples z[c, i::s, j::s], row-major offsets."""
    validate_latent(z)
    s = dil.dilation
    _, H, W = z.shape
    if H % s != 0 or W % s != 0:
        raise ValueError(f"latent dims {H}x{W} not divisible by dilation {s}")
    return [z[:, i::s, j::s].copy() for i, j in dil.offsets]


class DilatedAccumulator:
    """Exact inverse scatter for dilated samples; every cell written once."""

    def __init__(self, channels: int, H: int, W: int, dil: DilationSet):
        s = dil.dilation
        if H % s != 0 or W % s != 0:
            raise ValueError(f"dims {H}x{W} not divisible by dilation {s}")
        self._out = np.zeros((channels, H, W), dtype=np.float32)
        self._dil = dil
        self._seen: set[tuple[int, int]] = set()

    def add(self, sample: Latent, offset: tuple[int, int]) -> None:
        i, j = offset
        s = self._dil.dilation
        c, H, W = self._out.shape
        if sample.shape != (c, H // s, W // s):
            raise ValueError(f"sample shape {sample.shape} != {(c, H // s, W // s)}")
        if offset in self._seen:
            raise ValueError(f"offset {offset} written twice")
        self._out[:, i::s, j::s] = sample
        self._seen.add(offset)

    def finalize(self) -> Latent:
        if len(self._seen) != len(self._dil.offsets):
            raise ValueError(f"only {len(self._seen)} of {len(self._dil.offsets)} "
                             "offsets written")
        return self._out


def dilated_reconstruct(samples: list[Latent], dil: DilationSet,
                        H: int, W: int) -> Latent:
    """Interleave the s^2 samples back into an H x W latent, exactly."""
    if len(samples) != len(dil.offsets):
        raise ValueError(f"{len(samples)} samples for {len(dil.offsets)} offsets")
    c = samples[0].shape[0]
    acc = DilatedAccumulator(c, H, W, dil)
    for sample, offset in zip(samples, dil.offsets):
        acc.add(sample, offset)
    return acc.finalize()
