"""Numerical substrate: latent grids, resampling, blurring, seeded RNG.

A latent is a ``float32`` numpy array of shape ``(channels, height, width)``.
All operations here are pure: they take explicit inputs (including the RNG
stream) and return new arrays, so values can be shared across threads
read-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A latent: float32 ndarray, shape (channels, height, width), row-major
# channel planes. Values are unbounded (latent units), but must stay finite.
Latent = np.ndarray

_CUBIC_A = -0.5  # Keys kernel parameter (Catmull-Rom style)

# Substream purposes for RngStream.child(). Fixed registry: derivation is
# keyed by (master seed, purpose, *indices), so adding a consumer never
# shifts draws of existing ones.
PURPOSE_PHASE1_INIT = 0
PURPOSE_TRAJECTORY = 1
PURPOSE_JITTER = 2
PURPOSE_ORACLE_TARGET = 3


def as_latent(data, channels: int | None = None, height: int | None = None,
              width: int | None = None) -> Latent:
    """Coerce ``data`` to a contiguous float32 latent, validating shape."""
    z = np.ascontiguousarray(data, dtype=np.float32)
    if z.ndim != 3:
        raise ValueError(f"latent must be 3-d (c, h, w), got ndim={z.ndim}")
    if channels is not None and z.shape != (channels, height, width):
        raise ValueError(f"latent shape {z.shape} != {(channels, height, width)}")
    return z


def validate_latent(z: Latent, name: str = "latent") -> Latent:
    """Check dtype, rank, and finiteness; returns ``z`` unchanged."""
    if not isinstance(z, np.ndarray) or z.ndim != 3:
        raise ValueError(f"{name} must be a 3-d ndarray (c, h, w)")
    if z.dtype != np.float32:
        raise ValueError(f"{name} must be float32, got {z.dtype}")
    if not np.isfinite(z).all():
        raise ValueError(f"{name} contains non-finite values")
    return z


class RngStream:
    """Deterministic random stream keyed by (seed, derivation path).

    Identical seed plus identical call sequence yields bit-identical
    outputs. ``child(*path)`` derives an independent substream without
    advancing this one, so unrelated consumers never perturb each other.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *path: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(path))

    def standard_normal(self, shape) -> np.ndarray:
        """I.i.d. N(0, 1) samples as float32; advances the stream."""
        return self._gen.standard_normal(shape, dtype=np.float32)

    def integers(self, low: int, high: int) -> int:
        """One uniform integer in [low, high); advances the stream."""
        return int(self._gen.integers(low, high))

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, path={self.path})"


def randn(shape: tuple[int, int, int], rng: RngStream) -> Latent:
    """Standard-normal latent of the given (c, h, w) shape."""
    c, h, w = (int(v) for v in shape)
    if c <= 0 or h <= 0 or w <= 0:
        raise ValueError(f"shape must be positive, got {(c, h, w)}")
    return rng.standard_normal((c, h, w))


@dataclass(frozen=True)
class GaussianKernel:
    """Normalized symmetric 1-d taps, applied separably in two passes."""

    size: int
    sigma: float
    weights: np.ndarray  # float64, sums to 1

    def __post_init__(self):
        if self.size <= 0 or self.size % 2 == 0:
            raise ValueError(f"kernel size must be odd positive, got {self.size}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def kernel_size_for_dilation(s: int) -> int:
    """Blur support wide enough for dilation factor ``s``: 4s - 3."""
    if s < 1:
        raise ValueError(f"dilation factor must be >= 1, got {s}")
    return 4 * s - 3


def gaussian_kernel(size: int, sigma: float) -> GaussianKernel:
    """Build normalized Gaussian taps of odd ``size`` and scale ``sigma``."""
    if size <= 0 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd positive, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    center = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - center
    w = np.exp(-0.5 * (x / sigma) ** 2)
    w /= w.sum()
    return GaussianKernel(size=size, sigma=float(sigma), weights=w)


def _keys_weight(d: np.ndarray) -> np.ndarray:
    """Keys cubic kernel value at (absolute) distance ``d``."""
    d = np.abs(d)
    a = _CUBIC_A
    near = (a + 2.0) * d ** 3 - (a + 3.0) * d ** 2 + 1.0
    far = a * d ** 3 - 5.0 * a * d ** 2 + 8.0 * a * d - 4.0 * a
    return np.where(d <= 1.0, near, np.where(d < 2.0, far, 0.0))


def _cubic_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-output tap indices (4, n_out) and weights for one axis.

    Half-pixel-center coordinate map; out-of-range taps are clamped to the
    edge sample (replicate).
    """
    out = np.arange(n_out, dtype=np.float64)
    src = (out + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    taps = np.stack([i0 - 1, i0, i0 + 1, i0 + 2])
    weights = _keys_weight(src[None, :] - taps)
    taps = np.clip(taps, 0, n_in - 1)
    return taps, weights


def upsample_bicubic(z: Latent, new_height: int, new_width: int) -> Latent:
    """Bicubic upscale of each channel plane independently.

    Standard Keys weights (a = -0.5), half-pixel centers, edge-replicate
    taps. Values are not clamped; latents are unbounded.
    """
    validate_latent(z)
    new_height, new_width = int(new_height), int(new_width)
    if new_height <= 0 or new_width <= 0:
        raise ValueError(f"target dims must be positive, got {new_height}x{new_width}")
    c, h, w = z.shape
    if new_height < h or new_width < w:
        raise ValueError(f"upsample target {new_height}x{new_width} smaller than source {h}x{w}")
    if (new_height, new_width) == (h, w):
        return z.copy()

    ridx, rw = _cubic_taps(h, new_height)
    cidx, cw = _cubic_taps(w, new_width)
    z64 = z.astype(np.float64)
    rows = np.zeros((c, new_height, w), dtype=np.float64)
    for m in range(4):
        rows += rw[m][None, :, None] * z64[:, ridx[m], :]
    out = np.zeros((c, new_height, new_width), dtype=np.float64)
    for m in range(4):
        out += cw[m][None, None, :] * rows[:, :, cidx[m]]
    result = out.astype(np.float32)
    if not np.isfinite(result).all():
        raise ValueError("upsample produced non-finite values")
    return result


def gaussian_filter(z: Latent, kernel: GaussianKernel) -> Latent:
    """Separable 2-d blur per channel with replicate padding at borders."""
    validate_latent(z)
    size = kernel.size
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    if size == 1:
        return z.copy()
    r = size // 2
    w = kernel.weights
    c, h, wd = z.shape

    padded = np.pad(z.astype(np.float64), ((0, 0), (r, r), (0, 0)), mode="edge")
    rows = np.zeros((c, h, wd), dtype=np.float64)
    for k in range(size):
        rows += w[k] * padded[:, k:k + h, :]
    padded = np.pad(rows, ((0, 0), (0, 0), (r, r)), mode="edge")
    out = np.zeros((c, h, wd), dtype=np.float64)
    for k in range(size):
        out += w[k] * padded[:, :, k:k + wd]
    return out.astype(np.float32)
