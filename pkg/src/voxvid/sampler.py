"""Ray-to-sample conversion: uniform, disparity, importance, and depth-guided
samplers plus quadrature intervals.

Stratified jitter is driven by a counter-based RNG keyed on
(seed, pixel.x, pixel.y, frame), so sample placement is independent of batch
composition, chunking, and thread count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .dataset import RayBatch

__all__ = [
    "SampleBatch",
    "SamplerError",
    "JitterKey",
    "jitter_for",
    "sample_uniform",
    "sample_disparity",
    "sample_importance",
    "sample_depth_guided",
    "merge_sorted",
    "compute_deltas",
    "make_sample_batch",
]


class SamplerError(ValueError):
    pass


@dataclass
class SampleBatch:
    """Per-ray depth samples and their 4D points and quadrature intervals."""

    z: torch.Tensor        # (N, S) ascending depths
    points: torch.Tensor   # (N, S, 3) origin + z * direction
    times: torch.Tensor    # (N, S)
    deltas: torch.Tensor   # (N, S)


@dataclass
class JitterKey:
    """Deterministic per-ray stratification key."""

    seed: int
    pixels: np.ndarray  # (N, 2) int
    frames: np.ndarray  # (N,) int
    salt: int = 0

    def with_salt(self, salt: int) -> "JitterKey":
        return JitterKey(self.seed, self.pixels, self.frames, salt)


def jitter_for(rays: RayBatch, seed: int, salt: int = 0) -> JitterKey:
    return JitterKey(
        seed,
        rays.pixels.detach().cpu().numpy(),
        rays.frame_idx.detach().cpu().numpy(),
        salt,
    )


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # wraparound mod 2^64 is the point
        x = (np.asarray(x, dtype=np.uint64) + _GOLDEN).astype(np.uint64)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def ray_uniforms(key: JitterKey, n: int, dtype=torch.float32) -> torch.Tensor:
    """(N, n) uniforms in [0, 1), a pure function of the key and sample index."""
    px = key.pixels[:, 0].astype(np.uint64)
    py = key.pixels[:, 1].astype(np.uint64)
    fr = key.frames.astype(np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix64(np.uint64(key.seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(key.salt) * _GOLDEN)
        h = _splitmix64(h ^ px)
        h = _splitmix64(h ^ py)
        h = _splitmix64(h ^ fr)  # (N,)
        idx = np.arange(n, dtype=np.uint64)
        vals = _splitmix64(h[:, None] ^ (idx[None, :] + np.uint64(1)) * _GOLDEN)
    u = (vals >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return torch.from_numpy(u).to(dtype)


def _expand(value, rays: RayBatch) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(rays.origins.dtype)
    return torch.full((len(rays),), float(value), dtype=rays.origins.dtype)


def sample_uniform(rays: RayBatch, n: int, jitter: Optional[JitterKey] = None) -> torch.Tensor:
    """Evenly spaced depths in [t_near, t_far]; stratified when jittered."""
    if n < 2:
        raise SamplerError(f"need n >= 2 samples, got {n}")
    dtype = rays.origins.dtype
    near, far = rays.t_near[:, None], rays.t_far[:, None]
    if jitter is None:
        frac = torch.linspace(0, 1, n, dtype=dtype)[None, :]
    else:
        u = ray_uniforms(jitter, n, dtype)
        frac = (torch.arange(n, dtype=dtype)[None, :] + u) / n
    return near + frac * (far - near)


def sample_disparity(rays: RayBatch, n: int, jitter: Optional[JitterKey] = None) -> torch.Tensor:
    """Depths linear in inverse depth (disparity); needs t_near > 0."""
    if n < 2:
        raise SamplerError(f"need n >= 2 samples, got {n}")
    if (rays.t_near <= 0).any():
        raise SamplerError("disparity sampling requires t_near > 0")
    dtype = rays.origins.dtype
    d_near = 1.0 / rays.t_near[:, None]
    d_far = 1.0 / rays.t_far[:, None]
    if jitter is None:
        frac = torch.linspace(0, 1, n, dtype=dtype)[None, :]
    else:
        u = ray_uniforms(jitter, n, dtype)
        frac = (torch.arange(n, dtype=dtype)[None, :] + u) / n
    disp = d_near + frac * (d_far - d_near)  # decreasing, so z ascends
    return 1.0 / disp


def sample_importance(
    z_coarse: torch.Tensor,
    weights: torch.Tensor,
    n: int,
    jitter: Optional[JitterKey] = None,
    blur: bool = True,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Resample depths from the inverse CDF of per-interval weights.

    Weights are optionally blurred with a [0.25, 0.5, 0.25] kernel
    (edge-replicated) and floored at ``eps`` before normalization to a
    piecewise-constant PDF over the coarse intervals. Quantiles are midpoints
    of a uniform grid, or stratified per ray when jittered.
    """
    if weights.shape[-1] != z_coarse.shape[-1] - 1:
        raise SamplerError(
            f"need len(weights) == len(z_coarse) - 1, got {weights.shape[-1]} vs {z_coarse.shape[-1]}"
        )
    if (weights < 0).any():
        raise SamplerError("importance weights must be nonnegative")
    dtype = z_coarse.dtype
    w = weights
    if blur:
        padded = torch.cat([w[..., :1], w, w[..., -1:]], dim=-1)
        w = 0.25 * padded[..., :-2] + 0.5 * padded[..., 1:-1] + 0.25 * padded[..., 2:]
    w = w.clamp(min=eps)
    total = w.sum(dim=-1, keepdim=True)
    if (total <= 0).any():
        raise SamplerError("degenerate PDF: all-zero weights with the eps floor disabled")
    pdf = w / total
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, dim=-1)], dim=-1)

    n_rays = z_coarse.shape[0]
    if jitter is None:
        u = ((torch.arange(n, dtype=dtype) + 0.5) / n).expand(n_rays, n)
    else:
        u = (torch.arange(n, dtype=dtype)[None, :] + ray_uniforms(jitter, n, dtype)) / n
    u = u.contiguous()

    idx = torch.searchsorted(cdf.contiguous(), u, right=True).clamp(1, cdf.shape[-1] - 1)
    below = idx - 1
    cdf_lo = torch.gather(cdf, -1, below)
    cdf_hi = torch.gather(cdf, -1, idx)
    z_lo = torch.gather(z_coarse, -1, below)
    z_hi = torch.gather(z_coarse, -1, idx)
    denom = (cdf_hi - cdf_lo).clamp(min=1e-12)
    frac = (u - cdf_lo) / denom
    return z_lo + frac * (z_hi - z_lo)


def sample_depth_guided(
    rays: RayBatch,
    depth,
    radius: float,
    n: int,
    jitter: Optional[JitterKey] = None,
) -> torch.Tensor:
    """Samples concentrated in a window around an external depth estimate."""
    if n < 2:
        raise SamplerError(f"need n >= 2 samples, got {n}")
    if radius <= 0:
        raise SamplerError("radius must be positive")
    depth = _expand(depth, rays)
    if ((depth < rays.t_near) | (depth > rays.t_far)).any():
        raise SamplerError("depth estimate outside [t_near, t_far]")
    lo = torch.maximum(rays.t_near, depth - radius)[:, None]
    hi = torch.minimum(rays.t_far, depth + radius)[:, None]
    if (hi < lo).any():
        raise SamplerError("clamped sampling window is empty")
    dtype = rays.origins.dtype
    if jitter is None:
        frac = torch.linspace(0, 1, n, dtype=dtype)[None, :]
    else:
        u = ray_uniforms(jitter, n, dtype)
        frac = (torch.arange(n, dtype=dtype)[None, :] + u) / n
    return lo + frac * (hi - lo)


def merge_sorted(z_a: torch.Tensor, z_b: torch.Tensor) -> torch.Tensor:
    """Ascending union of two per-ray sample sets; duplicates retained."""
    if z_b.numel() == 0:
        return z_a
    if z_a.numel() == 0:
        return z_b
    merged, _ = torch.sort(torch.cat([z_a, z_b], dim=-1), dim=-1)
    return merged


def compute_deltas(z: torch.Tensor, t_far) -> torch.Tensor:
    """Quadrature interval lengths; the trailing one runs to t_far, clamped >= 0."""
    if isinstance(t_far, torch.Tensor):
        trailing = (t_far.reshape(-1, 1) - z[..., -1:]).clamp(min=0)
    else:
        trailing = (t_far - z[..., -1:]).clamp(min=0)
    return torch.cat([z[..., 1:] - z[..., :-1], trailing], dim=-1)


def make_sample_batch(rays: RayBatch, z: torch.Tensor) -> SampleBatch:
    """Attach world points, times, and deltas to per-ray depths."""
    points = rays.origins[:, None, :] + z[..., None] * rays.dirs[:, None, :]
    times = rays.times[:, None].expand_as(z)
    deltas = compute_deltas(z, rays.t_far)
    return SampleBatch(z=z, points=points, times=times, deltas=deltas)


# ---------------------------------------------------------------------------
# configured sampler components (registry entries under kind "sampler")


class UniformSampler:
    def __init__(self, n_samples: int = 64):
        self.n_samples = n_samples

    def __call__(self, rays: RayBatch, jitter: Optional[JitterKey] = None) -> torch.Tensor:
        return sample_uniform(rays, self.n_samples, jitter)


class DisparitySampler:
    def __init__(self, n_samples: int = 64):
        self.n_samples = n_samples

    def __call__(self, rays: RayBatch, jitter: Optional[JitterKey] = None) -> torch.Tensor:
        return sample_disparity(rays, self.n_samples, jitter)


class DepthGuidedSampler:
    """Samples around per-ray depth estimates carried by the ray batch."""

    def __init__(self, n_samples: int = 64, radius: float = 0.5):
        self.n_samples = n_samples
        self.radius = radius

    def __call__(self, rays: RayBatch, jitter: Optional[JitterKey] = None) -> torch.Tensor:
        if rays.depth_est is None:
            raise SamplerError(
                "depth_guided sampler needs externally supplied depth estimates on the ray batch"
            )
        return sample_depth_guided(rays, rays.depth_est, self.radius, self.n_samples, jitter)


class ImportanceSampler:
    """Coarse-to-fine resampler; only usable as the fine stage of a
    hierarchical render, never as the base sampler."""

    def __init__(self, n_samples: int = 64, blur: bool = True, eps: float = 1e-5):
        self.n_samples = n_samples
        self.blur = blur
        self.eps = eps

    def __call__(
        self,
        z_coarse: torch.Tensor,
        weights: torch.Tensor,
        jitter: Optional[JitterKey] = None,
    ) -> torch.Tensor:
        return sample_importance(z_coarse, weights, self.n_samples, jitter, self.blur, self.eps)
