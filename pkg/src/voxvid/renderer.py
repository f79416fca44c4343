"""Volume rendering: per-ray quadrature compositing and full-image assembly.

The Pipeline ties a sampler, a radiance field (embedder + regressor, with an
optional deformation warp), and compositing together. Ray chunks are
independent pure computations, so images are identical for any chunk size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .dataset import AABB, CameraModel, RayBatch, all_pixels, generate_rays
from .sampler import ImportanceSampler, JitterKey, make_sample_batch, merge_sorted

__all__ = ["RenderOutput", "ImageOutput", "NeuralField", "Pipeline", "composite"]

DEPTH_EPS = 1e-10


@dataclass
class RenderOutput:
    rgb: torch.Tensor      # (N, 3)
    depth: torch.Tensor    # (N,)
    acc: torch.Tensor      # (N,)
    weights: torch.Tensor  # (N, S)
    z: torch.Tensor        # (N, S) sample depths used


@dataclass
class ImageOutput:
    rgb: np.ndarray    # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W)
    acc: np.ndarray    # (H, W)


def composite(
    sigma: torch.Tensor,
    rgb: torch.Tensor,
    deltas: torch.Tensor,
    z: torch.Tensor,
    background: Optional[torch.Tensor] = None,
) -> RenderOutput:
    """Front-to-back alpha compositing of per-sample density and color.

    alpha_i = 1 - exp(-sigma_i * delta_i); w_i = alpha_i * prod_{j<i}(1 - alpha_j).
    Color composites over ``background`` (black when omitted); depth is the
    weight-normalized expectation of z.
    """
    if not (sigma.shape == deltas.shape == z.shape and rgb.shape[:-1] == sigma.shape):
        raise ValueError(
            f"composite length mismatch: sigma {tuple(sigma.shape)}, rgb {tuple(rgb.shape)}, "
            f"deltas {tuple(deltas.shape)}, z {tuple(z.shape)}"
        )
    alpha = 1.0 - torch.exp(-sigma * deltas)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha], dim=-1), dim=-1
    )[..., :-1]
    weights = trans * alpha
    acc = weights.sum(dim=-1)
    out_rgb = (weights[..., None] * rgb).sum(dim=-2)
    if background is not None:
        bg = torch.as_tensor(background, dtype=out_rgb.dtype, device=out_rgb.device)
        out_rgb = out_rgb + (1.0 - acc)[..., None] * bg
    depth = (weights * z).sum(dim=-1) / acc.clamp(min=DEPTH_EPS)
    return RenderOutput(rgb=out_rgb, depth=depth, acc=acc, weights=weights, z=z)


class NeuralField(nn.Module):
    """Embeds normalized spacetime points and regresses density and color.

    Spatial coordinates normalize into the unit cube by the scene bounds;
    the optional deformation warps them to canonical space before embedding
    while time still reaches time-dependent embedders.
    """

    def __init__(self, embedder, regressor, bounds: AABB, deformation=None):
        super().__init__()
        self.embedder = embedder
        self.regressor = regressor
        self.deformation = deformation
        lo = torch.tensor(bounds.lo, dtype=torch.float32)
        size = torch.tensor(bounds.hi - bounds.lo, dtype=torch.float32)
        self.register_buffer("bounds_lo", lo, persistent=False)
        self.register_buffer("bounds_size", size.clamp(min=1e-12), persistent=False)
        self.bounds = bounds

    def normalize(self, points: torch.Tensor) -> torch.Tensor:
        lo = self.bounds_lo.to(points.dtype)
        size = self.bounds_size.to(points.dtype)
        return (points - lo) / size

    def forward(self, points: torch.Tensor, dirs: torch.Tensor, times: torch.Tensor):
        xyz = self.normalize(points)
        aux = {}
        if self.deformation is not None:
            aux["xyz_pre"] = xyz
            aux["times"] = times
            xyz, dx = self.deformation(xyz, times)
            aux["dx"] = dx
        feats = self.embedder(xyz, times)
        sigma, rgb = self.regressor(feats, dirs, times)
        return sigma, rgb, aux


class Pipeline(nn.Module):
    """sampler -> (deform) -> embed -> regress -> composite."""

    def __init__(
        self,
        sampler,
        field,
        background=None,
        fine_sampler: Optional[ImportanceSampler] = None,
    ):
        super().__init__()
        self.sampler = sampler
        self.field = field if isinstance(field, nn.Module) else _CallableField(field)
        self.fine_sampler = fine_sampler
        if background is None:
            self.background = None
        else:
            self.register_buffer(
                "_bg", torch.as_tensor(background, dtype=torch.float32), persistent=False
            )
            self.background = self._bg

    def query(self, rays: RayBatch, z: torch.Tensor):
        """Evaluate the field at per-ray depths and composite."""
        batch = make_sample_batch(rays, z)
        n, s = z.shape
        points = batch.points.reshape(n * s, 3)
        dirs = rays.dirs[:, None, :].expand(n, s, 3).reshape(n * s, 3)
        times = batch.times.reshape(n * s)
        sigma, rgb, aux = self.field(points, dirs, times)
        bg = None if self.background is None else self.background.to(rgb.dtype)
        out = composite(
            sigma.reshape(n, s), rgb.reshape(n, s, 3), batch.deltas, z, bg
        )
        return out, aux

    def render_rays(
        self,
        rays: RayBatch,
        mode: str = "single",
        jitter: Optional[JitterKey] = None,
        return_aux: bool = False,
    ):
        """Render a ray batch; hierarchical mode adds an importance-sampled
        fine pass over the coarse weights and returns (fine, coarse)."""
        if mode not in ("single", "hierarchical"):
            raise ValueError(f"mode must be 'single' or 'hierarchical', got {mode!r}")
        z = self.sampler(rays, jitter)
        out, aux = self.query(rays, z)
        if mode == "single":
            return (out, aux) if return_aux else out
        if self.fine_sampler is None:
            raise ValueError("hierarchical mode needs a fine_sampler")
        interval_w = out.weights[..., :-1].detach()
        fine_jitter = None if jitter is None else jitter.with_salt(jitter.salt + 0x5A17)
        z_fine = self.fine_sampler(z.detach(), interval_w, fine_jitter)
        z_all = merge_sorted(z.detach(), z_fine)
        fine_out, fine_aux = self.query(rays, z_all)
        if return_aux:
            return (fine_out, out), fine_aux
        return fine_out, out

    def render_image(
        self,
        camera: CameraModel,
        time: float = 0.0,
        chunk: int = 8192,
        mode: str = "single",
        frame_idx: int = 0,
        view_idx: int = 0,
    ) -> ImageOutput:
        """Deterministically render a full frame in ray chunks of <= chunk."""
        if chunk < 1:
            raise ValueError("chunk must be >= 1")
        pix = all_pixels(camera.width, camera.height)
        rgbs, depths, accs = [], [], []
        with torch.no_grad():
            for start in range(0, len(pix), chunk):
                rays = generate_rays(
                    camera, pix[start : start + chunk], time, view_idx, frame_idx
                )
                out = self.render_rays(rays, mode=mode)
                if mode == "hierarchical":
                    out = out[0]
                rgbs.append(out.rgb)
                depths.append(out.depth)
                accs.append(out.acc)
        h, w = camera.height, camera.width
        return ImageOutput(
            rgb=torch.cat(rgbs).reshape(h, w, 3).clamp(0, 1).numpy().astype(np.float32),
            depth=torch.cat(depths).reshape(h, w).numpy().astype(np.float32),
            acc=torch.cat(accs).reshape(h, w).numpy().astype(np.float32),
        )


class _CallableField(nn.Module):
    """Wraps a plain callable field (analytic test fields) as a module."""

    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, points, dirs, times):
        result = self.fn(points, dirs, times)
        if len(result) == 2:
            sigma, rgb = result
            return sigma, rgb, {}
        return result
