"""Synthetic moving-sphere dataset with analytic ground truth.

A normal-shaded sphere slides along x over the clip, rendered on a white
background from a ring of calibrated cameras. Everything is closed-form:
images, masks, and depth are exact ray-sphere intersections, so tests can
compare against the same math evaluated independently.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import AABB, CameraModel, look_at_camera

__all__ = [
    "sphere_center",
    "ring_cameras",
    "render_sphere_image",
    "sphere_mask",
    "make_moving_sphere_dataset",
    "SPHERE_RADIUS",
    "SCENE_BOUNDS",
]

SPHERE_RADIUS = 0.5
SCENE_BOUNDS = AABB(np.array([-1.2, -1.2, -1.2]), np.array([1.2, 1.2, 1.2]))


def sphere_center(t: float) -> np.ndarray:
    """Sphere center at normalized time t in [0, 1]: a linear slide along x."""
    return np.array([-0.3 + 0.6 * t, 0.0, 0.0])


def ring_cameras(
    n_views: int = 8,
    size: int = 64,
    radius: float = 4.0,
    fov_deg: float = 36.0,
    near: float = 3.0,
    far: float = 5.0,
) -> list:
    """Cameras on a ring around the origin, elevations alternating +-18 deg."""
    cams = []
    for v in range(n_views):
        az = 2 * np.pi * v / n_views
        el = np.deg2rad(18.0 if v % 2 == 0 else -18.0)
        eye = radius * np.array(
            [np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)]
        )
        cams.append(look_at_camera(eye, (0, 0, 0), size, size, fov_deg, near, far))
    return cams


def _pixel_rays(cam: CameraModel, subgrid: int) -> tuple[np.ndarray, np.ndarray]:
    """Ray origins/directions for a subgrid x subgrid supersampling of every pixel."""
    w, h = cam.width, cam.height
    step = 1.0 / subgrid
    offs = (np.arange(subgrid) + 0.5) * step
    xs = (np.arange(w)[:, None] + offs[None, :]).ravel()
    ys = (np.arange(h)[:, None] + offs[None, :]).ravel()
    gx, gy = np.meshgrid(xs, ys)  # (h*sub, w*sub)
    dirs = np.stack(
        [(gx - cam.cx) / cam.fx, (gy - cam.cy) / cam.fy, np.ones_like(gx)], axis=-1
    )
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    R = cam.R.double().numpy()
    dirs = dirs @ R  # R^T applied to row vectors
    origin = -(R.T @ cam.T.double().numpy())
    return origin, dirs


def _intersect_sphere(origin, dirs, center, radius):
    """Smallest positive ray parameter of the sphere hit, or inf."""
    oc = origin - center
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    hit = disc >= 0
    t = -b - np.sqrt(np.where(hit, disc, 0.0))
    t = np.where(hit & (t > 0), t, np.inf)
    return t


def render_sphere_image(
    cam: CameraModel, t_norm: float, radius: float = SPHERE_RADIUS, subgrid: int = 2
) -> np.ndarray:
    """Analytic render: normal-shaded sphere over white, box-filtered AA."""
    center = sphere_center(t_norm)
    origin, dirs = _pixel_rays(cam, subgrid)
    t = _intersect_sphere(origin, dirs, center, radius)
    hit = np.isfinite(t)
    p = origin + t[..., None] * dirs
    normal = (p - center) / radius
    rgb = np.where(hit[..., None], 0.5 + 0.5 * normal, 1.0)
    h, w = cam.height, cam.width
    rgb = rgb.reshape(h, subgrid, w, subgrid, 3).mean(axis=(1, 3))
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def sphere_mask(
    cam: CameraModel, center, radius: float, subgrid: int = 1
) -> np.ndarray:
    """Boolean silhouette of the sphere in a camera (pixel-center sampling)."""
    origin, dirs = _pixel_rays(cam, subgrid)
    t = _intersect_sphere(origin, dirs, np.asarray(center, dtype=np.float64), radius)
    hit = np.isfinite(t).reshape(cam.height, subgrid, cam.width, subgrid).any(axis=(1, 3))
    return hit


def _save_png(path: Path, arr: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.dtype == bool:
        img = Image.fromarray((arr * 255).astype(np.uint8), mode="L")
    elif arr.dtype in (np.float32, np.float64):
        img = Image.fromarray(np.round(arr * 255).astype(np.uint8))
    else:
        img = Image.fromarray(arr)
    img.save(path)


def make_moving_sphere_dataset(
    root: str | Path,
    n_frames: int = 4,
    n_views: int = 8,
    size: int = 64,
    with_masks: bool = True,
    with_importance: bool = False,
) -> Path:
    """Write the fixture dataset tree under ``root`` and return it."""
    root = Path(root)
    cams = ring_cameras(n_views=n_views, size=size)
    records = []
    for cam in cams:
        records.append(
            {
                "K": cam.K.reshape(-1).tolist(),
                "R": cam.R.reshape(-1).tolist(),
                "T": cam.T.reshape(-1).tolist(),
                "near": cam.near,
                "far": cam.far,
                "width": cam.width,
                "height": cam.height,
            }
        )
    root.mkdir(parents=True, exist_ok=True)
    (root / "cameras.json").write_text(json.dumps(records))

    for v, cam in enumerate(cams):
        for f in range(n_frames):
            t_norm = f / max(n_frames - 1, 1)
            img = render_sphere_image(cam, t_norm)
            _save_png(root / "images" / f"{v:02d}" / f"{f:06d}.png", img)
            if with_masks:
                mask = sphere_mask(cam, sphere_center(t_norm), SPHERE_RADIUS)
                _save_png(root / "masks" / f"{v:02d}" / f"{f:06d}.png", mask)
            if with_importance:
                mask = sphere_mask(cam, sphere_center(t_norm), SPHERE_RADIUS)
                weight = 0.2 + 0.8 * mask.astype(np.float32)
                _save_png(root / "importance" / f"{v:02d}" / f"{f:06d}.png", weight)
    return root
