"""Multi-view video ingestion: the [n_frame, n_view] image store with lazy
decode, calibrated cameras with optimizable pose residuals, foreground masks,
visual-hull scene bounds, and ray generation.

Directory layout::

    root/cameras.json                      per-view calibration records
    root/images/{view:02d}/{frame:06d}.png
    root/masks/{view:02d}/{frame:06d}.png  optional, grayscale, >127 = fg
    root/importance/{view:02d}/{frame:06d}.png  optional pixel-weight maps

Pixel centers sit at half-integer offsets: pixel (x, y) covers
[x, x+1) x [y, y+1) with center (x+0.5, y+0.5).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

__all__ = [
    "AABB",
    "CameraModel",
    "CameraResidual",
    "DatasetError",
    "DatasetMeta",
    "FrameStore",
    "RayBatch",
    "apply_camera_residual",
    "compute_visual_hull_bounds",
    "generate_rays",
    "get_image",
    "get_mask",
    "load_dataset",
    "look_at_camera",
]

IMAGE_EXTS = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


@dataclass
class AABB:
    """Axis-aligned bounding box in scene units."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)


@dataclass
class CameraModel:
    """Calibrated pinhole camera: world-to-camera extrinsics, pixel intrinsics.

    K is the 3x3 intrinsic matrix (fx, fy on the diagonal, principal point in
    the last column); R, T map world points into the camera frame
    (x_cam = R @ x_world + T). Camera looks along +z with y pointing down the
    image, matching the top-left pixel origin.
    """

    K: torch.Tensor
    R: torch.Tensor
    T: torch.Tensor
    near: float
    far: float
    width: int
    height: int
    validate: bool = True

    def __post_init__(self):
        self.K = torch.as_tensor(self.K, dtype=torch.float64).reshape(3, 3)
        self.R = torch.as_tensor(self.R).reshape(3, 3)
        self.T = torch.as_tensor(self.T).reshape(3)
        if self.R.dtype not in (torch.float32, torch.float64):
            self.R = self.R.double()
        if self.T.dtype not in (torch.float32, torch.float64):
            self.T = self.T.double()
        if self.validate:
            R = self.R.detach().double()
            err = (R @ R.T - torch.eye(3, dtype=torch.float64)).abs().max().item()
            if err > 1e-6:
                raise DatasetError(f"R not orthonormal (max deviation {err:.2e})")
            if abs(torch.linalg.det(R).item() - 1.0) > 1e-6:
                raise DatasetError("R must have determinant +1")
            if not (0 < self.near < self.far):
                raise DatasetError(f"need 0 < near < far, got {self.near}, {self.far}")
            if self.fx <= 0 or self.fy <= 0:
                raise DatasetError("focal lengths must be positive")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def center(self) -> torch.Tensor:
        """Camera center in world coordinates (-R^T T)."""
        return -(self.R.transpose(0, 1) @ self.T)


class CameraResidual(torch.nn.Module):
    """Learnable pose correction: axis-angle rotation plus translation.

    Zero-initialized, so a fresh residual leaves the camera bit-identical.
    """

    def __init__(self, n_cameras: int = 1, dtype=torch.float32):
        super().__init__()
        self.rot_axis_angle = torch.nn.Parameter(torch.zeros(n_cameras, 3, dtype=dtype))
        self.translation = torch.nn.Parameter(torch.zeros(n_cameras, 3, dtype=dtype))


def _skew(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros((), dtype=v.dtype, device=v.device)
    return torch.stack(
        [
            torch.stack([zero, -v[2], v[1]]),
            torch.stack([v[2], zero, -v[0]]),
            torch.stack([-v[1], v[0], zero]),
        ]
    )


def rotation_from_axis_angle(omega: torch.Tensor) -> torch.Tensor:
    """Rodrigues exponential map, differentiable and exact at omega = 0.

    Uses 1 - cos(t) = 2 sin^2(t/2) to avoid cancellation and a Taylor branch
    below t^2 = 1e-12 to avoid the 0/0 at the identity.
    """
    omega = omega.reshape(3)
    theta_sq = (omega * omega).sum()
    small = theta_sq < 1e-12
    theta = torch.sqrt(theta_sq.clamp(min=1e-30))
    sin_half = torch.sin(theta / 2)
    a = torch.where(small, 1 - theta_sq / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24, 2 * sin_half * sin_half / theta_sq.clamp(min=1e-30))
    K = _skew(omega)
    eye = torch.eye(3, dtype=omega.dtype, device=omega.device)
    return eye + a * K + b * (K @ K)


def apply_camera_residual(
    cam: CameraModel, rot_axis_angle: torch.Tensor, translation: torch.Tensor
) -> CameraModel:
    """R' = exp([w]x) R, T' = T + t; intrinsics unchanged.

    Differentiable with respect to both residual tensors. The returned camera
    skips orthonormality validation: the exponential map is orthonormal by
    construction up to float rounding.
    """
    rot_axis_angle = torch.as_tensor(rot_axis_angle)
    translation = torch.as_tensor(translation)
    dR = rotation_from_axis_angle(rot_axis_angle)
    R = dR @ cam.R.to(dR.dtype)
    T = cam.T.to(translation.dtype) + translation.reshape(3)
    return CameraModel(
        cam.K, R, T, cam.near, cam.far, cam.width, cam.height, validate=False
    )


def look_at_camera(
    eye,
    target,
    width: int,
    height: int,
    fov_deg: float,
    near: float,
    far: float,
    up=(0.0, 1.0, 0.0),
) -> CameraModel:
    """Build a pinhole camera at ``eye`` looking at ``target`` (y-up world)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise DatasetError("look_at: eye and target coincide")
    fwd = fwd / norm
    right = np.cross(fwd, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise DatasetError("look_at: view direction parallel to up vector")
    right = right / rnorm
    down = np.cross(fwd, right)  # camera y points down the image
    R = np.stack([right, down, fwd])
    T = -R @ eye
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    K = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1]], dtype=np.float64)
    return CameraModel(K, torch.from_numpy(R), torch.from_numpy(T), near, far, width, height)


# ---------------------------------------------------------------------------
# frame store


@dataclass
class FrameStore:
    """Compressed image blobs addressable by (frame, view), decoded lazily."""

    blobs: dict               # (frame, view) -> bytes
    mask_blobs: dict          # (frame, view) -> bytes, may be empty
    importance_blobs: dict    # (frame, view) -> bytes, may be empty
    entry_meta: dict          # (frame, view) -> (width, height, channels, encoding)
    n_frame: int
    n_view: int

    def entries(self):
        for f in range(self.n_frame):
            for v in range(self.n_view):
                yield f, v

    def has_masks(self) -> bool:
        return bool(self.mask_blobs)


@dataclass
class DatasetMeta:
    n_frame: int
    n_view: int
    width: int
    height: int
    time_step: float
    times: list
    root: str


def _peek_image(blob: bytes):
    img = Image.open(io.BytesIO(blob))
    channels = len(img.getbands())
    return img.size[0], img.size[1], channels, (img.format or "").lower()


def _find_entry(dirpath: Path, frame: int):
    for ext in IMAGE_EXTS:
        p = dirpath / f"{frame:06d}{ext}"
        if p.is_file():
            return p
    return None


def load_dataset(root: str | Path):
    """Load cameras and the full (frame, view) image grid without decoding.

    Returns (FrameStore, list[CameraModel], DatasetMeta). A single-frame or
    single-view dataset loads the same way; there is no special casing.
    """
    root = Path(root)
    cam_path = root / "cameras.json"
    if not cam_path.is_file():
        raise DatasetError(f"missing {cam_path}")
    records = json.loads(cam_path.read_text())
    if not records:
        raise DatasetError("cameras.json lists no views")
    cameras = []
    for i, rec in enumerate(records):
        for key in ("K", "R", "T", "near", "far", "width", "height"):
            if key not in rec:
                raise DatasetError(f"camera entry for view {i} missing field {key!r}")
        cameras.append(
            CameraModel(
                np.array(rec["K"], dtype=np.float64),
                torch.tensor(rec["R"], dtype=torch.float64).reshape(3, 3),
                torch.tensor(rec["T"], dtype=torch.float64),
                float(rec["near"]),
                float(rec["far"]),
                int(rec["width"]),
                int(rec["height"]),
            )
        )
    n_view = len(cameras)

    view0 = root / "images" / "00"
    if not view0.is_dir():
        raise DatasetError(f"missing image directory {view0}")
    n_frame = 0
    while _find_entry(view0, n_frame) is not None:
        n_frame += 1
    if n_frame == 0:
        raise DatasetError(f"no frames found under {view0}")

    blobs, mask_blobs, importance_blobs, entry_meta = {}, {}, {}, {}
    view_sizes: dict[int, tuple] = {}
    for v in range(n_view):
        vd = root / "images" / f"{v:02d}"
        for f in range(n_frame):
            p = _find_entry(vd, f)
            if p is None:
                raise DatasetError(f"grid hole: frame {f} of view {v} missing under {vd}")
            blob = p.read_bytes()
            w, h, c, enc = _peek_image(blob)
            if v in view_sizes and view_sizes[v] != (w, h):
                raise DatasetError(
                    f"inconsistent image size in view {v}: frame {f} is {w}x{h}, "
                    f"expected {view_sizes[v][0]}x{view_sizes[v][1]}"
                )
            view_sizes[v] = (w, h)
            blobs[(f, v)] = blob
            entry_meta[(f, v)] = (w, h, c, enc)
            mp = _find_entry(root / "masks" / f"{v:02d}", f)
            if mp is not None:
                mask_blobs[(f, v)] = mp.read_bytes()
            ip = _find_entry(root / "importance" / f"{v:02d}", f)
            if ip is not None:
                importance_blobs[(f, v)] = ip.read_bytes()

    store = FrameStore(blobs, mask_blobs, importance_blobs, entry_meta, n_frame, n_view)
    w, h = view_sizes[0]
    times = [f / max(n_frame - 1, 1) for f in range(n_frame)]
    meta = DatasetMeta(
        n_frame=n_frame,
        n_view=n_view,
        width=w,
        height=h,
        time_step=1.0 / max(n_frame - 1, 1),
        times=times,
        root=str(root),
    )
    return store, cameras, meta


def _decode(blob: bytes, frame: int, view: int, mode: str) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(blob))
        img = img.convert(mode)
        return np.asarray(img)
    except Exception as exc:
        raise DatasetError(f"failed to decode frame {frame} of view {view}: {exc}") from exc


def get_image(store: FrameStore, frame: int, view: int) -> np.ndarray:
    """Decode one entry to float32 RGB in [0, 1], row-major, origin top-left."""
    if (frame, view) not in store.blobs:
        raise DatasetError(f"no entry for frame {frame}, view {view}")
    arr = _decode(store.blobs[(frame, view)], frame, view, "RGB")
    return arr.astype(np.float32) / 255.0


def get_mask(store: FrameStore, frame: int, view: int) -> Optional[np.ndarray]:
    """Decode the foreground mask (>127 = foreground), or None if absent."""
    blob = store.mask_blobs.get((frame, view))
    if blob is None:
        return None
    return _decode(blob, frame, view, "L") > 127


def get_importance(store: FrameStore, frame: int, view: int) -> Optional[np.ndarray]:
    """Decode the pixel-importance weight map to float32 in [0, 1], or None."""
    blob = store.importance_blobs.get((frame, view))
    if blob is None:
        return None
    return _decode(blob, frame, view, "L").astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# visual hull


def compute_visual_hull_bounds(
    masks: list,
    cameras: list,
    grid_res: int,
    init_bounds: AABB,
    min_views: int,
) -> AABB:
    """Carve a voxel grid against per-view silhouettes; return the survivor AABB.

    A voxel center survives if it projects inside the foreground mask in at
    least ``min_views`` views; projections that miss the image entirely count
    as unseen. The survivor box is inflated by one voxel per side and clamped
    to ``init_bounds``.
    """
    if grid_res < 8:
        raise DatasetError("grid_res must be >= 8")
    if not any(m is not None for m in masks):
        raise DatasetError("need at least one camera with a mask")
    lo, hi = init_bounds.lo, init_bounds.hi
    voxel = (hi - lo) / grid_res
    axes = [lo[i] + (np.arange(grid_res) + 0.5) * voxel[i] for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    counts = np.zeros(len(centers), dtype=np.int32)
    for cam, mask in zip(cameras, masks):
        if mask is None:
            continue
        R = cam.R.detach().double().numpy()
        T = cam.T.detach().double().numpy()
        p = centers @ R.T + T
        z = p[:, 2]
        valid = z > 1e-9
        u = np.where(valid, cam.fx * p[:, 0] / np.where(valid, z, 1.0) + cam.cx, -1.0)
        v = np.where(valid, cam.fy * p[:, 1] / np.where(valid, z, 1.0) + cam.cy, -1.0)
        px = np.floor(u).astype(np.int64)
        py = np.floor(v).astype(np.int64)
        inside = valid & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        fg = np.zeros(len(centers), dtype=bool)
        fg[inside] = mask[py[inside], px[inside]]
        counts += fg

    survivors = centers[counts >= min_views]
    if len(survivors) == 0:
        raise DatasetError(
            f"empty visual hull: no voxel seen as foreground in >= {min_views} views; "
            "consider loosening min_views"
        )
    box_lo = np.maximum(survivors.min(axis=0) - voxel, lo)
    box_hi = np.minimum(survivors.max(axis=0) + voxel, hi)
    return AABB(box_lo, box_hi)


# ---------------------------------------------------------------------------
# ray generation


@dataclass
class RayBatch:
    """Rays with pixel provenance and normalized time (struct-of-arrays)."""

    origins: torch.Tensor     # (N, 3)
    dirs: torch.Tensor        # (N, 3), unit norm
    t_near: torch.Tensor      # (N,)
    t_far: torch.Tensor       # (N,)
    pixels: torch.Tensor      # (N, 2) integer pixel coordinates (x, y)
    times: torch.Tensor       # (N,) normalized time in [0, 1]
    view_idx: torch.Tensor    # (N,) long
    frame_idx: torch.Tensor   # (N,) long
    depth_est: Optional[torch.Tensor] = None  # (N,) external depth estimates

    def __len__(self):
        return self.origins.shape[0]

    def slice(self, sel) -> "RayBatch":
        return RayBatch(
            self.origins[sel],
            self.dirs[sel],
            self.t_near[sel],
            self.t_far[sel],
            self.pixels[sel],
            self.times[sel],
            self.view_idx[sel],
            self.frame_idx[sel],
            None if self.depth_est is None else self.depth_est[sel],
        )

    @staticmethod
    def cat(batches: list) -> "RayBatch":
        fields = {}
        for name in ("origins", "dirs", "t_near", "t_far", "pixels", "times", "view_idx", "frame_idx"):
            fields[name] = torch.cat([getattr(b, name) for b in batches])
        depth = None
        if all(b.depth_est is not None for b in batches):
            depth = torch.cat([b.depth_est for b in batches])
        return RayBatch(**fields, depth_est=depth)


def generate_rays(
    cam: CameraModel,
    pixels,
    time: float = 0.0,
    view_idx: int = 0,
    frame_idx: int = 0,
    dtype: torch.dtype = torch.float32,
) -> RayBatch:
    """Rays through the given pixel centers of a camera.

    Direction for pixel (x, y) is R^-1 normalize(((x+0.5-cx)/fx,
    (y+0.5-cy)/fy, 1)); the origin is the camera center. Differentiable with
    respect to the camera's R and T (for pose-residual optimization).
    """
    pixels = torch.as_tensor(np.asarray(pixels)).reshape(-1, 2)
    n = pixels.shape[0]
    work = cam.R.dtype if cam.R.requires_grad else torch.float64
    px = pixels[:, 0].to(work)
    py = pixels[:, 1].to(work)
    dirs_cam = torch.stack(
        [
            (px + 0.5 - cam.cx) / cam.fx,
            (py + 0.5 - cam.cy) / cam.fy,
            torch.ones_like(px),
        ],
        dim=-1,
    )
    dirs_cam = dirs_cam / dirs_cam.norm(dim=-1, keepdim=True)
    R = cam.R.to(work)
    T = cam.T.to(work)
    dirs = dirs_cam @ R  # rows of R are camera axes, so this is R^T applied per ray
    origin = -(R.transpose(0, 1) @ T)
    return RayBatch(
        origins=origin.to(dtype).expand(n, 3).clone(),
        dirs=dirs.to(dtype),
        t_near=torch.full((n,), float(cam.near), dtype=dtype),
        t_far=torch.full((n,), float(cam.far), dtype=dtype),
        pixels=pixels.long(),
        times=torch.full((n,), float(time), dtype=dtype),
        view_idx=torch.full((n,), view_idx, dtype=torch.long),
        frame_idx=torch.full((n,), frame_idx, dtype=torch.long),
    )


def all_pixels(width: int, height: int) -> np.ndarray:
    """Row-major (x, y) coordinates of every pixel in an image."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)
