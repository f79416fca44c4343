"""Spacetime feature embedders.

Every embedder maps (xyz, t) with xyz normalized to the unit cube and t
normalized to [0, 1] into a feature vector; embedders are composable by
concatenation. Grid-based embedders share one interpolation convention: a
grid of resolution N has N vertices per axis at coordinates k / (N - 1), and
queries are clamped into the grid.

The hash grid has two numerically identical forward paths: a fused kernel
for inputs that carry no gradient (the common case: sample positions), and a
pure-torch path that stays differentiable with respect to the query points
(deformation and pose optimization need it).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a normal dependency
    _HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap

__all__ = [
    "positional_encode",
    "Embedder",
    "PositionalEncoding",
    "HashGrid",
    "KPlanes",
    "LatentCodes",
    "Composed",
]

HASH_PRIMES = (1, 2654435761, 805459861)


def positional_encode(p: torch.Tensor, n_freqs: int, include_input: bool = False) -> torch.Tensor:
    """Octave sin/cos features: per dim, [sin(2^k pi p), cos(2^k pi p)] for k < n_freqs."""
    p = torch.as_tensor(p)
    squeeze = p.dim() == 0
    if squeeze:
        p = p.reshape(1)
    freqs = (2.0 ** torch.arange(n_freqs, dtype=p.dtype, device=p.device)) * math.pi
    angles = p[..., None] * freqs  # (..., d, L)
    enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., d, L, 2)
    enc = enc.reshape(*p.shape[:-1], p.shape[-1] * n_freqs * 2)
    if include_input:
        enc = torch.cat([p, enc], dim=-1)
    return enc.reshape(-1) if squeeze else enc


class Embedder(nn.Module):
    """Base class: forward(xyz, t) -> (N, out_dim) features."""

    out_dim: int

    def forward(self, xyz: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class PositionalEncoding(Embedder):
    def __init__(self, n_freqs: int = 6, include_input: bool = True, include_time: bool = False):
        super().__init__()
        self.n_freqs = n_freqs
        self.include_input = include_input
        self.include_time = include_time
        d = 4 if include_time else 3
        self.out_dim = d * (2 * n_freqs + int(include_input))

    def forward(self, xyz, t):
        p = torch.cat([xyz, t[:, None].to(xyz.dtype)], dim=-1) if self.include_time else xyz
        return positional_encode(p, self.n_freqs, self.include_input)


def _grid_coords(x: torch.Tensor, res: torch.Tensor):
    """Clamped cell corner index and interpolation weight for each coordinate.

    ``x`` holds coordinates already scaled by (res - 1); the lower corner is
    clamped to res - 2 so the upper corner stays a valid vertex.
    """
    hi = (res - 2).clamp(min=0).to(x.dtype)
    x0f = x.detach().floor().clamp(min=torch.zeros((), dtype=x.dtype)).minimum(hi)
    w = x - x0f
    x0 = x0f.to(torch.int32)
    x1 = torch.minimum(x0 + 1, (res - 1).to(torch.int32))
    return x0, x1, w


@njit(cache=True)
def _hash_corners_kernel(p, res, dense, mask, table_size, idx_out, cw_out):
    """Corner table rows (with level offsets) and trilinear weights, one pass.

    Mirrors the torch path op for op: clamp to [0,1], scale by res-1, floor
    with the res-2 clamp, per-axis uint32 hash products xor-combined (or
    row-major dense indexing), weights as products of per-axis lerp factors.
    """
    n_levels = res.shape[0]
    n = p.shape[0]
    for lvl in range(n_levels):
        r = res[lvl]
        rf = np.float32(r - 1)
        hi = r - 2 if r >= 2 else 0
        offset = lvl * table_size
        for i in range(n):
            x0 = np.empty(3, dtype=np.int32)
            x1 = np.empty(3, dtype=np.int32)
            w = np.empty(3, dtype=p.dtype)
            for d in range(3):
                c = p[i, d]
                if c < 0.0:
                    c = 0.0
                elif c > 1.0:
                    c = 1.0
                x = c * rf
                f = np.floor(x)
                if f < 0.0:
                    f = 0.0
                elif f > hi:
                    f = np.float64(hi)
                w[d] = x - f
                x0[d] = np.int32(f)
                x1[d] = x0[d] + 1 if x0[d] + 1 < r else r - 1
            k = 0
            for a in range(2):
                vx = x1[0] if a else x0[0]
                wx = w[0] if a else 1.0 - w[0]
                for b in range(2):
                    vy = x1[1] if b else x0[1]
                    wy = w[1] if b else 1.0 - w[1]
                    for cbit in range(2):
                        vz = x1[2] if cbit else x0[2]
                        wz = w[2] if cbit else 1.0 - w[2]
                        if dense[lvl]:
                            row = (vx * r + vy) * r + vz
                        else:
                            h = (
                                np.uint32(vx) * np.uint32(1)
                                ^ np.uint32(vy) * np.uint32(2654435761)
                                ^ np.uint32(vz) * np.uint32(805459861)
                            )
                            row = np.int32(h & np.uint32(mask))
                        idx_out[lvl, i, k] = row + offset
                        cw_out[lvl, i, k] = wx * wy * wz
                        k += 1


class HashGrid(Embedder):
    """Multi-resolution hash encoding with trilinear interpolation.

    Level resolutions are floor(base_res * growth^level). Levels whose dense
    vertex count fits the table index directly (collision-free); larger levels
    hash corner coordinates with the fixed per-axis primes, uint32 wraparound,
    modulo the table size.
    """

    def __init__(
        self,
        n_levels: int = 8,
        base_res: int = 16,
        growth: float = 1.5,
        log2_table: int = 16,
        n_features: int = 2,
        init_scale: float = 1e-4,
    ):
        super().__init__()
        self.n_levels = n_levels
        self.log2_table = log2_table
        self.n_features = n_features
        res = [int(math.floor(base_res * growth**lvl)) for lvl in range(n_levels)]
        if min(res) < 1:
            raise ValueError("level resolution must be >= 1")
        table_size = 1 << log2_table
        self.register_buffer("res", torch.tensor(res, dtype=torch.int32).view(-1, 1, 1), persistent=False)
        self.register_buffer(
            "dense",
            torch.tensor([r**3 <= table_size for r in res]).view(-1, 1, 1, 1, 1),
            persistent=False,
        )
        self.register_buffer(
            "level_offset",
            (torch.arange(n_levels, dtype=torch.int32) * table_size).view(-1, 1, 1, 1, 1),
            persistent=False,
        )
        self.tables = nn.Parameter(
            torch.empty(n_levels * table_size, n_features).uniform_(-init_scale, init_scale)
        )
        self.out_dim = n_levels * n_features

    def forward(self, xyz, t=None):
        needs_point_grad = torch.is_grad_enabled() and xyz.requires_grad
        if _HAS_NUMBA and not needs_point_grad:
            return self._forward_fused(xyz)
        return self._forward_torch(xyz)

    def _combine(self, idx: torch.Tensor, cw: torch.Tensor, n: int) -> torch.Tensor:
        """Gather corner rows and blend: (L,N,8) indices/weights -> (N, L*F)."""
        L, F = self.n_levels, self.n_features
        feats = torch.index_select(self.tables, 0, idx.reshape(-1)).view(L, n, 8, F)
        out = (cw.to(self.tables.dtype).unsqueeze(-2) @ feats).squeeze(-2)  # (L,N,F)
        return out.permute(1, 0, 2).reshape(n, self.out_dim)

    def _forward_fused(self, xyz):
        n = xyz.shape[0]
        L = self.n_levels
        p = xyz.detach().contiguous().numpy()
        idx = np.empty((L, n, 8), dtype=np.int32)
        cw = np.empty((L, n, 8), dtype=p.dtype)
        _hash_corners_kernel(
            p,
            self.res.reshape(-1).numpy(),
            self.dense.reshape(-1).numpy(),
            np.uint32((1 << self.log2_table) - 1),
            1 << self.log2_table,
            idx,
            cw,
        )
        return self._combine(torch.from_numpy(idx), torch.from_numpy(cw), n)

    def _forward_torch(self, xyz):
        n = xyz.shape[0]
        L = self.n_levels
        mask = (1 << self.log2_table) - 1
        res = self.res  # (L,1,1)
        x = xyz.clamp(0.0, 1.0)[None] * (res - 1).to(xyz.dtype)  # (L,N,3)
        x0, x1, w = _grid_coords(x, res)

        # hashed index: per-dim terms xor-combined over the 2x2x2 corner grid
        def dim_pair(lo, hi, prime):
            return torch.stack([lo * prime, hi * prime], dim=-1)  # (L,N,2)

        hx = dim_pair(x0[..., 0], x1[..., 0], HASH_PRIMES[0])
        hy = dim_pair(x0[..., 1], x1[..., 1], HASH_PRIMES[1])
        hz = dim_pair(x0[..., 2], x1[..., 2], HASH_PRIMES[2])
        hashed = (hx[..., :, None, None] ^ hy[..., None, :, None] ^ hz[..., None, None, :]) & mask

        # dense index: row-major (x, y, z) within the level grid
        r = res.view(L, 1, 1)
        dx = torch.stack([x0[..., 0], x1[..., 0]], -1) * r * r
        dy = torch.stack([x0[..., 1], x1[..., 1]], -1) * r
        dz = torch.stack([x0[..., 2], x1[..., 2]], -1)
        densei = dx[..., :, None, None] + dy[..., None, :, None] + dz[..., None, None, :]

        idx = (torch.where(self.dense, densei, hashed) + self.level_offset).reshape(L, n, 8)

        wx = torch.stack([1 - w[..., 0], w[..., 0]], -1)
        wy = torch.stack([1 - w[..., 1], w[..., 1]], -1)
        wz = torch.stack([1 - w[..., 2], w[..., 2]], -1)
        cw = (wx[..., :, None, None] * wy[..., None, :, None] * wz[..., None, None, :]).reshape(L, n, 8)
        feats = torch.index_select(self.tables, 0, idx.reshape(-1)).view(L, n, 8, self.n_features)
        out = (cw.unsqueeze(-2) @ feats).squeeze(-2)  # (L,N,F)
        return out.permute(1, 0, 2).reshape(n, self.out_dim)


def _bilerp(plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Bilinear interpolation of a (R1, R2, F) grid at unit-square coords."""
    r1 = torch.tensor(plane.shape[0], dtype=torch.int32)
    r2 = torch.tensor(plane.shape[1], dtype=torch.int32)
    x = u.clamp(0, 1) * (plane.shape[0] - 1)
    y = v.clamp(0, 1) * (plane.shape[1] - 1)
    x0, x1, wx = _grid_coords(x, r1)
    y0, y1, wy = _grid_coords(y, r2)
    flat = plane.reshape(-1, plane.shape[-1])
    stride = plane.shape[1]

    def fetch(a, b):
        return nn.functional.embedding(a * stride + b, flat)

    wx = wx[:, None]
    wy = wy[:, None]
    return (
        fetch(x0, y0) * (1 - wx) * (1 - wy)
        + fetch(x0, y1) * (1 - wx) * wy
        + fetch(x1, y0) * wx * (1 - wy)
        + fetch(x1, y1) * wx * wy
    )


class KPlanes(Embedder):
    """Six-plane factorization of the 4D field at multiple scales.

    Space planes (xy, xz, yz) init near one with small noise; time planes
    (xt, yt, zt) init to exactly one, so the field starts time-static. Plane
    features combine by elementwise product (or concatenation).
    """

    PLANES = ("xy", "xz", "yz", "xt", "yt", "zt")
    _COORDS = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2), "xt": (0, 3), "yt": (1, 3), "zt": (2, 3)}

    def __init__(
        self,
        space_res: Sequence[int] = (32, 64),
        n_features: int = 8,
        n_frames: int = 1,
        time_res: int | None = None,
        combine: str = "product",
        init_noise: float = 0.01,
    ):
        super().__init__()
        if combine not in ("product", "concat"):
            raise ValueError(f"combine must be 'product' or 'concat', got {combine!r}")
        self.combine = combine
        self.n_features = n_features
        self.scales = list(space_res)
        rt = time_res if time_res is not None else max(int(n_frames), 4)
        self.time_res = rt
        self.planes = nn.ParameterDict()
        for s, rs in enumerate(self.scales):
            for name in self.PLANES:
                shape = (rs, rt, n_features) if "t" in name else (rs, rs, n_features)
                init = torch.ones(shape)
                if "t" not in name:
                    init = init + torch.empty(shape).uniform_(-init_noise, init_noise)
                self.planes[f"scale{s}_{name}"] = nn.Parameter(init)
        per_scale = n_features if combine == "product" else 6 * n_features
        self.out_dim = len(self.scales) * per_scale

    def plane_factors(self, xyz, t, scale: int) -> dict:
        """Per-plane interpolated features at one scale, for factor inspection."""
        coords = torch.cat([xyz.clamp(0, 1), t[:, None].to(xyz.dtype).clamp(0, 1)], dim=-1)
        out = {}
        for name in self.PLANES:
            i, j = self._COORDS[name]
            out[name] = _bilerp(self.planes[f"scale{scale}_{name}"], coords[:, i], coords[:, j])
        return out

    def forward(self, xyz, t):
        feats = []
        for s in range(len(self.scales)):
            factors = self.plane_factors(xyz, t, s)
            if self.combine == "product":
                prod = factors["xy"]
                for name in self.PLANES[1:]:
                    prod = prod * factors[name]
                feats.append(prod)
            else:
                feats.extend(factors[name] for name in self.PLANES)
        return torch.cat(feats, dim=-1)


class LatentCodes(Embedder):
    """Per-frame learnable vectors, linearly blended at inter-frame times.

    Times within 1e-5 of an exact frame snap to that frame, so rendering at a
    frame time uses its row exactly.
    """

    def __init__(self, n_frames: int, dim: int = 8, role: str = "geometry"):
        super().__init__()
        if role not in ("geometry", "appearance"):
            raise ValueError(f"role must be geometry or appearance, got {role!r}")
        self.role = role
        self.n_frames = n_frames
        self.codes = nn.Parameter(torch.zeros(n_frames, dim))
        self.out_dim = dim

    def lookup(self, frame_idx: torch.Tensor) -> torch.Tensor:
        if (frame_idx < 0).any() or (frame_idx >= self.n_frames).any():
            raise IndexError(f"frame index out of range [0, {self.n_frames})")
        return self.codes[frame_idx]

    def forward(self, xyz, t):
        frac = t.double() * (self.n_frames - 1)
        snapped = torch.round(frac)
        frac = torch.where((frac - snapped).abs() < 1e-5, snapped, frac)
        frac = frac.clamp(0, self.n_frames - 1)
        lo = frac.floor().long()
        hi = torch.minimum(lo + 1, torch.tensor(self.n_frames - 1))
        w = (frac - lo.double()).to(self.codes.dtype)[:, None]
        return self.codes[lo] * (1 - w) + self.codes[hi] * w


class Composed(Embedder):
    """Ordered concatenation of embedder outputs."""

    def __init__(self, members: Sequence[Embedder]):
        super().__init__()
        if not members:
            raise ValueError("compose requires at least one embedder")
        self.members = nn.ModuleList(members)
        self.out_dim = sum(m.out_dim for m in members)

    def forward(self, xyz, t):
        return torch.cat([m(xyz, t) for m in self.members], dim=-1)
