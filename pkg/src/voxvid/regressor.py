"""Feature-to-physics regressors: density and view-dependent color via small
MLPs, with optional spherical-harmonics color and per-frame appearance codes.

The appearance path only ever feeds the color branch; density is a function
of geometry features alone, by construction.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .embedder import LatentCodes, positional_encode

__all__ = [
    "MLP",
    "FieldRegressor",
    "density_head",
    "rgb_head",
    "sh_eval",
    "sh_color",
    "appearance_condition",
]

SH_C0 = 0.28209479177
SH_C1 = 0.48860251190
SH_C2 = (1.09254843059, 0.31539156525, 0.54627421529)


class MLP(nn.Module):
    """Affine + relu chain with declared input/output dims."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64, depth: int = 2):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        layers = []
        d = in_dim
        for _ in range(depth):
            layers += [nn.Linear(d, hidden), nn.ReLU()]
            d = hidden
        layers.append(nn.Linear(d, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"MLP expects input dim {self.in_dim}, got {x.shape[-1]}")
        return self.net(x)


def density_head(raw: torch.Tensor, bias_init: float = -1.0) -> torch.Tensor:
    """sigma = softplus(raw + bias); the default bias keeps initial density low."""
    return nn.functional.softplus(raw + bias_init)


def rgb_head(raw: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(raw)


def sh_eval(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Real spherical-harmonics basis values for unit directions.

    Components in (l, m) order; degree <= 2. Degree-1 terms are proportional
    to (y, z, x).
    """
    if not 0 <= degree <= 2:
        raise ValueError(f"degree must be in [0, 2], got {degree}")
    norms = dirs.norm(dim=-1)
    if ((norms - 1).abs() > 1e-6).any():
        raise ValueError("sh_eval requires unit directions")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [SH_C1 * y, SH_C1 * z, SH_C1 * x]
    if degree >= 2:
        c2_2, c20, c22 = SH_C2
        out += [
            c2_2 * x * y,
            c2_2 * y * z,
            c20 * (3 * z * z - 1),
            c2_2 * x * z,
            c22 * (x * x - y * y),
        ]
    return torch.stack(out, dim=-1)


def sh_color(coeffs: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """rgb = sigmoid(sum_k coeffs[., c, k] * basis_k(dir)) per channel."""
    degree = int(math.isqrt(coeffs.shape[-1])) - 1
    if (degree + 1) ** 2 != coeffs.shape[-1]:
        raise ValueError(f"coefficient count {coeffs.shape[-1]} is not a square")
    basis = sh_eval(dirs, degree)
    return torch.sigmoid((coeffs * basis[..., None, :]).sum(dim=-1))


def appearance_condition(
    features: torch.Tensor, t: torch.Tensor, codes: LatentCodes
) -> torch.Tensor:
    """Concatenate the frame's appearance code onto color-branch features."""
    if codes.role != "appearance":
        raise ValueError(f"appearance conditioning needs role 'appearance', got {codes.role!r}")
    return torch.cat([features, codes(None, t)], dim=-1)


class FieldRegressor(nn.Module):
    """Geometry MLP -> (density, feature); color MLP -> rgb.

    color_mode selects how view dependence enters: 'mlp_viewdir' feeds an
    encoded direction into the color MLP; 'sh_degree_{0,1,2}' makes the color
    MLP emit per-channel SH coefficients evaluated at the direction.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: int = 64,
        depth: int = 2,
        geo_feat_dim: int = 15,
        color_mode: str = "mlp_viewdir",
        viewdir_freqs: int = 2,
        appearance_dim: int = 0,
        n_frames: int = 1,
        density_bias: float = -1.0,
    ):
        super().__init__()
        modes = ("mlp_viewdir", "sh_degree_0", "sh_degree_1", "sh_degree_2")
        if color_mode not in modes:
            raise ValueError(f"color_mode must be one of {modes}, got {color_mode!r}")
        self.color_mode = color_mode
        self.density_bias = density_bias
        self.viewdir_freqs = viewdir_freqs
        self.geometry_mlp = MLP(in_dim, 1 + geo_feat_dim, hidden, depth)
        self.appearance_codes = (
            LatentCodes(n_frames, appearance_dim, role="appearance") if appearance_dim > 0 else None
        )
        color_in = geo_feat_dim + appearance_dim
        if color_mode == "mlp_viewdir":
            color_in += 3 * (2 * viewdir_freqs + 1)
            color_out = 3
        else:
            self.sh_degree = int(color_mode[-1])
            color_out = 3 * (self.sh_degree + 1) ** 2
        self.color_mlp = MLP(color_in, color_out, hidden, depth)

    def forward(self, features: torch.Tensor, dirs: torch.Tensor, t: torch.Tensor):
        geo = self.geometry_mlp(features)
        sigma = density_head(geo[..., 0], self.density_bias)
        color_feat = geo[..., 1:]
        if self.appearance_codes is not None:
            color_feat = appearance_condition(color_feat, t, self.appearance_codes)
        if self.color_mode == "mlp_viewdir":
            enc = positional_encode(dirs, self.viewdir_freqs, include_input=True)
            rgb = rgb_head(self.color_mlp(torch.cat([color_feat, enc], dim=-1)))
        else:
            coeffs = self.color_mlp(color_feat).reshape(*color_feat.shape[:-1], 3, -1)
            rgb = sh_color(coeffs, dirs)
        return sigma, rgb
