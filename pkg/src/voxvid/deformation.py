"""Displacement-field deformation: warp observed spacetime points into a
canonical frame before spatial embedding.

The head's final layer is zero-initialized, so a fresh field is exactly the
identity and training starts from the undeformed scene.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .embedder import PositionalEncoding

__all__ = ["DisplacementField", "deformation_penalties"]


class DisplacementField(nn.Module):
    """Low-frequency positional encoding over (x, y, z, t) plus a small MLP
    emitting a displacement; forward returns (x + dx, dx)."""

    def __init__(self, n_freqs: int = 4, hidden: int = 64, depth: int = 2):
        super().__init__()
        self.encoding = PositionalEncoding(n_freqs=n_freqs, include_input=True, include_time=True)
        layers = []
        d = self.encoding.out_dim
        for _ in range(depth):
            layers += [nn.Linear(d, hidden), nn.ReLU()]
            d = hidden
        head = nn.Linear(d, 3)
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
        layers.append(head)
        self.mlp = nn.Sequential(*layers)

    def displacement(self, xyz: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.encoding(xyz, t))

    def forward(self, xyz: torch.Tensor, t: torch.Tensor):
        dx = self.displacement(xyz, t)
        return xyz + dx, dx


def deformation_penalties(dx: torch.Tensor, dx_shifted: torch.Tensor | None = None):
    """(magnitude, temporal smoothness) penalties over a displacement batch.

    magnitude = mean ||dx||^2; smoothness = mean ||dx - dx(t + dt)||^2 over
    paired evaluations at the same points, or zero when no pair is given.
    """
    if dx.numel() == 0:
        raise ValueError("empty displacement batch")
    magnitude = dx.pow(2).sum(dim=-1).mean()
    if dx_shifted is None:
        smooth = torch.zeros((), dtype=dx.dtype, device=dx.device)
    else:
        smooth = (dx - dx_shifted).pow(2).sum(dim=-1).mean()
    return magnitude, smooth
