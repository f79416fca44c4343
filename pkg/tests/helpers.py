"""Shared test utilities: finite-difference gradient checks and point sampling."""

import numpy as np
import torch


def central_diff_check(fn, tensors, h=1e-6, tol=1e-4, floor=1e-6, seed=0):
    """Compare autograd gradients of scalar fn() against central differences.

    For each tensor a random direction v is drawn; the directional derivative
    (fn(x + hv) - fn(x - hv)) / 2h must match <grad, v>. The error normalizes
    by ||grad|| * ||v|| as well as the derivative magnitudes: a componentwise
    relative gradient error of ``tol`` perturbs the dot product by at most
    tol * ||grad|| * ||v||, so this is the faithful directional transcription
    of a componentwise check, without amplifying cancellation noise when v is
    nearly orthogonal to the gradient. Tensors must be float64 leaves.
    """
    gen = torch.Generator().manual_seed(seed)
    loss = fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    for p, g in zip(tensors, grads):
        v = torch.randn(p.shape, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            p.add_(h * v)
            up = fn().item()
            p.sub_(2 * h * v)
            down = fn().item()
            p.add_(h * v)
        fd = (up - down) / (2 * h)
        an = 0.0 if g is None else (g * v).sum().item()
        scale = 0.0 if g is None else (g.norm() * v.norm()).item()
        err = abs(fd - an) / max(abs(fd), abs(an), scale, floor)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: analytic {an}, finite-diff {fd}, rel err {err}"
    return worst


def central_diff_check_joint(fn, tensors, h=1e-6, tol=1e-4, floor=1e-6, seed=0):
    """Directional check perturbing ALL tensors at once.

    Compares the full-parameter directional derivative against finite
    differences; suited to composed end-to-end paths where an individual
    tensor's influence can sit below finite-difference noise.
    """
    gen = torch.Generator().manual_seed(seed)
    loss = fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    vs = [torch.randn(p.shape, generator=gen, dtype=torch.float64) for p in tensors]
    with torch.no_grad():
        for p, v in zip(tensors, vs):
            p.add_(h * v)
        up = fn().item()
        for p, v in zip(tensors, vs):
            p.sub_(2 * h * v)
        down = fn().item()
        for p, v in zip(tensors, vs):
            p.add_(h * v)
    fd = (up - down) / (2 * h)
    an = sum(0.0 if g is None else (g * v).sum().item() for g, v in zip(grads, vs))
    scale = sum(0.0 if g is None else (g.norm() * v.norm()).item() for g, v in zip(grads, vs))
    err = abs(fd - an) / max(abs(fd), abs(an), scale, floor)
    assert err < tol, f"joint gradient mismatch: analytic {an}, finite-diff {fd}, rel err {err}"
    return err


class AnalyticSphereField(torch.nn.Module):
    """Oracle radiance field: hard density inside a (possibly moving) sphere,
    normal-shaded color, matching the synthetic fixture's geometry."""

    def __init__(self, center=(0.0, 0.0, 0.0), radius=0.5, sigma=1e3, velocity=None):
        super().__init__()
        self.center = torch.tensor(center, dtype=torch.float64)
        self.radius = radius
        self.sigma = sigma
        self.velocity = None if velocity is None else torch.tensor(velocity, dtype=torch.float64)

    def forward(self, points, dirs, times):
        c = self.center.to(points.dtype)
        if self.velocity is not None:
            c = c + times[:, None] * self.velocity.to(points.dtype)
        offset = points - c
        dist = offset.norm(dim=-1)
        inside = dist < self.radius
        sigma = torch.where(inside, torch.full_like(dist, self.sigma), torch.zeros_like(dist))
        normal = offset / dist.clamp(min=1e-9)[:, None]
        rgb = (0.5 + 0.5 * normal).clamp(0, 1)
        return sigma, rgb, {}


def interior_points(n, resolutions, margin=1e-3, seed=0, dims=3):
    """Random unit-cube points whose scaled coords stay clear of grid planes.

    Keeps finite differences on grid interpolants inside one cell at every
    resolution in ``resolutions``.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        p = rng.uniform(0, 1, dims)
        ok = True
        for res in resolutions:
            x = p * (res - 1)
            if np.any(np.abs(x - np.round(x)) < margin):
                ok = False
                break
        if ok and np.all(p > margin) and np.all(p < 1 - margin):
            out.append(p)
    return torch.tensor(np.array(out), dtype=torch.float64)
