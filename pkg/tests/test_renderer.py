import math

import numpy as np
import pytest
import torch

from voxvid.dataset import AABB, RayBatch, look_at_camera
from voxvid.embedder import HashGrid
from voxvid.regressor import FieldRegressor
from voxvid.renderer import NeuralField, Pipeline, composite
from voxvid.sampler import ImportanceSampler, UniformSampler, jitter_for
from helpers import AnalyticSphereField, central_diff_check


def straight_rays(n_rays=1, near=0.0, far=2.0, dtype=torch.float64):
    dirs = torch.zeros(n_rays, 3, dtype=dtype)
    dirs[:, 2] = 1
    origins = torch.zeros(n_rays, 3, dtype=dtype)
    origins[:, 2] = -far
    pix = torch.zeros(n_rays, 2, dtype=torch.long)
    pix[:, 0] = torch.arange(n_rays)
    return RayBatch(
        origins=origins,
        dirs=dirs,
        t_near=torch.full((n_rays,), near, dtype=dtype),
        t_far=torch.full((n_rays,), far, dtype=dtype),
        pixels=pix,
        times=torch.zeros(n_rays, dtype=dtype),
        view_idx=torch.zeros(n_rays, dtype=torch.long),
        frame_idx=torch.zeros(n_rays, dtype=torch.long),
    )


# ---------------------------------------------------------------------------
# composite


def test_transparent_medium():
    n, s = 2, 8
    out = composite(
        torch.zeros(n, s),
        torch.rand(n, s, 3),
        torch.full((n, s), 0.1),
        torch.linspace(1, 2, s).expand(n, s),
        background=torch.tensor([0.2, 0.4, 0.6]),
    )
    assert torch.allclose(out.rgb, torch.tensor([0.2, 0.4, 0.6]).expand(n, 3))
    assert torch.equal(out.acc, torch.zeros(n))
    assert torch.equal(out.weights, torch.zeros(n, s))


def test_transparent_defaults_to_black():
    out = composite(torch.zeros(1, 4), torch.ones(1, 4, 3), torch.ones(1, 4), torch.ones(1, 4))
    assert torch.equal(out.rgb, torch.zeros(1, 3))


def test_opaque_front_sample():
    sigma = torch.tensor([[1e9, 1.0]])
    rgb = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    deltas = torch.tensor([[1.0, 1.0]])
    z = torch.tensor([[1.0, 2.0]])
    out = composite(sigma, rgb, deltas, z)
    assert out.weights[0, 0].item() == pytest.approx(1.0)
    assert torch.allclose(out.rgb[0], torch.tensor([1.0, 0.0, 0.0]))
    assert out.depth[0].item() == pytest.approx(1.0)


def test_homogeneous_transmittance_analytic():
    n = 256
    rays = straight_rays(near=0.0, far=2.0)
    z = UniformSampler(n)(rays)
    deltas_field = AnalyticSphereField(radius=1e9, sigma=1.0)  # constant sigma everywhere
    pipe = Pipeline(UniformSampler(n), deltas_field)
    out = pipe.render_rays(rays)
    assert abs(out.acc.item() - (1 - math.exp(-2))) < 1e-3
    assert z.shape == (1, n)


def test_weight_normalization_identity():
    gen = torch.Generator().manual_seed(0)
    sigma = torch.rand(16, 32, generator=gen) * 3
    deltas = torch.rand(16, 32, generator=gen) * 0.1
    z = torch.cumsum(deltas, dim=-1)
    out = composite(sigma, torch.rand(16, 32, 3, generator=gen), deltas, z)
    trans_final = torch.exp(-(sigma * deltas).sum(-1))
    assert ((out.weights.sum(-1) + trans_final) - 1).abs().max() < 1e-6
    assert (out.weights >= 0).all()
    assert (out.weights.sum(-1) <= 1 + 1e-6).all()


def test_compositing_is_order_sensitive():
    sigma = torch.tensor([[3.0, 0.3]])
    rgb = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]])
    deltas = torch.tensor([[0.5, 0.5]])
    z = torch.tensor([[1.0, 1.5]])
    fwd = composite(sigma, rgb, deltas, z)
    rev = composite(sigma.flip(-1), rgb.flip(-2), deltas.flip(-1), z)
    assert not torch.allclose(fwd.rgb, rev.rgb)


def test_composite_length_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        composite(torch.zeros(1, 3), torch.zeros(1, 4, 3), torch.zeros(1, 3), torch.zeros(1, 3))


def test_composite_gradients():
    gen = torch.Generator().manual_seed(1)
    sigma = (torch.rand(8, 16, dtype=torch.float64, generator=gen) * 2).requires_grad_(True)
    rgb = torch.rand(8, 16, 3, dtype=torch.float64, generator=gen).requires_grad_(True)
    deltas = (torch.rand(8, 16, dtype=torch.float64, generator=gen) * 0.2).requires_grad_(True)
    z = torch.cumsum(deltas.detach(), dim=-1)
    wr = torch.randn(8, 3, dtype=torch.float64, generator=gen)
    wd = torch.randn(8, dtype=torch.float64, generator=gen)

    def loss():
        out = composite(sigma, rgb, deltas, z, background=torch.ones(3, dtype=torch.float64))
        return (out.rgb * wr).sum() + (out.depth * wd).sum() + out.acc.sum()

    central_diff_check(loss, [sigma, rgb, deltas])


# ---------------------------------------------------------------------------
# render_rays


def test_transparent_pipeline_returns_background():
    field = AnalyticSphereField(radius=0.0, sigma=0.0)
    pipe = Pipeline(UniformSampler(16), field, background=(1.0, 1.0, 1.0))
    rays = straight_rays(n_rays=4)
    out = pipe.render_rays(rays)
    assert torch.allclose(out.rgb, torch.ones(4, 3, dtype=torch.float64))


def test_hierarchical_sample_count():
    field = AnalyticSphereField(radius=0.4)
    pipe = Pipeline(UniformSampler(16), field, fine_sampler=ImportanceSampler(24))
    rays = straight_rays(n_rays=2, near=2.0, far=6.0)
    rays.origins[:, 2] = -4.0
    fine, coarse = pipe.render_rays(rays, mode="hierarchical")
    assert coarse.z.shape == (2, 16)
    assert fine.z.shape == (2, 16 + 24)
    assert (fine.z[:, 1:] >= fine.z[:, :-1]).all()


def test_sphere_depth_matches_ray_intersection_oracle():
    n = 128
    radius = 0.5
    field = AnalyticSphereField(radius=radius, sigma=1e3)
    pipe = Pipeline(UniformSampler(n), field)
    rays = straight_rays(near=2.0, far=6.0)
    rays.origins[:, 2] = -4.0
    out = pipe.render_rays(rays)
    # oracle: |o + t d| = r along the axis -> t = 4 - r
    t_hit = 4.0 - radius
    assert abs(out.depth.item() - t_hit) < 2 * (6.0 - 2.0) / n
    assert out.acc.item() > 0.999


def test_jittered_render_deterministic():
    field = AnalyticSphereField(radius=0.5, sigma=50.0)
    pipe = Pipeline(UniformSampler(32), field, fine_sampler=ImportanceSampler(16))
    rays = straight_rays(n_rays=3, near=2.0, far=6.0)
    rays.origins[:, 2] = -4.0
    a, _ = pipe.render_rays(rays, mode="hierarchical", jitter=jitter_for(rays, 5))
    b, _ = pipe.render_rays(rays, mode="hierarchical", jitter=jitter_for(rays, 5))
    assert torch.equal(a.rgb, b.rgb) and torch.equal(a.z, b.z)


def test_bad_mode_rejected():
    pipe = Pipeline(UniformSampler(8), AnalyticSphereField())
    with pytest.raises(ValueError, match="mode"):
        pipe.render_rays(straight_rays(), mode="fancy")


# ---------------------------------------------------------------------------
# render_image


def neural_pipeline(background=None):
    torch.manual_seed(7)
    bounds = AABB(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
    embedder = HashGrid(n_levels=4, base_res=4, growth=1.8)
    regressor = FieldRegressor(in_dim=embedder.out_dim, hidden=16)
    with torch.no_grad():  # give the random field some visible structure
        embedder.tables.mul_(1000.0)
    field = NeuralField(embedder, regressor, bounds)
    return Pipeline(UniformSampler(24), field, background=background)


def test_render_image_chunk_invariance():
    pipe = neural_pipeline()
    cam = look_at_camera((0, 0, -3), (0, 0, 0), 8, 8, 40.0, 1.5, 4.5)
    full = pipe.render_image(cam, chunk=64)
    small = pipe.render_image(cam, chunk=7)
    assert np.array_equal(full.rgb, small.rgb)
    assert np.array_equal(full.depth, small.depth)
    assert np.array_equal(full.acc, small.acc)


def test_render_image_transparent_white():
    field = AnalyticSphereField(radius=0.0)
    pipe = Pipeline(UniformSampler(8), field, background=(1.0, 1.0, 1.0))
    cam = look_at_camera((0, 0, -3), (0, 0, 0), 4, 4, 40.0, 1.5, 4.5)
    out = pipe.render_image(cam)
    assert np.array_equal(out.rgb, np.ones((4, 4, 3), dtype=np.float32))


def test_render_image_pixel_count():
    field = AnalyticSphereField(radius=0.0)
    calls = []
    orig = field.forward

    def counting(points, dirs, times):
        calls.append(points.shape[0])
        return orig(points, dirs, times)

    field.forward = counting
    pipe = Pipeline(UniformSampler(4), field)
    cam = look_at_camera((0, 0, -3), (0, 0, 0), 2, 2, 40.0, 1.5, 4.5)
    out = pipe.render_image(cam, chunk=100)
    assert out.rgb.shape == (2, 2, 3)
    assert sum(calls) == 4 * 4  # 4 rays x 4 samples


def test_render_convergence_slope_on_smooth_field():
    """Riemann-sum error for a smooth density decays ~ 1/n."""

    class SmoothField(torch.nn.Module):
        def forward(self, points, dirs, times):
            sigma = 1.0 + 0.5 * torch.sin(3.0 * points[:, 2])
            rgb = torch.full((points.shape[0], 3), 0.5, dtype=points.dtype)
            return sigma, rgb, {}

    rays = straight_rays(near=0.0, far=2.0)
    # analytic optical depth of sigma(z) = 1 + 0.5 sin(3(z - 2)) over z in [0, 2]
    integral = 2.0 + 0.5 / 3.0 * (math.cos(-6.0) - math.cos(0.0))
    target = 1 - math.exp(-integral)
    errs, ns = [], [32, 64, 128, 256, 512]
    for n in ns:
        pipe = Pipeline(UniformSampler(n), SmoothField())
        out = pipe.render_rays(rays)
        errs.append(abs(out.acc.item() - target))
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert slope >= 0.9
