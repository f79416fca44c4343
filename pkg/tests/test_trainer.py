import json
import math

import numpy as np
import pytest
import torch

from voxvid.components import build_pipeline
from voxvid.dataset import AABB, apply_camera_residual, generate_rays, load_dataset
from voxvid.embedder import HashGrid
from voxvid.fixture import make_moving_sphere_dataset, ring_cameras
from voxvid.regressor import FieldRegressor
from voxvid.renderer import NeuralField, Pipeline
from voxvid.sampler import UniformSampler
from voxvid.trainer import (
    AdamState,
    ParameterSet,
    TrainError,
    adam_step,
    apply_checkpoint,
    build_parameter_set,
    evaluate,
    load_checkpoint,
    mse_and_psnr,
    save_checkpoint,
    train,
    value_and_grad,
)
from helpers import central_diff_check


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro") / "d"
    return make_moving_sphere_dataset(root, n_frames=2, n_views=3, size=16, with_importance=True)


def micro_cfg(root, **train_over):
    cfg = {
        "exp_name": "micro",
        "dataset": {"root": str(root)},
        "scene": {"bounds": [[-1.2, -1.2, -1.2], [1.2, 1.2, 1.2]]},
        "model": {
            "sampler": {"type": "uniform", "n_samples": 16},
            "embedder": {"type": "hashgrid", "n_levels": 4, "base_res": 4, "growth": 2.0, "log2_table": 12},
            "geometry_latent_dim": 4,
            "regressor": {"hidden": 32, "geo_feat_dim": 7, "appearance_dim": 4, "viewdir_freqs": 1},
        },
        "train": {
            "iters": 3,
            "batch": 128,
            "seed": 1,
            "log_every": 1,
            "final_eval": False,
            "background": "white",
        },
    }
    cfg["train"].update(train_over)
    return cfg


# ---------------------------------------------------------------------------
# value_and_grad


def simple_pset(**tensors):
    return ParameterSet(dict(tensors), {k: "mlp" for k in tensors})


def test_grad_of_quadratic():
    p = torch.nn.Parameter(torch.tensor([3.0], dtype=torch.float64))
    pset = simple_pset(p=p)
    loss, grads = value_and_grad(lambda: (p**2).sum(), pset)
    assert loss.item() == 9.0
    assert grads["p"].item() == 6.0


def test_grad_of_disconnected_param_is_zero():
    p = torch.nn.Parameter(torch.tensor([3.0]))
    q = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
    pset = simple_pset(p=p, q=q)
    _, grads = value_and_grad(lambda: (p**2).sum(), pset)
    assert torch.equal(grads["q"], torch.zeros(2))


def test_grad_matches_fd_through_render():
    torch.manual_seed(0)
    bounds = AABB(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
    embedder = HashGrid(n_levels=2, base_res=4, growth=2.0, log2_table=8).double()
    with torch.no_grad():
        embedder.tables.mul_(5000.0)
    regressor = FieldRegressor(in_dim=embedder.out_dim, hidden=16, geo_feat_dim=7).double()
    pipe = Pipeline(UniformSampler(12), NeuralField(embedder, regressor, bounds))
    cams = ring_cameras(n_views=1, size=8)
    rays = generate_rays(cams[0], [(3, 4)], time=0.0, dtype=torch.float64)
    gt = torch.tensor([[0.2, 0.7, 0.4]], dtype=torch.float64)

    def loss():
        out = pipe.render_rays(rays)
        return (out.rgb - gt).pow(2).mean()

    params = list(embedder.parameters()) + list(regressor.parameters())
    central_diff_check(loss, params, h=1e-6)


# ---------------------------------------------------------------------------
# adam


def test_adam_zero_gradient_no_change():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    pset = simple_pset(p=p)
    state = AdamState.init(pset)
    before = p.detach().clone()
    adam_step(pset, {"p": torch.zeros(2)}, state)
    assert torch.equal(p.detach(), before)


def test_adam_single_step_oracle():
    # hand evaluation: m_hat = g = 1, v_hat = 1, step = -lr / (sqrt(1) + eps)
    p = torch.nn.Parameter(torch.tensor([0.5], dtype=torch.float64))
    pset = simple_pset(p=p)
    state = AdamState.init(pset, lr={"mlp": 1e-3})
    adam_step(pset, {"p": torch.ones(1, dtype=torch.float64)}, state)
    delta = p.item() - 0.5
    expected = -1e-3 / (1.0 + 1e-8)
    assert abs(delta - expected) < 1e-6


def test_adam_identical_histories_identical_updates():
    p = torch.nn.Parameter(torch.tensor([1.0]))
    q = torch.nn.Parameter(torch.tensor([1.0]))
    pset = simple_pset(p=p, q=q)
    state = AdamState.init(pset)
    for g in (0.5, -1.0, 2.0):
        adam_step(pset, {"p": torch.tensor([g]), "q": torch.tensor([g])}, state)
    assert torch.equal(p.detach(), q.detach())


def test_adam_shape_mismatch():
    p = torch.nn.Parameter(torch.ones(3))
    pset = simple_pset(p=p)
    state = AdamState.init(pset)
    with pytest.raises(TrainError, match="shape"):
        adam_step(pset, {"p": torch.ones(4)}, state)


def test_parameter_groups(micro_dataset):
    cfg = micro_cfg(micro_dataset, optimize_cameras=True)
    store, cams, meta = load_dataset(micro_dataset)
    from voxvid.components import resolve_bounds
    from voxvid.dataset import CameraResidual

    bounds = resolve_bounds(cfg, store, cams, meta)
    pipe = build_pipeline(cfg, meta, bounds)
    pset = build_parameter_set(pipe, CameraResidual(meta.n_view))
    groups = set()
    for name, group in pset.groups.items():
        groups.add(group)
        if name.startswith("embedder"):
            assert group == "grid"
        elif name.startswith(("regressor", "deformation")):
            assert group == "mlp"
        elif name.startswith("camera"):
            assert group == "camera"
    assert groups == {"grid", "mlp", "camera"}


# ---------------------------------------------------------------------------
# metrics


def test_mse_psnr():
    a = torch.rand(4, 4, 3)
    assert mse_and_psnr(a, a) == (0.0, math.inf)
    pred = torch.zeros(10)
    gt = torch.full((10,), 0.1)
    mse, psnr = mse_and_psnr(pred, gt)
    assert mse == pytest.approx(0.01)
    assert psnr == pytest.approx(20.0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    p = torch.nn.Parameter(torch.randn(4, 3))
    q = torch.nn.Parameter(torch.randn(2))
    pset = ParameterSet({"a.p": p, "b.q": q}, {"a.p": "grid", "b.q": "mlp"})
    path = save_checkpoint(tmp_path / "ck.zip", pset, {"k": 1}, extra={"iteration": 7})
    arrays, manifest = load_checkpoint(path)
    assert manifest["config"] == {"k": 1} and manifest["iteration"] == 7
    assert np.array_equal(arrays["a.p"], p.detach().numpy())
    with torch.no_grad():
        p.zero_()
    apply_checkpoint(pset, arrays)
    assert np.array_equal(p.detach().numpy(), arrays["a.p"])


def test_checkpoint_manifest_mismatch(tmp_path):
    p = torch.nn.Parameter(torch.randn(3))
    pset = ParameterSet({"weight": p}, {"weight": "mlp"})
    path = save_checkpoint(tmp_path / "ck.zip", pset, {})
    arrays, _ = load_checkpoint(path)
    renamed = ParameterSet({"weight_renamed": p}, {"weight_renamed": "mlp"})
    with pytest.raises(TrainError, match="weight_renamed"):
        apply_checkpoint(renamed, arrays)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(TrainError, match="not found"):
        load_checkpoint(tmp_path / "nope.zip")


def test_checkpoint_bytes_reproducible(tmp_path):
    import time as time_mod

    p = torch.nn.Parameter(torch.randn(4, 3, generator=torch.Generator().manual_seed(0)))
    pset = ParameterSet({"a.p": p}, {"a.p": "grid"})
    first = save_checkpoint(tmp_path / "a.zip", pset, {"k": 1}).read_bytes()
    time_mod.sleep(1.1)  # cross a zip timestamp boundary
    second = save_checkpoint(tmp_path / "b.zip", pset, {"k": 1}).read_bytes()
    assert first == second


# ---------------------------------------------------------------------------
# train loop


def test_zero_iters_checkpoint_is_init(micro_dataset, tmp_path):
    cfg = micro_cfg(micro_dataset, iters=0)
    ckpt = train(cfg, run_dir=tmp_path / "run")
    arrays, _ = load_checkpoint(ckpt)

    store, cams, meta = load_dataset(micro_dataset)
    from voxvid.components import resolve_bounds

    bounds = resolve_bounds(cfg, store, cams, meta)
    pipe = build_pipeline(cfg, meta, bounds)
    pset = build_parameter_set(pipe)
    for name, p in pset.params.items():
        assert np.array_equal(arrays[name], p.detach().numpy().astype(np.float32))


def test_training_is_deterministic(micro_dataset, tmp_path):
    cfg = micro_cfg(micro_dataset, iters=4)
    ck1 = train(cfg, run_dir=tmp_path / "a")
    ck2 = train(cfg, run_dir=tmp_path / "b")
    a1, _ = load_checkpoint(ck1)
    a2, _ = load_checkpoint(ck2)
    for name in a1:
        assert np.array_equal(a1[name], a2[name]), name
    log1 = [json.loads(l) for l in (tmp_path / "a" / "log.jsonl").read_text().splitlines()]
    log2 = [json.loads(l) for l in (tmp_path / "b" / "log.jsonl").read_text().splitlines()]
    assert [e["loss"] for e in log1] == [e["loss"] for e in log2]

    ck3 = train(micro_cfg(micro_dataset, iters=4, seed=2), run_dir=tmp_path / "c")
    a3, _ = load_checkpoint(ck3)
    assert any(not np.array_equal(a1[n], a3[n]) for n in a1)


def test_loss_decreases_on_micro_fixture(micro_dataset, tmp_path):
    cfg = micro_cfg(micro_dataset, iters=60, log_every=1, batch=256)
    train(cfg, run_dir=tmp_path / "run")
    log = [json.loads(l) for l in (tmp_path / "run" / "log.jsonl").read_text().splitlines()]
    losses = [e["loss"] for e in log if "loss" in e]
    assert np.median(losses[:10]) > np.median(losses[-10:])


def test_evaluate_matches_final_train_log(micro_dataset, tmp_path):
    cfg = micro_cfg(micro_dataset, iters=3, final_eval=True)
    ckpt = train(cfg, run_dir=tmp_path / "run")
    log = [json.loads(l) for l in (tmp_path / "run" / "log.jsonl").read_text().splitlines()]
    final = [e for e in log if e.get("final_eval")][-1]
    report = evaluate(cfg, ckpt, out_dir=tmp_path / "eval", write_images=False)
    assert report["mean_psnr"] == final["mean_psnr"]
    assert report["mean_mse"] == final["mean_mse"]
    assert (tmp_path / "eval" / "report.json").is_file()


def test_transparent_init_matches_constant_white_oracle(micro_dataset, tmp_path):
    cfg = micro_cfg(micro_dataset, iters=0)
    cfg["model"]["regressor"]["density_bias"] = -30.0  # effectively empty field
    ckpt = train(cfg, run_dir=tmp_path / "run")
    report = evaluate(cfg, ckpt, out_dir=None, write_images=False)

    store, _, meta = load_dataset(micro_dataset)
    from voxvid.dataset import get_image

    mses = [
        np.mean((get_image(store, f, v) - 1.0) ** 2)
        for f in range(meta.n_frame)
        for v in range(meta.n_view)
    ]
    oracle_psnr = -10 * math.log10(np.mean(mses))
    assert report["mean_psnr"] == pytest.approx(oracle_psnr, abs=1e-3)


def test_nan_loss_aborts_with_iteration(micro_dataset, tmp_path, monkeypatch):
    cfg = micro_cfg(micro_dataset, iters=5)
    from voxvid import trainer as trainer_mod

    orig = trainer_mod._Run.loss_terms
    calls = {"n": 0}

    def poisoned(self, rays, gt, jitter):
        calls["n"] += 1
        loss, main = orig(self, rays, gt, jitter)
        if calls["n"] == 3:
            loss = loss * float("nan")
        return loss, main

    monkeypatch.setattr(trainer_mod._Run, "loss_terms", poisoned)
    with pytest.raises(TrainError, match="iteration 2"):
        train(cfg, run_dir=tmp_path / "run")


def test_importance_maps_bias_pixel_choice(micro_dataset):
    from voxvid.trainer import _Run
    from voxvid.dataset import get_mask

    cfg = micro_cfg(micro_dataset)
    run = _Run(cfg)
    assert run.importance  # fixture wrote importance maps
    rng = np.random.default_rng(0)
    rays, _ = run.sample_batch(rng, 4000)
    px = rays.pixels.numpy()
    frames = rays.frame_idx.numpy()
    views = rays.view_idx.numpy()
    store = run.store
    hits = 0
    expected = []
    for (f, v), w in run.importance.items():
        sel = (frames == f) & (views == v)
        mask = get_mask(store, f, v)
        inside = mask[px[sel, 1], px[sel, 0]]
        hits += inside.sum()
        # expected foreground fraction under the weight map
        m = mask.reshape(-1)
        expected.append((w[m].sum(), sel.sum()))
    frac = hits / sum(n for _, n in expected)
    target = np.average([p for p, _ in expected], weights=[n for _, n in expected])
    assert abs(frac - target) < 0.05
    # uniform sampling would give the bare foreground area fraction, which is lower
    area = np.mean([get_mask(store, f, v).mean() for (f, v) in run.importance])
    assert frac > area + 0.05


def test_train_with_camera_optimization(micro_dataset, tmp_path):
    cfg = micro_cfg(micro_dataset, iters=3, optimize_cameras=True)
    ckpt = train(cfg, run_dir=tmp_path / "run")
    arrays, manifest = load_checkpoint(ckpt)
    cam_params = [r for r in manifest["params"] if r["lr_group"] == "camera"]
    assert len(cam_params) == 2  # rotation + translation tables
    assert all(r["shape"] == [3, 3] for r in cam_params)  # n_view x 3


def test_train_hierarchical_smoke(micro_dataset, tmp_path):
    cfg = micro_cfg(micro_dataset, iters=3)
    cfg["model"]["hierarchical"] = {"enabled": True, "n_fine": 8}
    ckpt = train(cfg, run_dir=tmp_path / "run")
    report = evaluate(cfg, ckpt, out_dir=None, write_images=False)
    assert math.isfinite(report["mean_psnr"])


def test_train_with_lr_decay(micro_dataset, tmp_path):
    cfg = micro_cfg(micro_dataset, iters=4)
    cfg["train"]["lr_decay"] = {"enabled": True, "gamma": 0.1}
    ck_decay = train(cfg, run_dir=tmp_path / "a")
    cfg["train"]["lr_decay"] = {"enabled": False}
    ck_plain = train(cfg, run_dir=tmp_path / "b")
    a, _ = load_checkpoint(ck_decay)
    b, _ = load_checkpoint(ck_plain)
    assert any(not np.array_equal(a[n], b[n]) for n in a)  # decay changed the steps


# ---------------------------------------------------------------------------
# camera residual recovery


class SmoothBlobField(torch.nn.Module):
    """Analytic differentiable field: Gaussian density blob, smooth color."""

    def forward(self, points, dirs, times):
        d2 = (points**2).sum(-1)
        sigma = 8.0 * torch.exp(-d2 / 0.16)
        rgb = 0.5 + 0.4 * torch.sin(4.0 * points)
        return sigma, rgb.clamp(0, 1), {}


def test_camera_residual_recovery():
    torch.manual_seed(0)
    field = SmoothBlobField()
    pipe = Pipeline(UniformSampler(24), field, background=(1.0, 1.0, 1.0))
    true_cam = ring_cameras(n_views=1, size=24)[0]

    # ground-truth image from the true pose
    ys, xs = np.mgrid[0:24, 0:24]
    pix = np.stack([xs.ravel(), ys.ravel()], -1)
    with torch.no_grad():
        gt = pipe.render_rays(generate_rays(true_cam, pix, dtype=torch.float64)).rgb

    # perturb by 0.5 degrees and a small translation
    perturb_rot = torch.tensor([0.0, np.deg2rad(0.5), 0.0], dtype=torch.float64)
    perturb_tr = torch.tensor([0.01, -0.005, 0.0], dtype=torch.float64)
    bad_cam = apply_camera_residual(true_cam, perturb_rot, perturb_tr)

    def pose_error(cam):
        return (
            (cam.R.detach() - true_cam.R).norm() + (cam.T.detach() - true_cam.T).norm()
        ).item()

    rot = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
    tr = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
    pset = ParameterSet({"camera.rot": rot, "camera.tr": tr}, {"camera.rot": "camera", "camera.tr": "camera"})
    state = AdamState.init(pset, lr={"camera": 2e-3})

    err0 = pose_error(bad_cam)
    for _ in range(150):
        def loss_fn():
            cam = apply_camera_residual(bad_cam, rot, tr)
            rays = generate_rays(cam, pix, dtype=torch.float64)
            out = pipe.render_rays(rays)
            return (out.rgb - gt).pow(2).mean()

        _, grads = value_and_grad(loss_fn, pset)
        adam_step(pset, grads, state)

    fixed = apply_camera_residual(bad_cam, rot, tr)
    assert pose_error(fixed) < 0.2 * err0
