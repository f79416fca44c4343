"""Training and evaluation: losses, Adam optimization over named parameter
groups, deterministic ray batching, checkpointing, and metrics.

Checkpoints are zip archives holding ``manifest.json`` (format version,
parameter names/shapes/dtypes/lr-groups, config snapshot) plus one raw
little-endian float32 binary per parameter.
"""

from __future__ import annotations

import json
import math
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .components import build_pipeline, build_registry, resolve_bounds
from .dataset import (
    CameraResidual,
    RayBatch,
    apply_camera_residual,
    generate_rays,
    get_image,
    get_importance,
    load_dataset,
)
from .deformation import deformation_penalties
from .renderer import Pipeline
from .sampler import jitter_for

__all__ = [
    "AdamState",
    "ParameterSet",
    "TrainError",
    "adam_step",
    "build_parameter_set",
    "evaluate",
    "load_checkpoint",
    "mse_and_psnr",
    "save_checkpoint",
    "train",
    "value_and_grad",
]

CHECKPOINT_FORMAT = 1
DEFAULT_LR = {"grid": 5e-3, "mlp": 5e-4, "camera": 1e-5}


class TrainError(RuntimeError):
    pass


@dataclass
class ParameterSet:
    """Named leaf tensors with learning-rate group tags."""

    params: dict  # name -> torch.nn.Parameter
    groups: dict  # name -> "grid" | "mlp" | "camera"

    def names(self):
        return list(self.params)

    def tensors(self):
        return [self.params[n] for n in self.params]


def build_parameter_set(pipeline: Pipeline, residual: Optional[CameraResidual] = None) -> ParameterSet:
    """Collect every learnable tensor: embedder tables/planes/codes tagged
    'grid', MLP weights 'mlp', camera residuals 'camera'."""
    params, groups = {}, {}

    def add(prefix, module, group):
        for name, p in module.named_parameters():
            full = f"{prefix}.{name}"
            if full in params:
                raise TrainError(f"duplicate parameter name {full}")
            params[full] = p
            groups[full] = group

    add("embedder", pipeline.field.embedder, "grid")
    add("regressor", pipeline.field.regressor, "mlp")
    if pipeline.field.deformation is not None:
        add("deformation", pipeline.field.deformation, "mlp")
    if residual is not None:
        add("camera", residual, "camera")
    return ParameterSet(params, groups)


# ---------------------------------------------------------------------------
# autodiff + optimizer


def value_and_grad(loss_fn: Callable[[], torch.Tensor], pset: ParameterSet):
    """Evaluate the scalar loss once and return exact reverse-mode gradients.

    Parameters the loss does not touch get exact zero gradients.
    """
    loss = loss_fn()
    if loss.dim() != 0:
        raise TrainError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    tensors = pset.tensors()
    try:
        raw = torch.autograd.grad(loss, tensors, allow_unused=True)
    except RuntimeError as exc:
        raise TrainError(f"non-differentiable operation in loss: {exc}") from exc
    grads = {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(pset.params.items(), raw)
    }
    return loss.detach(), grads


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))

    @staticmethod
    def init(pset: ParameterSet, beta1=0.9, beta2=0.99, eps=1e-8, lr=None) -> "AdamState":
        return AdamState(
            m={n: torch.zeros_like(p) for n, p in pset.params.items()},
            v={n: torch.zeros_like(p) for n, p in pset.params.items()},
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            lr=dict(lr or DEFAULT_LR),
        )


def adam_step(pset: ParameterSet, grads: dict, state: AdamState) -> AdamState:
    """One in-place Adam update with bias correction; returns the state."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    with torch.no_grad():
        for name, p in pset.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise TrainError(f"gradient shape {tuple(g.shape)} != param {tuple(p.shape)} for {name}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            lr = state.lr[pset.groups[name]]
            p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
    return state


def mse_and_psnr(pred, gt):
    """(mse, psnr in dB); psnr is +inf when mse is exactly zero."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt)
    if pred.shape != gt.shape:
        raise TrainError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    mse = (pred - gt).pow(2).mean().item()
    psnr = math.inf if mse == 0 else -10.0 * math.log10(mse)
    return mse, psnr


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, pset: ParameterSet, config: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "params": [
            {
                "name": name,
                "shape": list(p.shape),
                "dtype": "float32",
                "lr_group": pset.groups[name],
            }
            for name, p in pset.params.items()
        ],
        "config": config,
    }
    if extra:
        manifest.update(extra)
    def entry(name):  # fixed timestamp keeps checkpoint bytes reproducible
        info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
        info.compress_type = zipfile.ZIP_DEFLATED
        return info

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(entry("manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))
        for name, p in pset.params.items():
            data = p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
            zf.writestr(entry(f"params/{name}.bin"), data)
    return path


def load_checkpoint(path):
    """Returns (dict name -> float32 array, manifest dict)."""
    path = Path(path)
    if not path.is_file():
        raise TrainError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT:
            raise TrainError(f"unsupported checkpoint format {manifest.get('format_version')}")
        arrays = {}
        for rec in manifest["params"]:
            buf = zf.read(f"params/{rec['name']}.bin")
            arrays[rec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(rec["shape"]).copy()
    return arrays, manifest


def apply_checkpoint(pset: ParameterSet, arrays: dict):
    """Load arrays into the parameter set; names and shapes must match exactly."""
    missing = sorted(set(pset.params) - set(arrays))
    unexpected = sorted(set(arrays) - set(pset.params))
    bad_shape = sorted(
        name
        for name in set(pset.params) & set(arrays)
        if tuple(pset.params[name].shape) != tuple(arrays[name].shape)
    )
    if missing or unexpected or bad_shape:
        lines = ["checkpoint manifest mismatch:"]
        lines += [f"  missing from checkpoint: {n}" for n in missing]
        lines += [f"  not in model: {n}" for n in unexpected]
        lines += [
            f"  shape mismatch for {n}: model {tuple(pset.params[n].shape)}, "
            f"checkpoint {tuple(arrays[n].shape)}"
            for n in bad_shape
        ]
        raise TrainError("\n".join(lines))
    with torch.no_grad():
        for name, arr in arrays.items():
            pset.params[name].copy_(torch.from_numpy(arr))


# ---------------------------------------------------------------------------
# training loop


class _Run:
    """Assembled training context: dataset, pipeline, parameters."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        tc = cfg.get("train", {})
        torch.set_num_threads(int(tc.get("threads", 1)))
        self.store, self.cameras, self.meta = load_dataset(cfg["dataset"]["root"])
        self.bounds = resolve_bounds(cfg, self.store, self.cameras, self.meta)
        self.registry = build_registry()
        self.pipeline = build_pipeline(cfg, self.meta, self.bounds, self.registry)
        self.residual = (
            CameraResidual(self.meta.n_view) if tc.get("optimize_cameras", False) else None
        )
        self.pset = build_parameter_set(self.pipeline, self.residual)
        self.mode = "hierarchical" if cfg.get("model", {}).get("hierarchical", {}).get(
            "enabled", False
        ) else "single"
        self.images = self._load_images()
        self.importance = self._load_importance() if cfg["dataset"].get(
            "importance_maps", True
        ) else {}

    def _load_images(self):
        meta = self.meta
        out = np.empty((meta.n_frame, meta.n_view, meta.height, meta.width, 3), dtype=np.float32)
        for f in range(meta.n_frame):
            for v in range(meta.n_view):
                out[f, v] = get_image(self.store, f, v)
        return torch.from_numpy(out)

    def _load_importance(self):
        maps = {}
        for f in range(self.meta.n_frame):
            for v in range(self.meta.n_view):
                w = get_importance(self.store, f, v)
                if w is not None:
                    flat = w.reshape(-1).astype(np.float64)
                    total = flat.sum()
                    if total > 0:
                        maps[(f, v)] = flat / total
        return maps

    def camera(self, view: int):
        cam = self.cameras[view]
        if self.residual is None:
            return cam
        return apply_camera_residual(
            cam, self.residual.rot_axis_angle[view], self.residual.translation[view]
        )

    def sample_batch(self, rng: np.random.Generator, batch: int):
        """Random (frame, view, pixel) rays; pixels follow importance maps."""
        meta = self.meta
        frames = rng.integers(0, meta.n_frame, batch)
        views = rng.integers(0, meta.n_view, batch)
        ray_groups, gt_groups = [], []
        for f in range(meta.n_frame):
            for v in range(meta.n_view):
                sel = (frames == f) & (views == v)
                count = int(sel.sum())
                if count == 0:
                    continue
                weights = self.importance.get((f, v))
                if weights is None:
                    flat = rng.integers(0, meta.width * meta.height, count)
                else:
                    flat = rng.choice(meta.width * meta.height, size=count, p=weights)
                pix = np.stack([flat % meta.width, flat // meta.width], axis=-1)
                ray_groups.append(
                    generate_rays(self.camera(v), pix, meta.times[f], v, f)
                )
                gt_groups.append(self.images[f, v, pix[:, 1], pix[:, 0]])
        return RayBatch.cat(ray_groups), torch.cat(gt_groups)

    def loss_terms(self, rays: RayBatch, gt: torch.Tensor, jitter):
        cfg_loss = self.cfg.get("loss", {})
        out = self.pipeline.render_rays(rays, mode=self.mode, jitter=jitter, return_aux=True)
        if self.mode == "hierarchical":
            (fine, coarse), aux = out
            loss = (fine.rgb - gt).pow(2).mean()
            loss = loss + cfg_loss.get("coarse_weight", 1.0) * (coarse.rgb - gt).pow(2).mean()
            main = fine
        else:
            main, aux = out
            loss = (main.rgb - gt).pow(2).mean()
        if "dx" in aux:
            deform = self.pipeline.field.deformation
            shifted = deform.displacement(
                aux["xyz_pre"].detach(), aux["times"] + self.meta.time_step
            )
            mag, smooth = deformation_penalties(aux["dx"], shifted)
            loss = loss + cfg_loss.get("deform_magnitude", 1e-3) * mag
            loss = loss + cfg_loss.get("deform_smoothness", 1e-3) * smooth
        return loss, main


def _param_norms(pset: ParameterSet) -> dict:
    return {name: float(p.detach().norm()) for name, p in pset.params.items()}


def train(cfg: dict, run_dir: str | Path | None = None) -> Path:
    """Run the optimization loop; returns the final checkpoint path.

    Deterministic under a fixed seed: module init, ray batching, and sample
    jitter all derive from train.seed, and the loop is single-threaded unless
    train.threads overrides it.
    """
    tc = cfg.get("train", {})
    iters = int(tc.get("iters", 1000))
    batch = int(tc.get("batch", 4096))
    seed = int(tc.get("seed", 0))
    log_every = int(tc.get("log_every", 100))
    ckpt_every = int(tc.get("checkpoint_every", 0))

    run = _Run(cfg)
    if run_dir is None:
        run_dir = Path(cfg.get("runs_dir", "runs")) / str(cfg.get("exp_name", "exp"))
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "log.jsonl"

    lr_cfg = dict(DEFAULT_LR)
    lr_cfg.update(tc.get("lr", {}))
    adam_cfg = tc.get("adam", {})
    state = AdamState.init(
        run.pset,
        beta1=adam_cfg.get("beta1", 0.9),
        beta2=adam_cfg.get("beta2", 0.99),
        eps=adam_cfg.get("eps", 1e-8),
        lr=lr_cfg,
    )
    decay = tc.get("lr_decay", {})

    rng = np.random.default_rng(seed)
    t0 = time.time()
    with open(log_path, "w") as log:
        use_jitter = bool(tc.get("jitter", True))
        for it in range(iters):
            rays, gt = run.sample_batch(rng, batch)
            jitter = jitter_for(rays, seed=seed * 0x9E3779B1 + it, salt=0) if use_jitter else None
            batch_mse = {}

            def loss_fn():
                loss, main = run.loss_terms(rays, gt, jitter)
                batch_mse["mse"] = float((main.rgb.detach() - gt).pow(2).mean())
                return loss

            loss, grads = value_and_grad(loss_fn, run.pset)
            if not torch.isfinite(loss):
                raise TrainError(
                    f"NaN/Inf loss at iteration {it}; parameter norms: {_param_norms(run.pset)}"
                )
            if decay.get("enabled", False):
                gamma = float(decay.get("gamma", 0.1)) ** (1.0 / max(iters, 1))
                state.lr = {k: v * gamma for k, v in state.lr.items()}
            adam_step(run.pset, grads, state)

            if log_every and (it % log_every == 0 or it == iters - 1):
                mse = batch_mse["mse"]
                entry = {
                    "iter": it,
                    "loss": loss.item(),
                    "psnr": math.inf if mse == 0 else -10 * math.log10(mse),
                    "wall_time": time.time() - t0,
                }
                log.write(json.dumps(entry) + "\n")
                log.flush()
            if ckpt_every and it > 0 and it % ckpt_every == 0:
                save_checkpoint(run_dir / f"ckpt_{it:06d}.zip", run.pset, cfg, {"iteration": it})

        final = save_checkpoint(
            run_dir / "ckpt_final.zip", run.pset, cfg, {"iteration": iters}
        )
        if tc.get("final_eval", True):
            report = _evaluate_run(run, cfg, run_dir / "eval_train")
            log.write(
                json.dumps(
                    {
                        "iter": iters,
                        "final_eval": True,
                        "mean_psnr": report["mean_psnr"],
                        "mean_mse": report["mean_mse"],
                        "wall_time": time.time() - t0,
                    }
                )
                + "\n"
            )
    return final


def _evaluate_run(run: _Run, cfg: dict, out_dir: Path | None, write_images: bool = False) -> dict:
    """Render the evaluation split and collect PSNR/MSE per view."""
    ec = cfg.get("eval", {})
    views = ec.get("views", list(range(run.meta.n_view)))
    frames = ec.get("frames", list(range(run.meta.n_frame)))
    chunk = int(ec.get("chunk", 8192))
    per_view = {}
    total_mse = []
    images = []
    for v in views:
        mses = []
        for f in frames:
            out = run.pipeline.render_image(
                run.camera(v), run.meta.times[f], chunk=chunk, mode=run.mode, frame_idx=f, view_idx=v
            )
            gt = run.images[f, v].numpy()
            mse, _ = mse_and_psnr(torch.from_numpy(out.rgb), torch.from_numpy(gt))
            mses.append(mse)
            images.append((f, v, out))
        view_mse = float(np.mean(mses))
        per_view[str(v)] = {
            "mse": view_mse,
            "psnr": math.inf if view_mse == 0 else -10 * math.log10(view_mse),
        }
        total_mse.extend(mses)
    mean_mse = float(np.mean(total_mse))
    report = {
        "per_view": per_view,
        "mean_mse": mean_mse,
        "mean_psnr": math.inf if mean_mse == 0 else -10 * math.log10(mean_mse),
        "n_views": len(views),
        "n_frames": len(frames),
    }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        if write_images:
            from PIL import Image

            for f, v, out in images:
                img = Image.fromarray(np.round(out.rgb * 255).astype(np.uint8))
                img.save(out_dir / f"render_v{v:02d}_f{f:06d}.png")
    return report


def evaluate(cfg: dict, checkpoint: str | Path, out_dir: str | Path | None = None, write_images: bool = True) -> dict:
    """Load a checkpoint and report metrics over the evaluation split."""
    arrays, manifest = load_checkpoint(checkpoint)
    run = _Run(cfg)
    apply_checkpoint(run.pset, arrays)
    out = Path(out_dir) if out_dir is not None else None
    return _evaluate_run(run, cfg, out, write_images=write_images)
