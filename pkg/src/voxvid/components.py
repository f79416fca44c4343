"""Default component registry and config-driven pipeline assembly."""

from __future__ import annotations

import numpy as np
import torch

from .config import ConfigError, Registry, instantiate
from .dataset import AABB, DatasetMeta, FrameStore, compute_visual_hull_bounds, get_mask
from .deformation import DisplacementField
from .embedder import Composed, HashGrid, KPlanes, LatentCodes, PositionalEncoding
from .regressor import FieldRegressor
from .renderer import NeuralField, Pipeline
from .sampler import (
    DepthGuidedSampler,
    DisparitySampler,
    ImportanceSampler,
    UniformSampler,
)

__all__ = ["build_registry", "build_pipeline", "resolve_bounds"]

DEFAULT_BOUNDS = [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]


def build_registry() -> Registry:
    reg = Registry()
    reg.register("sampler", "uniform", UniformSampler)
    reg.register("sampler", "disparity", DisparitySampler)
    reg.register("sampler", "importance", ImportanceSampler)
    reg.register("sampler", "depth_guided", DepthGuidedSampler)

    reg.register("embedder", "positional", PositionalEncoding)
    reg.register("embedder", "hashgrid", HashGrid)
    reg.register("embedder", "kplanes", KPlanes)
    reg.register("embedder", "latent", LatentCodes)

    def make_compose(members, n_frames=None):
        if not isinstance(members, list) or not members:
            raise ConfigError("compose embedder needs a non-empty 'members' list")
        return Composed(
            [
                instantiate(m, reg, "embedder", context={"n_frames": n_frames})
                for m in members
            ]
        )

    reg.register("embedder", "compose", make_compose)
    return reg


def resolve_bounds(cfg: dict, store: FrameStore, cameras, meta: DatasetMeta) -> AABB:
    """Scene bounds from config, optionally tightened by the visual hull."""
    scene = cfg.get("scene", {})
    raw = scene.get("bounds", DEFAULT_BOUNDS)
    init = AABB(np.array(raw[0], dtype=np.float64), np.array(raw[1], dtype=np.float64))
    hull = scene.get("visual_hull", {})
    if not hull.get("enabled", False):
        return init
    if not store.has_masks():
        raise ConfigError("visual_hull.enabled requires a masks/ tree in the dataset")
    frames = range(meta.n_frame) if hull.get("union_all_frames", False) else [hull.get("frame", 0)]
    lo = None
    hi = None
    for f in frames:
        masks = [get_mask(store, f, v) for v in range(meta.n_view)]
        box = compute_visual_hull_bounds(
            masks,
            cameras,
            grid_res=hull.get("grid_res", 64),
            init_bounds=init,
            min_views=hull.get("min_views", max(1, meta.n_view - 1)),
        )
        lo = box.lo if lo is None else np.minimum(lo, box.lo)
        hi = box.hi if hi is None else np.maximum(hi, box.hi)
    return AABB(lo, hi)


def build_pipeline(
    cfg: dict,
    meta: DatasetMeta,
    bounds: AABB,
    registry: Registry | None = None,
) -> Pipeline:
    """Assemble the render pipeline described by a resolved config tree.

    Module parameters initialize from train.seed, so two builds from the same
    config are bit-identical.
    """
    registry = registry or build_registry()
    model = cfg.get("model", {})
    torch.manual_seed(int(cfg.get("train", {}).get("seed", 0)))

    context = {"n_frames": meta.n_frame}
    embedder = instantiate(
        dict(model.get("embedder", {"type": "hashgrid"})), registry, "embedder", context
    )
    latent_dim = int(model.get("geometry_latent_dim", 8))
    if latent_dim > 0:
        embedder = Composed([embedder, LatentCodes(meta.n_frame, latent_dim, role="geometry")])

    deform_cfg = model.get("deformation", {})
    deformation = None
    if deform_cfg.get("enabled", False):
        deformation = DisplacementField(
            n_freqs=deform_cfg.get("n_freqs", 4),
            hidden=deform_cfg.get("hidden", 64),
            depth=deform_cfg.get("depth", 2),
        )

    reg_cfg = dict(model.get("regressor", {}))
    regressor = FieldRegressor(
        in_dim=embedder.out_dim,
        hidden=reg_cfg.get("hidden", 64),
        depth=reg_cfg.get("depth", 2),
        geo_feat_dim=reg_cfg.get("geo_feat_dim", 15),
        color_mode=reg_cfg.get("color_mode", "mlp_viewdir"),
        viewdir_freqs=reg_cfg.get("viewdir_freqs", 2),
        appearance_dim=reg_cfg.get("appearance_dim", 8),
        n_frames=meta.n_frame,
        density_bias=reg_cfg.get("density_bias", -1.0),
    )

    sampler = instantiate(
        dict(model.get("sampler", {"type": "uniform"})), registry, "sampler", context
    )
    if isinstance(sampler, ImportanceSampler):
        raise ConfigError(
            "the importance sampler resamples coarse weights and cannot be the base "
            "sampler; enable model.hierarchical instead"
        )

    hier = model.get("hierarchical", {})
    fine_sampler = None
    if hier.get("enabled", False):
        fine_sampler = ImportanceSampler(
            n_samples=hier.get("n_fine", 48),
            blur=hier.get("blur", True),
            eps=hier.get("eps", 1e-5),
        )

    background = cfg.get("train", {}).get("background", "black")
    if background in (None, "black"):
        bg = None
    elif background == "white":
        bg = (1.0, 1.0, 1.0)
    else:
        bg = tuple(float(c) for c in background)

    field = NeuralField(embedder, regressor, bounds, deformation)
    return Pipeline(sampler, field, background=bg, fine_sampler=fine_sampler)
