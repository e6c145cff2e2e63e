"""Multi-view Gaussian training: fit anchored splats to depth + semantics.

One Gaussian per occupied voxel is initialized at the voxel center and
optimized with Adam against the per-view objective (semantic cross-entropy
plus Pearson depth loss, equally weighted and averaged over views), using
the analytic rasterizer gradients. The trained anchors read back into an
occupancy grid via their argmax class and an opacity threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CorruptHeader, EmptyDataset
from .losses import (
    DepthPair,
    pearson_depth_loss_grad,
    semantic_ce_loss_grad,
)
from .occupancy import SemanticVoxelGrid
from .splat import GaussianSet, anchor_init, rasterize, rasterize_backward
from .synthetic import project_ground_truth


@dataclass
class Img2OccConfig:
    steps: int = 120
    lr: float = 5e-3
    init_opacity: float = 0.9
    init_scale_fraction: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def view_losses_and_grads(gaussians: GaussianSet, camera, gt_depth, gt_semantic,
                          gt_valid):
    """One view's (sem, dep) losses and the parameter gradients."""
    view = rasterize(gaussians, camera)
    dep, g_depth = pearson_depth_loss_grad(
        DepthPair(view.depth, gt_depth, gt_valid)
    )
    sem, g_class, g_alpha = semantic_ce_loss_grad(
        view.class_dist, gt_semantic, gt_valid, view.alpha_sum
    )
    grads = rasterize_backward(gaussians, camera, g_depth, g_class, g_alpha)
    return sem, dep, grads


def train_img2occ(grid: SemanticVoxelGrid, cameras, config: Img2OccConfig,
                  callback=None):
    """Optimize anchored Gaussians against projected ground-truth views.

    Returns (gaussians, curve) with curve rows
    (step, loss_total, loss_sem, loss_dep) averaged over views.
    """
    cameras = list(cameras)
    if not cameras:
        raise EmptyDataset("training needs at least one camera view")
    views = [project_ground_truth(grid, cam) for cam in cameras]
    gaussians = anchor_init(grid, config.init_opacity, config.init_scale_fraction)
    params = {
        "means": gaussians.means,
        "quats": gaussians.quats,
        "log_scales": gaussians.log_scales,
        "opacity_logits": gaussians.opacity_logits,
        "class_logits": gaussians.class_logits,
    }
    opt = nn.Adam(params, lr=config.lr)
    nv = len(cameras)
    curve = []
    for step in range(config.steps):
        total_sem = 0.0
        total_dep = 0.0
        acc = {k: np.zeros_like(v) for k, v in params.items()}
        for cam, (gt_depth, gt_sem, gt_valid) in zip(cameras, views):
            sem, dep, grads = view_losses_and_grads(
                gaussians, cam, gt_depth, gt_sem, gt_valid
            )
            total_sem += sem
            total_dep += dep
            acc["means"] += grads.means
            acc["quats"] += grads.quats
            acc["log_scales"] += grads.log_scales
            acc["opacity_logits"] += grads.opacity_logits
            acc["class_logits"] += grads.class_logits
        for k in acc:
            acc[k] /= nv
        opt.step(acc)
        sem_mean, dep_mean = total_sem / nv, total_dep / nv
        curve.append((step, sem_mean + dep_mean, sem_mean, dep_mean))
        if callback is not None:
            callback(*curve[-1])
    return gaussians, curve


def save_gaussians(gaussians: GaussianSet, base, config: Img2OccConfig | None = None):
    arrays = {
        "means": gaussians.means,
        "quats": gaussians.quats,
        "log_scales": gaussians.log_scales,
        "opacity_logits": gaussians.opacity_logits,
        "class_logits": gaussians.class_logits,
    }
    meta = {"kind": "gaussians", "config": config.to_dict() if config else {}}
    if gaussians.anchor_indices is not None:
        arrays["anchor_indices"] = gaussians.anchor_indices.astype(np.float64)
        meta["has_anchors"] = True
    save_checkpoint(base, arrays, meta)


def load_gaussians(base) -> GaussianSet:
    arrays, meta = load_checkpoint(base)
    if meta.get("kind") != "gaussians":
        raise CorruptHeader(f"{base}: not a gaussian checkpoint")
    anchors = None
    if meta.get("has_anchors"):
        anchors = np.rint(arrays["anchor_indices"]).astype(np.int64)
    return GaussianSet(
        means=arrays["means"],
        quats=arrays["quats"],
        log_scales=arrays["log_scales"],
        opacity_logits=arrays["opacity_logits"],
        class_logits=arrays["class_logits"],
        anchor_indices=anchors,
    )
