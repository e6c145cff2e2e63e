"""Rendering losses: Pearson-correlation depth loss and semantic cross-entropy.

Depth supervision is scale- and shift-invariant: the loss is 1 - rho with
rho the Pearson coefficient between rendered and ground-truth depth over the
valid mask, so rendered depth is only pinned up to an affine transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVariance, DimensionMismatch, EmptyMask

ALPHA_EXCLUDE = 1e-6  # pixels with less accumulated mass are unsupervised


@dataclass(frozen=True)
class DepthPair:
    """Rendered vs ground-truth depth with a validity mask."""

    rendered: np.ndarray
    ground_truth: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rendered, dtype=np.float64)
        g = np.asarray(self.ground_truth, dtype=np.float64)
        m = np.asarray(self.valid_mask, dtype=bool)
        if r.shape != g.shape or r.shape != m.shape:
            raise DimensionMismatch(
                f"depth shapes {r.shape}, {g.shape}, mask {m.shape} disagree"
            )
        if int(m.sum()) < 2:
            raise EmptyMask("Pearson correlation needs at least 2 valid pixels")
        if np.any(g[m] < 0.0):
            raise ValueError("ground-truth depth must be non-negative")
        object.__setattr__(self, "rendered", r)
        object.__setattr__(self, "ground_truth", g)
        object.__setattr__(self, "valid_mask", m)


def _centered(pair: DepthPair):
    r = pair.rendered[pair.valid_mask]
    g = pair.ground_truth[pair.valid_mask]
    rc = r - r.mean()
    gc = g - g.mean()
    srr = float(rc @ rc)
    sgg = float(gc @ gc)
    if srr == 0.0 or sgg == 0.0:
        raise DegenerateVariance("a depth map is constant on the valid mask")
    return rc, gc, srr, sgg


def pearson_depth_loss(pair: DepthPair) -> float:
    """1 - Pearson(rendered, gt) over valid pixels; 0 is perfect, 2 is worst."""
    rc, gc, srr, sgg = _centered(pair)
    rho = float(rc @ gc) / np.sqrt(srr * sgg)
    return 1.0 - rho


def pearson_depth_loss_grad(pair: DepthPair) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the rendered depth map (HxW)."""
    rc, gc, srr, sgg = _centered(pair)
    srg = float(rc @ gc)
    denom = np.sqrt(srr * sgg)
    rho = srg / denom
    # d rho / d r_i = (gc_i - (srg/srr) rc_i) / denom; loss = 1 - rho.
    g_valid = -(gc - (srg / srr) * rc) / denom
    grad = np.zeros_like(pair.rendered)
    grad[pair.valid_mask] = g_valid
    return 1.0 - rho, grad


def _ce_parts(class_dist, gt_labels, valid_mask, alpha_sum):
    class_dist = np.asarray(class_dist, dtype=np.float64)
    gt_labels = np.asarray(gt_labels)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if class_dist.shape[:2] != gt_labels.shape or gt_labels.shape != valid_mask.shape:
        raise DimensionMismatch(
            f"class_dist {class_dist.shape}, labels {gt_labels.shape}, "
            f"mask {valid_mask.shape} disagree"
        )
    if alpha_sum is None:
        alpha_sum = class_dist.sum(axis=2)
    else:
        alpha_sum = np.asarray(alpha_sum, dtype=np.float64)
        if alpha_sum.shape != gt_labels.shape:
            raise DimensionMismatch("alpha_sum shape disagrees with labels")
    mask = valid_mask & (alpha_sum >= ALPHA_EXCLUDE)
    if not np.any(mask):
        raise EmptyMask("no valid pixel has enough accumulated mass")
    ys, xs = np.nonzero(mask)
    hit = class_dist[ys, xs, gt_labels[ys, xs]]
    return alpha_sum, mask, ys, xs, hit


def semantic_ce_loss(class_dist, gt_labels, valid_mask, alpha_sum=None) -> float:
    """Mean over valid pixels of -log(normalized class mass at the gt label).

    Per-pixel mass is renormalized by alpha_sum (accumulated opacity) before
    the log; pixels with alpha_sum below 1e-6 are excluded. When alpha_sum is
    omitted it is taken as the per-pixel sum of class_dist.
    """
    alpha, mask, ys, xs, hit = _ce_parts(class_dist, gt_labels, valid_mask, alpha_sum)
    return float(np.mean(-np.log(hit / alpha[ys, xs])))


def semantic_ce_loss_grad(class_dist, gt_labels, valid_mask, alpha_sum):
    """Loss plus gradients w.r.t. class_dist (HxWxC) and alpha_sum (HxW).

    alpha_sum is required here: the gradient treats it as an independent
    input (the rasterizer backward consumes both pieces separately).
    """
    alpha, mask, ys, xs, hit = _ce_parts(class_dist, gt_labels, valid_mask, alpha_sum)
    a = alpha[ys, xs]
    n = len(ys)
    loss = float(np.mean(np.log(a) - np.log(hit)))
    g_class = np.zeros_like(np.asarray(class_dist, dtype=np.float64))
    g_class[ys, xs, np.asarray(gt_labels)[ys, xs]] = -1.0 / (n * hit)
    g_alpha = np.zeros_like(alpha)
    g_alpha[ys, xs] = 1.0 / (n * a)
    return loss, g_class, g_alpha


def img2occ_loss(view_losses) -> float:
    """Mean over views of (semantic CE + depth loss), both weighted 1.0.

    ``view_losses`` is a sequence of (semantic, depth) pairs.
    """
    pairs = list(view_losses)
    if not pairs:
        raise ValueError("at least one view is required")
    return float(np.mean([sem + dep for sem, dep in pairs]))
