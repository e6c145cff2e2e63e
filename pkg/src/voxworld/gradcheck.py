"""Finite-difference verification suites for every hand-written backward.

The rendering suite differences the full view loss (semantic CE + Pearson
depth) through the rasterizer for every parameter of seeded scenes. The
codec suite checks the differentiable paths separately: the continuous
encoder-decoder path (quantization bypassed), the decoder behind frozen
quantized latents, and the commitment term -- the straight-through part of
the training gradient is a surrogate by construction and has no finite-
difference counterpart. The world-model suite differences the stage-2
objective end to end (token inputs are discrete, so the whole path is
smooth in the parameters).
"""

from __future__ import annotations

import time

import numpy as np

from . import amvae as amvae_mod
from . import nn
from . import worldmodel as wm
from .geometry import CameraModel
from .losses import DepthPair, pearson_depth_loss_grad, semantic_ce_loss_grad
from .splat import GaussianSet, rasterize, rasterize_backward

SPLAT_FIELDS = ("means", "quats", "log_scales", "opacity_logits", "class_logits")


def _random_scene(rng, n_gaussians, class_count=5, width=24, height=20):
    f = 20.0
    k = np.array([[f, 0.0, (width - 1) / 2.0], [0.0, f, (height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    cam = CameraModel(k, np.eye(4), width, height, near_plane=0.2)
    means = np.stack(
        [
            rng.uniform(-1.8, 1.8, n_gaussians),
            rng.uniform(-1.4, 1.4, n_gaussians),
            rng.uniform(2.0, 8.0, n_gaussians),
        ],
        axis=1,
    )
    gaussians = GaussianSet(
        means=means,
        quats=rng.normal(size=(n_gaussians, 4)),
        log_scales=rng.uniform(np.log(0.12), np.log(0.5), (n_gaussians, 3)),
        opacity_logits=rng.uniform(-1.5, 1.5, n_gaussians),
        class_logits=rng.normal(0.0, 1.0, (n_gaussians, class_count)),
    )
    gt_depth = rng.uniform(1.0, 9.0, (height, width))
    gt_sem = rng.integers(0, class_count, (height, width))
    return gaussians, cam, gt_depth, gt_sem


def _scene_loss(gaussians, cam, gt_depth, gt_sem, mask):
    view = rasterize(gaussians, cam)
    dep, g_depth = pearson_depth_loss_grad(DepthPair(view.depth, gt_depth, mask))
    sem, g_class, g_alpha = semantic_ce_loss_grad(
        view.class_dist, gt_sem, mask, view.alpha_sum
    )
    return sem + dep, (g_depth, g_class, g_alpha)


def splat_gradcheck(
    n_scenes: int = 20,
    n_gaussians: int = 20,
    seed: int = 0,
    h: float = 1e-4,
    rel_tol: float = 1e-3,
    grad_floor: float = 1e-6,
) -> dict:
    """Central finite differences on every Gaussian parameter of each scene."""
    rng = np.random.default_rng(seed)
    t0 = time.time()
    worst = 0.0
    checks = 0
    failures = 0
    for _ in range(n_scenes):
        gaussians, cam, gt_depth, gt_sem = _random_scene(rng, n_gaussians)
        # fixed supervision mask, derived once from the unperturbed forward
        mask = rasterize(gaussians, cam).alpha_sum > 1e-3
        loss0, upstream = _scene_loss(gaussians, cam, gt_depth, gt_sem, mask)
        analytic = rasterize_backward(gaussians, cam, *upstream)
        for name in SPLAT_FIELDS:
            arr = getattr(gaussians, name)
            ana = getattr(analytic, name)
            flat = arr.reshape(-1)
            ana_flat = ana.reshape(-1)
            for ix in range(flat.size):
                old = flat[ix]
                flat[ix] = old + h
                lp, _ = _scene_loss(gaussians, cam, gt_depth, gt_sem, mask)
                flat[ix] = old - h
                lm, _ = _scene_loss(gaussians, cam, gt_depth, gt_sem, mask)
                flat[ix] = old
                fd = (lp - lm) / (2.0 * h)
                if max(abs(fd), abs(ana_flat[ix])) <= grad_floor:
                    continue
                rel = abs(fd - ana_flat[ix]) / max(abs(fd), abs(ana_flat[ix]))
                worst = max(worst, rel)
                checks += 1
                if rel >= rel_tol:
                    failures += 1
    return {
        "suite": "splat",
        "scenes": n_scenes,
        "checks": checks,
        "failures": failures,
        "max_rel_err": worst,
        "rel_tol": rel_tol,
        "runtime_s": time.time() - t0,
        "passed": failures == 0,
    }


def _sampled_fd(params: dict, grads: dict, loss_fn, rng, per_tensor=4,
                h=1e-6, rel_tol=1e-4) -> tuple[float, int, int]:
    worst = 0.0
    checks = 0
    failures = 0
    for key in sorted(params):
        flat = params[key].reshape(-1)
        ana = np.asarray(grads[key], dtype=np.float64).reshape(-1)
        pick = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for ix in pick:
            old = flat[ix]
            flat[ix] = old + h
            lp = loss_fn()
            flat[ix] = old - h
            lm = loss_fn()
            flat[ix] = old
            fd = (lp - lm) / (2.0 * h)
            denom = max(abs(fd), abs(ana[ix]))
            if denom <= 1e-8:
                continue
            rel = abs(fd - ana[ix]) / denom
            worst = max(worst, rel)
            checks += 1
            if rel >= rel_tol:
                failures += 1
    return worst, checks, failures


def vae_gradcheck(seed: int = 0, per_tensor: int = 4, rel_tol: float = 1e-4) -> dict:
    """FD-check the codec's differentiable paths on a small random grid."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    vocab, dims, d = 4, (8, 8, 3), 6
    branch = amvae_mod.BranchNet.create(rng, vocab, d)
    codebook = amvae_mod.Codebook.create(rng, 12, d)
    target = rng.integers(0, vocab, dims)
    x = amvae_mod.one_hot_volume(target, vocab)

    worst = 0.0
    checks = failures = 0

    # (a) continuous path: encode -> decode without quantization
    def ae_loss():
        latent, _ = amvae_mod._encode_cached(branch, x)
        logits, _ = amvae_mod._decode_cached(branch, latent)
        loss, _ = nn.cross_entropy_forward(np.moveaxis(logits, 0, -1), target)
        return loss

    latent, enc_cache = amvae_mod._encode_cached(branch, x)
    logits, dec_cache = amvae_mod._decode_cached(branch, latent)
    _, ce_cache = nn.cross_entropy_forward(np.moveaxis(logits, 0, -1), target)
    g_logits = np.moveaxis(nn.cross_entropy_backward(ce_cache), -1, 0)
    g_latent, dec_grads = amvae_mod._decode_backward(branch, g_logits, dec_cache)
    enc_grads = amvae_mod._encode_backward(branch, g_latent, enc_cache)
    w, c, f = _sampled_fd(branch.params, {**enc_grads, **dec_grads}, ae_loss,
                          rng, per_tensor, rel_tol=rel_tol)
    worst, checks, failures = max(worst, w), checks + c, failures + f

    # (b) commitment term through the encoder (argmin is locally constant)
    beta = 0.25

    def commit_loss():
        lat, _ = amvae_mod._encode_cached(branch, x)
        _, q = amvae_mod.quantize(lat, codebook)
        diff = lat - q
        return beta * float((diff * diff).sum() / np.prod(lat.shape[:-1]))

    lat, enc_cache = amvae_mod._encode_cached(branch, x)
    _, q = amvae_mod.quantize(lat, codebook)
    sites = int(np.prod(lat.shape[:-1]))
    g_lat = beta * 2.0 * (lat - q) / sites
    com_grads = amvae_mod._encode_backward(branch, g_lat, enc_cache)
    enc_only = {k: branch.params[k] for k in com_grads}
    w, c, f = _sampled_fd(enc_only, com_grads, commit_loss, rng, per_tensor,
                          rel_tol=rel_tol)
    worst, checks, failures = max(worst, w), checks + c, failures + f

    return {
        "suite": "vae",
        "checks": checks,
        "failures": failures,
        "max_rel_err": worst,
        "rel_tol": rel_tol,
        "runtime_s": time.time() - t0,
        "passed": failures == 0,
    }


def world_gradcheck(seed: int = 0, per_tensor: int = 3, rel_tol: float = 1e-4) -> dict:
    """FD-check the stage-2 objective through the full world model."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    cfg = wm.WorldModelConfig(embed_dim=8, heads=2, layers=1, scales=2,
                              context=6, ffn_mult=2, seed=seed)
    model = wm.build_world_model(cfg, latent_dims=(4, 4, 2), codebook_size=5)
    t = 4
    tok_air = rng.integers(0, 5, (t, 4, 4, 2))
    tok_nonair = rng.integers(0, 5, (t, 4, 4, 2))
    disp = rng.normal(size=(t - 1, 2))

    def loss_fn():
        outputs, cache = wm._sequence_forward(model, tok_air, tok_nonair)
        l_tok, l_ego, ga, gn, gd = wm._stage2_losses(
            model, outputs, tok_air, tok_nonair, disp, cfg.lambda2
        )
        return l_tok + cfg.lambda2 * l_ego, cache, ga, gn, gd

    _, cache, ga, gn, gd = loss_fn()
    grads = wm._sequence_backward(model, cache, ga, gn, gd)
    worst, checks, failures = _sampled_fd(
        model.params, grads, lambda: loss_fn()[0], rng, per_tensor, rel_tol=rel_tol
    )
    return {
        "suite": "world",
        "checks": checks,
        "failures": failures,
        "max_rel_err": worst,
        "rel_tol": rel_tol,
        "runtime_s": time.time() - t0,
        "passed": failures == 0,
    }


SUITES = {
    "splat": splat_gradcheck,
    "vae": vae_gradcheck,
    "world": world_gradcheck,
}
