"""Autoregressive occupancy world model with masked temporal attention.

Scene tokenization embeds the codec's discrete air/non-air tokens per
latent column, collapses the vertical axis with a linear projection, and
aggregates a coarser scale by 2x2 mean pooling plus a linear mix. Each
scale owns a temporal transformer that attends, per spatial position, only
over that position's own history (causal mask); cross-position mixing
happens solely through the scale hierarchy, where coarse predictions
condition fine ones by nearest-neighbor upsampled addition. The finest
scale carries classification heads over the two codebook vocabularies and
a linear ego-displacement decoder fed by an extra ego slot that runs
through the same temporal attention.

Training is two-stage: stage 1 fits the occupancy tokenizer/decoder with a
voxel cross-entropy plus Lovasz-softmax objective; stage 2 freezes it and
fits the temporal models with teacher forcing on next-step token
classification plus a squared-L2 ego displacement term. Forecasting rolls
the model out autoregressively on its own predicted tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import amvae as amvae_mod
from . import nn
from .amvae import AmvaeModel, encode_scene
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContextOverflow, CorruptHeader, EmptyDataset, UntrainedTokenizer
from .occupancy import SemanticVoxelGrid
from .synthetic import SceneSequence


# ---------------------------------------------------------------------------
# Lovasz-softmax


def _lovasz_grad_vector(fg_sorted: np.ndarray) -> np.ndarray:
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_softmax_grad(probs: np.ndarray, labels: np.ndarray):
    """Lovasz-softmax loss and its (sub)gradient w.r.t. the probabilities.

    probs has shape (..., C) with rows summing to 1; labels are integer
    class ids. The loss is the mean, over non-air classes present in the
    labels, of the Lovasz extension of that class's Jaccard loss applied to
    its absolute error vector (sorted-cumulative-gradient form). Class 0 is
    excluded from the mean, mirroring the occupancy mIoU convention.
    """
    probs = np.asarray(probs, dtype=np.float64)
    c = probs.shape[-1]
    flat = probs.reshape(-1, c)
    lab = np.asarray(labels).reshape(-1)
    grad = np.zeros_like(flat)
    present = [int(k) for k in np.unique(lab) if k != 0]
    if not present:
        return 0.0, grad.reshape(probs.shape)
    total = 0.0
    for cls in present:
        fg = (lab == cls).astype(np.float64)
        errors = np.abs(fg - flat[:, cls])
        order = np.argsort(-errors, kind="stable")
        gvec = _lovasz_grad_vector(fg[order])
        total += float(errors[order] @ gvec)
        derr = np.zeros_like(errors)
        derr[order] = gvec
        grad[:, cls] += np.where(fg > 0.5, -derr, derr)
    total /= len(present)
    grad /= len(present)
    return total, grad.reshape(probs.shape)


def lovasz_softmax(probs: np.ndarray, labels: np.ndarray) -> float:
    """Loss-only wrapper around lovasz_softmax_grad."""
    loss, _ = lovasz_softmax_grad(probs, labels)
    return loss


def lovasz_softmax_logits_grad(logits_cf: np.ndarray, labels: np.ndarray):
    """Loss and gradient w.r.t. channels-first logits (C, X, Y, Z)."""
    probs = nn.softmax(np.moveaxis(logits_cf, 0, -1), axis=-1)
    loss, gp = lovasz_softmax_grad(probs, labels)
    dot = (gp * probs).sum(axis=-1, keepdims=True)
    glog = probs * (gp - dot)
    return loss, np.moveaxis(glog, -1, 0)


# ---------------------------------------------------------------------------
# configuration and parameter construction


@dataclass
class WorldModelConfig:
    embed_dim: int = 128
    heads: int = 4
    layers: int = 2
    scales: int = 2  # scale 0 plus coarser aggregations
    context: int = 16  # maximum history length in frames
    ffn_mult: int = 4
    stage2_steps: int = 1500
    stage2_lr: float = 1e-3
    lambda2: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneTokens:
    """Per-scale 2D embedding fields for one frame (scale 0 finest)."""

    fields: list  # scale i -> (Xi, Yi, E)


@dataclass
class EgoToken:
    embedding: np.ndarray  # (E,)
    displacement: np.ndarray  # (2,) decoded meters


@dataclass
class WorldModel:
    config: WorldModelConfig
    latent_dims: tuple  # (Xl, Yl, Z) token grid shape
    codebook_size: int
    params: dict

    def scale_dims(self) -> list:
        dims = [(self.latent_dims[0], self.latent_dims[1])]
        for _ in range(1, self.config.scales):
            x, y = dims[-1]
            dims.append(((x + 1) // 2, (y + 1) // 2))
        return dims


def build_world_model(
    config: WorldModelConfig, latent_dims: tuple, codebook_size: int
) -> WorldModel:
    rng = np.random.default_rng(config.seed)
    xl, yl, z = latent_dims
    e = config.embed_dim
    k = codebook_size
    p: dict = {}
    p["emb_air"] = rng.normal(0.0, 0.02, size=(k, e))
    p["emb_nonair"] = rng.normal(0.0, 0.02, size=(k, e))
    p["zproj_w"] = nn.he_init(rng, (z * e, e), z * e)
    p["zproj_b"] = np.zeros(e)
    p["ego_start"] = rng.normal(0.0, 0.02, size=e)

    model = WorldModel(config, (xl, yl, z), k, p)
    dims = model.scale_dims()
    for i in range(1, config.scales):
        p[f"pool{i}_w"] = nn.he_init(rng, (e, e), e)
        p[f"pool{i}_b"] = np.zeros(e)
    for i, (sx, sy) in enumerate(dims):
        positions = sx * sy + (1 if i == 0 else 0)
        p[f"s{i}_pos_spatial"] = rng.normal(0.0, 0.02, size=(positions, e))
        p[f"s{i}_pos_time"] = rng.normal(0.0, 0.02, size=(config.context, e))
        for l in range(config.layers):
            pre = f"s{i}_l{l}"
            p[f"{pre}_ln1_g"] = np.ones(e)
            p[f"{pre}_ln1_b"] = np.zeros(e)
            p[f"{pre}_qkv_w"] = nn.he_init(rng, (e, 3 * e), e)
            p[f"{pre}_qkv_b"] = np.zeros(3 * e)
            p[f"{pre}_out_w"] = nn.he_init(rng, (e, e), e)
            p[f"{pre}_out_b"] = np.zeros(e)
            p[f"{pre}_ln2_g"] = np.ones(e)
            p[f"{pre}_ln2_b"] = np.zeros(e)
            p[f"{pre}_ffn1_w"] = nn.he_init(rng, (e, config.ffn_mult * e), e)
            p[f"{pre}_ffn1_b"] = np.zeros(config.ffn_mult * e)
            p[f"{pre}_ffn2_w"] = nn.he_init(rng, (config.ffn_mult * e, e), config.ffn_mult * e)
            p[f"{pre}_ffn2_b"] = np.zeros(e)
        p[f"s{i}_lnf_g"] = np.ones(e)
        p[f"s{i}_lnf_b"] = np.zeros(e)
        p[f"s{i}_pred_w"] = nn.he_init(rng, (e, e), e)
        p[f"s{i}_pred_b"] = np.zeros(e)
    p["head_air_w"] = nn.he_init(rng, (e, z * k), e)
    p["head_air_b"] = np.zeros(z * k)
    p["head_nonair_w"] = nn.he_init(rng, (e, z * k), e)
    p["head_nonair_b"] = np.zeros(z * k)
    p["ego_w"] = nn.he_init(rng, (e, 2), e)
    p["ego_b"] = np.zeros(2)
    return model


# ---------------------------------------------------------------------------
# pooling / upsampling between scales


def _pool2x2_forward(x: np.ndarray):
    """Mean over 2x2 spatial blocks of (T, X, Y, E); odd edges truncate."""
    t, sx, sy, e = x.shape
    xo, yo = (sx + 1) // 2, (sy + 1) // 2
    out = np.zeros((t, xo, yo, e))
    count = np.zeros((xo, yo))
    for dx in (0, 1):
        for dy in (0, 1):
            sub = x[:, dx::2, dy::2]
            out[:, : sub.shape[1], : sub.shape[2]] += sub
            count[: sub.shape[1], : sub.shape[2]] += 1.0
    out /= count[None, :, :, None]
    return out, (x.shape, count)


def _pool2x2_backward(grad, cache):
    shape, count = cache
    spread = grad / count[None, :, :, None]
    gx = np.zeros(shape)
    for dx in (0, 1):
        for dy in (0, 1):
            sub = gx[:, dx::2, dy::2]
            sub += spread[:, : sub.shape[1], : sub.shape[2]]
    return gx


def _upsample2x_forward(coarse: np.ndarray, fine_xy: tuple) -> np.ndarray:
    """Nearest-neighbor upsample (T, Xc, Yc, E) -> (T, Xf, Yf, E)."""
    fx, fy = fine_xy
    ix = np.arange(fx) // 2
    iy = np.arange(fy) // 2
    return coarse[:, ix][:, :, iy]


def _upsample2x_backward(grad, coarse_xy: tuple) -> np.ndarray:
    t, fx, fy, e = grad.shape
    cx, cy = coarse_xy
    out = np.zeros((t, cx, cy, e))
    ix = np.arange(fx) // 2
    iy = np.arange(fy) // 2
    np.add.at(out, (slice(None), ix[:, None], iy[None, :]), grad)
    return out


# ---------------------------------------------------------------------------
# transformer trunk (shared by training and rollout)


def _trunk_forward(model: WorldModel, scale: int, x: np.ndarray, want_attn=False):
    """x: (P, T, E) with positions/time embeddings already added."""
    p = model.params
    cfg = model.config
    caches = []
    attns = []
    h = x
    for l in range(cfg.layers):
        pre = f"s{scale}_l{l}"
        a, c_ln1 = nn.layernorm_forward(h, p[f"{pre}_ln1_g"], p[f"{pre}_ln1_b"])
        att, c_att, attn = nn.causal_attention_forward(
            a, p[f"{pre}_qkv_w"], p[f"{pre}_qkv_b"],
            p[f"{pre}_out_w"], p[f"{pre}_out_b"], cfg.heads,
        )
        h = h + att
        f, c_ln2 = nn.layernorm_forward(h, p[f"{pre}_ln2_g"], p[f"{pre}_ln2_b"])
        f1, c_f1 = nn.linear_forward(f, p[f"{pre}_ffn1_w"], p[f"{pre}_ffn1_b"])
        act, c_act = nn.silu_forward(f1)
        f2, c_f2 = nn.linear_forward(act, p[f"{pre}_ffn2_w"], p[f"{pre}_ffn2_b"])
        h = h + f2
        caches.append((c_ln1, c_att, c_ln2, c_f1, c_act, c_f2))
        if want_attn:
            attns.append(attn)
    out, c_lnf = nn.layernorm_forward(h, p[f"s{scale}_lnf_g"], p[f"s{scale}_lnf_b"])
    pred, c_pred = nn.linear_forward(out, p[f"s{scale}_pred_w"], p[f"s{scale}_pred_b"])
    return pred, (caches, c_lnf, c_pred), attns


def _trunk_backward(model: WorldModel, scale: int, grad_pred, cache, grads: dict):
    def acc(key, val):
        grads[key] = grads.get(key, 0) + val

    caches, c_lnf, c_pred = cache
    cfg = model.config
    g_out, gw, gb = nn.linear_backward(grad_pred, c_pred)
    acc(f"s{scale}_pred_w", gw)
    acc(f"s{scale}_pred_b", gb)
    gh, gg, gb = nn.layernorm_backward(g_out, c_lnf)
    acc(f"s{scale}_lnf_g", gg)
    acc(f"s{scale}_lnf_b", gb)
    for l in range(cfg.layers - 1, -1, -1):
        pre = f"s{scale}_l{l}"
        c_ln1, c_att, c_ln2, c_f1, c_act, c_f2 = caches[l]
        g_act, gw, gb = nn.linear_backward(gh, c_f2)
        acc(f"{pre}_ffn2_w", gw)
        acc(f"{pre}_ffn2_b", gb)
        g_f1 = nn.silu_backward(g_act, c_act)
        g_f, gw, gb = nn.linear_backward(g_f1, c_f1)
        acc(f"{pre}_ffn1_w", gw)
        acc(f"{pre}_ffn1_b", gb)
        g_mid, gg, gb = nn.layernorm_backward(g_f, c_ln2)
        acc(f"{pre}_ln2_g", gg)
        acc(f"{pre}_ln2_b", gb)
        gh = gh + g_mid
        g_a, gwq, gbq, gwo, gbo = nn.causal_attention_backward(gh, c_att)
        acc(f"{pre}_qkv_w", gwq)
        acc(f"{pre}_qkv_b", gbq)
        acc(f"{pre}_out_w", gwo)
        acc(f"{pre}_out_b", gbo)
        g_pre, gg, gb = nn.layernorm_backward(g_a, c_ln1)
        acc(f"{pre}_ln1_g", gg)
        acc(f"{pre}_ln1_b", gb)
        gh = gh + g_pre
    return gh


# ---------------------------------------------------------------------------
# scene embedding (token grids -> per-scale fields)


def _fields_forward(model: WorldModel, tok_air: np.ndarray, tok_nonair: np.ndarray):
    """Token grids (T, Xl, Yl, Z) -> list of per-scale fields (T, Xi, Yi, E)."""
    p = model.params
    e_air, c_air = nn.embedding_forward(p["emb_air"], tok_air)
    e_nonair, c_nonair = nn.embedding_forward(p["emb_nonair"], tok_nonair)
    s = e_air + e_nonair  # (T, X, Y, Z, E)
    t, xl, yl, z, e = s.shape
    flat = s.reshape(t, xl, yl, z * e)
    f0, c_z = nn.linear_forward(flat, p["zproj_w"], p["zproj_b"])
    fields = [f0]
    pools = []
    for i in range(1, model.config.scales):
        pooled, c_pool = _pool2x2_forward(fields[-1])
        mixed, c_mix = nn.linear_forward(pooled, p[f"pool{i}_w"], p[f"pool{i}_b"])
        fields.append(mixed)
        pools.append((c_pool, c_mix))
    return fields, (c_air, c_nonair, (t, xl, yl, z, e), c_z, pools)


def _fields_backward(model: WorldModel, g_fields, cache, grads: dict):
    c_air, c_nonair, shape, c_z, pools = cache
    for i in range(model.config.scales - 1, 0, -1):
        c_pool, c_mix = pools[i - 1]
        g_pooled, gw, gb = nn.linear_backward(g_fields[i], c_mix)
        grads[f"pool{i}_w"] = grads.get(f"pool{i}_w", 0) + gw
        grads[f"pool{i}_b"] = grads.get(f"pool{i}_b", 0) + gb
        g_fields[i - 1] = g_fields[i - 1] + _pool2x2_backward(g_pooled, c_pool)
    t, xl, yl, z, e = shape
    g_flat, gw, gb = nn.linear_backward(g_fields[0], c_z)
    grads["zproj_w"] = grads.get("zproj_w", 0) + gw
    grads["zproj_b"] = grads.get("zproj_b", 0) + gb
    g_s = g_flat.reshape(t, xl, yl, z, e)
    grads["emb_air"] = grads.get("emb_air", 0) + nn.embedding_backward(g_s, c_air)
    grads["emb_nonair"] = grads.get("emb_nonair", 0) + nn.embedding_backward(g_s, c_nonair)


# ---------------------------------------------------------------------------
# full forward over a token sequence


def _sequence_forward(model: WorldModel, tok_air, tok_nonair, want_attn=False):
    """Run all scales over a (T, Xl, Yl, Z) token history.

    Returns (outputs, cache). Outputs: logits_air/logits_nonair of shape
    (T, Xl, Yl, Z, K) with row t predicting frame t+1, ego displacement
    predictions (T, 2), and per-scale predicted embeddings.
    """
    t = tok_air.shape[0]
    cfg = model.config
    if t > cfg.context:
        raise ContextOverflow(f"history of {t} frames exceeds context {cfg.context}")
    p = model.params
    dims = model.scale_dims()
    fields, f_cache = _fields_forward(model, tok_air, tok_nonair)

    preds = []
    trunk_caches = []
    attns = []
    for i, (sx, sy) in enumerate(dims):
        x = fields[i].reshape(t, sx * sy, -1).transpose(1, 0, 2)
        if i == 0:
            ego_row = np.broadcast_to(p["ego_start"], (1, t, cfg.embed_dim))
            x = np.concatenate([x, ego_row], axis=0)
        x = x + p[f"s{i}_pos_spatial"][:, None, :] + p[f"s{i}_pos_time"][None, :t, :]
        pred, cache, attn = _trunk_forward(model, i, x, want_attn)
        preds.append(pred)
        trunk_caches.append(cache)
        attns.append(attn)

    # coarse-to-fine conditioning on the predicted embeddings
    cond = None
    cond_fields = [None] * cfg.scales
    for i in range(cfg.scales - 1, -1, -1):
        sx, sy = dims[i]
        grid_pred = preds[i][: sx * sy].transpose(1, 0, 2).reshape(t, sx, sy, -1)
        if cond is None:
            cond = grid_pred
        else:
            cond = grid_pred + _upsample2x_forward(cond, (sx, sy))
        cond_fields[i] = cond

    xl, yl, z = model.latent_dims
    k = model.codebook_size
    cond0 = cond_fields[0]  # (T, Xl, Yl, E)
    la, c_ha = nn.linear_forward(cond0, p["head_air_w"], p["head_air_b"])
    ln, c_hn = nn.linear_forward(cond0, p["head_nonair_w"], p["head_nonair_b"])
    logits_air = la.reshape(t, xl, yl, z, k)
    logits_nonair = ln.reshape(t, xl, yl, z, k)
    ego_pred = preds[0][-1]  # (T, E)
    disp, c_ego = nn.linear_forward(ego_pred, p["ego_w"], p["ego_b"])

    cache = {
        "f_cache": f_cache,
        "trunk_caches": trunk_caches,
        "dims": dims,
        "t": t,
        "c_ha": c_ha,
        "c_hn": c_hn,
        "c_ego": c_ego,
    }
    outputs = {
        "logits_air": logits_air,
        "logits_nonair": logits_nonair,
        "disp": disp,
        "preds": preds,
        "attns": attns,
    }
    return outputs, cache


def _sequence_backward(model: WorldModel, cache, g_logits_air, g_logits_nonair, g_disp):
    cfg = model.config
    p = model.params
    t = cache["t"]
    dims = cache["dims"]
    grads: dict = {}

    g_cond0_a, gw, gb = nn.linear_backward(
        g_logits_air.reshape(t, dims[0][0], dims[0][1], -1), cache["c_ha"]
    )
    grads["head_air_w"] = gw
    grads["head_air_b"] = gb
    g_cond0_n, gw, gb = nn.linear_backward(
        g_logits_nonair.reshape(t, dims[0][0], dims[0][1], -1), cache["c_hn"]
    )
    grads["head_nonair_w"] = gw
    grads["head_nonair_b"] = gb
    g_cond = g_cond0_a + g_cond0_n

    g_ego_pred, gw, gb = nn.linear_backward(g_disp, cache["c_ego"])
    grads["ego_w"] = gw
    grads["ego_b"] = gb

    # walk the conditioning chain fine-to-coarse
    g_fields = [None] * cfg.scales
    for i in range(cfg.scales):
        sx, sy = dims[i]
        g_grid_pred = g_cond  # gradient on this scale's predicted grid field
        if i + 1 < cfg.scales:
            g_cond = _upsample2x_backward(g_cond, dims[i + 1])
        g_pred = g_grid_pred.reshape(t, sx * sy, -1).transpose(1, 0, 2)
        if i == 0:
            g_pred = np.concatenate([g_pred, g_ego_pred[None]], axis=0)
        gx = _trunk_backward(model, i, g_pred, cache["trunk_caches"][i], grads)
        grads[f"s{i}_pos_spatial"] = grads.get(f"s{i}_pos_spatial", 0) + gx.sum(axis=1)
        gt_time = gx.sum(axis=0)
        full_time = np.zeros_like(p[f"s{i}_pos_time"])
        full_time[:t] = gt_time
        grads[f"s{i}_pos_time"] = grads.get(f"s{i}_pos_time", 0) + full_time
        if i == 0:
            grads["ego_start"] = grads.get("ego_start", 0) + gx[-1].sum(axis=0)
            gx = gx[:-1]
        g_fields[i] = gx.transpose(1, 0, 2).reshape(t, sx, sy, -1)

    _fields_backward(model, g_fields, cache["f_cache"], grads)
    return grads


# ---------------------------------------------------------------------------
# public single-frame/step operations


def tokenize_scene(grid: SemanticVoxelGrid, codec: AmvaeModel, model: WorldModel):
    """One frame -> SceneTokens (per-scale fields) plus the EgoToken."""
    if codec is None:
        raise UntrainedTokenizer("a trained occupancy codec is required")
    if not codec.air_mask:
        raise UntrainedTokenizer("scene tokenization expects the dual-branch codec")
    toks = encode_scene(grid, codec)
    fields, _ = _fields_forward(
        model, toks["air"][None], toks["nonair"][None]
    )
    ego_emb = model.params["ego_start"]
    disp = ego_emb @ model.params["ego_w"] + model.params["ego_b"]
    return (
        SceneTokens(fields=[f[0] for f in fields]),
        EgoToken(embedding=ego_emb.copy(), displacement=disp),
    )


def temporal_attention_step(
    model: WorldModel, scale: int, history: np.ndarray, return_attn: bool = False
):
    """Predict the next embedding for each position from its own history.

    history: (P, L, E) per-position embeddings for times T-L+1..T, matching
    the scale's position count (scale 0 includes the ego slot as the last
    row). Returns (P, E), plus per-layer attention tensors when requested.
    """
    history = np.asarray(history, dtype=np.float64)
    p_count, length, e = history.shape
    if length > model.config.context:
        raise ContextOverflow(
            f"history of {length} frames exceeds context {model.config.context}"
        )
    x = history + (
        model.params[f"s{scale}_pos_spatial"][:, None, :]
        + model.params[f"s{scale}_pos_time"][None, :length, :]
    )
    pred, _, attns = _trunk_forward(model, scale, x, want_attn=return_attn)
    if return_attn:
        return pred[:, -1, :], attns
    return pred[:, -1, :]


# ---------------------------------------------------------------------------
# stage 1: tokenizer/decoder training (cross-entropy + Lovasz)


def stage1_train(
    grids,
    codec: AmvaeModel | None,
    lambda1: float = 1.0,
    steps: int = 800,
    lr: float = 2e-3,
    seed: int = 0,
    codec_config: amvae_mod.AmvaeConfig | None = None,
    callback=None,
    stop_fn=None,
    stop_every: int = 0,
):
    """Train (or continue training) the occupancy tokenizer and decoder.

    Objective per branch: voxel cross-entropy plus lambda1 times the
    Lovasz-softmax loss; codebooks update by EMA assignment. Returns
    (codec, curve) with curve rows (step, ce, lovasz, total).
    """
    grids = list(grids)
    if not grids:
        raise EmptyDataset("stage-1 training needs at least one grid")
    if codec is None:
        cfg = codec_config or amvae_mod.AmvaeConfig(seed=seed)
        codec = amvae_mod.build_model(cfg, grids[0].class_count)
    rng = np.random.default_rng(seed + 17)
    opts = {
        name: nn.Adam(branch.params, lr=lr)
        for name, branch in codec.branches.items()
    }
    curve = []
    for step in range(steps):
        grid = grids[rng.integers(len(grids))]
        targets = codec.branch_targets(grid)
        tot_ce = 0.0
        tot_lov = 0.0
        for name, target in targets.items():
            aux = {}

            def aux_loss(logits, target=target, aux=aux):
                loss, g = lovasz_softmax_logits_grad(logits, target)
                aux["loss"] = loss
                return lambda1 * g

            ce, _, grads, flat, tokens, _ = amvae_mod._branch_step(
                codec.branches[name],
                codec.codebooks[name],
                target,
                beta=0.0,
                extra_logit_grad_fn=aux_loss,
            )
            opts[name].step(grads)
            codec.codebooks[name].ema_update(
                flat, tokens, codec.config.ema_decay,
                codec.config.dead_entry_steps, rng,
            )
            tot_ce += ce
            tot_lov += aux.get("loss", 0.0)
        total = tot_ce + lambda1 * tot_lov
        curve.append((step, tot_ce, tot_lov, total))
        if callback is not None:
            callback(step, tot_ce, tot_lov, total)
        if stop_fn is not None and stop_every and (step + 1) % stop_every == 0:
            if stop_fn(codec):
                break
    return codec, curve


# ---------------------------------------------------------------------------
# stage 2: temporal model + ego decoder training


def _sequence_tokens(codec: AmvaeModel, seq: SceneSequence):
    airs, nonairs = [], []
    for frame in seq.frames:
        toks = encode_scene(frame, codec)
        airs.append(toks["air"])
        nonairs.append(toks["nonair"])
    return np.stack(airs), np.stack(nonairs), seq.displacements


def _stage2_losses(model: WorldModel, outputs, tok_air, tok_nonair, disp, lambda2):
    """Teacher-forced losses; rows 0..T-2 predict frames 1..T-1."""
    t = tok_air.shape[0]
    ce_air, ca = nn.cross_entropy_forward(outputs["logits_air"][: t - 1], tok_air[1:])
    ce_nonair, cn = nn.cross_entropy_forward(
        outputs["logits_nonair"][: t - 1], tok_nonair[1:]
    )
    g_air = np.zeros_like(outputs["logits_air"])
    g_air[: t - 1] = nn.cross_entropy_backward(ca)
    g_nonair = np.zeros_like(outputs["logits_nonair"])
    g_nonair[: t - 1] = nn.cross_entropy_backward(cn)

    diff = outputs["disp"][: t - 1] - disp[: t - 1]
    l_ego = float((diff * diff).sum() / (t - 1))
    g_disp = np.zeros_like(outputs["disp"])
    g_disp[: t - 1] = lambda2 * 2.0 * diff / (t - 1)
    l_tok = ce_air + ce_nonair
    return l_tok, l_ego, g_air, g_nonair, g_disp


def stage2_train(
    sequences,
    codec: AmvaeModel,
    config: WorldModelConfig,
    callback=None,
):
    """Fit the sub-world models and ego decoder on frozen stage-1 tokens.

    Returns (model, curve) with curve rows (step, token_ce, ego_l2, total).
    """
    seqs = list(sequences)
    if not seqs:
        raise EmptyDataset("stage-2 training needs at least one sequence")
    for s in seqs:
        if len(s.frames) < 2:
            raise EmptyDataset("sequences need at least 2 frames")
    encoded = [_sequence_tokens(codec, s) for s in seqs]
    xl, yl, z = encoded[0][0].shape[1:]
    model = build_world_model(config, (xl, yl, z), codec.config.codebook_size)
    opt = nn.Adam(model.params, lr=config.stage2_lr)
    rng = np.random.default_rng(config.seed + 29)
    curve = []
    for step in range(config.stage2_steps):
        tok_air, tok_nonair, disp = encoded[rng.integers(len(encoded))]
        outputs, cache = _sequence_forward(model, tok_air, tok_nonair)
        l_tok, l_ego, g_air, g_nonair, g_disp = _stage2_losses(
            model, outputs, tok_air, tok_nonair, disp, config.lambda2
        )
        grads = _sequence_backward(model, cache, g_air, g_nonair, g_disp)
        opt.step(grads)
        total = l_tok + config.lambda2 * l_ego
        curve.append((step, l_tok, l_ego, total))
        if callback is not None:
            callback(step, l_tok, l_ego, total)
    return model, curve


# ---------------------------------------------------------------------------
# forecasting


def forecast(
    model: WorldModel,
    codec: AmvaeModel,
    history,
    horizon: int,
):
    """Roll the world model out for `horizon` frames past the history.

    history: list of SemanticVoxelGrid (at least one frame). Returns
    (predicted grids, predicted displacements (horizon, 2)); predictions
    feed back autoregressively.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    frames = list(history)
    if not frames:
        raise EmptyDataset("forecast needs at least one history frame")
    airs, nonairs = [], []
    for frame in frames:
        toks = encode_scene(frame, codec)
        airs.append(toks["air"])
        nonairs.append(toks["nonair"])
    like = frames[-1]
    pred_grids = []
    pred_disp = np.zeros((horizon, 2))
    for step in range(horizon):
        tok_air = np.stack(airs[-model.config.context :])
        tok_nonair = np.stack(nonairs[-model.config.context :])
        outputs, _ = _sequence_forward(model, tok_air, tok_nonair)
        next_air = np.argmax(outputs["logits_air"][-1], axis=-1).astype(np.int32)
        next_nonair = np.argmax(outputs["logits_nonair"][-1], axis=-1).astype(np.int32)
        pred_disp[step] = outputs["disp"][-1]
        grid = amvae_mod.decode_scene_tokens(
            codec, {"air": next_air, "nonair": next_nonair}, like
        )
        pred_grids.append(grid)
        airs.append(next_air)
        nonairs.append(next_nonair)
    return pred_grids, pred_disp


# ---------------------------------------------------------------------------
# persistence


def save_world_model(model: WorldModel, base) -> None:
    meta = {
        "kind": "worldmodel",
        "latent_dims": list(model.latent_dims),
        "codebook_size": model.codebook_size,
        "config": model.config.to_dict(),
    }
    save_checkpoint(base, model.params, meta)


def load_world_model(base) -> WorldModel:
    arrays, meta = load_checkpoint(base)
    if meta.get("kind") != "worldmodel":
        raise CorruptHeader(f"{base}: not a world-model checkpoint")
    config = WorldModelConfig(**meta["config"])
    model = build_world_model(
        config, tuple(meta["latent_dims"]), int(meta["codebook_size"])
    )
    for key in model.params:
        model.params[key] = arrays[key]
    return model
