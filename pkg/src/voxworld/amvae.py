"""Air-mask dual-codebook vector-quantized occupancy autoencoder.

Two independent VQ branches code a voxel grid after splitting it into a
binary air map and a non-air label grid: each branch runs a two-layer
strided 3D conv encoder (stride 2 on x and y twice, full vertical
resolution), nearest-neighbor quantization against its own codebook, and a
mirrored transposed-conv decoder back to per-voxel logits. Codebooks learn
by exponential-moving-average cluster assignment with dead-entry reseeding;
encoder/decoder weights train by Adam on cross-entropy reconstruction plus
a commitment term, with straight-through gradients across quantization.

A single-branch variant (one codebook over the raw label grid) exists for
ablation comparisons and reuses all of the machinery.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CorruptHeader, EmptyDataset, ShapeMismatch, TruncatedPayload
from .occupancy import SemanticVoxelGrid, recombine, split_air

KERNEL = (4, 4, 3)
STRIDE = (2, 2, 1)
PAD = (1, 1, 1)
HIDDEN = 32
REDUCTION_XY = 4

_TOK_MAGIC = b"OCCT"
_TOK_VERSION = 1
_TOK_HEADER = struct.Struct("<4sBIIIH")


@dataclass
class AmvaeConfig:
    steps: int = 1200
    lr: float = 2e-3
    beta: float = 0.25
    codebook_size: int = 128
    latent_dim: int = 32
    seed: int = 0
    ema_decay: float = 0.99
    dead_entry_steps: int = 200
    air_mask: bool = True  # False trains the single-branch ablation variant

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Codebook:
    """K x D embedding table with EMA statistics and usage counters."""

    entries: np.ndarray
    usage: np.ndarray
    ema_cluster: np.ndarray
    ema_sum: np.ndarray
    unused_steps: np.ndarray

    @staticmethod
    def create(rng: np.random.Generator, size: int, dim: int) -> "Codebook":
        if size < 2:
            raise ValueError("codebook needs at least 2 entries")
        entries = rng.normal(0.0, 1.0, size=(size, dim))
        return Codebook(
            entries=entries,
            usage=np.zeros(size, dtype=np.int64),
            ema_cluster=np.ones(size),
            ema_sum=entries.copy(),
            unused_steps=np.zeros(size, dtype=np.int64),
        )

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def ema_update(self, flat_latents: np.ndarray, tokens: np.ndarray,
                   decay: float, dead_steps: int, rng: np.random.Generator) -> None:
        """One EMA assignment step plus dead-entry reseeding."""
        counts = np.bincount(tokens, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self.ema_sum)
        np.add.at(sums, tokens, flat_latents)
        self.ema_cluster = decay * self.ema_cluster + (1.0 - decay) * counts
        self.ema_sum = decay * self.ema_sum + (1.0 - decay) * sums
        self.entries = self.ema_sum / self.ema_cluster[:, None]
        self.usage += counts.astype(np.int64)
        self.unused_steps = np.where(counts > 0, 0, self.unused_steps + 1)
        dead = np.nonzero(self.unused_steps >= dead_steps)[0]
        for k in dead:
            pick = flat_latents[rng.integers(len(flat_latents))]
            self.entries[k] = pick
            self.ema_sum[k] = pick
            self.ema_cluster[k] = 1.0
            self.unused_steps[k] = 0


@dataclass
class BranchNet:
    """Encoder/decoder conv stacks for one vocabulary of voxel states."""

    vocab: int
    latent_dim: int
    params: dict = field(default_factory=dict)

    @staticmethod
    def create(rng: np.random.Generator, vocab: int, latent_dim: int) -> "BranchNet":
        k3 = int(np.prod(KERNEL))
        p = {
            "enc1_w": nn.he_init(rng, (HIDDEN, vocab, *KERNEL), vocab * k3),
            "enc1_b": np.zeros(HIDDEN),
            "enc2_w": nn.he_init(rng, (latent_dim, HIDDEN, *KERNEL), HIDDEN * k3),
            "enc2_b": np.zeros(latent_dim),
            "dec1_w": nn.he_init(rng, (latent_dim, HIDDEN, *KERNEL), latent_dim * k3),
            "dec1_b": np.zeros(HIDDEN),
            "dec2_w": nn.he_init(rng, (HIDDEN, vocab, *KERNEL), HIDDEN * k3),
            "dec2_b": np.zeros(vocab),
        }
        return BranchNet(vocab=vocab, latent_dim=latent_dim, params=p)


def one_hot_volume(labels: np.ndarray, vocab: int) -> np.ndarray:
    """(X, Y, Z) int labels -> (vocab, X, Y, Z) float64 one-hot."""
    out = np.zeros((vocab,) + labels.shape)
    flat = np.asarray(labels).reshape(-1)
    out.reshape(vocab, -1)[flat, np.arange(flat.size)] = 1.0
    return out


def _check_dims(shape) -> None:
    x, y = shape[1], shape[2]
    if x % REDUCTION_XY or y % REDUCTION_XY:
        raise ShapeMismatch(
            f"grid x,y dims {x}x{y} must be divisible by {REDUCTION_XY}"
        )


def encode(branch: BranchNet, one_hot) -> np.ndarray:
    """One-hot volume -> latent field (X/4, Y/4, Z, D)."""
    latent, _ = _encode_cached(branch, np.asarray(one_hot, dtype=np.float64))
    return latent


def _encode_cached(branch: BranchNet, x):
    if x.shape[0] != branch.vocab:
        raise ShapeMismatch(f"expected {branch.vocab} input channels, got {x.shape[0]}")
    _check_dims(x.shape)
    p = branch.params
    h1, c1 = nn.conv3d_forward(x, p["enc1_w"], p["enc1_b"], STRIDE, PAD)
    a1, cs = nn.silu_forward(h1)
    lat, c2 = nn.conv3d_forward(a1, p["enc2_w"], p["enc2_b"], STRIDE, PAD)
    return lat.transpose(1, 2, 3, 0), (c1, cs, c2)


def _encode_backward(branch: BranchNet, grad_latent, cache):
    c1, cs, c2 = cache
    g = grad_latent.transpose(3, 0, 1, 2)
    ga1, gw2, gb2 = nn.conv3d_backward(g, c2)
    gh1 = nn.silu_backward(ga1, cs)
    _, gw1, gb1 = nn.conv3d_backward(gh1, c1)
    return {"enc1_w": gw1, "enc1_b": gb1, "enc2_w": gw2, "enc2_b": gb2}


def decode(branch: BranchNet, quantized) -> np.ndarray:
    """Latent field (X/4, Y/4, Z, D) -> logits (vocab, X, Y, Z)."""
    logits, _ = _decode_cached(branch, np.asarray(quantized, dtype=np.float64))
    return logits


def _decode_cached(branch: BranchNet, q):
    if q.shape[-1] != branch.latent_dim:
        raise ShapeMismatch(f"latent dim {q.shape[-1]} != {branch.latent_dim}")
    p = branch.params
    x = q.transpose(3, 0, 1, 2)
    h1, c1 = nn.deconv3d_forward(x, p["dec1_w"], p["dec1_b"], STRIDE, PAD)
    a1, cs = nn.silu_forward(h1)
    logits, c2 = nn.deconv3d_forward(a1, p["dec2_w"], p["dec2_b"], STRIDE, PAD)
    return logits, (c1, cs, c2)


def _decode_backward(branch: BranchNet, grad_logits, cache):
    c1, cs, c2 = cache
    ga1, gw2, gb2 = nn.deconv3d_backward(grad_logits, c2)
    gh1 = nn.silu_backward(ga1, cs)
    gq, gw1, gb1 = nn.deconv3d_backward(gh1, c1)
    grads = {"dec1_w": gw1, "dec1_b": gb1, "dec2_w": gw2, "dec2_b": gb2}
    return gq.transpose(1, 2, 3, 0), grads


def quantize(latent, codebook: Codebook):
    """Snap each latent site to its nearest codebook entry.

    Returns (token grid of indices, quantized latent field). Ties resolve to
    the lowest index.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape[-1] != codebook.dim:
        raise ShapeMismatch(f"latent dim {latent.shape[-1]} != codebook {codebook.dim}")
    flat = latent.reshape(-1, codebook.dim)
    d2 = (
        (flat * flat).sum(axis=1, keepdims=True)
        - 2.0 * flat @ codebook.entries.T
        + (codebook.entries * codebook.entries).sum(axis=1)
    )
    tokens = np.argmin(d2, axis=1)
    quantized = codebook.entries[tokens].reshape(latent.shape)
    return tokens.reshape(latent.shape[:-1]).astype(np.int32), quantized


def vae_loss(o_air, o_nonair, recon_logits_air, recon_logits_nonair,
             latents, quantized, beta: float):
    """Three-term objective: (L_recon, L_commit, L_total).

    L_recon is the summed per-branch mean voxel cross-entropy; L_commit is
    the summed per-branch mean squared site distance between encoder output
    and its (gradient-stopped) codebook entry; total = recon + beta * commit.
    ``latents`` and ``quantized`` are (air, nonair) pairs.
    """
    ce_air, _ = nn.cross_entropy_forward(
        np.moveaxis(recon_logits_air, 0, -1), np.asarray(o_air, dtype=np.int64)
    )
    ce_nonair, _ = nn.cross_entropy_forward(
        np.moveaxis(recon_logits_nonair, 0, -1), np.asarray(o_nonair, dtype=np.int64)
    )
    l_recon = ce_air + ce_nonair
    l_com = 0.0
    for s, q in zip(latents, quantized):
        diff = np.asarray(s) - np.asarray(q)
        sites = int(np.prod(diff.shape[:-1]))
        l_com += float((diff * diff).sum() / sites)
    return float(l_recon), float(l_com), float(l_recon + beta * l_com)


@dataclass
class AmvaeModel:
    """Trained branch nets plus codebooks (dual or single-branch)."""

    config: AmvaeConfig
    class_count: int
    branches: dict  # name -> BranchNet
    codebooks: dict  # name -> Codebook

    @property
    def air_mask(self) -> bool:
        return self.config.air_mask

    def nonair_class_set(self) -> frozenset:
        return frozenset(range(1, self.class_count))

    def branch_targets(self, grid: SemanticVoxelGrid) -> dict:
        if self.air_mask:
            spl = split_air(grid, self.nonair_class_set())
            return {"air": spl.air_part.astype(np.int64),
                    "nonair": spl.nonair_part.astype(np.int64)}
        return {"full": grid.labels.astype(np.int64)}

    def reconstruct_labels(self, grid: SemanticVoxelGrid) -> np.ndarray:
        """Round-trip a grid through encode/quantize/decode to labels."""
        targets = self.branch_targets(grid)
        decoded = {}
        for name, target in targets.items():
            branch = self.branches[name]
            latent = encode(branch, one_hot_volume(target, branch.vocab))
            _, q = quantize(latent, self.codebooks[name])
            decoded[name] = np.argmax(decode(branch, q), axis=0).astype(np.uint8)
        if self.air_mask:
            return recombine(decoded["air"], decoded["nonair"])
        return decoded["full"]

    def reconstruct(self, grid: SemanticVoxelGrid) -> SemanticVoxelGrid:
        return grid.with_labels(self.reconstruct_labels(grid))


def build_model(config: AmvaeConfig, class_count: int) -> AmvaeModel:
    rng = np.random.default_rng(config.seed)
    if config.air_mask:
        names_vocab = [("air", 2), ("nonair", class_count)]
    else:
        names_vocab = [("full", class_count)]
    branches = {}
    codebooks = {}
    for name, vocab in names_vocab:
        branches[name] = BranchNet.create(rng, vocab, config.latent_dim)
        codebooks[name] = Codebook.create(rng, config.codebook_size, config.latent_dim)
    return AmvaeModel(config=config, class_count=class_count,
                      branches=branches, codebooks=codebooks)


def _branch_step(branch: BranchNet, codebook: Codebook, target: np.ndarray,
                 beta: float, extra_logit_grad_fn=None):
    """Forward + backward for one branch on one grid.

    Returns (ce, commit, grads, latent_flat, tokens, logits).
    ``extra_logit_grad_fn(logits) -> grad`` lets callers add a second loss
    on the reconstruction logits (the stage-1 segmentation objective does).
    """
    x = one_hot_volume(target, branch.vocab)
    latent, enc_cache = _encode_cached(branch, x)
    tokens, quantized = quantize(latent, codebook)
    logits, dec_cache = _decode_cached(branch, quantized)

    ce, ce_cache = nn.cross_entropy_forward(np.moveaxis(logits, 0, -1), target)
    g_logits = np.moveaxis(nn.cross_entropy_backward(ce_cache), -1, 0)
    if extra_logit_grad_fn is not None:
        g_logits = g_logits + extra_logit_grad_fn(logits)
    g_q, dec_grads = _decode_backward(branch, g_logits, dec_cache)

    # Straight-through: decoder gradient passes to the encoder output, and
    # the commitment term pulls the encoder toward the chosen entries.
    sites = int(np.prod(latent.shape[:-1]))
    diff = latent - quantized
    commit = float((diff * diff).sum() / sites)
    g_latent = g_q + beta * 2.0 * diff / sites
    enc_grads = _encode_backward(branch, g_latent, enc_cache)

    grads = {**enc_grads, **dec_grads}
    return ce, commit, grads, latent.reshape(-1, branch.latent_dim), tokens.reshape(-1), logits


def train_amvae(dataset, config: AmvaeConfig, class_count: int | None = None,
                callback=None, stop_fn=None, stop_every: int = 0):
    """Train the codec on a list of grids; returns (model, loss curve).

    The curve rows are (step, l_recon, l_commit, l_total). Deterministic
    given config.seed. When ``stop_fn`` is given it is evaluated on the
    model every ``stop_every`` steps and training ends early once it
    returns True.
    """
    grids = list(dataset)
    if not grids:
        raise EmptyDataset("training needs at least one grid")
    if class_count is None:
        class_count = grids[0].class_count
    model = build_model(config, class_count)
    rng = np.random.default_rng(config.seed + 1)
    opts = {
        name: nn.Adam(branch.params, lr=config.lr)
        for name, branch in model.branches.items()
    }
    curve = []
    for step in range(config.steps):
        grid = grids[rng.integers(len(grids))]
        targets = model.branch_targets(grid)
        l_recon = 0.0
        l_com = 0.0
        for name, target in targets.items():
            ce, commit, grads, flat, tokens, _ = _branch_step(
                model.branches[name], model.codebooks[name], target, config.beta
            )
            opts[name].step(grads)
            model.codebooks[name].ema_update(
                flat, tokens, config.ema_decay, config.dead_entry_steps, rng
            )
            l_recon += ce
            l_com += commit
        total = l_recon + config.beta * l_com
        curve.append((step, l_recon, l_com, total))
        if callback is not None:
            callback(step, l_recon, l_com, total)
        if stop_fn is not None and stop_every and (step + 1) % stop_every == 0:
            if stop_fn(model):
                break
    return model, curve


def encode_scene(grid: SemanticVoxelGrid, model: AmvaeModel) -> dict:
    """Grid -> token grids per branch ({'air','nonair'} or {'full'})."""
    out = {}
    for name, target in model.branch_targets(grid).items():
        branch = model.branches[name]
        latent = encode(branch, one_hot_volume(target, branch.vocab))
        tokens, _ = quantize(latent, model.codebooks[name])
        out[name] = tokens
    return out


def decode_scene_tokens(model: AmvaeModel, tokens: dict,
                        like: SemanticVoxelGrid) -> SemanticVoxelGrid:
    """Token grids -> voxel grid (recombining branches when air-masked)."""
    decoded = {}
    for name, tok in tokens.items():
        branch = model.branches[name]
        q = model.codebooks[name].entries[np.asarray(tok, dtype=np.int64)]
        decoded[name] = np.argmax(decode(branch, q), axis=0).astype(np.uint8)
    if model.air_mask:
        labels = recombine(decoded["air"], decoded["nonair"])
    else:
        labels = decoded["full"]
    return like.with_labels(labels)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: AmvaeModel, base) -> None:
    arrays = {}
    for name, branch in model.branches.items():
        for key, val in branch.params.items():
            arrays[f"branch.{name}.{key}"] = val
        cb = model.codebooks[name]
        arrays[f"codebook.{name}.entries"] = cb.entries
        arrays[f"codebook.{name}.ema_cluster"] = cb.ema_cluster
        arrays[f"codebook.{name}.ema_sum"] = cb.ema_sum
        arrays[f"codebook.{name}.usage"] = cb.usage.astype(np.float64)
    meta = {
        "kind": "amvae",
        "class_count": model.class_count,
        "config": model.config.to_dict(),
    }
    save_checkpoint(base, arrays, meta)


def load_model(base) -> AmvaeModel:
    arrays, meta = load_checkpoint(base)
    if meta.get("kind") != "amvae":
        raise CorruptHeader(f"{base}: not a codec checkpoint")
    config = AmvaeConfig(**meta["config"])
    model = build_model(config, int(meta["class_count"]))
    for name, branch in model.branches.items():
        for key in branch.params:
            branch.params[key] = arrays[f"branch.{name}.{key}"]
        cb = model.codebooks[name]
        cb.entries = arrays[f"codebook.{name}.entries"]
        cb.ema_cluster = arrays[f"codebook.{name}.ema_cluster"]
        cb.ema_sum = arrays[f"codebook.{name}.ema_sum"]
        cb.usage = arrays[f"codebook.{name}.usage"].astype(np.int64)
    return model


def save_tokens(path, tokens: dict, codebook_size: int) -> None:
    """Write branch token grids as a .tok file (air block, then non-air)."""
    names = ["air", "nonair"] if "air" in tokens else ["full"]
    dims = tokens[names[0]].shape
    header = _TOK_HEADER.pack(_TOK_MAGIC, _TOK_VERSION, *dims, codebook_size)
    blocks = b"".join(
        np.ascontiguousarray(tokens[n].transpose(2, 1, 0), dtype="<u2").tobytes()
        for n in names
    )
    Path(path).write_bytes(header + blocks)


def load_tokens(path, air_mask: bool = True) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < _TOK_HEADER.size:
        raise CorruptHeader(f"{path}: file shorter than the token header")
    magic, version, x, y, z, k = _TOK_HEADER.unpack_from(raw)
    if magic != _TOK_MAGIC:
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    if version != _TOK_VERSION:
        raise CorruptHeader(f"{path}: unsupported version {version}")
    names = ["air", "nonair"] if air_mask else ["full"]
    count = x * y * z
    need = _TOK_HEADER.size + 2 * count * len(names)
    if len(raw) < need:
        raise TruncatedPayload(f"{path}: expected {need} bytes, found {len(raw)}")
    out = {}
    for i, name in enumerate(names):
        offset = _TOK_HEADER.size + 2 * count * i
        block = np.frombuffer(raw, dtype="<u2", count=count, offset=offset)
        out[name] = block.reshape(z, y, x).transpose(2, 1, 0).astype(np.int32)
    return out
