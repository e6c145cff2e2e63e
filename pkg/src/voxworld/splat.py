"""Voxel-anchored Gaussian sets and differentiable multi-view rasterization.

The rasterizer composites depth-sorted anisotropic Gaussians front-to-back.
Per Gaussian and pixel, ``alpha = opacity * exp(-0.5 * d^T Sigma'^-1 d)``
(clamped to 0.999); depth and per-class mass accumulate as
``sum_i v_i * alpha_i * prod_{j<i} (1 - alpha_j)``.

The backward pass is fully analytic: it replays the forward compositing and
runs the standard reverse-order suffix recursion for d(loss)/d(alpha), then
chains through the projected covariance, the projection Jacobian, the
quaternion/scale factorization, and the opacity/class squashings.

Whole-Gaussian screen culling uses the radius at which alpha falls below
1e-14, so culling never changes any pixel by more than ~1e-13 and the
rasterizer agrees with an uncropped compositor to far better than 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonInvertibleCovariance
from .geometry import (
    COVARIANCE_FLOOR_PX2,
    CameraModel,
    quat_matrix_partials,
    quat_normalize,
    quat_to_matrix,
)
from .occupancy import AIR_CLASS, SemanticVoxelGrid

ALPHA_CLAMP = 0.999
# Contributions below this alpha are dropped by whole-Gaussian culling only;
# the compositing math itself applies no per-pixel cutoff.
CULL_ALPHA = 1e-14
# Centers whose view angle exceeds this multiple of the image half-extent
# are culled: the affine projection of the covariance is meaningless at
# grazing incidence and would smear across the whole image.
FRUSTUM_MARGIN = 1.5
_MIN_DET = 1e-12


@dataclass
class GaussianSet:
    """Parameter arrays for N semantic Gaussians (all length N).

    means: (N, 3) world-frame centers, meters.
    quats: (N, 4) raw quaternions (w, x, y, z), normalized on read.
    log_scales: (N, 3) log of per-axis scale in meters.
    opacity_logits: (N,) logits; opacity = sigmoid(logit).
    class_logits: (N, C) logits; softmax gives class probabilities.
    anchor_indices: (N, 3) int voxel index each Gaussian was anchored to,
        or None when the set was not built by anchor_init.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    class_logits: np.ndarray
    anchor_indices: np.ndarray | None = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.class_logits = np.asarray(self.class_logits, dtype=np.float64).reshape(n, -1)
        if self.anchor_indices is not None:
            self.anchor_indices = np.asarray(self.anchor_indices, dtype=np.int64).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def class_count(self) -> int:
        return self.class_logits.shape[1]

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def class_probs(self) -> np.ndarray:
        z = self.class_logits - self.class_logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.means.copy(),
            self.quats.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.class_logits.copy(),
            None if self.anchor_indices is None else self.anchor_indices.copy(),
        )


@dataclass
class RenderedView:
    """Depth, blended class mass, and accumulated opacity for one camera."""

    depth: np.ndarray  # (H, W) meters, 0 where nothing contributed
    class_dist: np.ndarray  # (H, W, C)
    alpha_sum: np.ndarray  # (H, W) in [0, 1]

    def class_argmax(self) -> np.ndarray:
        """Per-pixel most massive class; air where nothing contributed."""
        out = np.argmax(self.class_dist, axis=2).astype(np.uint8)
        out[self.alpha_sum <= 0.0] = AIR_CLASS
        return out


@dataclass
class RenderGradients:
    """d(loss)/d(parameter) arrays, shaped like the GaussianSet fields."""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    class_logits: np.ndarray

    @staticmethod
    def zeros(n: int, class_count: int) -> "RenderGradients":
        return RenderGradients(
            means=np.zeros((n, 3)),
            quats=np.zeros((n, 4)),
            log_scales=np.zeros((n, 3)),
            opacity_logits=np.zeros(n),
            class_logits=np.zeros((n, class_count)),
        )


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def anchor_init(
    grid: SemanticVoxelGrid, init_opacity: float, init_scale_fraction: float
) -> GaussianSet:
    """One Gaussian per non-air voxel, centered, isotropic, class-biased.

    The class logit of the voxel's label gets a +4.0 head start; opacity and
    scale are shared across all anchors.
    """
    if not 0.0 < init_opacity < 1.0:
        raise ValueError("init_opacity must lie strictly inside (0, 1)")
    if init_scale_fraction <= 0.0:
        raise ValueError("init_scale_fraction must be positive")
    idx = grid.nonair_indices()
    n = len(idx)
    c = grid.class_count
    means = grid.voxel_centers(idx) if n else np.zeros((0, 3))
    quats = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    log_scales = np.full((n, 3), np.log(init_scale_fraction * grid.voxel_size))
    opacity_logits = np.full(n, logit(init_opacity))
    class_logits = np.zeros((n, c))
    if n:
        voxel_classes = grid.labels[idx[:, 0], idx[:, 1], idx[:, 2]]
        class_logits[np.arange(n), voxel_classes] = 4.0
    return GaussianSet(
        means, quats, log_scales, opacity_logits, class_logits, anchor_indices=idx
    )


def _projection_setup(gaussians: GaussianSet, camera: CameraModel):
    """Project all Gaussians; cull and depth-sort the visible ones.

    Returns None when nothing survives, else a dict of per-Gaussian arrays
    ordered front to back (ties keep original index order).
    """
    n = len(gaussians)
    if n == 0:
        return None
    w_rot = camera.rotation
    p_cam = gaussians.means @ w_rot.T + camera.translation
    z = p_cam[:, 2]
    opac = gaussians.opacities()

    keep = (z >= camera.near_plane) & (opac > CULL_ALPHA)
    with np.errstate(divide="ignore", invalid="ignore"):
        tan_x = np.abs(p_cam[:, 0]) / z
        tan_y = np.abs(p_cam[:, 1]) / z
    keep &= tan_x <= FRUSTUM_MARGIN * (0.5 * camera.width) / camera.fx
    keep &= tan_y <= FRUSTUM_MARGIN * (0.5 * camera.height) / camera.fy
    if not np.any(keep):
        return None
    kept = np.nonzero(keep)[0]

    pk = p_cam[kept]
    zk = pk[:, 2]
    fx, fy, cx, cy = camera.fx, camera.fy, camera.cx, camera.cy
    m = len(kept)
    jac = np.zeros((m, 2, 3))
    jac[:, 0, 0] = fx / zk
    jac[:, 1, 1] = fy / zk
    jac[:, 0, 2] = -fx * pk[:, 0] / zk**2
    jac[:, 1, 2] = -fy * pk[:, 1] / zk**2

    quats_unit = quat_normalize(gaussians.quats[kept])
    rot = quat_to_matrix(quats_unit)
    s2 = np.exp(2.0 * gaussians.log_scales[kept])
    cov3 = np.einsum("nij,nj,nkj->nik", rot, s2, rot)

    m_jw = jac @ w_rot
    cov2 = np.einsum("nij,njk,nlk->nil", m_jw, cov3, m_jw)
    cov2 = 0.5 * (cov2 + np.transpose(cov2, (0, 2, 1)))
    cov2[:, 0, 0] += COVARIANCE_FLOOR_PX2
    cov2[:, 1, 1] += COVARIANCE_FLOOR_PX2

    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    if np.any(det <= _MIN_DET):
        raise NonInvertibleCovariance(
            f"projected covariance determinant <= {_MIN_DET}"
        )
    inv = np.empty_like(cov2)
    inv[:, 0, 0] = cov2[:, 1, 1] / det
    inv[:, 1, 1] = cov2[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -cov2[:, 0, 1] / det

    center = np.stack([fx * pk[:, 0] / zk + cx, fy * pk[:, 1] / zk + cy], axis=1)

    # Ellipse level set at which alpha drops below CULL_ALPHA.
    q_max = 2.0 * np.log(opac[kept] / CULL_ALPHA)
    bx = np.sqrt(q_max * cov2[:, 0, 0])
    by = np.sqrt(q_max * cov2[:, 1, 1])
    on_screen = (
        (center[:, 0] + bx >= 0.0)
        & (center[:, 0] - bx <= camera.width - 1.0)
        & (center[:, 1] + by >= 0.0)
        & (center[:, 1] - by <= camera.height - 1.0)
    )
    if not np.any(on_screen):
        return None
    kept = kept[on_screen]

    sel = np.nonzero(on_screen)[0]
    order = np.argsort(zk[sel], kind="stable")
    sel = sel[order]
    return {
        "indices": kept[order],
        "p_cam": pk[sel],
        "jac": jac[sel],
        "m_jw": m_jw[sel],
        "cov3": cov3[sel],
        "cov2": cov2[sel],
        "inv": inv[sel],
        "center": center[sel],
        "bx": bx[sel],
        "by": by[sel],
        "opacity": opac[kept[order]],
        "quats_unit": quats_unit[sel],
        "s2": s2[sel],
        "rot": rot[sel],
    }


def _bbox(center, bx, by, width, height):
    x0 = max(0, int(np.ceil(center[0] - bx)))
    x1 = min(width - 1, int(np.floor(center[0] + bx)))
    y0 = max(0, int(np.ceil(center[1] - by)))
    y1 = min(height - 1, int(np.floor(center[1] + by)))
    return x0, x1, y0, y1


def _alpha_patch(center, inv, opacity, x0, x1, y0, y1):
    """Alpha over the integer pixel box, clamped to ALPHA_CLAMP."""
    du = np.arange(x0, x1 + 1, dtype=np.float64) - center[0]
    dv = np.arange(y0, y1 + 1, dtype=np.float64) - center[1]
    q = (
        inv[0, 0] * du[None, :] ** 2
        + 2.0 * inv[0, 1] * dv[:, None] * du[None, :]
        + inv[1, 1] * dv[:, None] ** 2
    )
    return np.minimum(opacity * np.exp(-0.5 * q), ALPHA_CLAMP), du, dv


def rasterize(gaussians: GaussianSet, camera: CameraModel) -> RenderedView:
    """Composite Gaussians into depth, class mass, and accumulated alpha."""
    h, w, c = camera.height, camera.width, gaussians.class_count
    depth = np.zeros((h, w))
    class_dist = np.zeros((h, w, c))
    transmittance = np.ones((h, w))

    setup = _projection_setup(gaussians, camera)
    if setup is not None:
        probs = gaussians.class_probs()[setup["indices"]]
        for i in range(len(setup["indices"])):
            x0, x1, y0, y1 = _bbox(
                setup["center"][i], setup["bx"][i], setup["by"][i], w, h
            )
            if x0 > x1 or y0 > y1:
                continue
            alpha, _, _ = _alpha_patch(
                setup["center"][i], setup["inv"][i], setup["opacity"][i], x0, x1, y0, y1
            )
            sub = (slice(y0, y1 + 1), slice(x0, x1 + 1))
            weight = alpha * transmittance[sub]
            depth[sub] += setup["p_cam"][i, 2] * weight
            class_dist[sub] += weight[:, :, None] * probs[i]
            transmittance[sub] *= 1.0 - alpha

    return RenderedView(depth=depth, class_dist=class_dist, alpha_sum=1.0 - transmittance)


def rasterize_backward(
    gaussians: GaussianSet,
    camera: CameraModel,
    grad_depth: np.ndarray,
    grad_class_dist: np.ndarray,
    grad_alpha_sum: np.ndarray,
) -> RenderGradients:
    """Analytic gradients of a scalar loss w.r.t. every Gaussian parameter.

    The upstream arguments are d(loss)/d(depth), d(loss)/d(class_dist), and
    d(loss)/d(alpha_sum) for the view produced by ``rasterize`` on the same
    inputs. Culled Gaussians receive exactly zero gradient.
    """
    n, c = len(gaussians), gaussians.class_count
    grads = RenderGradients.zeros(n, c)
    setup = _projection_setup(gaussians, camera)
    if setup is None:
        return grads
    h, w = camera.height, camera.width
    grad_depth = np.asarray(grad_depth, dtype=np.float64).reshape(h, w)
    grad_class_dist = np.asarray(grad_class_dist, dtype=np.float64).reshape(h, w, c)
    grad_alpha_sum = np.asarray(grad_alpha_sum, dtype=np.float64).reshape(h, w)

    indices = setup["indices"]
    m = len(indices)
    probs = gaussians.class_probs()[indices]

    # Forward replay, keeping per-Gaussian patches for the reverse sweep.
    transmittance = np.ones((h, w))
    patches = []
    for i in range(m):
        x0, x1, y0, y1 = _bbox(setup["center"][i], setup["bx"][i], setup["by"][i], w, h)
        if x0 > x1 or y0 > y1:
            patches.append(None)
            continue
        alpha, du, dv = _alpha_patch(
            setup["center"][i], setup["inv"][i], setup["opacity"][i], x0, x1, y0, y1
        )
        sub = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        patches.append((sub, alpha, transmittance[sub].copy(), du, dv))
        transmittance[sub] = transmittance[sub] * (1.0 - alpha)
    t_final = transmittance

    # Reverse sweep: suffix accumulator of sum_{later i} u_i * w_i per pixel.
    g_opacity = np.zeros(m)
    g_center = np.zeros((m, 2))
    g_cov2 = np.zeros((m, 2, 2))
    g_z_value = np.zeros(m)
    g_probs = np.zeros((m, c))
    suffix = np.zeros((h, w))
    for i in range(m - 1, -1, -1):
        if patches[i] is None:
            continue
        sub, alpha, t_before, du, dv = patches[i]
        weight = alpha * t_before
        u = grad_depth[sub] * setup["p_cam"][i, 2] + grad_class_dist[sub] @ probs[i]
        one_minus = 1.0 - alpha
        g_alpha = (
            u * t_before
            - suffix[sub] / one_minus
            + grad_alpha_sum[sub] * t_final[sub] / one_minus
        )
        # The clamp is flat: no gradient flows through clamped alphas.
        g_alpha = np.where(alpha >= ALPHA_CLAMP, 0.0, g_alpha)

        inv = setup["inv"][i]
        a_dx = inv[0, 0] * du[None, :] + inv[0, 1] * dv[:, None]
        a_dy = inv[1, 0] * du[None, :] + inv[1, 1] * dv[:, None]
        common = g_alpha * alpha
        g_opacity[i] = common.sum() / setup["opacity"][i]
        g_center[i, 0] = np.sum(common * a_dx)
        g_center[i, 1] = np.sum(common * a_dy)
        g_cov2[i, 0, 0] = 0.5 * np.sum(common * a_dx * a_dx)
        g_cov2[i, 1, 1] = 0.5 * np.sum(common * a_dy * a_dy)
        g_cov2[i, 0, 1] = g_cov2[i, 1, 0] = 0.5 * np.sum(common * a_dx * a_dy)
        g_z_value[i] = np.sum(grad_depth[sub] * weight)
        g_probs[i] = np.einsum("yx,yxc->c", weight, grad_class_dist[sub])

        suffix[sub] += u * weight

    # Chain rules, vectorized over the surviving Gaussians.
    w_rot = camera.rotation
    fx, fy = camera.fx, camera.fy
    p_cam = setup["p_cam"]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]

    m_jw = setup["m_jw"]
    cov3 = setup["cov3"]
    g_m = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2, m_jw, cov3)
    g_cov3 = np.einsum("nji,njk,nkl->nil", m_jw, g_cov2, m_jw)
    g_jac = np.einsum("nij,kj->nik", g_m, w_rot)

    g_pcam = np.zeros((m, 3))
    g_pcam[:, 0] = g_jac[:, 0, 2] * (-fx / z**2)
    g_pcam[:, 1] = g_jac[:, 1, 2] * (-fy / z**2)
    g_pcam[:, 2] = (
        g_jac[:, 0, 0] * (-fx / z**2)
        + g_jac[:, 1, 1] * (-fy / z**2)
        + g_jac[:, 0, 2] * (2.0 * fx * x / z**3)
        + g_jac[:, 1, 2] * (2.0 * fy * y / z**3)
    )
    g_pcam += np.einsum("nji,nj->ni", setup["jac"], g_center)
    g_pcam[:, 2] += g_z_value
    g_means = g_pcam @ w_rot

    # cov3 = R diag(s2) R^T.
    rot = setup["rot"]
    g_diag = np.einsum("nji,njk,nkl->nil", rot, g_cov3, rot)
    g_log_scales = np.einsum("nii->ni", g_diag) * 2.0 * setup["s2"]
    g_rot = 2.0 * np.einsum("nij,njk,nk->nik", g_cov3, rot, setup["s2"])
    partials = quat_matrix_partials(setup["quats_unit"])
    g_quat_unit = np.einsum("nkab,nab->nk", partials, g_rot)
    raw = gaussians.quats[indices]
    raw_norm = np.linalg.norm(raw, axis=1, keepdims=True)
    g_quats = (
        g_quat_unit
        - setup["quats_unit"]
        * np.einsum("nk,nk->n", setup["quats_unit"], g_quat_unit)[:, None]
    ) / raw_norm

    opac = setup["opacity"]
    g_opacity_logits = g_opacity * opac * (1.0 - opac)
    dot = np.einsum("nc,nc->n", g_probs, probs)
    g_class_logits = probs * (g_probs - dot[:, None])

    grads.means[indices] = g_means
    grads.quats[indices] = g_quats
    grads.log_scales[indices] = g_log_scales
    grads.opacity_logits[indices] = g_opacity_logits
    grads.class_logits[indices] = g_class_logits
    return grads


def argmax_occupancy(gaussians: GaussianSet, like: SemanticVoxelGrid) -> SemanticVoxelGrid:
    """Read trained anchors back into a voxel grid.

    A voxel takes the argmax class of its anchor Gaussian when that anchor's
    opacity is at least 0.5, and air otherwise (also air when no anchor maps
    to it). Ties resolve to the lowest class id.
    """
    if gaussians.anchor_indices is None:
        raise ValueError("gaussian set carries no anchor indices")
    labels = np.zeros(like.dims, dtype=np.uint8)
    if len(gaussians):
        winners = np.argmax(gaussians.class_probs(), axis=1).astype(np.uint8)
        visible = gaussians.opacities() >= 0.5
        idx = gaussians.anchor_indices
        labels[idx[visible, 0], idx[visible, 1], idx[visible, 2]] = winners[visible]
    return like.with_labels(labels)
