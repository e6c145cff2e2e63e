"""Camera models, rigid transforms, and 3D->2D Gaussian covariance transport.

Conventions used throughout the package:

* World and camera frames are right-handed; the camera looks down +z.
* A pixel (row v, col u) samples the image plane at the integer point
  ``(u, v)``; projection is ``u = fx*x/z + cx``, ``v = fy*y/z + cy``.
* Rotations are unit quaternions ``(w, x, y, z)`` normalized on read, so
  any raw 4-vector parameterizes a valid rotation.
* Per-axis scales are stored in log-space, so any raw 3-vector
  parameterizes strictly positive scales.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateDepth

# Diagonal low-pass floor added to every projected 2x2 covariance, in px^2.
# Keeps sub-pixel Gaussians rasterizable and their gradients finite.
COVARIANCE_FLOOR_PX2 = 0.3

_ORTHONORMAL_TOL = 1e-6


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / ||q|| for quaternions with shape (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero quaternion has no direction")
    return q / norm


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of unit quaternion(s) (w, x, y, z), shape (..., 3, 3).

    The input is normalized internally, so raw optimization variables can be
    passed directly.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    m[..., 0, 1] = 2.0 * (x * y - w * z)
    m[..., 0, 2] = 2.0 * (x * z + w * y)
    m[..., 1, 0] = 2.0 * (x * y + w * z)
    m[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    m[..., 1, 2] = 2.0 * (y * z - w * x)
    m[..., 2, 0] = 2.0 * (x * z - w * y)
    m[..., 2, 1] = 2.0 * (y * z + w * x)
    m[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return m


def quat_matrix_partials(q_unit: np.ndarray) -> np.ndarray:
    """Partials dR/dq_k of the quadratic form at a unit quaternion.

    Returns shape (..., 4, 3, 3): entry [k] is the derivative of
    ``quat_to_matrix`` w.r.t. component k of the *unit* quaternion, treating
    components as independent. Combine with the normalization Jacobian
    ``(I - q q^T)/||q||`` for derivatives w.r.t. a raw quaternion.
    """
    q = np.asarray(q_unit, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    d = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)
    d[..., 0, :, :] = 2.0 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    d[..., 1, :, :] = 2.0 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2.0 * x, -w], axis=-1),
            np.stack([z, w, -2.0 * x], axis=-1),
        ],
        axis=-2,
    )
    d[..., 2, :, :] = 2.0 * np.stack(
        [
            np.stack([-2.0 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2.0 * y], axis=-1),
        ],
        axis=-2,
    )
    d[..., 3, :, :] = 2.0 * np.stack(
        [
            np.stack([-2.0 * z, -w, x], axis=-1),
            np.stack([w, -2.0 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=-2,
    )
    return d


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion (w, x, y, z); normalized on read."""

    quat: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        object.__setattr__(self, "quat", q)
        if abs(np.linalg.norm(q) - 1.0) > _ORTHONORMAL_TOL:
            object.__setattr__(self, "quat", quat_normalize(q))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def random(rng: np.random.Generator) -> "Rotation":
        return Rotation(quat_normalize(rng.normal(size=4)))


@dataclass(frozen=True)
class ScaleVector:
    """Per-axis scale in meters, stored in log-space so it stays positive."""

    log_scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "log_scale", np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        )

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @staticmethod
    def from_scale(scale) -> "ScaleVector":
        s = np.asarray(scale, dtype=np.float64).reshape(3)
        if np.any(s <= 0.0):
            raise ValueError("scales must be strictly positive")
        return ScaleVector(np.log(s))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: 3x3 intrinsics and a 4x4 world-to-camera transform."""

    intrinsics: np.ndarray
    world_to_camera: np.ndarray
    width: int
    height: int
    near_plane: float = 0.1

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "world_to_camera", t)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.near_plane <= 0.0:
            raise ValueError("near plane must be positive")
        if k[0, 0] <= 0.0 or k[1, 1] <= 0.0:
            raise ValueError("focal lengths must be positive")
        r = t[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=_ORTHONORMAL_TOL):
            raise ValueError("world_to_camera rotation block is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=_ORTHONORMAL_TOL):
            raise ValueError("world_to_camera rotation block must have det +1")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        """3x3 rotation block of the world-to-camera transform."""
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        """Map world points with shape (..., 3) into the camera frame."""
        p = np.asarray(points_world, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) of camera-frame points (..., 3).

        Does not validate depth; callers cull points behind the near plane.
        """
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[..., 2]
        u = self.fx * p[..., 0] / z + self.cx
        v = self.fy * p[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)


def build_covariance(rotation: Rotation, scale: ScaleVector) -> np.ndarray:
    """3x3 world-space covariance R * S * S^T * R^T.

    Symmetric positive semi-definite by construction; eigenvalues are the
    squared scale entries.
    """
    r = rotation.matrix
    s2 = np.exp(2.0 * scale.log_scale)
    return (r * s2) @ r.T


def projection_jacobian(camera: CameraModel, mean_cam: np.ndarray) -> np.ndarray:
    """2x3 Jacobian of the pinhole projection at a camera-frame point.

    J = [[fx/z, 0, -fx*x/z^2],
         [0, fy/z, -fy*y/z^2]]

    Raises DegenerateDepth when the point is closer than the near plane.
    """
    x, y, z = np.asarray(mean_cam, dtype=np.float64).reshape(3)
    if z < camera.near_plane:
        raise DegenerateDepth(
            f"depth {z:.6g} m is in front of the near plane {camera.near_plane:.6g} m"
        )
    fx, fy = camera.fx, camera.fy
    return np.array(
        [
            [fx / z, 0.0, -fx * x / (z * z)],
            [0.0, fy / z, -fy * y / (z * z)],
        ]
    )


def project_covariance(
    cov_world: np.ndarray, camera: CameraModel, mean_world: np.ndarray
) -> np.ndarray:
    """2x2 screen-space covariance J W Sigma W^T J^T plus the diagonal floor.

    Only the rotation block of the camera pose enters: translation cancels
    in covariance transport.
    """
    w = camera.rotation
    mean_cam = camera.to_camera(np.asarray(mean_world, dtype=np.float64).reshape(3))
    j = projection_jacobian(camera, mean_cam)
    m = j @ w
    cov2 = m @ np.asarray(cov_world, dtype=np.float64) @ m.T
    cov2 = 0.5 * (cov2 + cov2.T) + COVARIANCE_FLOOR_PX2 * np.eye(2)
    return cov2


def save_rig(cameras: list[CameraModel], path) -> None:
    """Write a camera rig as a JSON list of {K, T_wc, width, height, near}."""
    doc = [
        {
            "K": [float(v) for v in cam.intrinsics.reshape(-1)],
            "T_wc": [float(v) for v in cam.world_to_camera.reshape(-1)],
            "width": int(cam.width),
            "height": int(cam.height),
            "near": float(cam.near_plane),
        }
        for cam in cameras
    ]
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_rig(path) -> list[CameraModel]:
    doc = json.loads(Path(path).read_text())
    return [
        CameraModel(
            intrinsics=np.array(entry["K"], dtype=np.float64).reshape(3, 3),
            world_to_camera=np.array(entry["T_wc"], dtype=np.float64).reshape(4, 4),
            width=int(entry["width"]),
            height=int(entry["height"]),
            near_plane=float(entry["near"]),
        )
        for entry in doc
    ]
