"""Procedural scene generation: a deterministic stand-in for a real
driving-occupancy pipeline.

Scenes are a flat drivable layer (class 1) with static and constant-velocity
box obstacles of assorted classes; the ego track is a straight or
constant-turn displacement sequence at a 0.5 s frame period. Ground-truth
depth/semantic views come from z-buffered projection of non-air voxel
centers, which produces the same supervision shapes (sparse depth plus
class images with validity masks) a LiDAR projection would.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionMismatch
from .geometry import CameraModel
from .occupancy import SemanticVoxelGrid, load_grid, save_grid

GROUND_CLASS = 1
FRAME_PERIOD_S = 0.5


@dataclass
class SceneConfig:
    dims: tuple = (32, 32, 8)
    voxel_size: float = 0.4
    class_count: int = 17
    n_static: int = 3
    n_moving: int = 2
    box_xy_range: tuple = (2, 6)  # inclusive size range in voxels
    box_z_range: tuple = (2, 5)
    ego_speed_mps: float = 2.0
    ego_turn_rate_rps: float = 0.0
    frames: int = 10
    seed: int = 0
    # Radius around the rig kept free of ground and obstacles (the ego
    # vehicle occupies it); keeps camera views from being smothered by
    # sub-meter splats.
    ego_clearance_m: float = 2.4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["box_xy_range"] = list(self.box_xy_range)
        d["box_z_range"] = list(self.box_z_range)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneConfig":
        d = dict(d)
        for key in ("dims", "box_xy_range", "box_z_range"):
            if key in d:
                d[key] = tuple(d[key])
        return SceneConfig(**d)


@dataclass
class SceneSequence:
    """Time-ordered grids plus per-frame ego displacement to the next frame."""

    frames: list
    displacements: np.ndarray  # (len(frames)-1, 2) meters
    frame_period_s: float = FRAME_PERIOD_S

    def __post_init__(self):
        self.displacements = np.asarray(self.displacements, dtype=np.float64).reshape(-1, 2)
        if len(self.frames) >= 2 and len(self.displacements) != len(self.frames) - 1:
            raise DimensionMismatch(
                f"{len(self.frames)} frames need {len(self.frames) - 1} displacements,"
                f" got {len(self.displacements)}"
            )


@dataclass
class _Box:
    class_id: int
    size: tuple
    start: tuple
    velocity: tuple  # voxels per frame, (vx, vy)


def _grid_origin(config: SceneConfig) -> np.ndarray:
    x, y, _ = config.dims
    vs = config.voxel_size
    return np.array([-x * vs / 2.0, -y * vs / 2.0, -vs])


def _box_clears_ego(config: SceneConfig, box: _Box) -> bool:
    """True when the box footprint avoids the ego clearance disk at all frames."""
    origin = _grid_origin(config)
    vs = config.voxel_size
    sx, sy, _ = box.size
    for t in range(config.frames):
        x0 = box.start[0] + box.velocity[0] * t
        y0 = box.start[1] + box.velocity[1] * t
        # world-space rectangle covered by the footprint cells
        rx0 = origin[0] + x0 * vs
        rx1 = origin[0] + (x0 + sx) * vs
        ry0 = origin[1] + y0 * vs
        ry1 = origin[1] + (y0 + sy) * vs
        nearest_x = min(max(0.0, rx0), rx1)
        nearest_y = min(max(0.0, ry0), ry1)
        if np.hypot(nearest_x, nearest_y) < config.ego_clearance_m:
            return False
    return True


def _place_box(rng, config: SceneConfig, velocity) -> _Box:
    x, y, z = config.dims
    lo, hi = config.box_xy_range
    zlo, zhi = config.box_z_range
    sx = int(rng.integers(lo, hi + 1))
    sy = int(rng.integers(lo, hi + 1))
    sz = int(rng.integers(zlo, min(zhi, z - 1) + 1))
    if sx > x or sy > y or sz > z - 1:
        raise ConfigError(
            f"obstacle {sx}x{sy}x{sz} does not fit the {x}x{y}x{z} grid"
        )
    travel = config.frames - 1
    vx, vy = velocity

    def start_range(dim, size, v):
        lo_s = max(0, -v * travel)
        hi_s = min(dim - size, dim - size - v * travel)
        if lo_s > hi_s:
            raise ConfigError(
                f"moving obstacle (size {size}, velocity {v}) cannot stay inside "
                f"a dimension of {dim} voxels for {travel + 1} frames"
            )
        return int(rng.integers(lo_s, hi_s + 1))

    cls = int(rng.integers(2, config.class_count))
    for _ in range(200):
        x0 = start_range(x, sx, vx)
        y0 = start_range(y, sy, vy)
        box = _Box(class_id=cls, size=(sx, sy, sz), start=(x0, y0, 1),
                   velocity=(vx, vy))
        if _box_clears_ego(config, box):
            return box
    raise ConfigError(
        "could not place an obstacle outside the ego clearance zone; "
        "shrink ego_clearance_m or the obstacle sizes"
    )


def _stamp(labels: np.ndarray, box: _Box, frame: int) -> None:
    sx, sy, sz = box.size
    x0 = box.start[0] + box.velocity[0] * frame
    y0 = box.start[1] + box.velocity[1] * frame
    z0 = box.start[2]
    labels[x0 : x0 + sx, y0 : y0 + sy, z0 : z0 + sz] = box.class_id


def generate_sequence(config: SceneConfig) -> SceneSequence:
    """Deterministic scene sequence for a config (same seed, same bytes)."""
    x, y, z = config.dims
    if min(x, y, z) < 1:
        raise ConfigError("grid dims must be positive")
    if x % 4 or y % 4:
        raise ConfigError("x and y dims must be divisible by 4 (codec reduction)")
    if config.class_count < 3:
        raise ConfigError("need at least air, ground, and one obstacle class")
    rng = np.random.default_rng(config.seed)

    boxes = [_place_box(rng, config, (0, 0)) for _ in range(config.n_static)]
    moves = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1)]
    for _ in range(config.n_moving):
        velocity = moves[int(rng.integers(len(moves)))]
        boxes.append(_place_box(rng, config, velocity))

    origin = _grid_origin(config)
    cx = origin[0] + (np.arange(x) + 0.5) * config.voxel_size
    cy = origin[1] + (np.arange(y) + 0.5) * config.voxel_size
    ego_hole = (cx[:, None] ** 2 + cy[None, :] ** 2) < config.ego_clearance_m**2
    frames = []
    for t in range(config.frames):
        labels = np.zeros(config.dims, dtype=np.uint8)
        labels[:, :, 0] = GROUND_CLASS
        labels[:, :, 0][ego_hole] = 0
        for box in boxes:
            _stamp(labels, box, t)
        frames.append(
            SemanticVoxelGrid(labels, config.voxel_size, origin, config.class_count)
        )

    heading = 0.0
    disp = []
    for _ in range(config.frames - 1):
        step = config.ego_speed_mps * FRAME_PERIOD_S
        disp.append((step * np.cos(heading), step * np.sin(heading)))
        heading += config.ego_turn_rate_rps * FRAME_PERIOD_S
    return SceneSequence(frames=frames, displacements=np.array(disp).reshape(-1, 2))


def generate_rig(
    n_cameras: int,
    radius: float = 1.5,
    height: float = 1.6,
    image_size: int = 48,
    fov_deg: float = 90.0,
    pitch_deg: float = 18.0,
    near: float = 0.2,
) -> list:
    """Outward-facing camera ring around the grid center.

    Cameras sit on a circle of the given radius at the given height, evenly
    spaced in yaw, each pitched down by pitch_deg to see nearby ground.
    """
    if n_cameras < 1:
        raise ConfigError("a rig needs at least one camera")
    f = (image_size / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    cx = cy = (image_size - 1) / 2.0
    k = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
    pitch = np.deg2rad(pitch_deg)
    cams = []
    for i in range(n_cameras):
        yaw = 2.0 * np.pi * i / n_cameras
        out = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        x_cam = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        y0 = np.array([0.0, 0.0, -1.0])
        z_cam = out * np.cos(pitch) + y0 * np.sin(pitch)
        y_cam = y0 * np.cos(pitch) - out * np.sin(pitch)
        rot = np.stack([x_cam, y_cam, z_cam])
        center = out * radius + np.array([0.0, 0.0, height])
        t = np.eye(4)
        t[:3, :3] = rot
        t[:3, 3] = -rot @ center
        cams.append(CameraModel(k, t, image_size, image_size, near_plane=near))
    return cams


def project_ground_truth(grid: SemanticVoxelGrid, camera: CameraModel,
                         max_stamp_px: int = 12):
    """Z-buffered projection of non-air voxels into one view.

    Each voxel center projects to a pixel and stamps its projected square
    footprint (half a voxel in each direction, capped at max_stamp_px) at
    the center's depth; the nearest voxel wins per pixel. Returns
    (depth, semantic, valid) with zeros outside the valid mask.
    """
    h, w = camera.height, camera.width
    depth = np.zeros((h, w))
    semantic = np.zeros((h, w), dtype=np.uint8)
    valid = np.zeros((h, w), dtype=bool)
    idx = grid.nonair_indices()
    if len(idx) == 0:
        return depth, semantic, valid
    centers = grid.voxel_centers(idx)
    cam_pts = camera.to_camera(centers)
    z = cam_pts[:, 2]
    keep = z >= camera.near_plane
    if not keep.any():
        return depth, semantic, valid
    cam_pts, idx, z = cam_pts[keep], idx[keep], z[keep]
    uv = camera.project(cam_pts)
    half_extent = 0.5 * grid.voxel_size * 0.5 * (camera.fx + camera.fy) / z
    half_extent = np.minimum(half_extent, float(max_stamp_px))
    inside = (
        (uv[:, 0] + half_extent >= 0)
        & (uv[:, 0] - half_extent <= w - 1)
        & (uv[:, 1] + half_extent >= 0)
        & (uv[:, 1] - half_extent <= h - 1)
    )
    if not inside.any():
        return depth, semantic, valid
    uv, idx, z = uv[inside], idx[inside], z[inside]
    he = half_extent[inside]
    classes = grid.labels[idx[:, 0], idx[:, 1], idx[:, 2]]
    # Far-to-near painter's order: the nearest voxel stamps last and wins.
    order = np.lexsort((np.arange(len(z)), -z))
    for i in order:
        x0 = max(0, int(np.ceil(uv[i, 0] - he[i])))
        x1 = min(w - 1, int(np.floor(uv[i, 0] + he[i])))
        y0 = max(0, int(np.ceil(uv[i, 1] - he[i])))
        y1 = min(h - 1, int(np.floor(uv[i, 1] + he[i])))
        # the center pixel always marks, even when the footprint is sub-pixel
        cx = int(np.rint(uv[i, 0]))
        cy = int(np.rint(uv[i, 1]))
        if x0 > x1 and 0 <= cx < w:
            x0 = x1 = cx
        if y0 > y1 and 0 <= cy < h:
            y0 = y1 = cy
        if x0 > x1 or y0 > y1:
            continue
        depth[y0 : y1 + 1, x0 : x1 + 1] = z[i]
        semantic[y0 : y1 + 1, x0 : x1 + 1] = classes[i]
        valid[y0 : y1 + 1, x0 : x1 + 1] = True
    return depth, semantic, valid


# ---------------------------------------------------------------------------
# sequence directory persistence


def save_sequence(seq: SceneSequence, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        save_grid(frame, out / f"frame_{i:04d}.occ")
    traj = {
        "dt_s": seq.frame_period_s,
        "displacements_m": [[float(a), float(b)] for a, b in seq.displacements],
    }
    (out / "trajectory.json").write_text(json.dumps(traj, indent=1, sort_keys=True) + "\n")


def load_sequence(seq_dir) -> SceneSequence:
    folder = Path(seq_dir)
    paths = sorted(folder.glob("frame_*.occ"))
    if not paths:
        raise FileNotFoundError(f"no frame_*.occ files under {folder}")
    frames = [load_grid(p) for p in paths]
    traj = json.loads((folder / "trajectory.json").read_text())
    return SceneSequence(
        frames=frames,
        displacements=np.array(traj["displacements_m"], dtype=np.float64).reshape(-1, 2),
        frame_period_s=float(traj["dt_s"]),
    )
