"""Image dumps for rendered views: PFM depth, PGM class maps, PPM color maps.

PFM files follow the de-facto standard (scanlines bottom-to-top, scale -1.0
marking little-endian floats). PGM/PPM are binary (P5/P6).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import CorruptHeader, TruncatedPayload

# Fixed 17-entry palette for semantic class visualization (class 0 = air is
# black). Index by class id; documented in the README.
CLASS_PALETTE = np.array(
    [
        (0, 0, 0),  # 0 air
        (128, 128, 128),  # 1 drivable surface
        (255, 0, 0),  # 2
        (0, 128, 255),  # 3
        (0, 200, 0),  # 4
        (255, 200, 0),  # 5
        (160, 0, 255),  # 6
        (0, 255, 255),  # 7
        (255, 0, 255),  # 8
        (128, 64, 0),  # 9
        (255, 128, 128),  # 10
        (0, 64, 128),  # 11
        (192, 255, 0),  # 12
        (64, 0, 64),  # 13
        (255, 255, 255),  # 14
        (0, 100, 60),  # 15
        (255, 96, 0),  # 16
    ],
    dtype=np.uint8,
)


def write_pfm(path, depth: np.ndarray) -> None:
    """Write an HxW float map as grayscale PFM (little-endian, scale -1.0)."""
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValueError(f"expected HxW map, got shape {depth.shape}")
    h, w = depth.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + depth[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"Pf":
        raise CorruptHeader(f"{path}: not a grayscale PFM")
    w, h = (int(tok) for tok in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype)
    if data.size < w * h:
        raise TruncatedPayload(f"{path}: expected {w * h} floats, found {data.size}")
    return data[: w * h].reshape(h, w)[::-1].astype(np.float32)


def write_pgm(path, labels: np.ndarray, maxval: int) -> None:
    """Write an HxW class-id map as binary PGM (P5)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected HxW map, got shape {labels.shape}")
    if not 0 < maxval <= 255:
        raise ValueError("PGM maxval must be in [1, 255]")
    if labels.size and int(labels.max()) > maxval:
        raise ValueError("labels exceed the declared maxval")
    h, w = labels.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + labels.astype(np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an HxWx3 uint8 image as binary PPM (P6)."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


def class_map_to_rgb(labels: np.ndarray) -> np.ndarray:
    """Colorize a class-id map with the fixed palette (ids wrap past 17)."""
    labels = np.asarray(labels)
    return CLASS_PALETTE[labels % len(CLASS_PALETTE)]
