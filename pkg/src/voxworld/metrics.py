"""Evaluation protocol: IoU metrics, trajectory error, collision rate,
and the repeat-last-frame forecasting baseline.

Horizons follow the 0.5 s frame period: the 1 s / 2 s / 3 s marks sit at
predicted frames 2, 4, and 6.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, LengthMismatch
from .occupancy import AIR_CLASS, SemanticVoxelGrid

FRAME_PERIOD_S = 0.5
HORIZON_MARKS = (2, 4, 6)  # frames ahead for the 1s/2s/3s protocol
DEFAULT_EGO_FOOTPRINT = (4.0, 2.0)  # length x width, meters


def miou(pred: np.ndarray, gt: np.ndarray, class_count: int):
    """Per-class IoU and their mean.

    Classes absent from both grids are excluded from the mean (their IoU is
    reported as NaN); air never participates.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    per_class = np.full(class_count, np.nan)
    for c in range(1, class_count):
        p = pred == c
        g = gt == c
        union = int(np.count_nonzero(p | g))
        if union == 0:
            continue
        per_class[c] = np.count_nonzero(p & g) / union
    present = ~np.isnan(per_class)
    mean = float(np.mean(per_class[present])) if present.any() else float("nan")
    return per_class, mean


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """IoU of the occupied (non-air) masks."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred != AIR_CLASS
    g = gt != AIR_CLASS
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return float(np.count_nonzero(p & g) / union)


def cumulative_positions(displacements) -> np.ndarray:
    d = np.asarray(displacements, dtype=np.float64).reshape(-1, 2)
    return np.cumsum(d, axis=0)


def l2_trajectory(pred_disp, gt_disp, marks=HORIZON_MARKS) -> np.ndarray:
    """Euclidean error of cumulative positions at the horizon marks (meters)."""
    pred = np.asarray(pred_disp, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt_disp, dtype=np.float64).reshape(-1, 2)
    if len(pred) != len(gt):
        raise LengthMismatch(f"pred has {len(pred)} steps, gt has {len(gt)}")
    if len(pred) < max(marks):
        raise LengthMismatch(
            f"need at least {max(marks)} displacement steps, got {len(pred)}"
        )
    pp = cumulative_positions(pred)
    gp = cumulative_positions(gt)
    return np.array([float(np.linalg.norm(pp[m - 1] - gp[m - 1])) for m in marks])


def _column_hits(grid: SemanticVoxelGrid, obstacle_classes: frozenset) -> np.ndarray:
    """BEV map: does any voxel in the (x, y) column carry an obstacle class."""
    mask = np.isin(grid.labels, sorted(obstacle_classes))
    return mask.any(axis=2)


def footprint_collides(
    grid: SemanticVoxelGrid,
    position_xy,
    footprint=DEFAULT_EGO_FOOTPRINT,
    obstacle_classes: frozenset | None = None,
) -> bool:
    """Axis-aligned ego rectangle vs obstacle columns of one grid."""
    if obstacle_classes is None:
        obstacle_classes = frozenset(range(2, grid.class_count))
    half_l, half_w = footprint[0] / 2.0, footprint[1] / 2.0
    x, y = float(position_xy[0]), float(position_xy[1])
    vs = grid.voxel_size
    ox, oy = grid.origin[0], grid.origin[1]
    x0 = int(np.floor((x - half_l - ox) / vs))
    x1 = int(np.ceil((x + half_l - ox) / vs)) - 1
    y0 = int(np.floor((y - half_w - oy) / vs))
    y1 = int(np.ceil((y + half_w - oy) / vs)) - 1
    x0 = max(x0, 0)
    y0 = max(y0, 0)
    x1 = min(x1, grid.dims[0] - 1)
    y1 = min(y1, grid.dims[1] - 1)
    if x0 > x1 or y0 > y1:
        return False
    hits = _column_hits(grid, frozenset(obstacle_classes))
    return bool(hits[x0 : x1 + 1, y0 : y1 + 1].any())


def collision_rate(
    samples,
    footprint=DEFAULT_EGO_FOOTPRINT,
    obstacle_classes=None,
    marks=HORIZON_MARKS,
    cumulative: bool = False,
) -> np.ndarray:
    """Fraction of samples whose ego footprint overlaps obstacles per mark.

    Each sample is (start_xy, displacements, grids): the ego start position,
    the predicted per-frame displacements, and one ground-truth grid per
    predicted frame. With ``cumulative`` a sample counts as colliding at a
    mark if it collided at that mark or any earlier frame.
    """
    samples = list(samples)
    rates = np.zeros(len(marks))
    for start_xy, displacements, grids in samples:
        disp = np.asarray(displacements, dtype=np.float64).reshape(-1, 2)
        if len(grids) != len(disp):
            raise DimensionMismatch(
                f"{len(grids)} grids for {len(disp)} displacement steps"
            )
        if len(disp) < max(marks):
            raise LengthMismatch(
                f"need {max(marks)} steps for the horizon marks, got {len(disp)}"
            )
        positions = np.asarray(start_xy, dtype=np.float64) + cumulative_positions(disp)
        per_frame = [
            footprint_collides(grids[i], positions[i], footprint, obstacle_classes)
            for i in range(max(marks))
        ]
        for j, m in enumerate(marks):
            hit = any(per_frame[: m]) if cumulative else per_frame[m - 1]
            rates[j] += float(hit)
    if samples:
        rates /= len(samples)
    return rates


def copy_paste_baseline(last_grid: SemanticVoxelGrid, horizon: int):
    """Forecast by repeating the last observed grid."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1 frame")
    return [last_grid] * horizon


@dataclass
class EvalReport:
    """Forecast quality at the 1s/2s/3s marks plus planning metrics."""

    miou_at: dict = field(default_factory=dict)  # "1s" -> float
    iou_at: dict = field(default_factory=dict)
    l2_at: dict = field(default_factory=dict)
    collision_at: dict = field(default_factory=dict)
    per_class_iou: list | None = None
    baseline_miou_at: dict | None = None
    baseline_iou_at: dict | None = None

    @staticmethod
    def _avg(d: dict) -> float:
        vals = [v for k, v in d.items() if k != "avg"]
        return float(np.mean(vals)) if vals else float("nan")

    def finalize(self) -> "EvalReport":
        for d in (self.miou_at, self.iou_at, self.l2_at, self.collision_at,
                  self.baseline_miou_at, self.baseline_iou_at):
            if d:
                d["avg"] = self._avg(d)
        return self

    def to_json(self) -> str:
        payload = {
            "miou": self.miou_at,
            "iou": self.iou_at,
            "l2_m": self.l2_at,
            "collision_rate": self.collision_at,
            "per_class_iou": self.per_class_iou,
            "baseline_miou": self.baseline_miou_at,
            "baseline_iou": self.baseline_iou_at,
        }
        return json.dumps(payload, indent=1, sort_keys=True, allow_nan=True)

    def to_table(self) -> str:
        marks = ["1s", "2s", "3s", "avg"]

        def row(name, d):
            if not d:
                return f"{name:<22s}" + "".join(f"{'-':>9s}" for _ in marks)
            return f"{name:<22s}" + "".join(
                f"{d.get(m, float('nan')):>9.4f}" for m in marks
            )

        lines = [
            f"{'metric':<22s}" + "".join(f"{m:>9s}" for m in marks),
            row("mIoU", self.miou_at),
            row("IoU", self.iou_at),
            row("L2 (m)", self.l2_at),
            row("collision rate", self.collision_at),
        ]
        if self.baseline_miou_at:
            lines.append(row("mIoU copy&paste", self.baseline_miou_at))
        if self.baseline_iou_at:
            lines.append(row("IoU copy&paste", self.baseline_iou_at))
        return "\n".join(lines)


def evaluate_forecast(
    pred_grids,
    gt_grids,
    pred_disp=None,
    gt_disp=None,
    last_observed: SemanticVoxelGrid | None = None,
    ego_start=(0.0, 0.0),
    footprint=DEFAULT_EGO_FOOTPRINT,
    obstacle_classes=None,
    marks=HORIZON_MARKS,
) -> EvalReport:
    """Score predicted grids (and optionally a trajectory) against GT."""
    report = EvalReport()
    labels = ["1s", "2s", "3s"]
    if len(pred_grids) < max(marks) or len(gt_grids) < max(marks):
        raise LengthMismatch(
            f"need {max(marks)} predicted and gt frames for the standard marks"
        )
    class_count = gt_grids[0].class_count
    for name, m in zip(labels, marks):
        p = pred_grids[m - 1].labels
        g = gt_grids[m - 1].labels
        _, mean = miou(p, g, class_count)
        report.miou_at[name] = mean
        report.iou_at[name] = binary_iou(p, g)
    if last_observed is not None:
        base = copy_paste_baseline(last_observed, max(marks))
        report.baseline_miou_at = {}
        report.baseline_iou_at = {}
        for name, m in zip(labels, marks):
            _, mean = miou(base[m - 1].labels, gt_grids[m - 1].labels, class_count)
            report.baseline_miou_at[name] = mean
            report.baseline_iou_at[name] = binary_iou(
                base[m - 1].labels, gt_grids[m - 1].labels
            )
    if pred_disp is not None and gt_disp is not None:
        errs = l2_trajectory(pred_disp, gt_disp, marks)
        for name, err in zip(labels, errs):
            report.l2_at[name] = float(err)
        rates = collision_rate(
            [(ego_start, pred_disp, gt_grids[: max(marks)])],
            footprint,
            obstacle_classes,
            marks,
        )
        for name, rate in zip(labels, rates):
            report.collision_at[name] = float(rate)
    return report.finalize()
