"""Registration quality measures and run reports.

Landmark error is the mean L2 distance between propagated source
landmarks and their ground-truth targets, with per-axis differences
taken around the torus (minimal image) and scaled by the voxel spacing.
Reports are plain dicts so they serialize to stable JSON.
"""

from __future__ import annotations

import statistics
from datetime import datetime, timezone

import numpy as np

from .errors import InvalidParameterError
from .geodesic import jacobian_determinant, propagate_landmarks
from .grid import GridDesc, LandmarkSet, MaskImage, ScalarImage, mask_image
from .gridio import ImagePair
from .metrics import RmiConfig, dice, rmi, ssd
from .optimize import RegistrationResult
from .segment import union_mask


def landmark_l2(a: LandmarkSet, b: LandmarkSet, grid: GridDesc) -> float:
    """Mean pointwise L2 distance in physical units, shortest way around
    the torus on every axis."""
    pa, pb = a.points, b.points
    if pa.shape != pb.shape:
        raise InvalidParameterError(
            f"landmark sets differ in shape: {pa.shape} vs {pb.shape}"
        )
    if pa.shape[0] == 0:
        return 0.0
    d2 = np.zeros(pa.shape[0])
    for j, (n, h) in enumerate(zip(grid.sizes, grid.spacing)):
        dj = np.abs(pa[:, j] - pb[:, j]) % n
        dj = np.minimum(dj, n - dj)
        d2 += (dj * h) ** 2
    return float(np.mean(np.sqrt(d2)))


def evaluate_pair(
    pair: ImagePair,
    result: RegistrationResult,
    mask: MaskImage | None = None,
    estimated_masks: tuple[MaskImage, MaskImage] | None = None,
    rmi_cfg: RmiConfig = RmiConfig(),
) -> dict:
    """One report row: similarity before/after, landmark errors when the
    pair carries landmarks, mask Dice when truth and estimate exist, and
    the map-validity summary."""
    src, tgt = pair.source, pair.target
    if mask is not None:
        src = mask_image(src, mask)
        tgt = mask_image(tgt, mask)
    row = {
        "pair": pair.name,
        "ssd_before": ssd(src, tgt),
        "ssd_after": ssd(result.deformed, tgt),
        "rmi_before": rmi(src, tgt, rmi_cfg),
        "rmi_after": rmi(result.deformed, tgt, rmi_cfg),
        "jac_det_min": float(jacobian_determinant(result.path.psi).data.min()),
        "iterations": result.iterations,
        "converged": bool(result.converged),
    }
    if pair.has_landmarks:
        moved = propagate_landmarks(pair.landmarks_source, result.path)
        row["landmark_l2_before"] = landmark_l2(
            pair.landmarks_source, pair.landmarks_target, pair.grid
        )
        row["landmark_l2_after"] = landmark_l2(moved, pair.landmarks_target, pair.grid)
    if pair.has_masks and estimated_masks is not None:
        truth = union_mask(pair.mask_source, pair.mask_target)
        row["dice"] = dice(truth, union_mask(*estimated_masks))
    for key, val in row.items():
        if isinstance(val, float) and not np.isfinite(val):
            raise InvalidParameterError(f"report field {key} is not finite")
    return row


def _aggregate(rows: list[dict]) -> dict:
    keys = sorted({k for row in rows for k in row if isinstance(row[k], (int, float))
                   and not isinstance(row[k], bool)})
    mean, median = {}, {}
    for key in keys:
        vals = [float(row[key]) for row in rows if key in row]
        if vals:
            mean[key] = float(np.mean(vals))
            median[key] = float(statistics.median(vals))
    return {"mean": mean, "median": median, "pairs": len(rows)}


def build_report(config: dict, rows: list[dict], timestamp: str | None = None) -> dict:
    """Assemble the full run report.

    With identical config and rows the output is byte-stable except for
    the timestamp, which callers may pin for reproducibility tests.
    """
    if timestamp is None:
        timestamp = datetime.now(timezone.utc).isoformat()
    return {
        "config": config,
        "pairs": sorted(rows, key=lambda r: str(r.get("pair", ""))),
        "aggregate": _aggregate(rows),
        "timestamp": timestamp,
    }
