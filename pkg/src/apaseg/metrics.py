"""Overlap and surface metrics, plus size-stratified reporting.

Dice works on integer label volumes. HD95 extracts 6-connectivity boundary
voxels (any foreground voxel with a background face-neighbour, or touching
the volume border), measures Euclidean distances in millimetres between the
two boundary point sets, and takes the maximum of the two directed 95th
percentiles (linear interpolation). With an empty mask on either side HD95
is undefined and reported as NaN, never 0.
"""

from __future__ import annotations

import csv
import json
import math

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .tensor import ShapeError

HD95_UNDEFINED = float("nan")

# Size bins over the foreground-to-volume fraction; cases above the last
# edge land in ">0.6%".
SIZE_BIN_EDGES = (0.0, 0.001, 0.003, 0.006)
SIZE_BIN_LABELS = ("0-0.1%", "0.1-0.3%", "0.3-0.6%", ">0.6%")

_FACE_STRUCT = ndimage.generate_binary_structure(3, 1)  # 6-connectivity


def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int) -> float:
    """2|A n B| / (|A| + |B|); both-empty counts as a perfect 1.0."""
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    a = pred_mask == class_id
    b = gt_mask == class_id
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """(M, 3) coordinates of foreground voxels on the 6-connectivity boundary."""
    fg = mask.astype(bool)
    interior = ndimage.binary_erosion(fg, structure=_FACE_STRUCT, border_value=0)
    return np.argwhere(fg & ~interior)


def hd95(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int,
         spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile boundary distance in mm; NaN if undefined."""
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    a = boundary_voxels(pred_mask == class_id)
    b = boundary_voxels(gt_mask == class_id)
    if len(a) == 0 or len(b) == 0:
        return HD95_UNDEFINED
    sp = np.asarray(spacing, dtype=np.float64)
    pa = a * sp
    pb = b * sp
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def target_fraction(gt_mask: np.ndarray, class_id: int) -> float:
    return float((gt_mask == class_id).sum()) / gt_mask.size


def size_bin(fraction: float) -> str:
    """Bin label for a foreground-to-volume fraction."""
    if fraction < 0:
        raise ValueError(f"fraction must be >= 0, got {fraction}")
    for edge, label in zip(SIZE_BIN_EDGES[1:], SIZE_BIN_LABELS[:-1]):
        if fraction < edge:
            return label
    return SIZE_BIN_LABELS[-1]


def case_metrics(case_id: str, pred_mask, gt_mask, num_classes: int,
                 spacing=(1.0, 1.0, 1.0)):
    """One row per foreground class: dsc, hd95, fraction, and size bin."""
    rows = []
    for cls in range(1, num_classes):
        frac = target_fraction(gt_mask, cls)
        rows.append({
            "case_id": case_id,
            "class": cls,
            "dsc": dice_score(pred_mask, gt_mask, cls),
            "hd95": hd95(pred_mask, gt_mask, cls, spacing),
            "target_fraction": frac,
            "size_bin": size_bin(frac),
        })
    return rows


def size_report(rows):
    """Mean DSC per (size bin, class); empty bins are absent, not zero."""
    table = {}
    for row in rows:
        key = (row["size_bin"], row["class"])
        table.setdefault(key, []).append(row["dsc"])
    return {
        f"{bin_label}|class_{cls}": float(np.mean(vals))
        for (bin_label, cls), vals in sorted(table.items())
    }


def aggregate(rows, unmatched=()):
    """Per-class means plus the size-stratified table."""
    per_class = {}
    for row in rows:
        per_class.setdefault(row["class"], []).append(row)
    summary = {}
    for cls, group in sorted(per_class.items()):
        dscs = [r["dsc"] for r in group]
        hds = [r["hd95"] for r in group if not math.isnan(r["hd95"])]
        summary[f"class_{cls}"] = {
            "mean_dsc": float(np.mean(dscs)),
            "mean_hd95": float(np.mean(hds)) if hds else None,
            "cases": len(group),
        }
    return {
        "per_class": summary,
        "size_bins": list(SIZE_BIN_LABELS),
        "size_stratified_dsc": size_report(rows),
        "unmatched_cases": list(unmatched),
    }


def write_metrics_csv(rows, path):
    fields = ["case_id", "class", "dsc", "hd95", "target_fraction", "size_bin"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})


def write_metrics_json(report: dict, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
