"""Sliding-window inference over full volumes plus case evaluation.

Windows sit on a regular grid with stride patch*(1-overlap); the final
window along each axis is clamped to the border so every voxel is covered at
least once. Per-voxel class probabilities are averaged uniformly over the
covering windows, making the result independent of window enumeration order;
argmax ties resolve to the lowest class index.
"""

from __future__ import annotations

import itertools

import numpy as np

from .data import PatchSpec, VolumeRecord
from .metrics import aggregate, case_metrics
from .tensor import ShapeError, Tensor, no_grad


def window_starts(size: int, patch: int, overlap: float):
    """Start offsets covering [0, size) with the last window clamped."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def window_grid(vol_shape, patch_shape, overlap: float):
    """All window corners for a volume; row-major product of per-axis starts."""
    per_axis = [window_starts(s, p, overlap) for s, p in zip(vol_shape, patch_shape)]
    return list(itertools.product(*per_axis))


def coverage_map(vol_shape, patch_shape, overlap: float) -> np.ndarray:
    """How many windows cover each voxel (pure geometry, no network)."""
    cover = np.zeros(vol_shape, dtype=np.int32)
    for corner in window_grid(vol_shape, patch_shape, overlap):
        sl = tuple(slice(c, c + p) for c, p in zip(corner, patch_shape))
        cover[sl] += 1
    return cover


def _np_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z, dtype=np.float64)
    return e / e.sum(axis=axis, keepdims=True)


def sliding_window_infer(net, volume, patch: PatchSpec | tuple, overlap: float = 0.5) -> np.ndarray:
    """Predict a full label volume for a VolumeRecord or raw (H, W, D) image."""
    image = volume.image if isinstance(volume, VolumeRecord) else np.asarray(volume)
    pshape = patch.patch_shape if isinstance(patch, PatchSpec) else tuple(patch)
    if any(s < p for s, p in zip(image.shape, pshape)):
        raise ShapeError(f"volume {image.shape} smaller than patch {pshape}")

    num_classes = net.config.num_classes
    acc = np.zeros((num_classes,) + image.shape, dtype=np.float64)
    count = np.zeros(image.shape, dtype=np.float64)
    for corner in window_grid(image.shape, pshape, overlap):
        sl = tuple(slice(c, c + p) for c, p in zip(corner, pshape))
        x = image[sl][None, None].astype(np.float32)
        with no_grad():
            logits = net(Tensor(x)).data[0]
        acc[(slice(None),) + sl] += _np_softmax(logits, axis=0)
        count[sl] += 1.0
    probs = acc / count
    return np.argmax(probs, axis=0).astype(np.uint8)


def evaluate(predictions: dict, gt_records, num_classes: int | None = None):
    """Score predicted label volumes against ground-truth records.

    ``predictions`` maps case_id -> label volume. Cases without a prediction
    (or predictions without a ground truth) are listed as unmatched and do
    not stop the run.
    """
    if num_classes is None:
        num_classes = 1 + max(
            [int(rec.label.max()) for rec in gt_records]
            + [int(p.max()) for p in predictions.values()]
        )
    rows = []
    unmatched = []
    gt_ids = set()
    for rec in gt_records:
        gt_ids.add(rec.case_id)
        pred = predictions.get(rec.case_id)
        if pred is None:
            unmatched.append(rec.case_id)
            continue
        if pred.shape != rec.label.shape:
            raise ShapeError(
                f"case {rec.case_id}: prediction {pred.shape} vs label {rec.label.shape}"
            )
        rows.extend(
            case_metrics(rec.case_id, pred, rec.label, num_classes, spacing=rec.spacing)
        )
    unmatched.extend(sorted(set(predictions) - gt_ids))
    return rows, aggregate(rows, unmatched=unmatched)


def predict_dataset(net, records, patch, overlap: float = 0.5) -> dict:
    return {
        rec.case_id: sliding_window_infer(net, rec, patch, overlap) for rec in records
    }


def foreground_dice(net, records, patch, overlap: float = 0.5) -> dict:
    """Mean per-class Dice of sliding-window predictions over the records."""
    preds = predict_dataset(net, records, patch, overlap)
    rows, _ = evaluate(preds, records)
    per_class: dict = {}
    for row in rows:
        per_class.setdefault(row["class"], []).append(row["dsc"])
    return {cls: float(np.mean(v)) for cls, v in sorted(per_class.items())}
