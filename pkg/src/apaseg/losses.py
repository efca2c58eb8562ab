"""Training objective: soft Dice over the target classes plus cross entropy.

Both terms consume per-voxel softmax probabilities of shape
(N, classes, H, W, D) and a one-hot target of the same shape. Dice runs over
the foreground classes by default; the background still shapes the softmax
and the cross-entropy term.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _as_tensor, clip_min, log, softmax, tsum

DICE_EPS = 1e-5
CE_PROB_FLOOR = 1e-12


def _check_pair(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.ndim != 5:
        raise ShapeError(f"expected (N, C, H, W, D) tensors, got {pred.shape}")
    return target


def dice_loss(pred: Tensor, target, class_indices=None, include_background=False,
              eps: float = DICE_EPS) -> Tensor:
    """1 - (2/|S|) * sum_j overlap_j / (mass_j + eps) over the class set S.

    ``class_indices`` defaults to the foreground classes (all but channel 0);
    pass ``include_background=True`` to fold channel 0 back in.
    """
    target = _check_pair(pred, target)
    nclass = pred.shape[1]
    if class_indices is None:
        class_indices = list(range(0 if include_background else 1, nclass))
    if not class_indices:
        raise ShapeError("dice_loss needs a non-empty class set")
    total = None
    for j in class_indices:
        pj = pred[:, j]
        tj = target[:, j]
        inter = tsum(pj * tj)
        mass = tsum(pj) + tsum(tj)
        frac = inter / (mass + eps)
        total = frac if total is None else total + frac
    return 1.0 - total * (2.0 / len(class_indices))


def ce_loss(pred: Tensor, target) -> Tensor:
    """Mean negative log-likelihood over every voxel."""
    target = _check_pair(pred, target)
    n_vox = pred.size // pred.shape[1]
    ll = tsum(log(clip_min(pred, CE_PROB_FLOOR)) * target)
    return -ll * (1.0 / n_vox)


def total_loss(pred: Tensor, target, include_background=False) -> Tensor:
    """Sum of the Dice and cross-entropy terms."""
    return dice_loss(pred, target, include_background=include_background) + ce_loss(pred, target)


def softmax_probs(logits: Tensor) -> Tensor:
    """Per-voxel class probabilities from raw logits."""
    return softmax(logits, axis=1)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W, D) integer labels -> (N, C, H, W, D) one-hot array."""
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ShapeError(
            f"labels out of range [0, {num_classes}): {labels.min()}..{labels.max()}"
        )
    eye = np.eye(num_classes, dtype=dtype)
    return np.moveaxis(eye[labels.astype(np.int64)], -1, 1)
