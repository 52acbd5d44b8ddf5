"""Training objectives: tracking loss on the affinity matrix, temporal
consistency of refined boxes, auxiliary head losses, and their sum."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .assoc_net import AffinityMatrix
from .geometry import CORNER_SIGNS_3D
from .simulator import GroundTruthAssociation

LOG_EPS = 1e-12


class LossError(ValueError):
    pass


def _compact_gt(gamma, gt) -> np.ndarray:
    if isinstance(gt, GroundTruthAssociation):
        a = gt.matrix
    else:
        a = np.asarray(gt, dtype=np.float64)
        if isinstance(gamma, AffinityMatrix) and a.shape == (gamma.K + 1, gamma.K + 1):
            rows = np.append(gamma.row_index, gamma.K)
            cols = np.append(gamma.col_index, gamma.K)
            a = a[np.ix_(rows, cols)]
    n, m = a.shape[0] - 1, a.shape[1] - 1
    if np.any(np.abs(a[:n].sum(axis=1) - 1) > 0) or np.any(np.abs(a[:, :m].sum(axis=0) - 1) > 0):
        raise LossError("ground-truth association rows/columns must each sum to 1")
    return a


def tracking_loss(gamma: Tensor | AffinityMatrix, gt) -> Tensor:
    """Cross-entropy between the ground-truth association and the dual-softmax
    matching probabilities.

    For real pairs the probability is ``softmax_row(Γ)[i, j] * softmax_col(Γ)[i, j]``.
    A birth (current object i unmatched) is scored by the row softmax on the
    slot column, a death (previous object j unmatched) by the column softmax on
    the slot row. The sum is divided by the number of supervised entries.
    """
    logits = gamma.logits if isinstance(gamma, AffinityMatrix) else gamma
    a = _compact_gt(gamma, gt)
    if a.shape != logits.shape:
        raise LossError(f"affinity {logits.shape} vs association {a.shape}")
    n, m = a.shape[0] - 1, a.shape[1] - 1
    count = float(a.sum())
    if count == 0:
        return Tensor(0.0)
    fwd = ad.softmax(logits[:n, :], axis=1)
    bwd = ad.softmax(logits[:, :m], axis=0)
    total = Tensor(0.0)
    core = a[:n, :m]
    if core.any():
        prod = ad.mul(fwd[:, :m], bwd[:n, :])
        total = ad.add(total, ad.sum_(ad.mul(ad.log(ad.add(prod, LOG_EPS)), core)))
    births = a[:n, m]
    if births.any():
        total = ad.add(total, ad.sum_(ad.mul(ad.log(ad.add(fwd[:, m], LOG_EPS)), births)))
    deaths = a[n, :m]
    if deaths.any():
        total = ad.add(total, ad.sum_(ad.mul(ad.log(ad.add(bwd[n, :], LOG_EPS)), deaths)))
    return ad.mul_scalar(total, -1.0 / count)


def box_corners(boxes: Tensor) -> Tensor:
    """Differentiable corners (p x 8 x 3) of p boxes given as [x, y, z, l, w, h, yaw] rows."""
    if boxes.ndim != 2 or boxes.shape[1] != 7:
        raise ad.ShapeError(f"box_corners expects p x 7, got {boxes.shape}")
    p = boxes.shape[0]
    offsets = ad.mul(ad.reshape(boxes[:, 3:6], (p, 1, 3)), CORNER_SIGNS_3D / 2.0)
    ox, oy, oz = offsets[:, :, 0], offsets[:, :, 1], offsets[:, :, 2]
    yaw = boxes[:, 6:7]
    c, s = ad.cos(yaw), ad.sin(yaw)
    x = ad.add(ad.sub(ad.mul(ox, c), ad.mul(oy, s)), boxes[:, 0:1])
    y = ad.add(ad.add(ad.mul(ox, s), ad.mul(oy, c)), boxes[:, 1:2])
    z = ad.add(oz, boxes[:, 2:3])
    return ad.concat([ad.reshape(t, (p, 8, 1)) for t in (x, y, z)], axis=2)


def _np_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    with ad.no_grad():
        return box_corners(Tensor(boxes)).data


def temporal_consistency_loss(pred_t, pred_prev, gt_t, gt_prev) -> Tensor:
    """Penalty on relative 3D corner distances between two frames.

    Row r of every argument is the same identity at time t and at time t-ζ
    (rows for several ζ may be stacked). Boxes are world-frame
    [x, y, z, l, w, h, yaw]; predictions already include the refinement.
    For each row, the 8 per-corner displacement lengths of the prediction
    are compared with those of the ground truth; the differences are
    aggregated by root-mean-square over corners, then averaged over rows.
    """
    pred_t = pred_t if isinstance(pred_t, Tensor) else Tensor(pred_t)
    pred_prev = pred_prev if isinstance(pred_prev, Tensor) else Tensor(pred_prev)
    gt_t = np.atleast_2d(np.asarray(gt_t, dtype=np.float64))
    gt_prev = np.atleast_2d(np.asarray(gt_prev, dtype=np.float64))
    p = pred_t.shape[0] if pred_t.ndim == 2 else 0
    if p == 0 or gt_t.size == 0:
        return Tensor(0.0)
    if pred_prev.shape != pred_t.shape or gt_t.shape != pred_t.shape or gt_prev.shape != gt_t.shape:
        raise ad.ShapeError("temporal_consistency_loss: mismatched box arrays")
    d_pred = ad.norm(ad.sub(box_corners(pred_t), box_corners(pred_prev)), axis=2)
    d_gt = np.linalg.norm(_np_corners(gt_t) - _np_corners(gt_prev), axis=2)
    err = ad.sub(d_pred, d_gt)
    rms = ad.sqrt(ad.mean(ad.square(err), axis=1))
    return ad.mean(rms)


def wrap_angle_diff(diff: np.ndarray) -> np.ndarray:
    return diff - 2.0 * math.pi * np.round(diff / (2.0 * math.pi))


def aux_loss_terms(velocity: Tensor, attribute_logits: Tensor, refined_boxes: Tensor,
                   gt_velocity, gt_attribute, gt_boxes, mask=None) -> dict[str, Tensor]:
    """Velocity MSE, attribute cross-entropy and refined-box MSE.

    Rows with ``mask`` False (e.g. false positives) are excluded. MSE terms
    average over rows and components; the yaw error is wrapped to (-pi, pi].
    """
    n = velocity.shape[0]
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        zero = Tensor(0.0)
        return {"velocity": zero, "attribute": zero, "box": zero}
    gt_velocity = np.asarray(gt_velocity, dtype=np.float64).reshape(n, 3)[idx]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(n, 7)[idx]
    gt_attr = np.asarray(gt_attribute, dtype=np.int64).reshape(n)[idx]
    onehot = np.zeros((idx.size, attribute_logits.shape[1]))
    onehot[np.arange(idx.size), gt_attr] = 1.0
    boxes = ad.index(refined_boxes, idx)
    diff = ad.sub(boxes, gt_boxes)
    # wrap the yaw column without touching its gradient
    shift = np.zeros(diff.shape)
    shift[:, 6] = diff.data[:, 6] - wrap_angle_diff(diff.data[:, 6])
    diff = ad.sub(diff, shift)
    return {
        "velocity": ad.mse(ad.index(velocity, idx), gt_velocity),
        "attribute": ad.cross_entropy(ad.index(attribute_logits, idx), onehot),
        "box": ad.mean(ad.square(diff)),
    }


def aux_losses(velocity, attribute_logits, refined_boxes, gt_velocity, gt_attribute, gt_boxes,
               mask=None) -> Tensor:
    return combined_loss(aux_loss_terms(velocity, attribute_logits, refined_boxes,
                                        gt_velocity, gt_attribute, gt_boxes, mask))


def combined_loss(parts: Mapping[str, Tensor] | list[Tensor]) -> Tensor:
    """Unweighted sum of loss terms (in the given order)."""
    terms = list(parts.values()) if isinstance(parts, Mapping) else list(parts)
    total = Tensor(0.0)
    for t in terms:
        total = ad.add(total, t)
    return total
