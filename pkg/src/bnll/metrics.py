"""Localization and segmentation metrics: PCKh, NME, pixel/mean acc, mean IU."""

from __future__ import annotations

import numpy as np


def decode_heatmaps(maps: np.ndarray, in_res: tuple[int, int]) -> np.ndarray:
    """Peak positions of (n, k, h, w) heatmaps mapped back to input coords.

    Returns (n, k, 3) rows of (x, y, confidence).
    """
    n, k, h, w = maps.shape
    sy = in_res[0] / h
    sx = in_res[1] / w
    flat = maps.reshape(n, k, -1)
    idx = flat.argmax(axis=-1)
    conf = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    ys, xs = np.divmod(idx, w)
    out = np.stack([xs * sx, ys * sy, conf], axis=-1)
    return out.astype(np.float32)


def pckh(preds: np.ndarray, gts: np.ndarray, head_sizes: np.ndarray,
         thresh: float = 0.5) -> tuple[np.ndarray, float]:
    """Fraction of visible joints within thresh * head_size of ground truth.

    preds: (n, k, >=2); gts: (n, k, 3) with visibility; head_sizes: (n,).
    The comparison is inclusive (a hit at exactly the threshold counts).
    Returns (per-joint fractions, mean over all visible joints).
    """
    preds = np.asarray(preds, np.float64)
    gts = np.asarray(gts, np.float64)
    head_sizes = np.asarray(head_sizes, np.float64)
    dist = np.linalg.norm(preds[:, :, :2] - gts[:, :, :2], axis=-1)
    vis = gts[:, :, 2] > 0
    hit = (dist <= thresh * head_sizes[:, None]) & vis
    joint_vis = vis.sum(axis=0)
    with np.errstate(invalid="ignore"):
        per_joint = np.where(joint_vis > 0, hit.sum(axis=0) / np.maximum(joint_vis, 1), np.nan)
    total_vis = vis.sum()
    mean = float(hit.sum() / total_vis) if total_vis else float("nan")
    return per_joint, mean


def nme(preds: np.ndarray, gts: np.ndarray, norms: np.ndarray) -> float:
    """Mean visible-landmark error normalized per sample, as a percentage."""
    preds = np.asarray(preds, np.float64)
    gts = np.asarray(gts, np.float64)
    norms = np.asarray(norms, np.float64)
    dist = np.linalg.norm(preds[:, :, :2] - gts[:, :, :2], axis=-1)
    vis = gts[:, :, 2] > 0
    if not vis.any():
        return float("nan")
    normalized = dist / norms[:, None]
    return float(normalized[vis].mean() * 100.0)


def bbox_norm(bbox: tuple[float, float, float, float]) -> float:
    """sqrt(w * h) normalization for box-based NME protocols."""
    return float(np.sqrt(bbox[2] * bbox[3]))


def seg_metrics(pred_masks: np.ndarray, gt_masks: np.ndarray,
                num_classes: int) -> tuple[float, float, float]:
    """(pixel accuracy, mean per-class accuracy, mean IU).

    Classes absent from the ground truth are excluded from the means.
    """
    pred = np.asarray(pred_masks).ravel()
    gt = np.asarray(gt_masks).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes disagree: {pred_masks.shape} vs {gt_masks.shape}")
    conf = np.zeros((num_classes, num_classes), np.int64)
    np.add.at(conf, (gt, pred), 1)
    n_ii = np.diag(conf).astype(np.float64)
    t_i = conf.sum(axis=1).astype(np.float64)
    pred_i = conf.sum(axis=0).astype(np.float64)
    present = t_i > 0
    pixel_acc = float(n_ii.sum() / t_i.sum())
    mean_acc = float((n_ii[present] / t_i[present]).mean())
    union = t_i + pred_i - n_ii
    mean_iu = float((n_ii[present] / union[present]).mean())
    return pixel_acc, mean_acc, mean_iu
