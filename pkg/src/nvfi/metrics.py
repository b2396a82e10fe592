"""Image quality (PSNR, SSIM) and instance-mask metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    a, b = _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter(img, g):
    # separable "valid" correlation
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    h = len(g) // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM with a Gaussian window, computed per channel and averaged.

    Only window positions fully inside the image are used.
    """
    a, b = _check_shapes(a, b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {window}x{window} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = _gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    # unbiased covariance, matching the usual reference implementation
    n = window * window
    cov_norm = n / (n - 1)
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter(x, g), _filter(y, g)
        sxx = cov_norm * (_filter(x * x, g) - mx * mx)
        syy = cov_norm * (_filter(y * y, g) - my * my)
        sxy = cov_norm * (_filter(x * y, g) - mx * my)
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


@dataclass
class MaskScores:
    ap: float
    pq: float
    f1: float
    miou: float

    def as_dict(self):
        return {"AP": self.ap, "PQ": self.pq, "F1": self.f1, "mIoU": self.miou}


def match_segments(pred, gt):
    """Greedy one-to-one matching by descending IoU.

    Returns (pairs [(pred_id, gt_id, iou)], pred_ids, gt_ids); label 0 is background.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask resolution mismatch: {pred.shape} vs {gt.shape}")
    p_ids = [int(i) for i in np.unique(pred) if i != 0]
    g_ids = [int(i) for i in np.unique(gt) if i != 0]
    cands = []
    for p in p_ids:
        pm = pred == p
        for g in g_ids:
            gm = gt == g
            inter = np.logical_and(pm, gm).sum()
            if inter:
                cands.append((inter / np.logical_or(pm, gm).sum(), p, g))
    # ties: lower ids first, so the result does not depend on dict order
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_p, used_g, pairs = set(), set(), []
    for iou, p, g in cands:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g, float(iou)))
    return pairs, p_ids, g_ids


def frame_mask_scores(pred, gt, iou_threshold=0.5):
    pairs, p_ids, g_ids = match_segments(pred, gt)
    tp_ious = [iou for _, _, iou in pairs if iou >= iou_threshold]
    tp = len(tp_ious)
    fp = len(p_ids) - tp
    fn = len(g_ids) - tp
    ap = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 1.0
    denom = tp + fp / 2 + fn / 2
    pq = sum(tp_ious) / denom if denom else 1.0
    matched = {g: iou for _, g, iou in pairs}
    miou = float(np.mean([matched.get(g, 0.0) for g in g_ids])) if g_ids else 1.0
    if not g_ids and not p_ids:
        ap = 1.0
    return MaskScores(ap, pq, f1, miou)


def mask_metrics(preds, gts, iou_threshold=0.5):
    """Frame-averaged AP, PQ, F1 and mIoU over paired label images."""
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    if len(preds) != len(gts):
        raise ValueError("need one ground-truth mask per prediction")
    frames = [frame_mask_scores(p, g, iou_threshold) for p, g in zip(preds, gts)]
    return MaskScores(*(float(np.mean([getattr(f, k) for f in frames])) for k in ("ap", "pq", "f1", "miou")))


def write_eval_csv(rows, path):
    """Rows of (split, metric, values per scene); the mean column is over scenes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = max((len(v) for _, _, v in rows), default=0)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["split", "metric", "mean"] + [f"scene{i}" for i in range(n)])
        for split, metric, values in rows:
            w.writerow([split, metric, f"{np.mean(values):.6f}"] + [f"{v:.6f}" for v in values])
