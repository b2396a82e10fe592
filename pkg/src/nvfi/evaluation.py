"""Test-split evaluation: render held-out frames and score them."""
from __future__ import annotations

import numpy as np

from .metrics import mask_metrics, psnr, ssim
from .renderer import render_image, render_object_masks
from .scene_io import load_frames

SPLIT_NAMES = {"interp": "test-interp", "extrap": "test-extrap", "train": "train"}


def split_frames(manifest, split, images=None):
    """(camera id, stamp index) -> image for the frames of ``split``."""
    name = SPLIT_NAMES.get(split, split)
    keys = {(f.cam, manifest.stamp_index(f.t)) for f in manifest.split(name)}
    if images is None:
        images, _ = load_frames(manifest, name)
    out = {k: v for k, v in images.items() if k in keys}
    if not out:
        raise ValueError(f"manifest has no {name} frames")
    return out


def evaluate(model, manifest, split, samples=64, images=None, stride=1):
    """Mean PSNR and SSIM over the frames of ``split`` ("interp" or "extrap").

    ``stride`` > 1 scores every stride-th frame only.
    """
    frames = sorted(split_frames(manifest, split, images).items())[::stride]
    p, s = [], []
    for (cam_id, j), gt in frames:
        t = j / (manifest.n_stamps - 1)
        pred = render_image(model, manifest.camera(cam_id), t, samples)
        p.append(psnr(pred, gt))
        s.append(ssim(pred, gt))
    return {"PSNR": float(np.mean(p)), "SSIM": float(np.mean(s)), "frames": len(frames)}


def evaluate_masks(model, objects, manifest, masks, frames, samples=64):
    """Mask metrics of rendered object labels against ground-truth label images."""
    preds, gts = [], []
    for cam_id, j in frames:
        t = j / (manifest.n_stamps - 1)
        preds.append(render_object_masks(model, objects, manifest.camera(cam_id), t, samples))
        gts.append(masks[(cam_id, j)])
    return mask_metrics(preds, gts)
