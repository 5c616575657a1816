"""PNG overlays of ground-truth (green) and predicted (red) myocardium contours."""
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import REGIONS, stratify_slices

GT_COLOUR = (0, 255, 0)
PRED_COLOUR = (255, 0, 0)


def contour(mask):
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def render_overlay(image, gt, pred, scale=2):
    """RGB uint8 array: image in grey, contours on top (prediction drawn last)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.repeat((img * 255).astype(np.uint8)[..., None], 3, axis=-1)
    rgb[contour(gt)] = GT_COLOUR
    rgb[contour(pred)] = PRED_COLOUR
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    return rgb


def region_examples(mask_stack):
    """Middle slice index of each of apex/mid/base (None if the region is absent)."""
    labels = stratify_slices(mask_stack)
    out = {}
    for r in REGIONS:
        idx = [k for k, lab in enumerate(labels) if lab == r]
        out[r] = idx[len(idx) // 2] if idx else None
    return out


def write_overlays(subject, pred, out_dir, scale=2):
    """One PNG per region for ``subject``; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for region, k in region_examples(subject.sa_masks).items():
        if k is None:
            continue
        rgb = render_overlay(subject.sa_images[k], subject.sa_masks[k], pred[k], scale)
        path = out_dir / f"{subject.id}_{region}_slice{k:02d}.png"
        Image.fromarray(rgb).save(path)
        paths.append(path)
    return paths
