"""Simulates the seven-point annotation protocol from a ground-truth mask.

Two variants: relaxed_bg places each directional background point a few
voxels beyond the true extent of the target (a box with margin, the intended
protocol), extreme_points places them exactly at the target's six extreme
voxels (a tight box whose faces touch the target, the ablated protocol).
The foreground click lands near the mask centroid with optional jitter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .volume import BG_TAGS, TAG_AXIS_SIDE, PointAnnotation

log = logging.getLogger(__name__)

VARIANTS = ("relaxed_bg", "extreme_points")


@dataclass(frozen=True)
class AnnotatorConfig:
    fg_jitter: int = 2
    bg_margin_range: tuple = (1, 4)
    variant: str = "relaxed_bg"
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.bg_margin_range
        if lo < 0 or hi < lo:
            raise ValidationError(f"bad bg_margin_range {self.bg_margin_range}")
        if self.fg_jitter < 0:
            raise ValidationError("fg_jitter must be >= 0")
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}")


def _nearest(coords, target):
    d2 = ((coords - target) ** 2).sum(axis=1)
    return tuple(int(c) for c in coords[int(np.argmin(d2))])


def simulate_annotation(gt, mask_m, cfg=None):
    """Draw one PointAnnotation for a ground-truth mask inside a valid region."""
    cfg = cfg or AnnotatorConfig()
    dims = gt.shape
    if mask_m.shape != dims:
        raise ValidationError("gt and mask_m dims differ")
    coords = np.argwhere(gt)
    if coords.shape[0] == 0:
        raise ValidationError("cannot annotate an empty ground-truth mask")
    if (gt & ~mask_m).any():
        raise ValidationError("ground truth must lie inside the valid region")
    mins = coords.min(axis=0)
    maxs = coords.max(axis=0)
    centroid = np.rint(coords.mean(axis=0)).astype(int)
    rng = np.random.default_rng(cfg.rng_seed)

    bg = {}
    for tag in BG_TAGS:  # canonical order keeps rng draws reproducible
        axis, side = TAG_AXIS_SIDE[tag]
        extreme = int(maxs[axis] if side else mins[axis])
        if cfg.variant == "extreme_points":
            achievers = coords[coords[:, axis] == extreme]
            face_center = np.rint(achievers.mean(axis=0)).astype(int)
            bg[tag] = _nearest(achievers, face_center)
        else:
            margin = int(rng.integers(cfg.bg_margin_range[0], cfg.bg_margin_range[1] + 1))
            want = extreme + margin if side else extreme - margin
            got = int(np.clip(want, 0, dims[axis] - 1))
            if got != want:
                log.warning(
                    "bg point %s clamped to the grid border (target touches it)", tag
                )
            pt = centroid.copy()
            pt = np.clip(pt, 0, np.asarray(dims) - 1)
            pt[axis] = got
            bg[tag] = tuple(int(c) for c in pt)

    ann_box_lo = [None] * 3
    ann_box_hi = [None] * 3
    for tag, pt in bg.items():
        axis, side = TAG_AXIS_SIDE[tag]
        (ann_box_hi if side else ann_box_lo)[axis] = pt[axis]
    for ax in range(3):
        if ann_box_lo[ax] >= ann_box_hi[ax]:
            raise ValidationError(
                f"target too thin along axis {ax} for a non-degenerate annotation box"
            )

    def inside_gt_and_box(pt):
        return bool(gt[pt]) and all(
            ann_box_lo[ax] < pt[ax] < ann_box_hi[ax] for ax in range(3)
        )

    fg = tuple(int(c) for c in centroid)
    if not gt[fg]:
        fg = _nearest(coords, centroid)
    if cfg.fg_jitter > 0:
        for _ in range(200):
            off = rng.integers(-cfg.fg_jitter, cfg.fg_jitter + 1, size=3)
            cand = tuple(int(c) for c in np.clip(centroid + off, 0, np.asarray(dims) - 1))
            if inside_gt_and_box(cand):
                fg = cand
                break
    if not inside_gt_and_box(fg):
        # fall back to any ground-truth voxel strictly inside the box
        ok = (
            (coords[:, 0] > ann_box_lo[0]) & (coords[:, 0] < ann_box_hi[0])
            & (coords[:, 1] > ann_box_lo[1]) & (coords[:, 1] < ann_box_hi[1])
            & (coords[:, 2] > ann_box_lo[2]) & (coords[:, 2] < ann_box_hi[2])
        )
        if not ok.any():
            raise ValidationError("no foreground voxel lies strictly inside the bg box")
        fg = _nearest(coords[ok], centroid)

    ann = PointAnnotation(fg=fg, bg=bg)
    ann.validate(dims)
    return ann
