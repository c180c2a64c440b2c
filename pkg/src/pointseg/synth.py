"""Reproducible synthetic 3D cases: blob targets inside a spherical valid
region, with box smoothing, additive Gaussian noise, and z-normalization over
the valid region (zero outside, like a stripped scan).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import ManifestEntry, Volume3, load_volume, save_manifest, save_volume

_MAX_ATTEMPTS = 50


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple = (32, 32, 32)
    n_blobs_range: tuple = (1, 3)
    bg_mean: float = 0.0
    contrast: float = 4.0
    noise_sigma: float = 0.6
    smooth_radius: int = 1
    semi_axes_range: tuple = (3.5, 6.5)
    valid_fraction: float = 0.9
    rng_seed: int = 0

    def __post_init__(self):
        if any(d < 16 for d in self.dims):
            raise ValidationError("dims must be >= 16 per axis")
        if self.contrast <= 0:
            raise ValidationError("contrast must be > 0")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        lo, hi = self.n_blobs_range
        if not (1 <= lo <= hi):
            raise ValidationError(f"bad n_blobs_range {self.n_blobs_range}")
        if self.smooth_radius < 0:
            raise ValidationError("smooth_radius must be >= 0")
        a, b = self.semi_axes_range
        if not (1.0 <= a <= b):
            raise ValidationError(f"bad semi_axes_range {self.semi_axes_range}")
        if not (0.1 < self.valid_fraction <= 1.0):
            raise ValidationError("valid_fraction must be in (0.1, 1]")


def _sphere_mask(dims, fraction):
    dx, dy, dz = dims
    cx, cy, cz = (dx - 1) / 2.0, (dy - 1) / 2.0, (dz - 1) / 2.0
    r = fraction * min(dx, dy, dz) / 2.0
    X, Y, Z = np.ogrid[0:dx, 0:dy, 0:dz]
    return (X - cx) ** 2 + (Y - cy) ** 2 + (Z - cz) ** 2 <= r * r


def valid_region_mask(cfg):
    """Spherical valid-region mask centered on the grid."""
    return _sphere_mask(cfg.dims, cfg.valid_fraction)


def _ellipsoid_mask(dims, center, semi_axes):
    X, Y, Z = np.ogrid[0:dims[0], 0:dims[1], 0:dims[2]]
    return (
        ((X - center[0]) / semi_axes[0]) ** 2
        + ((Y - center[1]) / semi_axes[1]) ** 2
        + ((Z - center[2]) / semi_axes[2]) ** 2
    ) <= 1.0


def _draw_gt(cfg, rng, omega_m):
    """Connected union of 1..k axis-aligned ellipsoids clipped to omega_m, or
    None when the draw degenerates."""
    dims = cfg.dims
    n_blobs = int(rng.integers(cfg.n_blobs_range[0], cfg.n_blobs_range[1] + 1))
    # first center inside a shrunken core so blobs mostly stay in the region
    core = _sphere_mask(cfg.dims, cfg.valid_fraction * 0.55)
    core_coords = np.argwhere(core & omega_m)
    if core_coords.shape[0] == 0:
        raise ValidationError("valid region too small to place targets")
    gt = np.zeros(dims, dtype=bool)
    for b in range(n_blobs):
        if b == 0:
            center = core_coords[int(rng.integers(core_coords.shape[0]))]
        else:
            union_coords = np.argwhere(gt)
            center = union_coords[int(rng.integers(union_coords.shape[0]))]
        semi = rng.uniform(cfg.semi_axes_range[0], cfg.semi_axes_range[1], size=3)
        blob = _ellipsoid_mask(dims, center, semi) & omega_m
        if blob.sum() < 8:
            return None
        gt |= blob
    ext = np.argwhere(gt)
    if (ext.max(axis=0) - ext.min(axis=0) < 2).any():
        return None  # too thin to annotate with a non-degenerate box
    return gt


def generate_case(cfg, index, normalize=True):
    """One synthetic case: (image Volume3, gt mask, omega_m mask).

    Deterministic in (cfg, index); degenerate draws retry with the next
    sub-seed.  normalize=False skips the z-normalization (raw intensity
    units, used to verify contrast-scale invariants).
    """
    omega_m = valid_region_mask(cfg)
    for attempt in range(_MAX_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.rng_seed, index, attempt)))
        gt = _draw_gt(cfg, rng, omega_m)
        if gt is None:
            continue
        img = np.full(cfg.dims, cfg.bg_mean, dtype=np.float64)
        img[gt] += cfg.contrast
        if cfg.smooth_radius > 0:
            img = ndimage.uniform_filter(img, size=2 * cfg.smooth_radius + 1, mode="nearest")
        if cfg.noise_sigma > 0:
            img = img + rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
        if normalize:
            inside = img[omega_m]
            mu = inside.mean()
            sd = inside.std()
            if sd < 1e-12:
                sd = 1.0
            img = (img - mu) / sd
        img[~omega_m] = 0.0
        vol = Volume3.from_array(img.astype(np.float32), kind="intensity")
        return vol, gt, omega_m
    raise ValidationError(f"case {index}: no usable target after {_MAX_ATTEMPTS} attempts")


def split_ranges(n_train, n_val, n_test, starts=None):
    """Index ranges for the three splits; explicit starts must not overlap."""
    if min(n_train, n_val, n_test) < 1:
        raise ValidationError("every split must contain at least one case")
    if starts is None:
        starts = (0, n_train, n_train + n_val)
    ranges = {
        "train": range(starts[0], starts[0] + n_train),
        "val": range(starts[1], starts[1] + n_val),
        "test": range(starts[2], starts[2] + n_test),
    }
    seen = set()
    for name, rg in ranges.items():
        if seen & set(rg):
            raise ValidationError(f"split index ranges overlap at {name}")
        seen |= set(rg)
    return ranges


def generate_split(cfg, n_train, n_val, n_test, out_dir, starts=None):
    """Write all cases plus one combined manifest and per-split manifests.

    Returns {split: [ManifestEntry...]}; paths inside manifests are relative
    to out_dir.
    """
    ranges = split_ranges(n_train, n_val, n_test, starts)
    case_dir = os.path.join(out_dir, "cases")
    os.makedirs(case_dir, exist_ok=True)
    by_split = {}
    all_entries = []
    for split, rg in ranges.items():
        entries = []
        for i in rg:
            img, gt, omega_m = generate_case(cfg, i)
            cid = f"{split}{i:03d}"
            rel = {
                "image": os.path.join("cases", f"{cid}_img.pavol"),
                "gt": os.path.join("cases", f"{cid}_gt.pavol"),
                "mask": os.path.join("cases", f"{cid}_mask.pavol"),
            }
            save_volume(os.path.join(out_dir, rel["image"]), img)
            save_volume(
                os.path.join(out_dir, rel["gt"]),
                Volume3.from_array(gt.astype(np.uint8), kind="label"),
            )
            save_volume(
                os.path.join(out_dir, rel["mask"]),
                Volume3.from_array(omega_m.astype(np.uint8), kind="label"),
            )
            entries.append(ManifestEntry(cid, rel["image"], rel["gt"], rel["mask"]))
        save_manifest(os.path.join(out_dir, f"{split}.tsv"), entries)
        by_split[split] = entries
        all_entries.extend(entries)
    save_manifest(os.path.join(out_dir, "manifest.tsv"), all_entries)
    return by_split


def load_case(entry, base_dir):
    """(image Volume3, gt bool mask, omega_m bool mask) for a manifest entry."""
    img = load_volume(os.path.join(base_dir, entry.image))
    gt = load_volume(os.path.join(base_dir, entry.gt)).arr().astype(bool)
    m = load_volume(os.path.join(base_dir, entry.mask)).arr().astype(bool)
    return img, gt, m
