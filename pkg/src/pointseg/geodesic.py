"""Geodesic distance transforms and foreground seed expansion.

The distance between voxels is the minimum over connected voxel paths of the
accumulated absolute intensity change; homogeneous regions cost nothing to
cross.  Distances are computed inside a domain mask only (paths may not leave
it), with +inf outside and at unreachable voxels.

Two solvers: an exact Dijkstra on the voxel graph (canonical) and a
Toivanen-style raster scan that relaxes in alternating sweeps (upper bound,
converging to the exact field).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ValidationError
from .volume import RegionPartition, Volume3, bounding_box_from_bg, check_coord, linear_index

NEIGHBORHOODS = (6, 26)
ALGORITHMS = ("dijkstra", "raster_scan")


def neighbor_offsets(connectivity):
    """Deterministically ordered (ox, oy, oz) offset table."""
    if connectivity not in NEIGHBORHOODS:
        raise ValidationError(f"connectivity must be one of {NEIGHBORHOODS}")
    offs = []
    for oz in (-1, 0, 1):
        for oy in (-1, 0, 1):
            for ox in (-1, 0, 1):
                if ox == oy == oz == 0:
                    continue
                if connectivity == 6 and abs(ox) + abs(oy) + abs(oz) != 1:
                    continue
                offs.append((ox, oy, oz))
    o = np.array(offs, dtype=np.int64)
    return o[:, 0].copy(), o[:, 1].copy(), o[:, 2].copy()


@dataclass(frozen=True)
class ExpansionConfig:
    """Controls seed expansion: threshold fraction, graph connectivity,
    solver choice, and the sweep cap for the raster solver."""

    epsilon: float = 0.2
    neighborhood: int = 26
    algorithm: str = "dijkstra"
    raster_sweeps: int = 16

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValidationError(f"epsilon must be in [0,1], got {self.epsilon}")
        if self.neighborhood not in NEIGHBORHOODS:
            raise ValidationError(f"neighborhood must be one of {NEIGHBORHOODS}")
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"algorithm must be one of {ALGORITHMS}")
        if self.raster_sweeps < 1:
            raise ValidationError("raster_sweeps must be >= 1")


@dataclass(frozen=True)
class GeodesicField:
    """Distance field from one seed over a domain mask."""

    dist: Volume3
    seed: tuple
    domain: np.ndarray

    def dist_arr(self):
        return self.dist.arr()


@njit(cache=True)
def _dijkstra_kernel(x, domain, dx, dy, dz, seed, ox, oy, oz):
    n = dx * dy * dz
    dist = np.full(n, np.inf)
    settled = np.zeros(n, np.uint8)
    n_off = ox.shape[0]
    # lazy-deletion binary heap; each successful relaxation pushes once
    cap = 1 + n * (n_off + 1)
    hk = np.empty(cap)
    hv = np.empty(cap, np.int64)
    size = 0

    # push seed
    hk[0] = 0.0
    hv[0] = seed
    size = 1
    dist[seed] = 0.0

    while size > 0:
        # pop min
        top_k = hk[0]
        top_v = hv[0]
        size -= 1
        hk[0] = hk[size]
        hv[0] = hv[size]
        i = 0
        while True:
            l = 2 * i + 1
            r = l + 1
            s = i
            if l < size and hk[l] < hk[s]:
                s = l
            if r < size and hk[r] < hk[s]:
                s = r
            if s == i:
                break
            hk[i], hk[s] = hk[s], hk[i]
            hv[i], hv[s] = hv[s], hv[i]
            i = s

        u = top_v
        if settled[u]:
            continue
        settled[u] = 1
        du = top_k
        uz = u // (dx * dy)
        rem = u - uz * dx * dy
        uy = rem // dx
        ux = rem - uy * dx
        xu = x[u]
        for k in range(n_off):
            vx = ux + ox[k]
            if vx < 0 or vx >= dx:
                continue
            vy = uy + oy[k]
            if vy < 0 or vy >= dy:
                continue
            vz = uz + oz[k]
            if vz < 0 or vz >= dz:
                continue
            v = vx + dx * (vy + dy * vz)
            if domain[v] == 0 or settled[v]:
                continue
            nd = du + abs(x[v] - xu)
            if nd < dist[v]:
                dist[v] = nd
                # push (nd, v)
                j = size
                hk[j] = nd
                hv[j] = v
                size += 1
                while j > 0:
                    p = (j - 1) // 2
                    if hk[p] <= hk[j]:
                        break
                    hk[p], hk[j] = hk[j], hk[p]
                    hv[p], hv[j] = hv[j], hv[p]
                    j = p
    return dist


@njit(cache=True)
def _raster_kernel(x, domain, dx, dy, dz, seed, ox, oy, oz, max_sweeps, tol):
    n = dx * dy * dz
    dist = np.full(n, np.inf)
    dist[seed] = 0.0
    n_off = ox.shape[0]
    # split offsets by sign of their linear displacement: negative offsets
    # precede a voxel in scan order (forward pass), positive ones follow it
    fwd = np.empty(n_off, np.int64)
    bwd = np.empty(n_off, np.int64)
    nf = 0
    nb = 0
    for k in range(n_off):
        delta = ox[k] + dx * (oy[k] + dy * oz[k])
        if delta < 0:
            fwd[nf] = k
            nf += 1
        else:
            bwd[nb] = k
            nb += 1

    for _ in range(max_sweeps):
        max_change = 0.0
        # forward sweep
        for z in range(dz):
            for y in range(dy):
                for xx in range(dx):
                    i = xx + dx * (y + dy * z)
                    if domain[i] == 0:
                        continue
                    d = dist[i]
                    xi = x[i]
                    for kk in range(nf):
                        k = fwd[kk]
                        vx = xx + ox[k]
                        if vx < 0 or vx >= dx:
                            continue
                        vy = y + oy[k]
                        if vy < 0 or vy >= dy:
                            continue
                        vz = z + oz[k]
                        if vz < 0 or vz >= dz:
                            continue
                        j = vx + dx * (vy + dy * vz)
                        if domain[j] == 0:
                            continue
                        nd = dist[j] + abs(xi - x[j])
                        if nd < d:
                            d = nd
                    if d < dist[i]:
                        change = dist[i] - d
                        if change > max_change:
                            max_change = change
                        dist[i] = d
        # backward sweep
        for z in range(dz - 1, -1, -1):
            for y in range(dy - 1, -1, -1):
                for xx in range(dx - 1, -1, -1):
                    i = xx + dx * (y + dy * z)
                    if domain[i] == 0:
                        continue
                    d = dist[i]
                    xi = x[i]
                    for kk in range(nb):
                        k = bwd[kk]
                        vx = xx + ox[k]
                        if vx < 0 or vx >= dx:
                            continue
                        vy = y + oy[k]
                        if vy < 0 or vy >= dy:
                            continue
                        vz = z + oz[k]
                        if vz < 0 or vz >= dz:
                            continue
                        j = vx + dx * (vy + dy * vz)
                        if domain[j] == 0:
                            continue
                        nd = dist[j] + abs(xi - x[j])
                        if nd < d:
                            d = nd
                    if d < dist[i]:
                        change = dist[i] - d
                        if change > max_change:
                            max_change = change
                        dist[i] = d
        if max_change < tol:
            break
    return dist


def geodesic_distance(x, seed, domain, cfg=None):
    """Distance field from `seed` over `domain`, per cfg.algorithm.

    x: Volume3 intensity; seed: (x,y,z); domain: 3D bool mask.
    """
    cfg = cfg or ExpansionConfig()
    if not isinstance(x, Volume3):
        raise ValidationError("geodesic_distance expects a Volume3 image")
    seed = check_coord(x.dims, seed, "seed")
    if domain.shape != x.dims:
        raise ValidationError(f"domain dims {domain.shape} != image dims {x.dims}")
    if not domain[seed]:
        raise ValidationError(f"seed {seed} outside domain")
    xf = np.ascontiguousarray(x.data, dtype=np.float64)
    if not np.isfinite(xf).all():
        raise ValidationError("image intensities must be finite")
    dom = np.ascontiguousarray(domain.ravel(order="F").astype(np.uint8))
    ox, oy, oz = neighbor_offsets(cfg.neighborhood)
    dx, dy, dz = x.dims
    seed_flat = linear_index(x.dims, *seed)
    if cfg.algorithm == "dijkstra":
        dist = _dijkstra_kernel(xf, dom, dx, dy, dz, seed_flat, ox, oy, oz)
    else:
        dist = _raster_kernel(
            xf, dom, dx, dy, dz, seed_flat, ox, oy, oz, cfg.raster_sweeps, 1e-12
        )
    vol = Volume3(dims=x.dims, data=dist, spacing=x.spacing, kind="distance")
    return GeodesicField(dist=vol, seed=seed, domain=domain.copy())


def expand_foreground(field, epsilon):
    """Voxels whose distance is strictly below epsilon times the largest
    finite domain distance, plus the seed itself."""
    if not (0.0 <= epsilon <= 1.0):
        raise ValidationError(f"epsilon must be in [0,1], got {epsilon}")
    d = field.dist_arr()
    finite = field.domain & np.isfinite(d)
    dmax = float(d[finite].max()) if finite.any() else 0.0
    out = finite & (d < epsilon * dmax)
    out[field.seed] = True
    return out


def precision_recall_of_expansion(omega_f, gt_mask):
    """(precision, recall) of the expanded set against ground truth; (nan, nan)
    when either set is empty."""
    if omega_f.shape != gt_mask.shape:
        raise ValidationError("mask dims differ")
    nf = int(omega_f.sum())
    ng = int(gt_mask.sum())
    if nf == 0 or ng == 0:
        return (float("nan"), float("nan"))
    hit = int((omega_f & gt_mask).sum())
    return (hit / nf, hit / ng)


def build_partition(x, mask_m, ann, cfg=None):
    """Assemble the label regions for one case.

    Background is everything outside the annotation box plus everything
    outside the valid region; the geodesic field is solved on the remainder
    and thresholded into the labeled foreground.  Returns the partition and
    the partial label map Q (1 fg, 0 bg, sentinel unlabeled).
    """
    cfg = cfg or ExpansionConfig()
    dims = x.dims
    if mask_m.shape != dims:
        raise ValidationError("mask_m dims mismatch")
    ann.validate(dims)
    box = bounding_box_from_bg(ann, dims)
    omega_b = (~box.mask(dims)) | (~mask_m)
    domain = ~omega_b
    if not domain.any():
        raise ValidationError("empty geodesic domain: background covers the grid")
    if omega_b[ann.fg]:
        raise ValidationError(f"foreground seed {ann.fg} lies in certain background")
    field = geodesic_distance(x, ann.fg, domain, cfg)
    omega_f = expand_foreground(field, cfg.epsilon)
    part = RegionPartition(omega_m=mask_m, omega_b=omega_b, omega_f=omega_f)
    return part, part.to_q(spacing=x.spacing)
