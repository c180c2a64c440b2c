"""Independent reference implementations used only by tests.

These deliberately share no code with the package: the geodesic reference is
a flat argmin-scan Dijkstra built on a precomputed neighbor table, loss
references are direct brute-force formula evaluations, and the surface
distance reference does exhaustive all-pairs search.
"""

import numpy as np


def _offsets(connectivity):
    offs = []
    for oz in (-1, 0, 1):
        for oy in (-1, 0, 1):
            for ox in (-1, 0, 1):
                if (ox, oy, oz) == (0, 0, 0):
                    continue
                if connectivity == 6 and abs(ox) + abs(oy) + abs(oz) != 1:
                    continue
                offs.append((ox, oy, oz))
    return offs


def neighbor_table(dims, connectivity):
    """nbr[i, k]: flat x-fastest index of neighbor k of voxel i, -1 off-grid."""
    dx, dy, dz = dims
    xs, ys, zs = np.meshgrid(np.arange(dx), np.arange(dy), np.arange(dz), indexing="ij")
    cols = []
    for ox, oy, oz in _offsets(connectivity):
        nx, ny, nz = xs + ox, ys + oy, zs + oz
        valid = (nx >= 0) & (nx < dx) & (ny >= 0) & (ny < dy) & (nz >= 0) & (nz < dz)
        flat = nx + dx * (ny + dy * nz)
        cols.append(np.where(valid, flat, -1).ravel(order="F"))
    return np.stack(cols, axis=1)


def reference_dijkstra(x, domain, seed, connectivity=26):
    """Exhaustive argmin-scan Dijkstra; returns a 3D f64 distance field with
    +inf outside the domain and at unreachable voxels."""
    dims = x.shape
    xf = np.asarray(x, dtype=np.float64).ravel(order="F")
    dom = np.asarray(domain, dtype=bool).ravel(order="F")
    nbr = neighbor_table(dims, connectivity)
    n = xf.size
    seed_flat = int(seed[0] + dims[0] * (seed[1] + dims[1] * seed[2]))
    assert dom[seed_flat], "seed outside domain"
    dist = np.full(n, np.inf)
    frontier = np.full(n, np.inf)
    settled = np.zeros(n, dtype=bool)
    dist[seed_flat] = 0.0
    frontier[seed_flat] = 0.0
    for _ in range(int(dom.sum())):
        u = int(np.argmin(frontier))
        du = frontier[u]
        if not np.isfinite(du):
            break
        frontier[u] = np.inf
        settled[u] = True
        vs = nbr[u]
        vs = vs[vs >= 0]
        vs = vs[dom[vs] & ~settled[vs]]
        if vs.size == 0:
            continue
        cand = du + np.abs(xf[vs] - xf[u])
        better = cand < dist[vs]
        if better.any():
            vv = vs[better]
            dist[vv] = cand[better]
            frontier[vv] = cand[better]
    out = dist.reshape(dims, order="F").copy()
    out[~np.asarray(domain, dtype=bool)] = np.inf
    return out

# ---------------------------------------------------------------------------
# pairwise CRF references: explicit loops over ordered pixel pairs


def crf_affinity(d2_spatial, xi, xj, components):
    k = 0.0
    for w, ss, si in components:
        k += w * np.exp(-d2_spatial / (2.0 * ss * ss) - (xi - xj) ** 2 / (2.0 * si * si))
    return k


def reference_crf_2d(p, x, components, radius=None, valid=None):
    """Sum of p_i (1 - p_j) K_ij over ordered pairs i != j of one slice,
    optionally truncated at Chebyshev distance `radius` and restricted to
    pixels where `valid` is True."""
    h, w = p.shape
    total = 0.0
    for u1 in range(h):
        for v1 in range(w):
            if valid is not None and not valid[u1, v1]:
                continue
            for u2 in range(h):
                for v2 in range(w):
                    if (u1, v1) == (u2, v2):
                        continue
                    if valid is not None and not valid[u2, v2]:
                        continue
                    if radius is not None and max(abs(u1 - u2), abs(v1 - v2)) > radius:
                        continue
                    d2 = float((u1 - u2) ** 2 + (v1 - v2) ** 2)
                    k = crf_affinity(d2, float(x[u1, v1]), float(x[u2, v2]), components)
                    total += float(p[u1, v1]) * (1.0 - float(p[u2, v2])) * k
    return total


def _view_slices(arr, axis, k):
    idx = [slice(None)] * 3
    idx[axis] = k
    return arr[tuple(idx)]


def reference_mcrf(p, x, components, radius=None, valid=None):
    """Triple-view slice-stack oracle: per-slice raw sums divided by slice
    pixel count, averaged over slices, then averaged over the three views."""
    views = []
    for axis in (2, 0, 1):
        n_slices = p.shape[axis]
        acc = 0.0
        for k in range(n_slices):
            ps = _view_slices(p, axis, k)
            xs = _view_slices(x, axis, k)
            vs = None if valid is None else _view_slices(valid, axis, k)
            acc += reference_crf_2d(ps, xs, components, radius, vs) / ps.size
        views.append(acc / n_slices)
    return sum(views) / 3.0


def reference_mcrf_grad(p, x, components, radius=None, valid=None):
    """d reference_mcrf / d p_k via the symmetric-kernel identity
    sum_j K_kj (1 - 2 p_j), assembled slice by slice."""
    grad = np.zeros_like(np.asarray(p, dtype=np.float64))
    for axis in (2, 0, 1):
        n_slices = p.shape[axis]
        for k in range(n_slices):
            ps = _view_slices(p, axis, k)
            xs = _view_slices(x, axis, k)
            vs = None if valid is None else _view_slices(valid, axis, k)
            gs = _view_slices(grad, axis, k)
            h, w = ps.shape
            scale = 1.0 / (3.0 * n_slices * ps.size)
            for u1 in range(h):
                for v1 in range(w):
                    if vs is not None and not vs[u1, v1]:
                        continue
                    acc = 0.0
                    for u2 in range(h):
                        for v2 in range(w):
                            if (u1, v1) == (u2, v2):
                                continue
                            if vs is not None and not vs[u2, v2]:
                                continue
                            if radius is not None and max(abs(u1 - u2), abs(v1 - v2)) > radius:
                                continue
                            d2 = float((u1 - u2) ** 2 + (v1 - v2) ** 2)
                            kk = crf_affinity(d2, float(xs[u1, v1]), float(xs[u2, v2]), components)
                            acc += kk * (1.0 - 2.0 * float(ps[u2, v2]))
                    gs[u1, v1] += acc * scale
    return grad


def reference_vm(p, x, omega_m, guard=1e-6):
    """Direct evaluation of the two-region variance objective."""
    m = np.asarray(omega_m, dtype=bool)
    pv = np.asarray(p, dtype=np.float64)[m]
    xv = np.asarray(x, dtype=np.float64)[m]
    sp = max(pv.sum(), guard)
    sq = max((1.0 - pv).sum(), guard)
    uf = (pv * xv).sum() / sp
    ub = ((1.0 - pv) * xv).sum() / sq
    return ((xv - uf) ** 2 * pv).sum() / sp + ((xv - ub) ** 2 * (1.0 - pv)).sum() / sq


def reference_surface(mask):
    """Loop-based six-neighbor surface extraction; border counts as outside."""
    m = np.asarray(mask, dtype=bool)
    out = np.zeros_like(m)
    dims = m.shape
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                if not m[i, j, k]:
                    continue
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    ni, nj, nk = i + di, j + dj, k + dk
                    if not (0 <= ni < dims[0] and 0 <= nj < dims[1]
                            and 0 <= nk < dims[2]) or not m[ni, nj, nk]:
                        out[i, j, k] = True
                        break
    return out


def reference_assd(a, b, spacing=(1.0, 1.0, 1.0)):
    """All-pairs nearest-surface search, symmetric average."""
    sa = np.argwhere(reference_surface(a)).astype(np.float64)
    sb = np.argwhere(reference_surface(b)).astype(np.float64)
    sp = np.asarray(spacing, dtype=np.float64)
    pa = sa * sp
    pb = sb * sp
    d_ab = np.array([np.sqrt(((pb - pt) ** 2).sum(axis=1)).min() for pt in pa])
    d_ba = np.array([np.sqrt(((pa - pt) ** 2).sum(axis=1)).min() for pt in pb])
    return (float(d_ab.sum()) + float(d_ba.sum())) / (len(pa) + len(pb))
