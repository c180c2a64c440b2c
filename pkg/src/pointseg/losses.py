"""Stage-1 training losses.

Three families: partial supervision (cross-entropy + Dice restricted to the
labeled region), a multi-view CRF regularizer over unlabeled context, and a
two-region intensity-variance penalty.  All losses take a probability tensor
``P`` (foreground channel, shape (X, Y, Z)) and return a scalar tensor wired
into the autodiff tape.

The CRF term treats each 2D slice of the three orthogonal slice stacks as a
dense pairwise model with Gaussian spatial/intensity affinities.  Two engines
compute the same sum: a chunked all-pairs engine (the reference route) and a
windowed engine that truncates pairs at a Chebyshev radius and runs as a
shifted-array sweep.  Raw slice sums are divided by slice pixel count so the
loss weight transfers across resolutions; per-view means are averaged over
the three views.

``CachedCrf`` precomputes the per-offset affinity arrays of the windowed
engine for a fixed image so the per-step cost during training is a handful
of fused array passes.  It evaluates in a canonical orientation, so cached
kernels survive flip augmentation: the flipped probability map is unflipped,
evaluated, and the gradient flipped back, which is exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ValidationError
from .tape import Tensor
from .volume import UNLABELED, RegionPartition, Volume3

log = logging.getLogger(__name__)

VM_MODES = ("through", "detached")

# (slice axis, first in-plane axis, second in-plane axis) per view of the
# [x, y, z]-indexed volume: axial stacks along z, sagittal along x,
# coronal along y.
VIEWS = (
    ("axial", 2, 0, 1),
    ("sagittal", 0, 1, 2),
    ("coronal", 1, 0, 2),
)


@dataclass(frozen=True)
class CrfKernel:
    """Mixture of Gaussian pairwise affinities.

    Each component is (weight, spatial bandwidth in voxels, intensity
    bandwidth).  window_radius of None selects the dense all-pairs engine;
    an integer truncates pairs at that Chebyshev distance in-plane.
    """

    components: tuple[tuple[float, float, float], ...] = ((1.0, 6.0, 0.1),)
    window_radius: int | None = None

    def __post_init__(self):
        if len(self.components) == 0:
            raise ValidationError("kernel needs at least one component")
        for comp in self.components:
            if len(comp) != 3:
                raise ValidationError(f"component must be (w, sigma_s, sigma_i): {comp}")
            w, ss, si = comp
            if w <= 0 or ss <= 0 or si <= 0:
                raise ValidationError(f"kernel parameters must be positive: {comp}")
        if self.window_radius is not None and self.window_radius < 1:
            raise ValidationError(f"window_radius must be >= 1, got {self.window_radius}")


@dataclass(frozen=True)
class Stage1LossConfig:
    alpha: float = 1.0
    beta: float = 0.1
    clamp_eps: float = 1e-6
    vm_mean_mode: str = "through"
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("loss weights must be >= 0")
        if not 0 < self.clamp_eps < 0.5:
            raise ValidationError(f"clamp_eps out of range: {self.clamp_eps}")
        if self.vm_mean_mode not in VM_MODES:
            raise ValidationError(f"unknown vm_mean_mode: {self.vm_mean_mode!r}")
        if self.warmup_epochs < 0:
            raise ValidationError("warmup_epochs must be >= 0")


def warmup_scale(epoch: int, warmup_epochs: int) -> float:
    """Linear ramp for the regularizer weights, 0 at epoch 0 to 1 after
    ``warmup_epochs``; identity when warmup is disabled.

    The partial terms anchor only the labeled voxels.  Until that anchor has
    formed, both regularizers can satisfy themselves with a constant
    labeling, and under heavy background/foreground imbalance the constant
    they find is all-background, a state the clamped partial losses cannot
    pull out of.  Deferring the regularizers until the supervised anchor
    exists removes that failure mode without touching the loss definitions.
    """
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


def _as_prob_tensor(P):
    if isinstance(P, Tensor):
        return P
    if isinstance(P, Volume3):
        return Tensor(P.arr())
    return Tensor(np.asarray(P))


def _as_array(X):
    if isinstance(X, Volume3):
        return X.arr()
    if isinstance(X, Tensor):
        return X.data
    return np.asarray(X)


def _q_array(Q):
    a = _as_array(Q)
    if a.dtype != np.uint8:
        raise ValidationError(f"label map must be uint8, got {a.dtype}")
    return a


# ---------------------------------------------------------------------------
# partial supervision


def _check_labels(q, partition):
    m = partition.omega_l
    if q.shape != m.shape:
        raise ValidationError(f"label shape {q.shape} != partition dims {m.shape}")
    if not np.all((q[m] == 0) | (q[m] == 1)):
        raise ValidationError("labeled region contains values outside {0, 1}")
    if not np.all(q[~m] == UNLABELED):
        raise ValidationError("unlabeled region must carry the sentinel value")


def partial_ce(P, Q, partition: RegionPartition, clamp_eps: float = 1e-6):
    """Cross-entropy averaged over the labeled region only."""
    p = _as_prob_tensor(P)
    q = _q_array(Q)
    _check_labels(q, partition)
    m = partition.omega_l
    n = int(m.sum())
    if n == 0:
        raise ValidationError("labeled region is empty")
    dt = p.dtype
    mf = m.astype(dt)
    qf = ((q == 1) & m).astype(dt)
    pc = tape.clamp(p, clamp_eps, 1.0 - clamp_eps)
    ll = tape.log(pc) * qf + tape.log(1.0 - pc) * (mf - qf)
    return tape.sum_all(ll) * (-1.0 / n)


def partial_dice(P, Q, partition: RegionPartition, smooth: float = 1e-5):
    """Soft Dice loss over the labeled region, squared-sum denominator."""
    p = _as_prob_tensor(P)
    q = _q_array(Q)
    _check_labels(q, partition)
    m = partition.omega_l
    if not m.any():
        raise ValidationError("labeled region is empty")
    dt = p.dtype
    mf = m.astype(dt)
    qf = ((q == 1) & m).astype(dt)
    inter = tape.sum_all(p * qf)
    pp = tape.sum_all(tape.square(p * mf))
    num = 2.0 * inter + smooth
    den = pp + (float(qf.sum()) + smooth)
    return 1.0 - num / den


def psup(P, Q, partition: RegionPartition, clamp_eps: float = 1e-6, smooth: float = 1e-5):
    """Mean of partial cross-entropy and partial Dice."""
    ce = partial_ce(P, Q, partition, clamp_eps)
    dc = partial_dice(P, Q, partition, smooth)
    return (ce + dc) * 0.5


# ---------------------------------------------------------------------------
# CRF engines (plain numpy; wrapped into the tape via a custom node)


def _self_affinity(components):
    # K_ii per component is just the weight (both distances vanish)
    return float(sum(w for w, _, _ in components))


def _dense_engine(p, x, components, valid):
    """All ordered pairs i != j of one slice.

    Row-chunked so auxiliary memory stays O(pixels) per slice.  Returns the
    raw (unnormalized) loss and its gradient w.r.t. p.
    """
    h, w = p.shape
    m = h * w
    dt = p.dtype
    pf = p.reshape(-1)
    xf = x.reshape(-1)
    vf = np.ones(m, dtype=dt) if valid is None else valid.reshape(-1).astype(dt)
    uu, vv = np.meshgrid(np.arange(h, dtype=dt), np.arange(w, dtype=dt), indexing="ij")
    coords = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    pv = pf * vf
    self_k = _self_affinity(components)
    r = np.zeros(m, dtype=dt)
    s = np.zeros(m, dtype=dt)
    chunk = 512
    for c0 in range(0, m, chunk):
        c1 = min(m, c0 + chunk)
        d2s = ((coords[c0:c1, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
        d2i = (xf[c0:c1, None] - xf[None, :]) ** 2
        k = np.zeros_like(d2s)
        for cw, ss, si in components:
            k += cw * np.exp(-d2s / (2.0 * ss * ss) - d2i / (2.0 * si * si))
        k *= vf[None, :]
        r[c0:c1] = k.sum(axis=1) - self_k * vf[c0:c1]
        s[c0:c1] = k @ pv - self_k * pv[c0:c1]
    value = float(np.sum(pv * (r - s)))
    grad = (vf * (r - 2.0 * s)).reshape(h, w).astype(dt)
    return value, grad


def _half_offsets(radius):
    """In-plane offsets covering each unordered pair once."""
    offs = []
    for du in range(0, radius + 1):
        dv0 = 1 if du == 0 else -radius
        for dv in range(dv0, radius + 1):
            if du == 0 and dv <= 0:
                continue
            offs.append((du, dv))
    return offs


def _windowed_engine(p, x, components, valid, radius):
    """Pairs within Chebyshev radius, swept offset by offset.

    A radius that covers every pair of the slice reduces to the dense sum;
    that case is routed to the dense engine so the two modes coincide
    exactly at full coverage.
    """
    h, w = p.shape
    if radius >= max(h - 1, w - 1):
        return _dense_engine(p, x, components, valid)
    dt = p.dtype
    value = 0.0
    grad = np.zeros_like(p)
    for du, dv in _half_offsets(radius):
        ua, ub = max(0, -du), h - max(0, du)
        va, vb = max(0, -dv), w - max(0, dv)
        if ua >= ub or va >= vb:
            continue
        s1 = (slice(ua, ub), slice(va, vb))
        s2 = (slice(ua + du, ub + du), slice(va + dv, vb + dv))
        d2i = (x[s1] - x[s2]) ** 2
        d2s = float(du * du + dv * dv)
        e = np.zeros_like(d2i)
        for cw, ss, si in components:
            e += cw * np.exp(-d2s / (2.0 * ss * ss) - d2i / (2.0 * si * si))
        if valid is not None:
            e = e * (valid[s1] & valid[s2]).astype(dt)
        p1, p2 = p[s1], p[s2]
        value += float(np.sum(e * (p1 + p2 - 2.0 * p1 * p2)))
        grad[s1] += e * (1.0 - 2.0 * p2)
        grad[s2] += e * (1.0 - 2.0 * p1)
    return value, grad


def _slice_value_grad(p, x, kernel, valid):
    if kernel.window_radius is None:
        return _dense_engine(p, x, kernel.components, valid)
    return _windowed_engine(p, x, kernel.components, valid, kernel.window_radius)


def crf_loss_2d(P, X, kernel: CrfKernel, valid=None):
    """Pairwise label-disagreement energy of one 2D slice (raw sum)."""
    p = _as_prob_tensor(P)
    x = _as_array(X)
    if p.data.ndim != 2 or p.data.shape != x.shape:
        raise ValidationError(f"slice shapes differ: {p.data.shape} vs {x.shape}")
    if valid is not None and valid.shape != x.shape:
        raise ValidationError("valid mask shape mismatch")
    value, grad = _slice_value_grad(p.data, x.astype(p.dtype), kernel, valid)

    def bw(g):
        return [g * grad]

    return tape.custom(np.asarray(value, dtype=p.dtype), (p,), bw)


def _view_value_grad(p, x, kernel, valid, view_axis):
    """Slice-averaged CRF energy of one orthogonal view.

    Each slice's raw sum is divided by its pixel count, then slices are
    averaged, so the view term is resolution-free.
    """
    n_slices = p.shape[view_axis]
    npix = p.size // n_slices
    scale = 1.0 / (npix * n_slices)
    value = 0.0
    grad = np.zeros_like(p)
    for k in range(n_slices):
        idx = [slice(None)] * 3
        idx[view_axis] = k
        idx = tuple(idx)
        vsl = None if valid is None else valid[idx]
        v, g = _slice_value_grad(p[idx], x[idx], kernel, vsl)
        value += v * scale
        grad[idx] += g * scale
    return value, grad


def mcrf_loss(P, X, kernel: CrfKernel, valid_mask=None):
    """Mean over axial, sagittal, and coronal views of the slice-averaged
    CRF energy."""
    p = _as_prob_tensor(P)
    x = _as_array(X)
    if p.data.ndim != 3 or p.data.shape != x.shape:
        raise ValidationError(f"volume shapes differ: {p.data.shape} vs {x.shape}")
    if valid_mask is not None and valid_mask.shape != x.shape:
        raise ValidationError("valid mask shape mismatch")
    xd = x.astype(p.dtype)
    value = 0.0
    grad = np.zeros_like(p.data)
    for _, axis, _, _ in VIEWS:
        v, g = _view_value_grad(p.data, xd, kernel, valid_mask, axis)
        value += v / 3.0
        grad += g / 3.0

    def bw(g):
        return [g * grad]

    return tape.custom(np.asarray(value, dtype=p.dtype), (p,), bw)


class CachedCrf:
    """Windowed mCRF bound to one image, with precomputed affinities.

    The affinity array of every (view, offset) pair depends only on the
    image, so it is computed once and reused every training step.  Slices
    of a view are processed together as 3D blocks.  ``loss`` accepts the
    probability map in a flipped orientation and returns the exact same
    value as evaluating the flipped image directly, because the pair set
    is closed under axis flips.
    """

    def __init__(self, X, kernel: CrfKernel, valid_mask=None, dtype=np.float32):
        if kernel.window_radius is None:
            raise ValidationError("cached evaluation needs a windowed kernel")
        x = _as_array(X).astype(dtype)
        if x.ndim != 3:
            raise ValidationError("image must be 3D")
        self.dims = x.shape
        self.kernel = kernel
        n = x.size
        scale = 1.0 / (3.0 * n)
        self._entries = []
        for _, view_axis, ax_u, ax_v in VIEWS:
            for du, dv in _half_offsets(kernel.window_radius):
                off = [0, 0, 0]
                off[ax_u], off[ax_v] = du, dv
                sl1, sl2 = [], []
                ok = True
                for ax in range(3):
                    o = off[ax]
                    a, b = max(0, -o), self.dims[ax] - max(0, o)
                    if a >= b:
                        ok = False
                        break
                    sl1.append(slice(a, b))
                    sl2.append(slice(a + o, b + o))
                if not ok:
                    continue
                sl1, sl2 = tuple(sl1), tuple(sl2)
                d2i = (x[sl1] - x[sl2]) ** 2
                d2s = float(du * du + dv * dv)
                e = np.zeros_like(d2i)
                for cw, ss, si in kernel.components:
                    e += cw * np.exp(-d2s / (2.0 * ss * ss) - d2i / (2.0 * si * si))
                if valid_mask is not None:
                    e *= (valid_mask[sl1] & valid_mask[sl2]).astype(dtype)
                e *= scale
                self._entries.append((sl1, sl2, np.ascontiguousarray(e)))

    def nbytes(self):
        return sum(e.nbytes for _, _, e in self._entries)

    def loss(self, P, flips=()):
        """Scalar mCRF energy of P given in a flipped frame.

        flips lists the axes along which P (and the labels it trains
        against) were flipped relative to the cached image.
        """
        p = _as_prob_tensor(P)
        if p.data.shape != self.dims:
            raise ValidationError(f"shape {p.data.shape} != cached dims {self.dims}")
        pc = p.data
        for ax in flips:
            pc = np.flip(pc, axis=ax)
        value = 0.0
        grad = np.zeros(self.dims, dtype=pc.dtype)
        for sl1, sl2, e in self._entries:
            p1, p2 = pc[sl1], pc[sl2]
            value += float(np.sum(e * (p1 + p2 - 2.0 * p1 * p2)))
            grad[sl1] += e * (1.0 - 2.0 * p2)
            grad[sl2] += e * (1.0 - 2.0 * p1)
        for ax in flips:
            grad = np.flip(grad, axis=ax)
        grad = np.ascontiguousarray(grad)

        def bw(g):
            return [g * grad]

        return tape.custom(np.asarray(value, dtype=p.dtype), (p,), bw)


# ---------------------------------------------------------------------------
# variance minimization


def vm_loss(P, X, omega_m, mode: str = "through", guard: float = 1e-6):
    """Intensity variance of the soft foreground plus soft background.

    Region means are computed over the valid mask; mode selects whether
    gradients flow through the means or treat them as constants.

    A soft region whose total mass falls below ``guard`` contributes zero
    (value and gradient).  Dividing by the clamped mass instead would leave
    a frozen denominator under a live numerator, so the near-empty region's
    per-voxel gradients grow like 1/guard and all point toward emptying it
    further; dropping the term is the only stable reading of an empty
    region's variance, and in every non-degenerate state the two behaviors
    are identical.
    """
    if mode not in VM_MODES:
        raise ValidationError(f"unknown vm mode: {mode!r}")
    p = _as_prob_tensor(P)
    x = _as_array(X)
    if p.data.shape != x.shape or omega_m.shape != x.shape:
        raise ValidationError("vm_loss inputs must share one shape")
    if not omega_m.any():
        raise ValidationError("valid region is empty")
    dt = p.dtype
    mf = omega_m.astype(dt)
    xv = x.astype(dt)
    xm = xv * mf
    pm = p * mf
    qm = mf - pm
    sp = tape.sum_all(pm)
    sq = tape.sum_all(qm)
    if float(sp.data) < guard or float(sq.data) < guard:
        log.warning("degenerate soft region (sum_fg=%.3g, sum_bg=%.3g); term dropped",
                    float(sp.data), float(sq.data))

    def region_var(mass, weights):
        if float(mass.data) < guard:
            return None
        mean = tape.sum_all(weights * xm) / mass
        if mode == "detached":
            mean = tape.stop_gradient(mean)
        return tape.sum_all(tape.square(xv - mean) * weights) / mass

    lf = region_var(sp, pm)
    lb = region_var(sq, qm)
    if lf is None and lb is None:
        return 0.0 * sp
    if lf is None:
        return lb
    if lb is None:
        return lf
    return lf + lb


# ---------------------------------------------------------------------------
# combined objective


def stage1_terms(P, Q, X, partition: RegionPartition, cfg: Stage1LossConfig,
                 kernel: CrfKernel = CrfKernel(), mcrf_term=None):
    """All stage-1 loss terms plus their weighted total.

    mcrf_term lets a caller substitute a precomputed CRF scalar (e.g. from
    CachedCrf) for the direct evaluation; terms with zero weight are
    skipped and reported as None.
    """
    parts = {}
    parts["psup"] = psup(P, Q, partition, cfg.clamp_eps)
    total = parts["psup"]
    if cfg.alpha > 0:
        if mcrf_term is None:
            mcrf_term = mcrf_loss(P, X, kernel, valid_mask=partition.omega_m)
        parts["mcrf"] = mcrf_term
        total = total + cfg.alpha * mcrf_term
    else:
        parts["mcrf"] = None
    if cfg.beta > 0:
        parts["vm"] = vm_loss(P, X, partition.omega_m, mode=cfg.vm_mean_mode)
        total = total + cfg.beta * parts["vm"]
    else:
        parts["vm"] = None
    parts["total"] = total
    return parts


def stage1_total(P, Q, X, partition: RegionPartition, cfg: Stage1LossConfig,
                 kernel: CrfKernel = CrfKernel()):
    """Weighted sum: partial supervision + alpha*mCRF + beta*VM."""
    return stage1_terms(P, Q, X, partition, cfg, kernel)["total"]
