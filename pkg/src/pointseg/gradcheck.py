"""Central finite-difference verification of every differentiable piece.

Builds small f64 problems for each tape primitive, each loss, and each
network's end-to-end parameter gradients, compares analytic gradients
against central differences, and reports one result per check.  Used by the
test suite and by the ``gradcheck`` CLI command, which exits nonzero if any
check fails.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import distill, losses, nets, tape
from .errors import NumericError, ValidationError
from .tape import Tensor, backward, finite_diff_scalar, max_rel_error

GROUPS = ("tape", "nets", "losses", "distill")

LOSS_TOL = 1e-4
PARAM_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    group: str
    name: str
    rel_err: float
    tol: float

    @property
    def ok(self):
        return self.rel_err < self.tol


def _fd_check(graph_fn, leaves, eps=1e-5):
    """Worst relative error between analytic and numeric gradients over all
    leaf tensors."""
    for t in leaves:
        t.grad = None
    backward(graph_fn())
    worst = 0.0
    numeric = finite_diff_scalar(lambda: graph_fn().item(), [t.data for t in leaves], eps=eps)
    for t, num in zip(leaves, numeric):
        worst = max(worst, max_rel_error(t.grad, num))
    return worst


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# tape primitives


def _tape_checks(rng):
    out = []

    def run(name, fn, leaves, eps=1e-5):
        out.append(CheckResult("tape", name, _fd_check(fn, leaves, eps), LOSS_TOL))

    a = _leaf(rng, (2, 3, 4, 4, 4))
    b = _leaf(rng, (2, 3, 4, 4, 4), lo=0.5, hi=1.5)
    run("add", lambda: tape.sum_all(tape.square(tape.add(a, b))), [a, b])
    run("sub", lambda: tape.sum_all(tape.square(tape.sub(a, b))), [a, b])
    run("mul_broadcast", lambda: tape.sum_all(tape.mul(a, tape.sum_all(b))), [a, b])
    run("div", lambda: tape.sum_all(tape.div(a, b)), [a, b])

    c = _leaf(rng, (3, 4, 5), lo=0.2, hi=2.0)
    run("log", lambda: tape.sum_all(tape.square(tape.log(c))), [c])
    run("square", lambda: tape.sum_all(tape.square(c)), [c])
    run("sigmoid", lambda: tape.sum_all(tape.sigmoid(c)), [c])
    # keep values away from the relu kink and the clamp corners
    d = Tensor(np.where(np.abs(a.data) < 0.1, 0.3, a.data), requires_grad=True)
    run("relu", lambda: tape.sum_all(tape.square(tape.relu(d))), [d])
    run("clamp", lambda: tape.sum_all(tape.clamp(d, -0.5, 0.5)), [d])
    run("mean", lambda: tape.mean_all(tape.square(c)), [c])

    z = _leaf(rng, (1, 2, 3, 3, 3), lo=-2.0, hi=2.0)
    run("softmax_channels", lambda: tape.sum_all(
        tape.square(tape.softmax_channels(z))), [z])
    run("take_channel", lambda: tape.sum_all(
        tape.square(tape.take_channel(tape.softmax_channels(z), 1))), [z])
    e1 = _leaf(rng, (1, 2, 3, 3, 3))
    e2 = _leaf(rng, (1, 3, 3, 3, 3))
    run("concat", lambda: tape.sum_all(tape.square(tape.concat([e1, e2], axis=1))), [e1, e2])
    run("reshape", lambda: tape.sum_all(tape.square(tape.reshape(e1, (2, 27)))), [e1])
    run("nearest_upsample", lambda: tape.sum_all(
        tape.square(tape.nearest_upsample(e1, 2))), [e1])

    x = _leaf(rng, (1, 2, 4, 4, 4))
    w3 = _leaf(rng, (3, 2, 3, 3, 3), lo=-0.5, hi=0.5)
    bias = _leaf(rng, (3,), lo=-0.2, hi=0.2)
    run("conv3d_k3", lambda: tape.sum_all(tape.square(tape.conv3d(x, w3, bias))),
        [x, w3, bias], eps=1e-4)
    w1 = _leaf(rng, (3, 2, 1, 1, 1), lo=-0.5, hi=0.5)
    run("conv3d_k1_stride2", lambda: tape.sum_all(
        tape.square(tape.conv3d(x, w1, None, stride=2))), [x, w1], eps=1e-4)
    return out


# ---------------------------------------------------------------------------
# losses


def _loss_setup(rng, dims=(4, 4, 3)):
    from .volume import RegionPartition

    m = np.ones(dims, dtype=bool)
    f = rng.random(dims) < 0.25
    bmask = (~f) & (rng.random(dims) < 0.4)
    part = RegionPartition(omega_m=m, omega_b=bmask, omega_f=f)
    q = part.to_q().arr()
    x = rng.normal(size=dims)
    p = Tensor(rng.uniform(0.1, 0.9, size=dims), requires_grad=True)
    return part, q, x, p


def _loss_checks(rng):
    out = []
    part, q, x, p = _loss_setup(rng)

    def run(name, fn, leaves=None, eps=1e-5):
        out.append(CheckResult("losses", name, _fd_check(fn, leaves or [p], eps), LOSS_TOL))

    run("partial_ce", lambda: losses.partial_ce(p, q, part))
    run("partial_dice", lambda: losses.partial_dice(p, q, part))
    run("psup", lambda: losses.psup(p, q, part))

    dense_k = losses.CrfKernel(components=((1.0, 2.0, 0.5),))
    win_k = losses.CrfKernel(components=((1.0, 1.5, 0.4),), window_radius=2)
    p2 = Tensor(rng.uniform(0.1, 0.9, size=(5, 4)), requires_grad=True)
    x2 = rng.normal(size=(5, 4))
    run("crf_2d_dense", lambda: losses.crf_loss_2d(p2, x2, dense_k), [p2])
    p2w = Tensor(rng.uniform(0.1, 0.9, size=(6, 5)), requires_grad=True)
    x2w = rng.normal(size=(6, 5))
    run("crf_2d_windowed", lambda: losses.crf_loss_2d(p2w, x2w, win_k), [p2w])
    run("mcrf_dense", lambda: losses.mcrf_loss(p, x, dense_k, valid_mask=part.omega_m))
    run("mcrf_windowed", lambda: losses.mcrf_loss(p, x, win_k, valid_mask=part.omega_m))

    cache = losses.CachedCrf(x, win_k, valid_mask=part.omega_m, dtype=np.float64)
    run("mcrf_cached", lambda: cache.loss(p))

    run("vm_through", lambda: losses.vm_loss(p, x, part.omega_m, mode="through"))

    # detached mode: compare against differences of the frozen-mean objective
    pd = Tensor(rng.uniform(0.1, 0.9, size=p.data.shape), requires_grad=True)
    pd.grad = None
    backward(losses.vm_loss(pd, x, part.omega_m, mode="detached"))
    mm = part.omega_m
    pv, xv = pd.data[mm], x[mm]
    uf0 = (pv * xv).sum() / pv.sum()
    ub0 = ((1 - pv) * xv).sum() / (1 - pv).sum()

    def frozen():
        qv = pd.data[mm]
        sp = max(qv.sum(), 1e-6)
        sq = max((1 - qv).sum(), 1e-6)
        return float(((xv - uf0) ** 2 * qv).sum() / sp
                     + ((xv - ub0) ** 2 * (1 - qv)).sum() / sq)

    num = finite_diff_scalar(frozen, [pd.data], eps=1e-5)[0]
    out.append(CheckResult("losses", "vm_detached",
                           max_rel_error(pd.grad, num), LOSS_TOL))

    cfg = losses.Stage1LossConfig(alpha=0.7, beta=0.3)
    run("stage1_total", lambda: losses.stage1_total(p, q, x, part, cfg, kernel=dense_k))
    return out


# ---------------------------------------------------------------------------
# distillation


def _distill_checks(rng):
    out = []
    dims = (3, 3, 3)
    pt = rng.uniform(0.1, 0.9, size=dims)
    ps = Tensor(rng.uniform(0.1, 0.9, size=dims), requires_grad=True)
    out.append(CheckResult("distill", "kd_loss",
                           _fd_check(lambda: distill.kd_loss(ps, pt), [ps]), LOSS_TOL))
    y = (rng.random(dims) < 0.5).astype(np.uint8)
    p = Tensor(rng.uniform(0.1, 0.9, size=dims), requires_grad=True)
    out.append(CheckResult("distill", "self_loss",
                           _fd_check(lambda: distill.self_loss(p, y), [p]), LOSS_TOL))

    # full stage-2 objective as a function of the logits
    z = Tensor(rng.normal(size=(1, 2) + dims), requires_grad=True)
    for lam in (0.0, 0.5, 1.0):
        def total(lam=lam):
            term = None
            if lam > 0:
                kd = distill.kd_loss(distill.student_soft_map(z, 4.0), pt)
                term = lam * kd
            if lam < 1:
                sf = distill.self_loss(distill.prob_from_logits(z), y)
                term = (1 - lam) * sf if term is None else term + (1 - lam) * sf
            return term
        out.append(CheckResult("distill", f"scm_logits_lam{lam:g}",
                               _fd_check(total, [z]), LOSS_TOL))
    return out


# ---------------------------------------------------------------------------
# end-to-end network parameter gradients


def _kink_margin(loss_fn):
    """Smallest distance of any relu or clamp input from its corner during one
    evaluation of ``loss_fn``.

    Central differences in parameter space are only trustworthy when the
    checkpoint keeps a healthy margin from every piecewise-linear corner, so
    the network checks measure this before trusting an FD comparison.
    """
    margin = [np.inf]
    orig_relu, orig_clamp = tape.relu, tape.clamp

    def relu_spy(a):
        margin[0] = min(margin[0], float(np.min(np.abs(a.data))))
        return orig_relu(a)

    def clamp_spy(a, lo, hi):
        if np.isfinite(lo):
            margin[0] = min(margin[0], float(np.min(np.abs(a.data - lo))))
        if np.isfinite(hi):
            margin[0] = min(margin[0], float(np.min(np.abs(hi - a.data))))
        return orig_clamp(a, lo, hi)

    tape.relu, tape.clamp = relu_spy, clamp_spy
    try:
        loss_fn()
    finally:
        tape.relu, tape.clamp = orig_relu, orig_clamp
    return margin[0]


def _nudge_biases(model, rng, lo=0.05, hi=0.15):
    # zero-initialised biases park every all-inactive voxel exactly on the
    # relu kink, where subgradients and central differences legitimately
    # disagree; move the checkpoint to a generic point first
    for name, t in model.param_items():
        if name.endswith("/b"):
            sign = np.where(rng.random(t.data.shape) < 0.5, -1.0, 1.0)
            t.data += sign * rng.uniform(lo, hi, size=t.data.shape)


def _generic_point(model, loss_fn, rng, margin=1e-3, tries=25):
    for _ in range(tries):
        _nudge_biases(model, rng)
        if _kink_margin(loss_fn) >= margin:
            return
    raise NumericError("gradcheck could not find a checkpoint clear of "
                       "relu/clamp corners")


def _sampled_param_fd(model, loss_fn, rng, entries=3, eps=1e-4):
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    for name, t in model.param_items():
        flat_idx = rng.choice(t.data.size, size=min(entries, t.data.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, t.data.shape)
            keep = t.data[idx]
            t.data[idx] = keep + eps
            hi = loss_fn().item()
            t.data[idx] = keep - eps
            lo = loss_fn().item()
            t.data[idx] = keep
            num = (hi - lo) / (2 * eps)
            ana = t.grad[idx]
            scale = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(ana - num) / scale)
        t.grad = None
    return worst


def _net_checks(rng):
    from .volume import RegionPartition

    out = []
    dims = (4, 4, 4)
    m = np.ones(dims, dtype=bool)
    f = rng.random(dims) < 0.3
    part = RegionPartition(omega_m=m, omega_b=(~f) & (rng.random(dims) < 0.4), omega_f=f)
    q = part.to_q().arr()
    ximg = rng.normal(size=dims)
    xb = Tensor(ximg[None, None])
    cfg = losses.Stage1LossConfig(alpha=0.5, beta=0.2)
    kern = losses.CrfKernel(components=((1.0, 1.5, 0.4),), window_radius=1)

    for arch in nets.ARCHS:
        model = nets.build_model(arch, base_channels=2, depth=1, rng_seed=11,
                                 dtype=np.float64)

        def loss_fn(model=model):
            pmap = tape.reshape(nets.prob_map(model, xb), dims)
            return losses.stage1_total(pmap, q, ximg, part, cfg, kernel=kern)

        _generic_point(model, loss_fn, rng)
        err = _sampled_param_fd(model, loss_fn, rng)
        out.append(CheckResult("nets", f"{arch}_stage1_params", err, PARAM_TOL))

    # stage-2 objective through one network's parameters
    model = nets.build_model("net_a", base_channels=2, depth=1, rng_seed=12,
                             dtype=np.float64)
    pt = rng.uniform(0.1, 0.9, size=dims)
    y = (rng.random(dims) < 0.5).astype(np.uint8)

    def scm_fn(model=model):
        logits = nets.forward(model, xb)
        kd = distill.kd_loss(distill.student_soft_map(logits, 4.0), pt)
        sf = distill.self_loss(distill.prob_from_logits(logits), y)
        return 0.5 * kd + 0.5 * sf

    _generic_point(model, scm_fn, rng)
    err = _sampled_param_fd(model, scm_fn, rng)
    out.append(CheckResult("nets", "net_a_scm_params", err, PARAM_TOL))
    return out


_RUNNERS = {
    "tape": _tape_checks,
    "losses": _loss_checks,
    "distill": _distill_checks,
    "nets": _net_checks,
}


def run_checks(groups=None, seed=0):
    """Run the requested check groups (all by default) and return results."""
    if groups is None:
        groups = GROUPS
    for g in groups:
        if g not in _RUNNERS:
            raise ValidationError(f"unknown gradcheck group {g!r}; choose from {GROUPS}")
    rng = np.random.default_rng(seed)
    results = []
    for g in groups:
        results.extend(_RUNNERS[g](rng))
    return results


def format_results(results):
    lines = []
    for r in results:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{status:4s} {r.group}/{r.name}: rel_err={r.rel_err:.3e} tol={r.tol:.0e}")
    return "\n".join(lines)
