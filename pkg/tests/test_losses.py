import logging
import math

import numpy as np
import pytest

from oracles import (
    reference_crf_2d,
    reference_mcrf,
    reference_mcrf_grad,
    reference_vm,
)
from pointseg import losses, tape
from pointseg.errors import ValidationError
from pointseg.losses import (
    CachedCrf,
    CrfKernel,
    Stage1LossConfig,
    crf_loss_2d,
    mcrf_loss,
    partial_ce,
    partial_dice,
    psup,
    stage1_terms,
    stage1_total,
    vm_loss,
)
from pointseg.tape import Tensor, backward, finite_diff_scalar, max_rel_error
from pointseg.volume import UNLABELED, RegionPartition


def random_partition(rng, dims, full_m=False):
    m = np.ones(dims, dtype=bool) if full_m else rng.random(dims) < 0.9
    f = (rng.random(dims) < 0.2) & m
    b = (~m) | ((rng.random(dims) < 0.3) & m & ~f)
    return RegionPartition(omega_m=m, omega_b=b, omega_f=f)


def prob_leaf(rng, dims, lo=0.05, hi=0.95):
    return Tensor(rng.uniform(lo, hi, size=dims), requires_grad=True)


class TestConfigs:
    def test_kernel_defaults(self):
        k = CrfKernel()
        assert k.components == ((1.0, 6.0, 0.1),)
        assert k.window_radius is None

    @pytest.mark.parametrize("comps", [(), ((1.0, 6.0),), ((0.0, 6.0, 0.1),),
                                       ((1.0, -6.0, 0.1),), ((1.0, 6.0, 0.0),)])
    def test_kernel_rejects_bad_components(self, comps):
        with pytest.raises(ValidationError):
            CrfKernel(components=comps)

    def test_kernel_rejects_zero_radius(self):
        with pytest.raises(ValidationError):
            CrfKernel(window_radius=0)

    def test_stage1_config_defaults(self):
        cfg = Stage1LossConfig()
        assert cfg.alpha == 1.0 and cfg.beta == 0.1
        assert cfg.vm_mean_mode == "through"

    @pytest.mark.parametrize("kw", [dict(alpha=-1.0), dict(beta=-0.1),
                                    dict(clamp_eps=0.0), dict(clamp_eps=0.6),
                                    dict(vm_mean_mode="frozen")])
    def test_stage1_config_rejects(self, kw):
        with pytest.raises(ValidationError):
            Stage1LossConfig(**kw)


class TestPartialSupervision:
    def test_ce_zero_when_prediction_matches_labels(self):
        rng = np.random.default_rng(0)
        part = random_partition(rng, (5, 4, 3))
        q = part.to_q().arr()
        p = np.where(q == 1, 1.0, 0.0)
        loss = partial_ce(Tensor(p), q, part)
        assert 0.0 <= loss.item() <= 1e-5

    def test_ce_single_voxel_half_probability_is_ln2(self):
        m = np.ones((1, 1, 1), dtype=bool)
        part = RegionPartition(omega_m=m, omega_b=np.zeros_like(m), omega_f=m)
        q = part.to_q().arr()
        loss = partial_ce(Tensor(np.full((1, 1, 1), 0.5)), q, part)
        assert math.isclose(loss.item(), math.log(2.0), rel_tol=1e-12)

    def test_ce_matches_direct_oracle(self):
        rng = np.random.default_rng(1)
        part = random_partition(rng, (4, 4, 4))
        q = part.to_q().arr()
        p = rng.uniform(0.01, 0.99, size=(4, 4, 4))
        got = partial_ce(Tensor(p), q, part).item()
        m = part.omega_l
        qb = (q[m] == 1).astype(np.float64)
        pc = np.clip(p[m], 1e-6, 1 - 1e-6)
        want = float(-(qb * np.log(pc) + (1 - qb) * np.log(1 - pc)).mean())
        assert math.isclose(got, want, rel_tol=1e-10)

    def test_ce_empty_labeled_region_rejected(self):
        m = np.ones((3, 3, 3), dtype=bool)
        part = RegionPartition(omega_m=m, omega_b=np.zeros_like(m), omega_f=np.zeros_like(m))
        q = part.to_q().arr()
        with pytest.raises(ValidationError):
            partial_ce(Tensor(np.full((3, 3, 3), 0.5)), q, part)

    def test_ce_rejects_inconsistent_labels(self):
        rng = np.random.default_rng(2)
        part = random_partition(rng, (4, 3, 3))
        q = part.to_q().arr().copy()
        q[~part.omega_l] = 0  # sentinel destroyed
        if (~part.omega_l).any():
            with pytest.raises(ValidationError):
                partial_ce(Tensor(np.full(q.shape, 0.5)), q, part)

    def test_dice_zero_on_exact_binary_match(self):
        rng = np.random.default_rng(3)
        part = random_partition(rng, (5, 4, 3))
        q = part.to_q().arr()
        p = np.where(q == 1, 1.0, 0.0)
        assert abs(partial_dice(Tensor(p), q, part).item()) < 1e-12

    def test_dice_one_on_total_miss(self):
        m = np.ones((3, 3, 3), dtype=bool)
        part = RegionPartition(omega_m=m, omega_b=np.zeros_like(m), omega_f=m)
        q = part.to_q().arr()
        loss = partial_dice(Tensor(np.zeros((3, 3, 3))), q, part)
        assert loss.item() == pytest.approx(1.0, abs=1e-5)

    def test_dice_matches_direct_oracle(self):
        rng = np.random.default_rng(4)
        part = random_partition(rng, (4, 4, 4))
        q = part.to_q().arr()
        p = rng.uniform(0.0, 1.0, size=(4, 4, 4))
        got = partial_dice(Tensor(p), q, part).item()
        m = part.omega_l
        qb = (q[m] == 1).astype(np.float64)
        pm = p[m]
        s = 1e-5
        want = 1.0 - (2 * (pm * qb).sum() + s) / ((pm ** 2).sum() + (qb ** 2).sum() + s)
        assert math.isclose(got, want, rel_tol=1e-10)

    def test_psup_is_mean_of_components(self):
        rng = np.random.default_rng(5)
        part = random_partition(rng, (4, 3, 3))
        q = part.to_q().arr()
        p = rng.uniform(0.1, 0.9, size=(4, 3, 3))
        ce = partial_ce(Tensor(p), q, part).item()
        dc = partial_dice(Tensor(p), q, part).item()
        assert math.isclose(psup(Tensor(p), q, part).item(), (ce + dc) / 2, rel_tol=1e-12)

    @pytest.mark.parametrize("fn", [partial_ce, partial_dice, psup])
    def test_gradients_match_finite_differences(self, fn):
        rng = np.random.default_rng(6)
        part = random_partition(rng, (4, 3, 3))
        q = part.to_q().arr()
        p = prob_leaf(rng, (4, 3, 3), lo=0.1, hi=0.9)
        loss = fn(p, q, part)
        backward(loss)
        num = finite_diff_scalar(lambda: fn(p, q, part).item(), [p.data], eps=1e-5)[0]
        assert max_rel_error(p.grad, num) < 1e-6


class TestCrfSlice:
    def test_constant_probability_gives_zero(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 4))
        for pval in (0.0, 1.0):
            p = np.full((5, 4), pval)
            dense = crf_loss_2d(Tensor(p), x, CrfKernel()).item()
            win = crf_loss_2d(Tensor(p), x, CrfKernel(window_radius=2)).item()
            assert abs(dense) < 1e-12 and abs(win) < 1e-12

    def test_single_pixel_slice_has_no_pairs(self):
        k = CrfKernel()
        assert crf_loss_2d(Tensor(np.array([[0.7]])), np.array([[0.3]]), k).item() == 0.0

    def test_two_by_two_corner_spike_frozen_value(self):
        # uniform intensity: affinity is purely spatial over distances {1,1,sqrt2}
        p = np.array([[1.0, 0.0], [0.0, 0.0]])
        x = np.zeros((2, 2))
        got = crf_loss_2d(Tensor(p), x, CrfKernel()).item()
        want = 2 * math.exp(-1.0 / 72.0) + math.exp(-2.0 / 72.0)
        assert math.isclose(got, want, rel_tol=1e-12)
        assert math.isclose(reference_crf_2d(p, x, ((1.0, 6.0, 0.1),)), want, rel_tol=1e-12)

    @pytest.mark.parametrize("shape", [(3, 3), (5, 4), (2, 7)])
    def test_dense_matches_bruteforce(self, shape):
        rng = np.random.default_rng(8)
        p = rng.uniform(0, 1, size=shape)
        x = rng.normal(size=shape)
        k = CrfKernel(components=((1.0, 2.0, 0.5),))
        got = crf_loss_2d(Tensor(p), x, k).item()
        want = reference_crf_2d(p, x, k.components)
        assert math.isclose(got, want, rel_tol=1e-12)

    def test_dense_respects_valid_mask(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(0, 1, size=(4, 5))
        x = rng.normal(size=(4, 5))
        valid = rng.random((4, 5)) < 0.7
        k = CrfKernel(components=((1.0, 3.0, 0.4),))
        got = crf_loss_2d(Tensor(p), x, k, valid=valid).item()
        want = reference_crf_2d(p, x, k.components, valid=valid)
        assert math.isclose(got, want, rel_tol=1e-12)

    @pytest.mark.parametrize("radius", [1, 2, 3])
    def test_windowed_matches_truncated_bruteforce(self, radius):
        # slice large enough that the windowed sweep really truncates
        rng = np.random.default_rng(10 + radius)
        p = rng.uniform(0, 1, size=(7, 6))
        x = rng.normal(size=(7, 6))
        valid = rng.random((7, 6)) < 0.8
        k = CrfKernel(components=((1.0, 1.5, 0.3),), window_radius=radius)
        got = crf_loss_2d(Tensor(p), x, k, valid=valid).item()
        want = reference_crf_2d(p, x, k.components, radius=radius, valid=valid)
        assert math.isclose(got, want, rel_tol=1e-12)

    def test_full_window_equals_dense_exactly(self):
        rng = np.random.default_rng(14)
        p = rng.uniform(0, 1, size=(5, 6))
        x = rng.normal(size=(5, 6))
        dense = crf_loss_2d(Tensor(p), x, CrfKernel()).item()
        win = crf_loss_2d(Tensor(p), x, CrfKernel(window_radius=5)).item()
        assert win == dense

    def test_multi_component_kernel(self):
        rng = np.random.default_rng(15)
        p = rng.uniform(0, 1, size=(4, 4))
        x = rng.normal(size=(4, 4))
        comps = ((0.7, 2.0, 0.3), (0.3, 5.0, 1.0))
        got = crf_loss_2d(Tensor(p), x, CrfKernel(components=comps)).item()
        assert math.isclose(got, reference_crf_2d(p, x, comps), rel_tol=1e-12)

    @pytest.mark.parametrize("radius", [None, 2])
    def test_gradient_matches_finite_differences(self, radius):
        rng = np.random.default_rng(16)
        p = prob_leaf(rng, (5, 4))
        x = rng.normal(size=(5, 4))
        k = CrfKernel(components=((1.0, 2.0, 0.5),), window_radius=radius)
        loss = crf_loss_2d(p, x, k)
        backward(loss)
        num = finite_diff_scalar(lambda: crf_loss_2d(p, x, k).item(), [p.data], eps=1e-5)[0]
        assert max_rel_error(p.grad, num) < 1e-7

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            crf_loss_2d(Tensor(np.zeros((3, 3))), np.zeros((3, 4)), CrfKernel())


class TestMcrf:
    def test_constant_binary_volume_gives_zero(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(4, 3, 5))
        for pval in (0.0, 1.0):
            loss = mcrf_loss(Tensor(np.full((4, 3, 5), pval)), x, CrfKernel())
            assert abs(loss.item()) < 1e-12

    def test_axial_view_averages_one_active_slice(self):
        rng = np.random.default_rng(18)
        dims = (4, 5, 3)
        x = rng.normal(size=dims)
        p = np.zeros(dims)
        p[:, :, 1] = rng.uniform(0, 1, size=(4, 5))
        k = CrfKernel(components=((1.0, 2.0, 0.5),))
        slice_raw = crf_loss_2d(Tensor(p[:, :, 1]), x[:, :, 1], k).item()
        axial, _ = losses._view_value_grad(p, x, k, None, 2)
        assert math.isclose(axial, slice_raw / (4 * 5) / 3, rel_tol=1e-12)

    def test_dense_matches_triple_view_bruteforce(self):
        rng = np.random.default_rng(19)
        k = CrfKernel(components=((1.0, 2.0, 0.5),))
        for trial in range(3):
            p = rng.uniform(0, 1, size=(6, 5, 4))
            x = rng.normal(size=(6, 5, 4))
            got = mcrf_loss(Tensor(p), x, k).item()
            want = reference_mcrf(p, x, k.components)
            assert math.isclose(got, want, rel_tol=1e-11)

    def test_dense_with_valid_mask_matches_bruteforce(self):
        rng = np.random.default_rng(20)
        p = rng.uniform(0, 1, size=(5, 4, 4))
        x = rng.normal(size=(5, 4, 4))
        valid = rng.random((5, 4, 4)) < 0.8
        k = CrfKernel(components=((1.0, 2.0, 0.5),))
        got = mcrf_loss(Tensor(p), x, k, valid_mask=valid).item()
        want = reference_mcrf(p, x, k.components, valid=valid)
        assert math.isclose(got, want, rel_tol=1e-11)

    def test_windowed_matches_truncated_bruteforce(self):
        rng = np.random.default_rng(21)
        p = rng.uniform(0, 1, size=(6, 5, 4))
        x = rng.normal(size=(6, 5, 4))
        k = CrfKernel(components=((1.0, 1.5, 0.4),), window_radius=2)
        got = mcrf_loss(Tensor(p), x, k).item()
        want = reference_mcrf(p, x, k.components, radius=2)
        assert math.isclose(got, want, rel_tol=1e-11)

    def test_full_window_equals_dense_exactly(self):
        rng = np.random.default_rng(22)
        p = rng.uniform(0, 1, size=(6, 5, 4))
        x = rng.normal(size=(6, 5, 4))
        dense = mcrf_loss(Tensor(p), x, CrfKernel()).item()
        win = mcrf_loss(Tensor(p), x, CrfKernel(window_radius=5)).item()
        assert win == dense

    def test_gradient_matches_identity_oracle_and_fd(self):
        rng = np.random.default_rng(23)
        p = prob_leaf(rng, (5, 4, 3))
        x = rng.normal(size=(5, 4, 3))
        valid = rng.random((5, 4, 3)) < 0.9
        k = CrfKernel(components=((1.0, 2.0, 0.5),))
        loss = mcrf_loss(p, x, k, valid_mask=valid)
        backward(loss)
        ident = reference_mcrf_grad(p.data, x, k.components, valid=valid)
        assert max_rel_error(p.grad, ident) < 1e-11
        num = finite_diff_scalar(
            lambda: mcrf_loss(p, x, k, valid_mask=valid).item(), [p.data], eps=1e-5)[0]
        assert max_rel_error(p.grad, num) < 1e-7

    def test_nonnegative_and_zero_only_for_per_slice_binary_constant(self):
        rng = np.random.default_rng(24)
        x = rng.normal(size=(4, 4, 4))
        p = rng.uniform(0.1, 0.9, size=(4, 4, 4))
        assert mcrf_loss(Tensor(p), x, CrfKernel()).item() > 0
        # binary, constant within each axial slice but not across slices:
        # the axial view vanishes, the other two see the slice boundaries
        pz = np.broadcast_to(np.array([0.0, 1.0, 1.0, 0.0]), (4, 4, 4)).copy()
        k = CrfKernel(components=((1.0, 2.0, 0.5),))
        axial, _ = losses._view_value_grad(pz, x, k, None, 2)
        assert abs(axial) < 1e-15
        assert mcrf_loss(Tensor(pz), x, k).item() > 0


class TestCachedCrf:
    def test_matches_direct_windowed_evaluation(self):
        rng = np.random.default_rng(25)
        dims = (6, 5, 4)
        x = rng.normal(size=dims)
        valid = rng.random(dims) < 0.85
        k = CrfKernel(components=((1.0, 1.5, 0.4),), window_radius=2)
        cache = CachedCrf(x, k, valid_mask=valid, dtype=np.float64)
        p = prob_leaf(rng, dims)
        direct = mcrf_loss(Tensor(p.data.copy()), x, k, valid_mask=valid)
        cached = cache.loss(p)
        assert math.isclose(cached.item(), direct.item(), rel_tol=1e-11)
        backward(cached)
        ident = reference_mcrf_grad(p.data, x, k.components, radius=2, valid=valid)
        assert max_rel_error(p.grad, ident) < 1e-11

    @pytest.mark.parametrize("flips", [(0,), (1, 2), (0, 1, 2)])
    def test_flip_evaluation_is_exact(self, flips):
        rng = np.random.default_rng(26)
        dims = (5, 4, 6)
        x = rng.normal(size=dims)
        k = CrfKernel(components=((1.0, 1.5, 0.4),), window_radius=2)
        cache = CachedCrf(x, k, dtype=np.float64)
        p = rng.uniform(0, 1, size=dims)
        base = cache.loss(Tensor(p)).item()
        pf = p.copy()
        for ax in flips:
            pf = np.flip(pf, axis=ax)
        t = Tensor(pf.copy(), requires_grad=True)
        flipped = cache.loss(t, flips=flips)
        assert flipped.item() == base
        backward(flipped)
        t0 = Tensor(p.copy(), requires_grad=True)
        backward(cache.loss(t0))
        g = t0.grad
        for ax in flips:
            g = np.flip(g, axis=ax)
        assert np.array_equal(t.grad, g)

    def test_flipped_frame_matches_flipped_image_direct(self):
        # evaluating flipped p against cached canonical kernels equals the
        # direct loss of (flipped p, flipped x)
        rng = np.random.default_rng(27)
        dims = (4, 5, 3)
        x = rng.normal(size=dims)
        k = CrfKernel(components=((1.0, 1.5, 0.4),), window_radius=2)
        cache = CachedCrf(x, k, dtype=np.float64)
        p = rng.uniform(0, 1, size=dims)
        pf = np.flip(p, axis=0).copy()
        xf = np.flip(x, axis=0).copy()
        got = cache.loss(Tensor(pf), flips=(0,)).item()
        want = mcrf_loss(Tensor(pf), xf, k).item()
        assert math.isclose(got, want, rel_tol=1e-11)

    def test_requires_windowed_kernel(self):
        with pytest.raises(ValidationError):
            CachedCrf(np.zeros((4, 4, 4)), CrfKernel())


class TestVm:
    def test_constant_image_gives_zero(self):
        rng = np.random.default_rng(28)
        p = rng.uniform(0, 1, size=(4, 4, 4))
        x = np.full((4, 4, 4), 2.5)
        m = np.ones((4, 4, 4), dtype=bool)
        for mode in ("through", "detached"):
            assert abs(vm_loss(Tensor(p), x, m, mode=mode).item()) < 1e-12

    def test_exact_indicator_on_two_valued_image_gives_zero(self):
        x = np.zeros((4, 4, 4))
        x[1:3, 1:3, 1:3] = 7.0
        p = (x > 0).astype(np.float64)
        m = np.ones(x.shape, dtype=bool)
        assert abs(vm_loss(Tensor(p), x, m).item()) < 1e-12

    def test_two_voxel_frozen_value(self):
        x = np.array([0.0, 1.0]).reshape(2, 1, 1)
        p = np.full((2, 1, 1), 0.5)
        m = np.ones((2, 1, 1), dtype=bool)
        assert math.isclose(vm_loss(Tensor(p), x, m).item(), 0.5, rel_tol=1e-12)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(29)
        p = rng.uniform(0, 1, size=(5, 4, 3))
        x = rng.normal(size=(5, 4, 3))
        m = rng.random((5, 4, 3)) < 0.8
        got = vm_loss(Tensor(p), x, m).item()
        assert math.isclose(got, reference_vm(p, x, m), rel_tol=1e-12)

    @pytest.mark.parametrize("mode", ["through", "detached"])
    def test_invariant_under_intensity_shift(self, mode):
        rng = np.random.default_rng(30)
        p = rng.uniform(0, 1, size=(4, 4, 3))
        x = rng.normal(size=(4, 4, 3))
        m = np.ones(x.shape, dtype=bool)
        a = vm_loss(Tensor(p), x, m, mode=mode).item()
        b = vm_loss(Tensor(p), x + 13.7, m, mode=mode).item()
        assert math.isclose(a, b, rel_tol=1e-9)

    def test_through_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        p = prob_leaf(rng, (4, 3, 3))
        x = rng.normal(size=(4, 3, 3))
        m = rng.random((4, 3, 3)) < 0.9
        loss = vm_loss(p, x, m, mode="through")
        backward(loss)
        num = finite_diff_scalar(lambda: vm_loss(p, x, m, mode="through").item(),
                                 [p.data], eps=1e-5)[0]
        assert max_rel_error(p.grad, num) < 1e-6

    def test_detached_gradient_freezes_means(self):
        rng = np.random.default_rng(32)
        p = prob_leaf(rng, (4, 3, 3))
        x = rng.normal(size=(4, 3, 3))
        m = np.ones((4, 3, 3), dtype=bool)
        loss = vm_loss(p, x, m, mode="detached")
        backward(loss)
        pv = p.data[m]
        xv = x[m]
        uf0 = (pv * xv).sum() / pv.sum()
        ub0 = ((1 - pv) * xv).sum() / (1 - pv).sum()

        def frozen():
            q = p.data[m]
            sp = max(q.sum(), 1e-6)
            sq = max((1 - q).sum(), 1e-6)
            return float(((xv - uf0) ** 2 * q).sum() / sp
                         + ((xv - ub0) ** 2 * (1 - q)).sum() / sq)

        num = finite_diff_scalar(frozen, [p.data], eps=1e-5)[0]
        assert max_rel_error(p.grad, num) < 1e-6

    def test_degenerate_soft_region_warns_and_drops_term(self, caplog):
        x = np.zeros((3, 3, 3))
        p = np.zeros((3, 3, 3))
        m = np.ones((3, 3, 3), dtype=bool)
        with caplog.at_level(logging.WARNING, logger="pointseg.losses"):
            v = vm_loss(Tensor(p), x, m).item()
        assert np.isfinite(v)
        assert any("dropped" in r.message for r in caplog.records)

    def test_near_empty_foreground_exerts_no_push(self):
        # a sub-guard soft region must not inject 1/guard-scale gradients
        # that uniformly drain the region further
        rng = np.random.default_rng(77)
        x = rng.normal(size=(3, 3, 3))
        p = np.full((3, 3, 3), 1e-9)
        m = np.ones((3, 3, 3), dtype=bool)
        pt = Tensor(p, requires_grad=True)
        backward(vm_loss(pt, x, m))
        assert np.abs(pt.grad).max() < 1e3

    def test_empty_valid_region_rejected(self):
        with pytest.raises(ValidationError):
            vm_loss(Tensor(np.zeros((2, 2, 2))), np.zeros((2, 2, 2)),
                    np.zeros((2, 2, 2), dtype=bool))


class TestStage1Total:
    def _case(self, seed, dims=(4, 4, 3)):
        rng = np.random.default_rng(seed)
        part = random_partition(rng, dims)
        q = part.to_q().arr()
        x = rng.normal(size=dims)
        p = rng.uniform(0.1, 0.9, size=dims)
        return part, q, x, p

    def test_zero_weights_reduce_to_psup(self):
        part, q, x, p = self._case(33)
        cfg = Stage1LossConfig(alpha=0.0, beta=0.0)
        total = stage1_total(Tensor(p), q, x, part, cfg).item()
        assert total == psup(Tensor(p), q, part).item()

    def test_linear_in_weights(self):
        part, q, x, p = self._case(34)
        k = CrfKernel(components=((1.0, 2.0, 0.5),))
        base = psup(Tensor(p), q, part).item()
        mc = mcrf_loss(Tensor(p), x, k, valid_mask=part.omega_m).item()
        vm = vm_loss(Tensor(p), x, part.omega_m).item()
        for alpha, beta in [(1.0, 0.1), (0.5, 0.0), (0.0, 2.0), (2.0, 1.0)]:
            cfg = Stage1LossConfig(alpha=alpha, beta=beta)
            got = stage1_total(Tensor(p), q, x, part, cfg, kernel=k).item()
            assert math.isclose(got, base + alpha * mc + beta * vm, rel_tol=1e-10)

    def test_terms_report_components(self):
        part, q, x, p = self._case(35)
        cfg = Stage1LossConfig(alpha=1.0, beta=0.1)
        k = CrfKernel(components=((1.0, 2.0, 0.5),))
        parts = stage1_terms(Tensor(p), q, x, part, cfg, kernel=k)
        assert set(parts) == {"psup", "mcrf", "vm", "total"}
        want = parts["psup"].item() + 1.0 * parts["mcrf"].item() + 0.1 * parts["vm"].item()
        assert math.isclose(parts["total"].item(), want, rel_tol=1e-12)

    def test_zero_weight_terms_reported_as_none(self):
        part, q, x, p = self._case(36)
        parts = stage1_terms(Tensor(p), q, x, part, Stage1LossConfig(alpha=0.0, beta=0.0))
        assert parts["mcrf"] is None and parts["vm"] is None

    def test_accepts_precomputed_crf_term(self):
        part, q, x, p = self._case(37)
        k = CrfKernel(components=((1.0, 1.5, 0.4),), window_radius=2)
        cache = CachedCrf(x, k, valid_mask=part.omega_m, dtype=np.float64)
        t = Tensor(p, requires_grad=True)
        cfg = Stage1LossConfig(alpha=1.0, beta=0.1)
        parts = stage1_terms(t, q, x, part, cfg, kernel=k, mcrf_term=cache.loss(t))
        direct = mcrf_loss(Tensor(p), x, k, valid_mask=part.omega_m).item()
        assert math.isclose(parts["mcrf"].item(), direct, rel_tol=1e-11)

    def test_composite_gradient_matches_finite_differences(self):
        part, q, x, _ = self._case(38)
        rng = np.random.default_rng(39)
        p = prob_leaf(rng, (4, 4, 3), lo=0.15, hi=0.85)
        cfg = Stage1LossConfig(alpha=0.7, beta=0.3)
        k = CrfKernel(components=((1.0, 2.0, 0.5),))
        loss = stage1_total(p, q, x, part, cfg, kernel=k)
        backward(loss)
        num = finite_diff_scalar(
            lambda: stage1_total(p, q, x, part, cfg, kernel=k).item(), [p.data], eps=1e-5)[0]
        assert max_rel_error(p.grad, num) < 1e-6


class TestWarmupScale:
    def test_disabled_is_identity(self):
        assert losses.warmup_scale(0, 0) == 1.0
        assert losses.warmup_scale(100, 0) == 1.0

    def test_linear_ramp(self):
        assert losses.warmup_scale(0, 10) == 0.0
        assert losses.warmup_scale(5, 10) == 0.5
        assert losses.warmup_scale(10, 10) == 1.0
        assert losses.warmup_scale(37, 10) == 1.0

    def test_negative_warmup_rejected(self):
        with pytest.raises(ValidationError):
            Stage1LossConfig(warmup_epochs=-1)
