import math

import numpy as np
import pytest

from dwiadapt.core import DwiStack, Protocol
from dwiadapt.dki import (
    DkiParams,
    FitConfig,
    ParameterMaps,
    fit_roi,
    fit_voxel,
    forward_jacobian,
    forward_signal,
    load_maps,
    max_valid_b,
    roi_mean_coefficients,
    save_maps,
    threshold_classify,
)
from dwiadapt.errors import DegenerateInput, EmptyMask, FormatError, UnderDetermined

FULL_B = (0.0, 100.0, 750.0, 1500.0)


def draw_valid_params(rng, cfg=None, max_b=1500.0):
    """Random parameters identifiable from signals up to max_b.

    Above b = 3/(adc*akc) the modeled decay turns around and the fit
    problem stops being well-posed, so draws stay inside that range.
    """
    cfg = cfg or FitConfig()
    while True:
        adc = rng.uniform(cfg.adc_min, cfg.adc_max)
        akc = rng.uniform(0.0, cfg.akc_max)
        if max_b <= max_valid_b(adc, akc):
            break
    s0 = rng.uniform(100.0, 2000.0)
    theta = rng.uniform(0.0, 0.5 * s0)
    return DkiParams(s0, adc, akc, theta)


class TestForwardSignal:
    def test_b0_is_s0_when_theta_zero(self):
        p = DkiParams(1000.0, 1.3e-3, 0.8, 0.0)
        assert forward_signal(p, 0.0) == 1000.0

    def test_b0_pythagorean(self):
        p = DkiParams(300.0, 1e-3, 0.0, 400.0)
        assert forward_signal(p, 0.0) == 500.0

    def test_mono_exponential_reduction(self):
        p = DkiParams(1000.0, 1e-3, 0.0, 0.0)
        assert forward_signal(p, 1000.0) == pytest.approx(1000.0 * math.exp(-1.0), rel=1e-12)

    def test_kurtosis_term(self):
        p = DkiParams(1000.0, 1e-3, 1.0, 0.0)
        expected = 1000.0 * math.exp(-1.0 + 1.0 / 6.0)
        assert forward_signal(p, 1000.0) == pytest.approx(expected, rel=1e-12)

    def test_b0_closed_form_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = draw_valid_params(rng)
            assert forward_signal(p, 0.0) == math.sqrt(p.theta**2 + p.s0**2)

    def test_floor_at_theta(self):
        p = DkiParams(500.0, 2e-3, 0.3, 120.0)
        bgrid = np.linspace(0, 1500, 40)
        assert np.all(forward_signal(p, bgrid) > p.theta)

    def test_decreasing_with_zero_akc(self):
        p = DkiParams(900.0, 1.5e-3, 0.0, 50.0)
        s = forward_signal(p, np.linspace(0, 3000, 200))
        assert np.all(np.diff(s) < 0)

    def test_decreasing_inside_validity_range(self):
        rng = np.random.default_rng(1)
        cfg = FitConfig()
        for _ in range(25):
            adc = rng.uniform(cfg.adc_min, cfg.adc_max)
            akc = rng.uniform(0.05, cfg.akc_max)
            p = DkiParams(rng.uniform(100.0, 2000.0), adc, akc, 0.0)
            s = forward_signal(p, np.linspace(0, 0.95 * max_valid_b(adc, akc), 100))
            assert np.all(np.diff(s) < 0)

    def test_rejects_bad_b(self):
        p = DkiParams(1000.0, 1e-3, 0.5, 0.0)
        with pytest.raises(FormatError):
            forward_signal(p, -1.0)
        with pytest.raises(FormatError):
            forward_signal(p, float("nan"))


class TestDkiParamsValidation:
    def test_rejects_nonpositive_s0(self):
        with pytest.raises(FormatError):
            DkiParams(0.0, 1e-3, 0.5, 0.0)

    def test_rejects_negative_akc(self):
        with pytest.raises(FormatError):
            DkiParams(100.0, 1e-3, -0.1, 0.0)

    def test_rejects_nan(self):
        with pytest.raises(FormatError):
            DkiParams(float("nan"), 1e-3, 0.5, 0.0)


class TestJacobian:
    # characteristic per-parameter scales: keep FD steps sane when a
    # parameter sits near zero, and make the three derivative components
    # (different units) comparable after multiplying by these
    PARAM_SCALES = {"s0": 1.0, "adc": 1e-4, "akc": 0.1}

    @classmethod
    def fd_jacobian(cls, p, b, step=1e-4):
        """Central finite differences with per-parameter scaled steps."""
        out = []
        for name in ("s0", "adc", "akc"):
            v = getattr(p, name)
            h = step * (abs(v) + cls.PARAM_SCALES[name])
            hi = {"s0": p.s0, "adc": p.adc, "akc": p.akc, "theta": p.theta}
            lo = dict(hi)
            hi[name] = v + h
            lo[name] = v - h
            f_hi = forward_signal(DkiParams(**hi), b)
            f_lo = forward_signal(DkiParams(**lo), b)
            out.append((f_hi - f_lo) / (2 * h))
        return tuple(out)

    @classmethod
    def scaled_gradient_error(cls, p, b):
        """Max relative error between analytic and FD gradients.

        Components are made dimensionless via the parameter scales, then
        normalized by the largest component so tiny derivatives do not
        inflate the relative error through FD subtraction noise.
        """
        scales = np.array([abs(getattr(p, n)) + cls.PARAM_SCALES[n]
                           for n in ("s0", "adc", "akc")])
        got = np.array(forward_jacobian(p, b)) * scales
        want = np.array(cls.fd_jacobian(p, b)) * scales
        denom = max(np.abs(got).max(), np.abs(want).max(), 1e-12)
        return float(np.abs(got - want).max() / denom)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = draw_valid_params(rng)
            for b in (0.0, 100.0, 750.0, 1500.0):
                assert self.scaled_gradient_error(p, b) <= 1e-6

    def test_b0_kills_adc_and_akc_derivatives(self):
        p = DkiParams(700.0, 1e-3, 0.9, 55.0)
        _, d_adc, d_akc = forward_jacobian(p, 0.0)
        assert d_adc == 0.0
        assert d_akc == 0.0

    def test_s0_derivative_at_zero_theta(self):
        p = DkiParams(700.0, 1e-3, 0.9, 0.0)
        d_s0, _, _ = forward_jacobian(p, 750.0)
        expected = math.exp(-750.0 * p.adc + 750.0**2 * p.adc**2 * p.akc / 6.0)
        assert d_s0 == pytest.approx(expected, rel=1e-12)


class TestFitVoxel:
    def test_noiseless_round_trip(self):
        truth = DkiParams(800.0, 1.2e-3, 0.9, 30.0)
        samples = [(b, forward_signal(truth, b)) for b in FULL_B]
        res = fit_voxel(samples, 30.0)
        assert res.converged
        assert res.params.s0 == pytest.approx(truth.s0, rel=1e-6)
        assert res.params.adc == pytest.approx(truth.adc, rel=1e-6)
        assert res.params.akc == pytest.approx(truth.akc, rel=1e-6)

    def test_round_trip_many_draws(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            truth = draw_valid_params(rng)
            samples = [(b, forward_signal(truth, b)) for b in FULL_B]
            res = fit_voxel(samples, truth.theta)
            assert res.params.s0 == pytest.approx(truth.s0, rel=1e-6)
            assert res.params.adc == pytest.approx(truth.adc, rel=1e-6)
            assert res.params.akc == pytest.approx(truth.akc, rel=1e-6, abs=1e-9)

    def test_two_point_constrained_closed_form(self):
        samples = [(0.0, 1000.0), (1000.0, 367.879441)]
        res = fit_voxel(samples, 0.0, FitConfig(constrain_akc_zero=True))
        assert res.params.adc == pytest.approx(1e-3, rel=1e-6)
        assert res.params.akc == 0.0

    def test_two_points_unconstrained_rejected(self):
        samples = [(0.0, 1000.0), (1000.0, 367.879441)]
        with pytest.raises(UnderDetermined):
            fit_voxel(samples, 0.0)

    def test_fewer_than_two_distinct(self):
        with pytest.raises(DegenerateInput):
            fit_voxel([(750.0, 500.0), (750.0, 510.0)], 0.0)
        with pytest.raises(DegenerateInput):
            fit_voxel([(0.0, 1000.0)], 0.0)

    def test_all_zero_signals(self):
        with pytest.raises(DegenerateInput):
            fit_voxel([(b, 0.0) for b in FULL_B], 0.0)

    def test_sample_order_invariance(self):
        truth = DkiParams(900.0, 1.4e-3, 1.1, 80.0)
        samples = [(b, forward_signal(truth, b)) for b in FULL_B]
        a = fit_voxel(samples, 80.0)
        b = fit_voxel(list(reversed(samples)), 80.0)
        assert a == b

    def test_scale_invariance(self):
        truth = DkiParams(750.0, 1.1e-3, 0.7, 60.0)
        samples = [(b, forward_signal(truth, b)) for b in FULL_B]
        base = fit_voxel(samples, 60.0)
        c = 3.5
        scaled = fit_voxel([(b, c * s) for b, s in samples], c * 60.0)
        assert scaled.params.s0 == pytest.approx(c * base.params.s0, rel=1e-8)
        assert scaled.params.adc == pytest.approx(base.params.adc, rel=1e-8)
        assert scaled.params.akc == pytest.approx(base.params.akc, rel=1e-8, abs=1e-10)

    def test_zero_iteration_budget(self):
        truth = DkiParams(800.0, 1.2e-3, 0.9, 0.0)
        samples = [(b, forward_signal(truth, b)) for b in FULL_B]
        res = fit_voxel(samples, 0.0, FitConfig(max_iterations=0))
        assert not res.converged
        assert res.iterations == 0


def homogeneous_stack(truth, protocol=FULL_B, h=6, w=6, fat_level=None):
    """Noise-free stack whose lesion voxels all share one parameter set."""
    fat_level = truth.theta if fat_level is None else fat_level
    lesion = np.zeros((h, w), dtype=bool)
    lesion[2:5, 2:5] = True
    fat = np.zeros((h, w), dtype=bool)
    fat[0, :] = True
    planes = []
    for b in protocol:
        plane = np.zeros((h, w))
        plane[lesion] = forward_signal(truth, b)
        plane[fat] = fat_level
        planes.append(plane)
    return DwiStack.build(Protocol(protocol), planes, lesion, fat)


class TestFitRoi:
    def test_homogeneous_round_trip(self):
        truth = DkiParams(820.0, 1.3e-3, 0.8, 45.0)
        stack = homogeneous_stack(truth)
        assert stack.theta == pytest.approx(45.0)
        maps = fit_roi(stack)
        m = stack.lesion_mask
        assert np.allclose(maps.adc_map[m], truth.adc, rtol=1e-6)
        assert np.allclose(maps.akc_map[m], truth.akc, rtol=1e-6)
        assert np.allclose(maps.s0_map[m], truth.s0, rtol=1e-6)
        assert np.all(maps.adc_map[~m] == 0)
        assert np.all(maps.s0_map[~m] == 0)

    def test_empty_mask_gives_zero_maps(self):
        truth = DkiParams(800.0, 1e-3, 0.5, 40.0)
        stack = homogeneous_stack(truth)
        empty = DwiStack.build(stack.protocol, stack.planes,
                               np.zeros(stack.lesion_mask.shape, bool), stack.fat_mask)
        maps = fit_roi(empty)
        assert not maps.mask.any()
        assert np.all(maps.adc_map == 0)

    def test_two_region_lesion(self):
        pa = DkiParams(900.0, 1.7e-3, 0.5, 30.0)
        pb = DkiParams(600.0, 0.9e-3, 1.4, 30.0)
        h = w = 8
        lesion = np.zeros((h, w), dtype=bool)
        lesion[1:4, 1:7] = True
        region_b = np.zeros((h, w), dtype=bool)
        region_b[1:4, 4:7] = True
        fat = np.zeros((h, w), dtype=bool)
        fat[6, :] = True
        planes = []
        for b in FULL_B:
            plane = np.zeros((h, w))
            plane[lesion & ~region_b] = forward_signal(pa, b)
            plane[region_b] = forward_signal(pb, b)
            plane[fat] = 30.0
            planes.append(plane)
        stack = DwiStack.build(Protocol(FULL_B), planes, lesion, fat)
        maps = fit_roi(stack)
        assert np.allclose(maps.adc_map[lesion & ~region_b], pa.adc, rtol=1e-6)
        assert np.allclose(maps.adc_map[region_b], pb.adc, rtol=1e-6)
        assert np.allclose(maps.akc_map[region_b], pb.akc, rtol=1e-6)

    def test_batch_matches_per_voxel_bitwise(self):
        rng = np.random.default_rng(4)
        h = w = 5
        lesion = np.zeros((h, w), dtype=bool)
        lesion[1:4, 1:4] = True
        fat = np.zeros((h, w), dtype=bool)
        fat[0, :] = True
        planes = [np.zeros((h, w)) for _ in FULL_B]
        for idx in zip(*np.nonzero(lesion)):
            truth = draw_valid_params(rng)
            for k, b in enumerate(FULL_B):
                planes[k][idx] = forward_signal(
                    DkiParams(truth.s0, truth.adc, truth.akc, 35.0), b
                )
        for k in range(len(FULL_B)):
            planes[k][fat] = 35.0
        noisy = [p + rng.uniform(0, 5, size=p.shape) * lesion for p in planes]
        stack = DwiStack.build(Protocol(FULL_B), noisy, lesion, fat)
        maps = fit_roi(stack)
        for idx in zip(*np.nonzero(lesion)):
            samples = [(b, stack.planes[k][idx]) for k, b in enumerate(FULL_B)]
            single = fit_voxel(samples, stack.theta)
            assert maps.adc_map[idx] == single.params.adc
            assert maps.akc_map[idx] == single.params.akc
            assert maps.s0_map[idx] == single.params.s0

    def test_all_zero_voxel_degenerate_result(self):
        truth = DkiParams(820.0, 1.3e-3, 0.8, 0.0)
        stack = homogeneous_stack(truth, fat_level=10.0)
        lesion = stack.lesion_mask.copy()
        planes = [p.copy() for p in stack.planes]
        dead = (2, 2)
        for p in planes:
            p[dead] = 0.0
        stack2 = DwiStack.build(stack.protocol, planes, lesion, stack.fat_mask)
        cfg = FitConfig()
        maps = fit_roi(stack2, cfg)
        assert maps.adc_map[dead] == cfg.adc_min
        assert maps.akc_map[dead] == 0.0
        assert maps.s0_map[dead] == pytest.approx(0.0, abs=1e-10)

    def test_underdetermined_protocol_rejected(self):
        truth = DkiParams(800.0, 1e-3, 0.0, 20.0)
        stack = homogeneous_stack(truth, protocol=(0.0, 750.0))
        with pytest.raises(UnderDetermined):
            fit_roi(stack)
        maps = fit_roi(stack, FitConfig(constrain_akc_zero=True))
        m = stack.lesion_mask
        assert np.allclose(maps.adc_map[m], truth.adc, rtol=1e-6)


class TestRoiMeans:
    def test_constant_maps(self):
        mask = np.ones((2, 2), dtype=bool)
        adc = np.full((2, 2), 1e-3)
        akc = np.ones((2, 2))
        s0 = np.full((2, 2), 500.0)
        maps = ParameterMaps(adc, akc, s0, mask)
        assert roi_mean_coefficients(maps) == (pytest.approx(1e-3), pytest.approx(1.0))

    def test_two_point_mean(self):
        mask = np.array([[True, True, False]])
        adc = np.array([[0.8e-3, 1.2e-3, 99.0]])
        akc = np.zeros((1, 3))
        s0 = np.ones((1, 3))
        maps = ParameterMaps(adc, akc, s0, mask)
        adc_mean, _ = roi_mean_coefficients(maps)
        assert adc_mean == pytest.approx(1.0e-3, rel=1e-12)

    def test_against_double_loop_oracle(self):
        rng = np.random.default_rng(5)
        mask = rng.uniform(size=(7, 7)) < 0.4
        mask[3, 3] = True
        adc = rng.uniform(1e-4, 3e-3, size=(7, 7)) * mask
        akc = rng.uniform(0, 2, size=(7, 7)) * mask
        maps = ParameterMaps(adc, akc, np.ones((7, 7)) * mask, mask)
        sa = sk = 0.0
        n = 0
        for i in range(7):
            for j in range(7):
                if mask[i, j]:
                    sa += adc[i, j]
                    sk += akc[i, j]
                    n += 1
        adc_mean, akc_mean = roi_mean_coefficients(maps)
        assert adc_mean == pytest.approx(sa / n, rel=1e-12)
        assert akc_mean == pytest.approx(sk / n, rel=1e-12)

    def test_empty_mask(self):
        z = np.zeros((2, 2))
        maps = ParameterMaps(z, z, z, np.zeros((2, 2), bool))
        with pytest.raises(EmptyMask):
            roi_mean_coefficients(maps)


class TestThresholdClassify:
    def test_midpoint(self):
        assert threshold_classify(1.3e-3, 1.3e-3) == 0.5

    def test_monotone_decreasing(self):
        scores = [threshold_classify(a, 1.3e-3) for a in np.linspace(0, 3e-3, 30)]
        assert all(x > y for x, y in zip(scores, scores[1:]))

    def test_limit_toward_one(self):
        # at adc 0 the score approaches 1; exact value depends on
        # threshold/scale, so check the trend and a generous floor
        assert threshold_classify(0.0, 1.3e-3) > 0.99
        assert threshold_classify(0.0, 1.3e-3, scale=1e-5) > 1 - 1e-12

    def test_saturation(self):
        thr, scale = 1.3e-3, 0.2e-3
        assert threshold_classify(thr + 10 * scale, thr, scale) < 0.001

    def test_bad_scale(self):
        with pytest.raises(FormatError):
            threshold_classify(1e-3, 1e-3, scale=0.0)


class TestMapsPersistence:
    def test_round_trip(self, tmp_path):
        truth = DkiParams(820.0, 1.3e-3, 0.8, 45.0)
        maps = fit_roi(homogeneous_stack(truth))
        save_maps(maps, tmp_path / "m", source_id="case-1", fit_config=FitConfig())
        back = load_maps(tmp_path / "m")
        # disk format is float32, so compare after the same quantization
        assert np.array_equal(back.adc_map, maps.adc_map.astype(np.float32).astype(np.float64))
        assert np.array_equal(back.akc_map, maps.akc_map.astype(np.float32).astype(np.float64))
        assert np.array_equal(back.s0_map, maps.s0_map.astype(np.float32).astype(np.float64))
        assert np.array_equal(back.mask, maps.mask)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(FormatError):
            ParameterMaps(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)),
                          np.zeros((3, 2), bool))
