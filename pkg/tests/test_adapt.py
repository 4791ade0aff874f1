import json
import math

import numpy as np
import pytest

from dwiadapt.adapt import AdaptationReport, adapt_stack, restore_channel, save_adapted_stack
from dwiadapt.core import DwiStack, Protocol, load_stack
from dwiadapt.dki import DkiParams, FitConfig, forward_signal, max_valid_b
from dwiadapt.errors import FormatError, UnderDetermined

FULL_B = (0.0, 100.0, 750.0, 1500.0)


def varied_stack(rng, protocol, theta=40.0, h=7, w=7):
    """Noise-free stack with independently drawn parameters per lesion voxel.

    Returns the stack plus truth planes keyed by parameter name.
    """
    cfg = FitConfig()
    lesion = np.zeros((h, w), dtype=bool)
    lesion[2:5, 1:6] = True
    fat = np.zeros((h, w), dtype=bool)
    fat[0, :] = True
    truth = {k: np.zeros((h, w)) for k in ("s0", "adc", "akc")}
    planes = [np.zeros((h, w)) for _ in protocol]
    for idx in zip(*np.nonzero(lesion)):
        while True:
            adc = rng.uniform(3e-4, 2.5e-3)
            akc = rng.uniform(0.1, 1.5)
            if 1500.0 <= max_valid_b(adc, akc):
                break
        s0 = rng.uniform(300.0, 1500.0)
        truth["s0"][idx], truth["adc"][idx], truth["akc"][idx] = s0, adc, akc
        p = DkiParams(s0, adc, akc, theta)
        for k, b in enumerate(protocol):
            planes[k][idx] = forward_signal(p, b)
    for k, b in enumerate(protocol):
        planes[k][fat] = theta
    stack = DwiStack.build(Protocol(protocol), planes, lesion, fat)
    return stack, truth


def truth_plane(truth, mask, theta, b):
    out = np.zeros(mask.shape)
    for idx in zip(*np.nonzero(mask)):
        p = DkiParams(truth["s0"][idx], truth["adc"][idx], truth["akc"][idx], theta)
        out[idx] = forward_signal(p, b)
    return out


class TestRestoreChannel:
    def test_noiseless_missing_channel(self):
        rng = np.random.default_rng(0)
        stack, truth = varied_stack(rng, (0.0, 100.0, 1500.0))
        restored = restore_channel(stack, 750.0)
        want = truth_plane(truth, stack.lesion_mask, 40.0, 750.0)
        m = stack.lesion_mask
        rel = np.abs(restored[m] - want[m]) / want[m]
        assert rel.max() <= 1e-6
        assert np.all(restored[~m] == 0)

    def test_measured_target_matches_model_not_copy(self):
        rng = np.random.default_rng(1)
        stack, _ = varied_stack(rng, FULL_B)
        restored = restore_channel(stack, 750.0)
        m = stack.lesion_mask
        measured = stack.plane(750.0)
        # noiseless data: model prediction and measurement coincide tightly
        rel = np.abs(restored[m] - measured[m]) / measured[m]
        assert rel.max() <= 1e-6
        # but the restored plane is a fresh model evaluation, zero off-mask,
        # not a pass-through of the measured plane
        assert restored is not measured
        assert np.all(restored[stack.fat_mask] == 0)

    def test_two_point_extrapolation_closed_form(self):
        theta = 25.0
        proto = (0.0, 750.0)
        rng = np.random.default_rng(2)
        stack, truth = varied_stack(rng, proto, theta=theta)
        restored = restore_channel(stack, 1500.0, FitConfig(constrain_akc_zero=True))
        m = stack.lesion_mask
        for idx in zip(*np.nonzero(m)):
            s_b0 = stack.plane(0.0)[idx]
            s_b750 = stack.plane(750.0)[idx]
            g0 = math.sqrt(s_b0**2 - theta**2)
            g1 = math.sqrt(s_b750**2 - theta**2)
            adc = math.log(g0 / g1) / 750.0
            want = math.sqrt(theta**2 + (g0 * math.exp(-1500.0 * adc)) ** 2)
            assert restored[idx] == pytest.approx(want, rel=1e-6)

    def test_two_bvalues_need_constraint(self):
        rng = np.random.default_rng(3)
        stack, _ = varied_stack(rng, (0.0, 750.0))
        with pytest.raises(UnderDetermined):
            restore_channel(stack, 1500.0, FitConfig())

    def test_rejects_negative_target(self):
        rng = np.random.default_rng(4)
        stack, _ = varied_stack(rng, FULL_B)
        with pytest.raises(FormatError):
            restore_channel(stack, -5.0)


class TestAdaptStack:
    def test_matched_protocol_is_identity(self):
        rng = np.random.default_rng(5)
        stack, _ = varied_stack(rng, FULL_B)
        adapted, report = adapt_stack(stack, stack.protocol)
        assert report.derived == ()
        assert report.dropped == ()
        assert report.kept == FULL_B
        for a, b in zip(adapted.planes, stack.planes):
            assert a is b
        assert adapted.theta == stack.theta

    def test_missing_scenario(self):
        rng = np.random.default_rng(6)
        full_stack, truth = varied_stack(rng, FULL_B)
        inference = DwiStack.build(
            Protocol((0.0, 100.0, 1500.0)),
            [full_stack.plane(0.0), full_stack.plane(100.0), full_stack.plane(1500.0)],
            full_stack.lesion_mask, full_stack.fat_mask)
        adapted, report = adapt_stack(inference, Protocol(FULL_B))
        assert report.kept == (0.0, 100.0, 1500.0)
        assert report.derived == (750.0,)
        assert report.dropped == ()
        assert adapted.protocol.bvalues == FULL_B
        for b in report.kept:
            assert adapted.plane(b) is inference.plane(b)
        want = truth_plane(truth, inference.lesion_mask, 40.0, 750.0)
        m = inference.lesion_mask
        rel = np.abs(adapted.plane(750.0)[m] - want[m]) / want[m]
        assert rel.max() <= 1e-6

    def test_shifted_scenario_uses_dropped_channel(self):
        # inference provides 1500 instead of 750; restoring 750 needs all
        # three samples, otherwise akc > 0 voxels cannot fit exactly
        rng = np.random.default_rng(7)
        full_stack, truth = varied_stack(rng, FULL_B)
        inference = DwiStack.build(
            Protocol((0.0, 100.0, 1500.0)),
            [full_stack.plane(0.0), full_stack.plane(100.0), full_stack.plane(1500.0)],
            full_stack.lesion_mask, full_stack.fat_mask)
        training = Protocol((0.0, 100.0, 750.0))
        adapted, report = adapt_stack(inference, training)
        assert report.kept == (0.0, 100.0)
        assert report.derived == (750.0,)
        assert report.dropped == (1500.0,)
        assert adapted.protocol == training
        want = truth_plane(truth, inference.lesion_mask, 40.0, 750.0)
        m = inference.lesion_mask
        rel = np.abs(adapted.plane(750.0)[m] - want[m]) / want[m]
        assert rel.max() <= 1e-6

    def test_constraint_forced_for_two_bvalues(self):
        rng = np.random.default_rng(8)
        theta = 30.0
        stack, _ = varied_stack(rng, (0.0, 100.0), theta=theta)
        adapted, report = adapt_stack(stack, Protocol((0.0, 100.0, 750.0)), FitConfig())
        assert report.derived == (750.0,)
        m = stack.lesion_mask
        for idx in zip(*np.nonzero(m)):
            g0 = math.sqrt(stack.plane(0.0)[idx] ** 2 - theta**2)
            g1 = math.sqrt(stack.plane(100.0)[idx] ** 2 - theta**2)
            adc = math.log(g0 / g1) / 100.0
            want = math.sqrt(theta**2 + (g0 * math.exp(-750.0 * adc)) ** 2)
            assert adapted.plane(750.0)[idx] == pytest.approx(want, rel=1e-6)

    def test_report_partitions_training_protocol(self):
        rng = np.random.default_rng(9)
        stack, _ = varied_stack(rng, (0.0, 100.0, 1500.0))
        training = Protocol(FULL_B)
        _, report = adapt_stack(stack, training)
        assert sorted(report.kept + report.derived) == sorted(training.bvalues)
        assert not (set(report.kept) & set(report.derived))

    def test_report_validation(self):
        with pytest.raises(FormatError):
            AdaptationReport(kept=(0.0, 100.0), derived=(100.0,), dropped=())


class TestPersistence:
    def test_manifest_carries_adaptation_record(self, tmp_path):
        rng = np.random.default_rng(10)
        stack, _ = varied_stack(rng, (0.0, 100.0, 1500.0))
        cfg = FitConfig()
        adapted, report = adapt_stack(stack, Protocol(FULL_B), cfg)
        mpath = save_adapted_stack(adapted, report, tmp_path / "c", config=cfg,
                                   case_id="c-10", label="benign")
        manifest = json.loads(mpath.read_text())
        assert manifest["adaptation"]["kept"] == [0.0, 100.0, 1500.0]
        assert manifest["adaptation"]["derived"] == [750.0]
        assert manifest["adaptation"]["fit_config"]["adc_max"] == cfg.adc_max
        back = load_stack(tmp_path / "c")
        assert back.protocol.bvalues == FULL_B
