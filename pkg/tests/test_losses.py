import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowrefine.errors import ConfigError, NoValidPixelsError, ShapeError
from flowrefine.flow_ops import FlowField
from flowrefine.gradcheck import check_gradients
from flowrefine.losses import (
    ConfidenceMap,
    LossConfig,
    apply_confidence_schedule,
    confidence_map,
    focal_weight,
    l1_flow_loss,
    rfl_loss,
    sequence_loss,
)
from flowrefine.model import IterationTrace
from flowrefine.tensor import Tensor


def ff(arr, valid=None, grad=False):
    return FlowField(Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad), valid)


def const_map(value, shape):
    return ConfidenceMap(Tensor(np.full(shape, value, dtype=np.float64)))


class TestL1:
    def test_single_pixel(self):
        gt = ff(np.zeros((1, 2, 1, 1)))
        pred = ff(np.array([3.0, -4.0]).reshape(1, 2, 1, 1))
        assert l1_flow_loss(gt, pred).item() == 7.0

    def test_mean_over_valid_pixels_only(self):
        gt = ff(np.zeros((1, 2, 1, 2)), valid=np.array([[True, False]]))
        pred = ff(np.array([[[[1.0, 100.0]], [[1.0, 100.0]]]]))
        assert l1_flow_loss(gt, pred).item() == 2.0

    def test_no_valid_pixels(self):
        gt = ff(np.zeros((1, 2, 2, 2)), valid=np.zeros((2, 2), dtype=bool))
        with pytest.raises(NoValidPixelsError):
            l1_flow_loss(gt, ff(np.ones((1, 2, 2, 2))))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError) as exc:
            l1_flow_loss(ff(np.zeros((1, 2, 2, 2))), ff(np.zeros((1, 2, 2, 3))))
        assert exc.value.axis == 3

    def test_gradient(self, rng):
        gt = ff(rng.normal(size=(2, 2, 3, 3)))
        pred = ff(gt.flow.data + rng.choice([-1, 1], size=(2, 2, 3, 3)) * rng.uniform(0.1, 1, size=(2, 2, 3, 3)), grad=True)
        (err,) = check_gradients(lambda: l1_flow_loss(gt, pred), [pred.flow])
        assert err < 1e-3


class TestSequenceLoss:
    def test_three_unit_losses(self):
        # 0.8**2 + 0.8 + 1
        assert abs(sequence_loss([Tensor(1.0)] * 3, 0.8).item() - 2.44) <= 1e-12

    def test_single_loss_unweighted(self):
        assert sequence_loss([Tensor(3.5)], 0.8).item() == 3.5

    def test_last_iteration_weighs_most(self):
        total = sequence_loss([Tensor(1.0), Tensor(0.0)], 0.5).item()
        assert total == 0.5

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.2, 1.5])
    def test_gamma_out_of_range(self, gamma):
        with pytest.raises(ValueError):
            sequence_loss([Tensor(1.0)], gamma)

    def test_empty(self):
        with pytest.raises(ValueError):
            sequence_loss([], 0.8)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=1, max_size=8), st.floats(0.05, 0.95))
    def test_matches_closed_form(self, values, gamma):
        n = len(values)
        expect = sum(gamma ** (n - i) * v for i, v in enumerate(values, start=1))
        got = sequence_loss([Tensor(v) for v in values], gamma).item()
        assert got == pytest.approx(expect, rel=1e-12, abs=1e-12)


class TestConfidenceMap:
    def test_equal_fields_give_one(self, rng):
        a = rng.normal(size=(1, 2, 3, 3))
        assert np.all(confidence_map(ff(a), ff(a.copy())).map.data == 1.0)

    @pytest.mark.parametrize("delta,expected", [((1.0, 0.0), math.exp(-1)), ((3.0, 4.0), math.exp(-25))])
    def test_spot_values(self, delta, expected):
        gt = ff(np.zeros((1, 2, 1, 1)))
        pred = ff(np.array(delta).reshape(1, 2, 1, 1))
        assert confidence_map(gt, pred).map.item() == pytest.approx(expected, rel=1e-12)

    def test_no_gradient_flows_through(self):
        gt = ff(np.zeros((1, 2, 1, 1)))
        pred = ff(np.ones((1, 2, 1, 1)), grad=True)
        assert not confidence_map(gt, pred).map.requires_grad

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            confidence_map(ff(np.zeros((1, 2, 2, 2))), ff(np.zeros((2, 2, 2, 2))))


class TestRfl:
    @pytest.mark.parametrize("variant,expected", [("a", 1.0), ("b", 0.5 * 0.7 ** 2), ("c", 1 + 0.5 * 0.3 ** 2), ("d", 1 + 0.5 * 0.7 ** 2)])
    def test_focal_weight_variants(self, variant, expected):
        w = focal_weight(np.array([0.3]), LossConfig(alpha=0.5, beta=2.0, variant=variant))
        assert w[0] == pytest.approx(expected, rel=1e-12)

    def test_variant_d_zero_confidence_doubles(self):
        gt = ff(np.zeros((1, 2, 1, 1)))
        pred = ff(np.array([1.0, 0.0]).reshape(1, 2, 1, 1))
        assert rfl_loss(gt, pred, const_map(0.0, (1, 1, 1, 1)), LossConfig()).item() == 2.0

    def test_variant_a_is_l1(self, rng):
        gt, pred = ff(rng.normal(size=(1, 2, 3, 3))), ff(rng.normal(size=(1, 2, 3, 3)))
        M = confidence_map(gt, pred)
        assert rfl_loss(gt, pred, M, LossConfig(variant="a")).item() == l1_flow_loss(gt, pred).item()

    def test_confidence_shape_checked(self):
        gt = ff(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ShapeError):
            rfl_loss(gt, gt, const_map(1.0, (1, 1, 2, 3)), LossConfig())

    def test_respects_valid_mask(self):
        gt = ff(np.zeros((1, 2, 1, 2)), valid=np.array([[True, False]]))
        pred = ff(np.array([[[[1.0, 50.0]], [[0.0, 50.0]]]]))
        assert rfl_loss(gt, pred, const_map(0.0, (1, 1, 1, 2)), LossConfig()).item() == 2.0

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, (1, 2, 2, 3), elements=st.floats(-50, 50)),
        arrays(np.float64, (1, 2, 2, 3), elements=st.floats(-50, 50)),
        st.floats(0.1, 4.0),
    )
    def test_d_equals_l1_when_disabled(self, a, b, beta):
        gt, pred = ff(a), ff(b)
        plain = l1_flow_loss(gt, pred).item()
        M = confidence_map(gt, pred)
        assert rfl_loss(gt, pred, M, LossConfig(alpha=0.0, beta=beta)).item() == plain
        assert rfl_loss(gt, pred, const_map(1.0, (1, 1, 2, 3)), LossConfig(alpha=2.0, beta=beta)).item() == plain

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (4,), elements=st.floats(0.0, 1.0, exclude_max=True)), st.floats(0.01, 5), st.floats(0.1, 4))
    def test_d_dominates_a_pointwise(self, m, alpha, beta):
        wd = focal_weight(m, LossConfig(alpha=alpha, beta=beta, variant="d"))
        wa = focal_weight(m, LossConfig(variant="a"))
        assert np.all(wd >= wa)

    def test_gradient_matches_finite_differences(self, rng):
        gt = ff(rng.normal(size=(1, 2, 3, 3)))
        offset = rng.choice([-1, 1], size=(1, 2, 3, 3)) * rng.uniform(0.1, 1.0, size=(1, 2, 3, 3))
        pred = ff(gt.flow.data + offset, grad=True)
        M = confidence_map(gt, pred)
        (err,) = check_gradients(lambda: rfl_loss(gt, pred, M, LossConfig()), [pred.flow])
        assert err < 1e-3


class TestLossConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"gamma": 1.0}, {"alpha": -1.0}, {"beta": 0.0}, {"variant": "e"}, {"confidence_source": "middle"}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            LossConfig(**kwargs)


class TestSchedule:
    def test_single_iteration_schedules_agree(self, rng):
        gt = ff(rng.normal(size=(1, 2, 2, 2)))
        trace = IterationTrace(flows=[ff(rng.normal(size=(1, 2, 2, 2)))])
        a = apply_confidence_schedule(trace, gt, LossConfig(confidence_source="final_iteration")).item()
        b = apply_confidence_schedule(trace, gt, LossConfig(confidence_source="per_iteration")).item()
        assert a == b

    def test_none_equals_baseline(self, rng):
        gt = ff(rng.normal(size=(1, 2, 2, 2)))
        flows = [ff(rng.normal(size=(1, 2, 2, 2))) for _ in range(3)]
        got = apply_confidence_schedule(IterationTrace(flows), gt, LossConfig(confidence_source="none")).item()
        expect = sequence_loss([l1_flow_loss(gt, f) for f in flows], 0.8).item()
        assert got == expect

    def test_two_pixel_hand_calculation(self):
        # two pixels; gt zero. iteration 1 errors (1,0) and (0,2); iteration 2 errors (0.5,0) and (0,0)
        gt = ff(np.zeros((1, 2, 1, 2)))
        it1 = ff(np.array([[[[1.0, 0.0]], [[0.0, 2.0]]]]))
        it2 = ff(np.array([[[[0.5, 0.0]], [[0.0, 0.0]]]]))
        trace = IterationTrace([it1, it2])
        m = [math.exp(-0.25), 1.0]  # from the final prediction
        w = [1 + (1 - m[0]), 1 + (1 - m[1])]
        l1 = (w[0] * 1.0 + w[1] * 2.0) / 2
        l2 = (w[0] * 0.5 + w[1] * 0.0) / 2
        expect = 0.8 * l1 + l2
        got = apply_confidence_schedule(trace, gt, LossConfig(confidence_source="final_iteration")).item()
        assert got == pytest.approx(expect, rel=1e-14)
        per = apply_confidence_schedule(trace, gt, LossConfig(confidence_source="per_iteration")).item()
        assert per != pytest.approx(expect, rel=1e-6)

    def test_empty_trace(self):
        with pytest.raises(ValueError):
            apply_confidence_schedule(IterationTrace([]), ff(np.zeros((1, 2, 1, 1))), LossConfig())
