import math

import numpy as np
import pytest

from sdpg.errors import ContractViolation, NonFiniteError
from sdpg.optim import AdamState, LrSchedule, adam_step, clip_by_norm


def test_zero_grads_leave_params_and_moments():
    s = AdamState.zeros(3, 0.1)
    p = np.array([1.0, 2.0, 3.0])
    s2, p2 = adam_step(s, p, np.zeros(3))
    np.testing.assert_array_equal(p2, p)
    assert np.all(s2.m == 0) and np.all(s2.v == 0) and s2.t == 1
    assert s.t == 0  # input state untouched


def test_clipping_to_unit_norm():
    g = np.array([6.0, 8.0])
    assert abs(np.linalg.norm(clip_by_norm(g, 1.0)) - 1.0) < 1e-12
    np.testing.assert_array_equal(clip_by_norm(g, 20.0), g)


def test_single_step_matches_hand_formula():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    g = np.array([0.3, -0.2, 0.0])
    p = np.array([1.0, 1.0, 1.0])
    s, p2 = adam_step(AdamState.zeros(3, lr), p, g)
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    expected = p - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    np.testing.assert_allclose(p2, expected, rtol=1e-15)
    np.testing.assert_allclose(p2[:2], p[:2] - lr * np.sign(g[:2]), rtol=1e-6)


def test_clipped_step_uses_clipped_gradient():
    s, _ = adam_step(AdamState.zeros(2, 0.1), np.zeros(2), np.array([30.0, 40.0]), max_norm=1.0)
    np.testing.assert_allclose(s.m / (1 - 0.9), [0.6, 0.8], rtol=1e-12)


def test_non_finite_gradient_rejected_with_index():
    with pytest.raises(NonFiniteError) as err:
        adam_step(AdamState.zeros(3, 0.1), np.zeros(3), np.array([0.0, 0.0, np.nan]))
    assert err.value.index == 2


def test_bad_max_norm_and_shape():
    with pytest.raises(ContractViolation):
        adam_step(AdamState.zeros(2, 0.1), np.zeros(2), np.zeros(2), max_norm=0.0)
    with pytest.raises(ContractViolation):
        adam_step(AdamState.zeros(2, 0.1), np.zeros(3), np.zeros(3))


def test_lr_multiplier_scales_step():
    g = np.array([1.0])
    _, p1 = adam_step(AdamState.zeros(1, 0.1), np.zeros(1), g)
    _, p2 = adam_step(AdamState.zeros(1, 0.1), np.zeros(1), g, lr_multiplier=0.5)
    np.testing.assert_allclose(p2, 0.5 * p1)


def test_state_dict_round_trip():
    s, _ = adam_step(AdamState.zeros(2, 0.1), np.zeros(2), np.array([0.1, 0.2]))
    s2 = AdamState.from_dict(s.to_dict())
    assert s2.t == s.t and s2.m.tobytes() == s.m.tobytes() and s2.v.tobytes() == s.v.tobytes()


def test_cosine_schedule_endpoints():
    sch = LrSchedule("cosine", 100, 1e-3, warmup_epochs=10, eta_min=1e-5)
    assert sch.lr(9) == pytest.approx(1e-3, rel=1e-12)
    assert sch.lr(99) == pytest.approx(1e-5, rel=1e-12)
    assert sch.lr(0) == pytest.approx(1e-4)
    assert all(sch.multiplier(e) > 0 for e in range(100))
    lrs = [sch.lr(e) for e in range(9, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_linear_schedule_endpoints():
    sch = LrSchedule("linear", 50, 2e-3, start_frac=1.0, end_frac=0.1)
    assert sch.lr(0) == pytest.approx(2e-3)
    assert sch.lr(49) == pytest.approx(2e-4)
    assert sch.multiplier(24) == pytest.approx(1.0 - 0.9 * 24 / 49)


def test_constant_schedule_and_bad_kind():
    assert LrSchedule("constant", 5, 0.3).lr(4) == 0.3
    with pytest.raises(ContractViolation):
        LrSchedule("step", 5)
    assert math.isfinite(LrSchedule("cosine", 1, 1.0, 10, 0.0).multiplier(0))
