import math

import numpy as np
import pytest

from drift_forge.optim import AdamState, RejectedStepError, adam_step, lr_schedule


def scratch_adam(p, g_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_first_step_matches_scratch():
    st = AdamState.zeros(1)
    out = adam_step(np.array([0.0]), np.array([1.0]), st, 0.1)
    assert out[0] == pytest.approx(scratch_adam(0.0, [1.0], 0.1), abs=1e-15)
    assert out[0] == pytest.approx(-0.1, rel=1e-7)
    assert st.step == 1


def test_many_steps_match_scratch():
    rng = np.random.default_rng(0)
    gs = rng.normal(size=25)
    st = AdamState.zeros(1)
    p = np.array([0.3])
    for g in gs:
        p = adam_step(p, np.array([g]), st, 0.01)
    assert p[0] == pytest.approx(scratch_adam(0.3, gs, 0.01), abs=1e-14)


def test_zero_gradient_and_zero_lr_keep_params():
    p = np.array([1.0, -2.0])
    np.testing.assert_array_equal(adam_step(p, np.zeros(2), AdamState.zeros(2), 0.1), p)
    np.testing.assert_array_equal(adam_step(p, np.ones(2), AdamState.zeros(2), 0.0), p)


def test_symmetric_params_update_identically():
    out = adam_step(np.array([0.5, 0.5]), np.array([0.2, 0.2]), AdamState.zeros(2), 1e-3)
    assert out[0] == out[1]


def test_non_finite_gradient_rejected_without_side_effects():
    st = AdamState.zeros(2)
    with pytest.raises(RejectedStepError):
        adam_step(np.zeros(2), np.array([np.nan, 1.0]), st, 0.1)
    assert st.step == 0 and not st.m.any()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2), 0.1)


def test_schedules():
    assert lr_schedule("train", 0) == 2e-4
    assert lr_schedule("train", 29) == 2e-4
    assert lr_schedule("train", 30) == 1e-4
    assert lr_schedule("train", 65) == 5e-5
    assert all(lr_schedule("online", e) == 2e-6 for e in (0, 1, 59, 1000))
    with pytest.raises(ValueError):
        lr_schedule("train", -1)
    with pytest.raises(ValueError):
        lr_schedule("warmup", 0)
