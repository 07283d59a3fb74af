import numpy as np
import pytest
from hypothesis import given, strategies as st

from sslsv.exceptions import ShapeError
from sslsv.optim import AdamState, EarlyStop, LrSchedule, adam_step, lr_at_epoch


def test_lr_examples():
    s = LrSchedule()
    assert lr_at_epoch(s, 0) == 0.001
    assert lr_at_epoch(s, 9) == 0.001
    assert lr_at_epoch(s, 10) == pytest.approx(0.00095, rel=1e-12)
    assert lr_at_epoch(s, 25) == pytest.approx(0.0009025, rel=1e-12)
    assert s(25) == lr_at_epoch(s, 25)


@given(st.integers(0, 5000))
def test_lr_non_increasing(epoch):
    s = LrSchedule()
    assert s(epoch + 1) <= s(epoch)


def test_invalid_schedule():
    with pytest.raises(ValueError):
        LrSchedule(initial=0)
    with pytest.raises(ValueError):
        LrSchedule(decay_factor=1.5)


@given(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
def test_adam_first_step_is_sign(g):
    p = np.array([0.5])
    state = AdamState.zeros_like([p])
    adam_step([p], [np.array([g])], state, 0.01)
    assert abs((p[0] - 0.5) + 0.01 * np.sign(g)) < 0.01 * 1e-4
    assert state.t == 1


def test_zero_gradient_is_fixed_point():
    p = np.arange(4.0)
    state = AdamState.zeros_like([p])
    for _ in range(10):
        adam_step([p], [np.zeros(4)], state, 0.1)
    np.testing.assert_array_equal(p, np.arange(4.0))


def test_quadratic_convergence():
    for seed in range(5):
        x = np.random.default_rng(seed).normal(size=10)
        state = AdamState.zeros_like([x])
        for _ in range(2000):
            adam_step([x], [2 * x], state, 0.01)
        assert np.linalg.norm(x) < 1e-3


def test_deterministic():
    def run():
        x = np.random.default_rng(0).normal(size=5)
        state = AdamState.zeros_like([x])
        for i in range(50):
            adam_step([x], [np.sin(x * i)], state, 0.01)
        return x

    np.testing.assert_array_equal(run(), run())


def test_adam_errors():
    p = np.zeros(3)
    state = AdamState.zeros_like([p])
    with pytest.raises(FloatingPointError):
        adam_step([p], [np.array([1.0, np.nan, 0.0])], state, 0.1)
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(4)], state, 0.1)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(3)], state, 0.0)
    assert state.t == 0


def test_early_stop_improving():
    es = EarlyStop()
    assert all(es.update(e) for e in (10, 9, 8))
    assert es.epochs_since_best == 0 and es.best_metric == 8


def test_early_stop_patience_and_ties():
    es = EarlyStop(patience=50)
    es.update(8.0)
    for i in range(50):
        assert es.update(8.0 + (i % 2))
    assert es.epochs_since_best == 50
    assert not es.update(8.0)
