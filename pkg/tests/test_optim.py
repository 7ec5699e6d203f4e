import math

import numpy as np
import pytest

from svrecon.nn import param
from svrecon.optim import Adam, StepLR


def test_zero_grads_leave_params_and_decay_moments():
    p = param(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0, 1.0])
    opt.step()
    before = p.data.copy()
    m_before = opt.m[0].copy()
    p.grad = np.zeros(2)
    opt.step()
    # m decays; the update from a decayed non-zero m is still applied
    np.testing.assert_allclose(opt.m[0], 0.9 * m_before)
    fresh = param(np.array([3.0]))
    opt2 = Adam([fresh], lr=0.1)
    fresh.grad = np.zeros(1)
    opt2.step()
    assert fresh.data[0] == 3.0
    assert not np.array_equal(before, p.data)


def test_first_step_magnitude_is_lr():
    p = param(np.array(0.0))
    opt = Adam([p], lr=6e-5)
    p.grad = np.array(1.0)
    opt.step()
    assert abs(p.data + 6e-5) < 1e-12


def test_nonfinite_grad_skips_step():
    p = param(np.array([1.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([np.nan])
    assert opt.step() is False
    assert opt.skipped == 1 and opt.step_count == 0
    assert p.data[0] == 1.0


def test_adam_matches_reference_formula(rng):
    p = param(rng.normal(size=4))
    x0 = p.data.copy()
    opt = Adam([p], lr=0.01)
    m = v = np.zeros(4)
    x = x0.copy()
    for k in range(1, 6):
        g = rng.normal(size=4)
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    np.testing.assert_allclose(p.data, x, atol=1e-15)


@pytest.mark.parametrize("epochs", [10, 40, 200])
def test_step_lr_schedule(epochs):
    s = StepLR.from_fraction(6e-5, epochs)
    k = math.ceil(0.55 * epochs)
    assert s.lr(k - 1) == 6e-5
    assert s.lr(k) == pytest.approx(1e-5)
    assert s.lr(epochs - 1) == pytest.approx(1e-5)


def test_default_schedule():
    s = StepLR()
    assert s.lr(109) == 6e-5 and s.lr(110) == pytest.approx(1e-5)
