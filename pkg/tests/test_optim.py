import math

import numpy as np
import pytest

from fuseseg.errors import ScheduleError, TrainingError
from fuseseg.optim import SGDMomentum, poly_lr
from fuseseg.tensor import Parameter


class TestPolyLr:
    def test_start_is_base(self):
        assert poly_lr(0.001, 0, 180000, 0.9) == 0.001

    def test_end_is_zero(self):
        assert poly_lr(0.001, 180000, 180000, 0.9) == 0.0

    def test_midpoint_closed_form(self):
        # independent evaluation: 0.001 * exp(0.9 * ln 0.5)
        expect = 0.001 * math.exp(0.9 * math.log(0.5))
        assert poly_lr(0.001, 90000, 180000, 0.9) == pytest.approx(expect, abs=1e-12)
        assert expect == pytest.approx(5.3588673e-4, abs=1e-9)

    def test_strictly_decreasing(self):
        values = [poly_lr(0.01, it, 100, 0.9) for it in range(101)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ScheduleError):
            poly_lr(0.001, 101, 100, 0.9)
        with pytest.raises(ScheduleError):
            poly_lr(0.001, -1, 100, 0.9)


def make_param(value, shape=(3,)):
    return Parameter("p", np.full(shape, value, np.float64), "conv_weight")


class TestSgdMomentum:
    def test_plain_sgd_step(self):
        p = make_param(1.0)
        opt = SGDMomentum([p], momentum=0.0, weight_decay=0.0)
        p.grad = np.full(3, 0.5)
        opt.step(0.1)
        assert np.allclose(p.data, 1.0 - 0.1 * 0.5)

    def test_two_step_momentum_unroll(self):
        # constant gradient g, no decay: total change is -lr*g*(2 + momentum)
        g, lr, mu = 0.3, 0.01, 0.9
        p = make_param(2.0)
        opt = SGDMomentum([p], momentum=mu, weight_decay=0.0)
        for _ in range(2):
            p.grad = np.full(3, g)
            opt.step(lr)
        assert np.allclose(p.data, 2.0 - lr * g * (2.0 + mu), atol=1e-12)

    def test_weight_decay_only(self):
        lr, wd = 0.1, 0.05
        p = make_param(4.0)
        opt = SGDMomentum([p], momentum=0.0, weight_decay=wd)
        p.grad = np.zeros(3)
        opt.step(lr)
        assert np.allclose(p.data, 4.0 * (1.0 - lr * wd), atol=1e-12)

    def test_velocity_persists(self):
        p = make_param(0.0)
        opt = SGDMomentum([p], momentum=0.5, weight_decay=0.0)
        p.grad = np.ones(3)
        opt.step(1.0)
        p.grad = np.zeros(3)
        opt.step(1.0)  # coasting on velocity alone
        assert np.allclose(p.data, -1.5)

    def test_missing_gradient_names_parameter(self):
        p = make_param(1.0)
        p.grad = None
        opt = SGDMomentum([p], 0.9, 0.0)
        with pytest.raises(TrainingError, match="p"):
            opt.step(0.1)

    def test_duplicate_names_rejected(self):
        with pytest.raises(TrainingError):
            SGDMomentum([make_param(1.0), make_param(2.0)], 0.9, 0.0)

    def test_state_entries_named_per_parameter(self):
        p = Parameter("enc.conv.weight", np.zeros((2, 2), np.float32), "conv_weight")
        opt = SGDMomentum([p], 0.9, 0.0)
        entries = dict(opt.state_entries())
        assert set(entries) == {"opt.velocity.enc.conv.weight"}
        assert entries["opt.velocity.enc.conv.weight"].shape == (2, 2)
