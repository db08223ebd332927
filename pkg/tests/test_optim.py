import numpy as np
import pytest

from cptlab.autodiff import Tensor
from cptlab.optim import SGD, sgd_step


def test_plain_step():
    p = np.array([1.0])
    sgd_step([p], [np.array([1.0])], lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p[0] == pytest.approx(0.9)


def test_momentum_two_steps():
    p = np.array([1.0])
    v = [np.zeros(1)]
    sgd_step([p], [np.array([1.0])], 0.1, 0.9, 0.0, v)
    assert p[0] == pytest.approx(0.9)
    sgd_step([p], [np.array([1.0])], 0.1, 0.9, 0.0, v)
    # v = 0.9 * 1 + 1 = 1.9 -> 0.9 - 0.19
    assert p[0] == pytest.approx(0.71)


def test_zero_grad_is_fixed_point():
    p = np.array([0.3, -2.0])
    sgd_step([p], [np.zeros(2)], 0.5, 0.9, 0.0)
    np.testing.assert_array_equal(p, [0.3, -2.0])


def test_weight_decay_enters_velocity():
    p = np.array([2.0])
    sgd_step([p], [np.zeros(1)], 0.1, 0.0, 0.5)
    assert p[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(lr=-1.0), dict(momentum=1.0), dict(momentum=-0.1)])
def test_invalid_hyperparameters(kw):
    args = dict(lr=0.1, momentum=0.0, weight_decay=0.0)
    args.update(kw)
    with pytest.raises(ValueError):
        sgd_step([np.ones(1)], [np.ones(1)], **args)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step([np.ones(2)], [np.ones(3)], 0.1, 0.0, 0.0)


def test_sgd_class_keeps_velocity():
    t = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([t], momentum=0.9, weight_decay=0.0)
    opt.step(0.1, [np.array([1.0])])
    opt.step(0.1, [np.array([1.0])])
    assert t.data[0] == pytest.approx(0.71)
