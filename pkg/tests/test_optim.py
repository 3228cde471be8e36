import math

import numpy as np
import pytest

from latentstain.autodiff import InvalidArgumentError, Tensor
from latentstain.optim import AdamW, MissingGradError, Parameter, cosine_lr

from oracles import adamw_scalar_trace


def _param(value, name="p"):
    return Parameter(name, Tensor(np.array(value, dtype=np.float32), requires_grad=True))


def test_zero_gradient_no_decay_leaves_params():
    p = _param([1.0, -2.0])
    opt = AdamW([p], base_lr=0.1, weight_decay=0.0)
    p.tensor.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.tensor.data, [1.0, -2.0])


def test_first_step_matches_scalar_trace():
    p = _param([1.0])
    opt = AdamW([p], base_lr=0.1, weight_decay=0.0)
    p.tensor.grad = np.ones(1, dtype=np.float32)
    opt.step()
    expected = adamw_scalar_trace(1.0, [1.0], lr=0.1)[-1]
    np.testing.assert_allclose(p.tensor.data, [expected], rtol=1e-6)


def test_multi_step_matches_scalar_trace():
    grads = [0.5, -1.25, 2.0, 0.0, 0.75]
    p = _param([0.3])
    opt = AdamW([p], base_lr=0.05, weight_decay=0.01)
    for g in grads:
        p.tensor.grad = np.array([g], dtype=np.float32)
        opt.step()
    expected = adamw_scalar_trace(0.3, grads, lr=0.05, weight_decay=0.01)[-1]
    np.testing.assert_allclose(p.tensor.data, [expected], rtol=1e-5)


def test_decoupled_decay_with_zero_gradient():
    theta, lr, wd = 2.0, 0.1, 1e-4
    p = _param([theta])
    opt = AdamW([p], base_lr=lr, weight_decay=wd)
    p.tensor.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(p.tensor.data, [theta - lr * wd * theta], rtol=1e-6)


def test_lr_zero_leaves_params_for_any_gradient(rng):
    p = Parameter("w", Tensor(rng.standard_normal(8).astype(np.float32),
                              requires_grad=True))
    before = p.tensor.data.copy()
    opt = AdamW([p], base_lr=1.0)
    p.tensor.grad = rng.standard_normal(8).astype(np.float32)
    opt.step(lr=0.0)
    np.testing.assert_array_equal(p.tensor.data, before)


def test_missing_gradient_raises():
    opt = AdamW([_param([1.0])], base_lr=0.1)
    with pytest.raises(MissingGradError):
        opt.step()


def test_step_count_increments_once_per_apply():
    p = _param([1.0])
    opt = AdamW([p], base_lr=0.1)
    for expected in (1, 2, 3):
        p.tensor.grad = np.ones(1, dtype=np.float32)
        opt.step()
        assert opt.step_count == expected


def test_moment_buffers_match_parameter_shapes(rng):
    params = [Parameter("a", Tensor(rng.standard_normal((3, 4)).astype(np.float32),
                                    requires_grad=True)),
              Parameter("b", Tensor(rng.standard_normal(5).astype(np.float32),
                                    requires_grad=True))]
    opt = AdamW(params, base_lr=0.1)
    for p in params:
        assert opt._m[p.name].shape == p.tensor.shape
        assert opt._v[p.name].shape == p.tensor.shape


def test_invalid_hyperparameters_rejected():
    with pytest.raises(InvalidArgumentError):
        AdamW([_param([1.0])], base_lr=-1.0)
    with pytest.raises(InvalidArgumentError):
        AdamW([_param([1.0])], betas=(0.9, 1.0))
    with pytest.raises(InvalidArgumentError):
        AdamW([_param([1.0])], weight_decay=-0.1)
    with pytest.raises(InvalidArgumentError):
        AdamW([_param([1.0], "x"), _param([2.0], "x")])


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 50, 1e-4) == pytest.approx(1e-4)
    assert cosine_lr(50, 50, 1e-4) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(25, 50, 1e-4) == pytest.approx(5e-5)


def test_cosine_lr_monotone_nonincreasing():
    values = [cosine_lr(e, 50, 1e-4) for e in range(51)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_lr_validation():
    with pytest.raises(InvalidArgumentError):
        cosine_lr(0, 0, 1e-4)
    with pytest.raises(InvalidArgumentError):
        cosine_lr(-1, 50, 1e-4)
    with pytest.raises(InvalidArgumentError):
        cosine_lr(51, 50, 1e-4)
