"""Finite-difference gradient checker: exactness on analytic cases, report
contents, and failure modes."""

import numpy as np
import pytest

from mra.gradcheck import (REL_FLOOR, GradCheckReport, double_precision,
                           grad_check)
from mra.tensor import NumericError, Tensor, matmul, reduce_sum


def quad_params():
    return {"x": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}


def quad_loss(params):
    return reduce_sum(params["x"] * params["x"])


def test_quadratic_gradient_matches_2x():
    reports = grad_check(quad_loss, quad_params(), step=1e-5)
    (r,) = reports
    assert r.passed
    assert r.max_rel_err <= 1e-6  # quadratic: central difference is exact
    assert r.checked_elements == 3


def test_report_fields():
    (r,) = grad_check(quad_loss, quad_params(), step=1e-4, tol=1e-3)
    assert isinstance(r, GradCheckReport)
    assert r.name == "x"
    assert r.step == 1e-4
    assert r.max_abs_err >= 0.0 and r.max_rel_err >= 0.0


def test_detects_wrong_gradient():
    """A loss computed outside the graph (detached data) gets no analytic
    gradient, so the finite difference disagrees and the check fails."""

    def detached_loss(params):
        return reduce_sum(Tensor(params["x"].data ** 2))

    (r,) = grad_check(detached_loss, quad_params(), step=1e-4)
    assert not r.passed


def test_max_elements_subsampling():
    params = {"w": Tensor(np.random.default_rng(0).standard_normal(100),
                          requires_grad=True)}
    (r,) = grad_check(lambda p: reduce_sum(p["w"] * p["w"]), params,
                      max_elements=8)
    assert r.checked_elements == 8
    assert r.passed


def test_nonfinite_loss_names_parameter():
    params = {"scale": Tensor(np.array([0.0]), requires_grad=True)}

    def log_loss(p):
        with np.errstate(divide="ignore"):
            bad = np.log(np.maximum(p["scale"].data, 0))
        return reduce_sum(Tensor(bad) + p["scale"])

    with pytest.raises(NumericError):
        grad_check(log_loss, params, step=1e-2)


def test_step_validation():
    with pytest.raises(ValueError):
        grad_check(quad_loss, quad_params(), step=0.0)
    with pytest.raises(ValueError):
        grad_check(quad_loss, quad_params(), step=-1e-4)


def test_relative_error_floor_for_tiny_gradients():
    # gradient ~1e-8 everywhere: abs error tiny, ratio uses the floor
    params = {"x": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    (r,) = grad_check(lambda p: reduce_sum(p["x"] * 1e-8), params)
    assert r.passed
    assert r.max_abs_err <= REL_FLOOR


def test_double_precision_context_roundtrip():
    t = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    params = {"t": t}
    with double_precision(params):
        assert t.data.dtype == np.float64
        w = Tensor(np.full((2, 2), 2.0), requires_grad=True)
        loss_fn = lambda p: reduce_sum(matmul(p["t"], w))
        (r,) = grad_check(loss_fn, params)
        assert r.passed
    assert t.data.dtype == np.float32
