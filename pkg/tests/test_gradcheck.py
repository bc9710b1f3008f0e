"""Finite-difference verifier: the registry passes and broken rules fail."""

import time

import numpy as np
import pytest

from mtsn import tensor as tt
from mtsn.errors import ContractError
from mtsn.gradcheck import (H_STEP, TOLERANCE, check_gradients, numeric_gradient,
                            relative_error, run_standard_checks, standard_checks)
from mtsn.tensor import Tensor


EXPECTED_CHECKS = {
    "add", "sub", "mul", "scalar_broadcast", "sigmoid", "tanh", "exp", "log",
    "matmul", "matmul_vector", "affine_vector", "affine_sequence", "softmax",
    "sum", "mean_over_time", "max_over_time", "pick", "gru_step",
    "gru_sequence", "cross_entropy", "distillation_kl", "total_loss",
    "mtsn_model", "baseline2_model",
}


def test_registry_covers_every_op_and_both_models():
    assert set(standard_checks()) == EXPECTED_CHECKS


def test_full_registry_passes_within_a_minute():
    start = time.monotonic()
    results = run_standard_checks(seed=0)
    elapsed = time.monotonic() - start
    failures = [r.name for r in results if not r.passed]
    assert failures == []
    assert all(r.max_error < TOLERANCE for r in results)
    assert elapsed < 60.0


def test_numeric_gradient_matches_quadratic_by_hand():
    theta = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    numeric = numeric_gradient(lambda: tt.tensor_sum(tt.mul(theta, theta)), theta)
    # central differences are exact for quadratics up to float rounding
    assert np.allclose(numeric, 2.0 * theta.data, atol=1e-9)
    assert theta.data[0] == 0.3  # probe restored the storage


def test_relative_error_measure():
    analytic = np.array([2.0, 0.5, 0.0])
    numeric = np.array([2.2, 0.4, 0.001])
    # denominator is max(1, |analytic|) elementwise
    expected = np.array([0.2 / 2.0, 0.1 / 1.0, 0.001 / 1.0])
    assert np.allclose(relative_error(analytic, numeric), expected, atol=1e-12)


def test_check_gradients_accepts_correct_rule():
    x = Tensor(np.array([0.4, -0.9]), requires_grad=True)
    res = check_gradients("tanh_by_hand",
                          lambda: tt.tensor_sum(tt.tanh(x)), {"x": x})
    assert res.passed
    assert res.max_error < TOLERANCE


def test_check_gradients_flags_broken_backward():
    x = Tensor(np.array([0.7, -0.3, 1.1]), requires_grad=True)

    def doubled_square():
        # backward claims d(x^2)/dx = 3x instead of 2x
        return tt.tensor_sum(custom_square(x, scale=1.5))

    def custom_square(t, scale):
        return tt.custom_op("bad_square", [t], t.data * t.data,
                            lambda g: (g * 2.0 * scale * t.data,))

    res = check_gradients("bad_square", doubled_square, {"x": x})
    assert not res.passed
    assert res.worst_param == "x"
    # the injected rule is off by 50 percent, far beyond the tolerance
    assert res.max_error > 0.1


def test_failure_reports_the_op_by_name():
    x = Tensor(np.array([0.7, -0.3]), requires_grad=True)

    def wrong():
        return tt.custom_op("off_by_sign", [x], np.sum(x.data) * np.ones(()),
                            lambda g: (-g * np.ones_like(x.data),))

    res = check_gradients("off_by_sign", wrong, {"x": x})
    assert not res.passed
    assert "off_by_sign" in res.line()
    assert "FAIL" in res.line()


def test_pass_line_format():
    x = Tensor(np.array([0.2]), requires_grad=True)
    res = check_gradients("tiny", lambda: tt.tensor_sum(tt.sigmoid(x)), {"x": x})
    assert res.line().startswith("PASS")
    assert "tiny" in res.line()


def test_constant_parameter_rejected():
    x = Tensor(np.array([1.0]))
    with pytest.raises(ContractError, match="constant"):
        check_gradients("const", lambda: tt.tensor_sum(x), {"x": x})


def test_unknown_check_name_rejected():
    with pytest.raises(ContractError, match="unknown gradient check"):
        run_standard_checks(names=["no_such_op"])


def test_tolerance_is_honored():
    # an impossible tolerance turns a correct rule into a reported failure
    results = run_standard_checks(names=["sigmoid"], points=1, tol=0.0)
    assert len(results) == 1
    assert not results[0].passed


def test_points_and_seed_are_deterministic():
    a = run_standard_checks(names=["matmul", "softmax"], seed=7, points=3)
    b = run_standard_checks(names=["matmul", "softmax"], seed=7, points=3)
    assert [(r.name, r.max_error, r.worst_param) for r in a] == \
        [(r.name, r.max_error, r.worst_param) for r in b]


def test_default_step_and_points():
    assert H_STEP == 1e-5
    assert TOLERANCE == 1e-4
    from mtsn.gradcheck import POINTS_PER_CHECK
    assert POINTS_PER_CHECK == 10
