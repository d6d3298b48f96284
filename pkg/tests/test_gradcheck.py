import pytest
import numpy as np

from visaware import tensor as T
from visaware.gradcheck import grad_check, numeric_gradient, relative_error
from visaware.gradsuite import TOLERANCE, model_cases, op_cases
from visaware.tensor import Tensor, make_op


def test_matmul_3x4_4x2():
    report = grad_check(T.matmul, [(3, 4), (4, 2)], tolerance=1e-6)
    assert report.passed, report.line()
    assert report.n_points == 10


def test_softmax_row_of_seven():
    report = grad_check(lambda x: T.softmax(x, axis=-1), [(1, 7)], tolerance=1e-6)
    assert report.passed, report.line()


def test_wrong_backward_rule_is_reported_not_raised():
    def bad_square(x):
        return make_op(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")  # missing factor 2

    report = grad_check(bad_square, [(3,)])
    assert not report.passed
    assert report.max_rel_error > 0.3


def test_exceptions_become_failed_reports():
    def broken(x):
        raise RuntimeError("boom")

    report = grad_check(broken, [(2,)])
    assert not report.passed and "boom" in report.name


def test_numeric_gradient_of_cubic():
    g = numeric_gradient(lambda arrs: float((arrs[0] ** 3).sum()), [np.array([1.0, -2.0])], 0)
    np.testing.assert_allclose(g, [3.0, 12.0], rtol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.array([1e-9]), np.array([0.0])) < 1e-3
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1, rel=1e-12)


def test_kink_points_are_redrawn():
    # without redraws the point x=0 would straddle the relu kink
    calls = []

    def sampler(rng):
        calls.append(1)
        return [np.zeros(3)] if len(calls) == 1 else [rng.uniform(0.5, 1.0, 3)]

    report = grad_check(T.relu, [], sampler=sampler, n_points=2)
    assert report.passed and len(calls) >= 3


def test_every_op_passes():
    for case in op_cases():
        report = grad_check(case.fn, case.shapes or [], tolerance=TOLERANCE, sampler=case.sampler,
                            name=case.name)
        assert report.passed, report.line()


def test_full_stack_cases_present():
    names = {c.name for c in model_cases()}
    assert {"transformer_encode", "attend_fuse", "residual_norm_fuse", "encoder+attend+fuse+tag_head",
            "pair_head", "decoder", "sru_text_path+image_path+triplet"} <= names
