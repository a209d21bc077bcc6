import numpy as np
import pytest

import autodiff as ad
from gradcheck import (
    SUITES,
    QuadraticProblem,
    format_report,
    inject_sign_fault,
    op_cases,
    relative_error,
    run_gradcheck,
)


@pytest.mark.parametrize("suite", sorted(SUITES))
def test_suite_passes(suite):
    (result,) = run_gradcheck([suite])

    assert result.suite == suite
    assert result.passed, f"{suite} failed on {result.worst_case}: {result.max_rel_error:.3e}"


def test_every_primitive_op_has_a_case():
    names = {c.name for c in op_cases(np.random.default_rng(0))}
    assert set(ad.VJP_RULES) <= names


def test_sign_fault_is_detected_and_named():
    (result,) = run_gradcheck(["ops"], sign_fault="sin")

    assert not result.passed
    assert result.worst_case == "sin"
    assert result.max_rel_error == pytest.approx(2.0, rel=1e-6)


def test_sign_fault_is_removed_afterwards():
    original = ad.VJP_RULES["tanh"]

    with inject_sign_fault("tanh"):
        assert ad.VJP_RULES["tanh"] is not original

    assert ad.VJP_RULES["tanh"] is original
    (result,) = run_gradcheck(["ops"])
    assert result.passed


def test_sign_fault_is_removed_after_an_exception():
    original = ad.VJP_RULES["sin"]

    with pytest.raises(RuntimeError):
        with inject_sign_fault("sin"):
            raise RuntimeError("interrupted")

    assert ad.VJP_RULES["sin"] is original


def test_unknown_suite_is_rejected():
    with pytest.raises(ValueError, match="nope"):
        run_gradcheck(["nope"])


def test_unknown_fault_op_is_rejected():
    with pytest.raises(ValueError, match="nope"):
        run_gradcheck(["ops"], sign_fault="nope")


def test_quadratic_closed_form_splits_into_first_order_and_hessian_terms():
    expected = QuadraticProblem.default().closed_form()
    np.testing.assert_allclose(expected["theta"], expected["theta_first_order"] + expected["hessian_term"], rtol=0, atol=1e-15)


def test_first_order_meta_gradient_drops_the_hessian_term():
    problem = QuadraticProblem.default()
    expected = problem.closed_form()

    fo_theta, fo_alpha = problem.meta_gradient(first_order=True)

    assert relative_error([fo_theta], [expected["theta_first_order"]]) <= 1e-9
    # The alpha gradient has no Hessian term either way.
    assert relative_error([fo_alpha], [expected["alpha"]]) <= 1e-9


def test_relative_error_of_zero_vectors_is_zero():
    assert relative_error([np.zeros(3)], [np.zeros(3)]) == 0.0


def test_report_lists_every_suite():
    results = run_gradcheck(["hessian", "quadratic_meta_gradient"])

    report = format_report(results)

    assert "hessian" in report
    assert "quadratic_meta_gradient" in report
    assert "max_rel_error" in report
