import numpy as np
import pytest

from colgeo import gradcheck
from colgeo import tensor as T
from colgeo.gradcheck import grad_check, param_grad_check
from colgeo.tensor import Tensor


def test_sum_has_no_error(rng):
    assert grad_check(lambda t: t.sum(), rng.normal(size=(3, 3))).max_error < 1e-12


def test_sum_of_squares(rng):
    assert grad_check(lambda t: (t * t).sum(), rng.normal(size=(4, 2))).max_error < 1e-8


def _bad_square(x):
    x = T.as_tensor(x)
    return T._make(x.data**2, (x,), lambda g: (g * 3.0 * x.data,))  # wrong: should be 2x


def test_corrupted_adjoint_is_caught(rng):
    assert grad_check(lambda t: _bad_square(t).sum(), rng.uniform(0.5, 2, 5)).max_error > 1e-2


def test_kink_crossing_is_skipped_not_compared():
    x = np.array([1e-4, 1.0])  # first entry sits within the stencil of relu's kink
    res = grad_check(lambda t: T.relu(t).sum(), x)
    assert res.skipped == 1 and res.checked == 1 and res.max_error < 1e-12


def test_required_smooth_coordinates():
    p = {"w": Tensor(np.array([1e-4, -1e-4]), requires_grad=True)}
    res = param_grad_check(lambda: T.absolute(p["w"]).sum(), p, [("w", 0), ("w", 1)], required=1)
    assert res.max_error == float("inf")


def test_unknown_method_rejected(rng):
    with pytest.raises(ValueError):
        grad_check(lambda t: t.sum(), rng.normal(size=2), method="forward")


def test_difference_method_switch():
    cube = lambda t: (t * t * t).sum()
    x = np.array([0.5, 1.0, 2.0])
    _, richardson, _ = gradcheck.numeric_grad(cube, x)
    np.testing.assert_allclose(richardson, 3 * x**2, rtol=1e-10)
    with gradcheck.difference_method("central"):
        _, central, _ = gradcheck.numeric_grad(cube, x)
    np.testing.assert_allclose(central, 3 * x**2 + 1e-6, rtol=1e-9)  # truncation term h^2 of x^3
    _, again, _ = gradcheck.numeric_grad(cube, x)
    np.testing.assert_array_equal(again, richardson)
    with pytest.raises(ValueError):
        with gradcheck.difference_method("forward"):
            pass


def test_registry_covers_ops_blocks_and_objective():
    names = [c.name for c in gradcheck.registered_checks()]
    for required in ("conv2d(s=1,p=1,d=1)", "resize:bilinear", "unary:sigmoid", "reduce:spatial-max",
                     "block:cbam-input", "block:lpg", "block:unc", "block:d2sn",
                     "objective:xtc->depth-head", "objective:full-model"):
        assert required in names
    assert len(set(names)) == len(names)


@pytest.mark.parametrize("check", [c for c in gradcheck.registered_checks() if not c.name.startswith("objective")],
                         ids=lambda c: c.name)
def test_registered_check_passes(check):
    res = check.run(np.random.default_rng([3, sum(map(ord, check.name))]))
    assert res.checked > 0
    assert res.max_error < 1e-4
