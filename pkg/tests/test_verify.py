import numpy as np
import pytest

from mde.diff import grad_check, ops
from mde.diff.tensor import emit
from mde.verify import PRIMITIVES, build_case, case_names, run_suite


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_case_passes(name):
    (result,) = run_suite([name], max_entries=40)
    assert result.passed, result.report.errors


def test_case_list_covers_primitives_losses_and_total():
    names = case_names()
    assert names[-1] == "loss_total"
    assert {"conv2d_transpose", "batchnorm2d", "loss_perceptual", "loss_hns_gen_l1"} <= set(names)
    with pytest.raises(KeyError):
        build_case("nonexistent")


def wrong_sign_square(x):
    return emit("square", x.data ** 2, (x,), lambda g: (-2 * x.data * g,))


def test_injected_wrong_sign_is_named():
    def tamper(name, case):
        fn, params = case
        x = params["x"]
        return (lambda: wrong_sign_square(x).sum()), params

    (result,) = run_suite(["square"], tamper=tamper)
    assert not result.passed
    assert result.report.failures() == ["x"]


def test_kink_straddling_step_is_shrunk():
    # |x| at x = 5e-5: a 1e-4 stencil crosses the kink, a shrunken one does not
    from mde.diff import Tensor

    x = Tensor(np.array([5e-5, -0.3]), requires_grad=True, name="x")
    report = grad_check(lambda: ops.abs(x).sum(), {"x": x}, step=1e-4)
    assert report.passed
    assert report.shrunk["x"] == 1
    no_shrink = grad_check(lambda: ops.abs(x).sum(), {"x": x}, step=1e-4, max_shrink=0)
    assert not no_shrink.passed


@pytest.mark.slow
def test_full_objective_gradient():
    (result,) = run_suite(["loss_total"], max_entries=8)
    assert result.passed, sorted(result.report.errors.items(), key=lambda kv: -kv[1])[:5]
