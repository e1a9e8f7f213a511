import numpy as np
import pytest

from dscnet.autodiff import backward, grad_check, record_choices
from dscnet.dataio import Prng
from dscnet.errors import DisconnectedTape, NonDeterministicFn, NotScalarLoss
from dscnet.ops import sigmoid
from dscnet.tensor import Tensor, matmul, no_grad

from oracles import central_diff


def test_sum_gradient_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(3))


def test_quadratic_gradient():
    x = Tensor([1.0, -2.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, -4.0])


def test_matmul_gradient_vs_finite_differences():
    rng = Prng(5)
    a = Tensor(rng.normal_array(9).reshape(3, 3), requires_grad=True)
    b = Tensor(rng.normal_array(9).reshape(3, 3), requires_grad=True)
    matmul(a, b).sum().backward()

    for leaf in (a, b):
        def f():
            with no_grad():
                return float(matmul(a, b).sum().data)

        num = central_diff(f, leaf.data)
        rel = np.abs(leaf.grad - num) / np.maximum(1e-8, np.maximum(np.abs(leaf.grad), np.abs(num)))
        assert rel.max() < 1e-6


def test_not_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NotScalarLoss):
        (x * 2.0).backward()


def test_backward_zero_for_unreached_leaf():
    x = Tensor([1.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    grads = backward(x.sum(), {"x": x, "unused": unused})
    assert np.array_equal(grads["x"], [1.0])
    assert np.array_equal(grads["unused"], [0.0])


def test_strict_mode_disconnected():
    x = Tensor([1.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    with pytest.raises(DisconnectedTape):
        backward(x.sum(), {"x": x, "unused": unused}, strict=True)


def test_tape_linearity():
    # Gradient of a sum of two subgraphs equals the sum of their gradients.
    rng = Prng(9)
    base = rng.normal_array(4)
    x = Tensor(base.copy(), requires_grad=True)
    ((x * x).sum() + (x * 3.0).sum()).backward()
    combined = x.grad.copy()

    x1 = Tensor(base.copy(), requires_grad=True)
    (x1 * x1).sum().backward()
    x2 = Tensor(base.copy(), requires_grad=True)
    (x2 * 3.0).sum().backward()
    assert np.allclose(combined, x1.grad + x2.grad, atol=1e-15)


def test_fanout_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * 3.0
    (y + y).sum().backward()
    assert np.array_equal(x.grad, [6.0])


def test_forward_purity():
    rng = Prng(13)
    x = Tensor(rng.normal_array(6).reshape(2, 3), requires_grad=True)

    def run():
        return float(((x * x).sum() * 0.5).data)

    assert run() == run()  # bitwise identical


def test_grad_check_identity_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    report = grad_check(lambda: x.sum(), {"x": x})
    assert report.passed and report.max_rel_err < 1e-9


def test_grad_check_sigmoid_at_zero():
    x = Tensor(np.zeros(1), requires_grad=True)
    report = grad_check(lambda: sigmoid(x).sum(), {"x": x}, eps=1e-6)
    assert report.max_rel_err < 1e-8
    # analytic derivative at 0 is exactly 1/4
    x.grad = None
    sigmoid(x).sum().backward()
    assert abs(x.grad[0] - 0.25) < 1e-15


def test_grad_check_rejects_nondeterministic():
    state = {"n": 0}
    x = Tensor([1.0], requires_grad=True)

    def fn():
        state["n"] += 1
        return (x * float(state["n"])).sum()

    with pytest.raises(NonDeterministicFn):
        grad_check(fn, {"x": x})


def test_grad_check_report_shape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    report = grad_check(lambda: (x * x).sum(), {"x": x}, eps=1e-6, tol=1e-4)
    d = report.to_dict()
    assert d["passed"] is True
    assert d["params"][0]["name"] == "x"
    assert d["params"][0]["size"] == 2
    assert report.passed == (report.max_rel_err < report.tol)


def test_choice_recorder_scopes():
    with record_choices() as outer:
        from dscnet.autodiff import note_choice

        note_choice(1)
        with record_choices() as inner:
            note_choice(2)
        note_choice(3)
    assert outer.values == [1, 3]
    assert inner.values == [2]
