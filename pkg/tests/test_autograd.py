import numpy as np
import pytest

from mgic.autograd import (
    Parameter,
    Tape,
    Tensor,
    backward,
    finite_difference_check,
    matmul,
    no_grad,
    relu,
)
from mgic.errors import ContractError, DimensionError, NumericalError


def test_matmul_identity():
    b = np.arange(6.0).reshape(3, 2)
    out = matmul(Tensor(np.eye(3)), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_hand_computed():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    b = Tensor(rng.standard_normal((4, 3)))
    err = finite_difference_check(lambda a: (a @ b).sum(), rng.standard_normal((2, 4)))
    assert err < 1e-6


def test_sum_of_squares_gradient_is_2x():
    x = Parameter(np.array([1.0, -2.0, 3.0]))
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_disconnected_parameter_gets_zero_gradient():
    x, p = Parameter(np.ones(3)), Parameter(np.ones(2))
    loss = (x * x).sum()
    backward(loss)
    assert p.grad is None or not p.grad.any()


def test_relu_matmul_chain_matches_finite_differences():
    rng = np.random.default_rng(1)
    w1, w2 = Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal((5, 2)))
    x = rng.standard_normal((4, 3))
    # keep relu arguments away from the kink
    pre = x @ w1.data
    x[np.abs(pre).min(axis=1) < 1e-2] += 0.5
    err = finite_difference_check(lambda t: (relu(t @ w1) @ w2).sum(), x)
    assert err < 1e-4


def test_gradients_accumulate_until_zeroed():
    x = Parameter(np.array([1.0, 2.0]))
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)
    x.zero_grad()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_non_scalar_loss_is_a_contract_error():
    x = Parameter(np.ones(3))
    with pytest.raises(ContractError):
        backward(x * x)


def test_relu_subgradient_at_zero_is_zero():
    x = Parameter(np.array([-1.0, 0.0, 2.0]))
    relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_finite_difference_check_quadratic():
    x = np.random.default_rng(2).standard_normal(10)
    assert finite_difference_check(lambda t: (t * t).sum(), x, eps=1e-5) < 1e-7


def test_finite_difference_check_linear():
    x = np.random.default_rng(3).standard_normal(7)
    for eps in (1e-3, 1e-6):
        assert finite_difference_check(lambda t: t.sum(), x, eps=eps) < 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_difference_check_reports_bad_coordinate():
    from mgic.autograd import log

    x = np.array([1.0, 2.0, 1e-9])
    with pytest.raises(NumericalError) as info:
        finite_difference_check(lambda t: log(t).sum(), x, eps=1e-6)
    assert info.value.index == 2


def test_finite_difference_check_rejects_bad_eps():
    with pytest.raises(ContractError):
        finite_difference_check(lambda t: t.sum(), np.ones(2), eps=0)


def test_tape_is_topological_and_replays_exactly():
    rng = np.random.default_rng(4)
    a, b = Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal((3, 3)))
    with Tape() as tape:
        out = relu(a @ b + a).sum()
    seen = {id(a), id(b)}
    for node, result in tape:
        assert all(id(t) in seen or t.node is None for t in node.inputs)
        seen.add(id(result))
    replayed = tape.replay()
    for original, again in zip(tape.outputs, replayed):
        np.testing.assert_array_equal(original.data, again)
    assert float(out.data) == float(replayed[-1])


def test_backward_along_tape_matches_graph_walk():
    rng = np.random.default_rng(5)
    w = Parameter(rng.standard_normal((3, 2)))
    x = Tensor(rng.standard_normal((4, 3)))
    with Tape() as tape:
        loss = (relu(x @ w) * relu(x @ w)).sum()
    backward(loss, tape=tape)
    via_tape = w.grad.copy()
    w.zero_grad()
    backward((relu(x @ w) * relu(x @ w)).sum())
    np.testing.assert_allclose(via_tape, w.grad)


def test_no_grad_records_nothing():
    x = Parameter(np.ones(2))
    with no_grad():
        y = x * x
    assert y.node is None and not y.requires_grad


def test_forward_is_deterministic():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    first = (relu(Tensor(a) @ Tensor(b))).data
    second = (relu(Tensor(a) @ Tensor(b))).data
    np.testing.assert_array_equal(first, second)


def test_integer_input_is_promoted_to_float():
    assert Tensor([1, 2, 3]).dtype == np.float64
