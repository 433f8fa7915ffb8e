import numpy as np
import pytest

from sgquant.tensor import (NonFiniteError, ShapeError, Tape, Tensor, add, finiteDifferenceGradient,
                            matmul, mul, reduceMean, reduceSum, reshape, scale, sub)

from conftest import assertGradientsMatch


def test_tensor_is_read_only_float32():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert t.shape == (3,)
    with pytest.raises(ValueError):
        t.data[0] = 5
    copy = t.numpy()
    copy[0] = 5
    assert t.data[0] == 1


def test_tensor_keeps_float64_arrays():
    assert Tensor(np.array([1.0, 2.0])).dtype == np.float64


def test_evaluate_identity():
    out = Tape().evaluate(lambda x: x, {'x': Tensor([1, 2, 3])})
    np.testing.assert_array_equal(out['output'].data, [1, 2, 3])


def test_evaluate_doubling():
    out = Tape().evaluate(lambda x: add(x, x), {'x': Tensor([1, 2])})
    np.testing.assert_array_equal(out['output'].data, [2, 4])


def test_evaluate_identity_matrix():
    tape = Tape()
    out = tape.evaluate(lambda a, b: {'y': matmul(a, b)},
                        {'a': Tensor([[1, 0], [0, 1]]), 'b': Tensor([[3], [4]])})
    np.testing.assert_array_equal(out['y'].data, [[3], [4]])
    assert len(tape) == 3


def test_evaluate_rejects_unbound_inputs():
    with pytest.raises(ValueError, match="not bound"):
        Tape().evaluate(lambda x, y: add(x, y), {'x': Tensor([1])})


def test_evaluate_rejects_non_finite_input():
    with pytest.raises(NonFiniteError):
        Tape().evaluate(lambda x: x, {'x': Tensor([1, np.nan])})


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        add(Tensor([1, 2]), Tensor([1, 2, 3]))
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor([[1, 2]]), Tensor([[1, 2]]))


def test_non_finite_rejected_by_ops():
    with pytest.raises(NonFiniteError):
        mul(Tensor([np.inf]), Tensor([1]))


def test_backward_of_sum():
    tape = Tape()
    x = tape.watch(Tensor([1, 2, 3]), requiresGrad=True)
    tape.backward(reduceSum(x))
    np.testing.assert_array_equal(x.grad.data, [1, 1, 1])


def test_backward_of_square():
    tape = Tape()
    x = tape.watch(Tensor([2, 3]), requiresGrad=True)
    grads = tape.backward(reduceSum(mul(x, x)))
    np.testing.assert_array_equal(x.grad.data, [4, 6])
    assert grads[x.nodeId] is x.grad


def test_backward_transpose_rule():
    tape = Tape()
    w = tape.watch(Tensor([[1, 2]]), requiresGrad=False)
    x = tape.watch(Tensor([5, 7]), requiresGrad=True)
    tape.backward(reduceSum(matmul(w, x)))
    np.testing.assert_array_equal(x.grad.data, [1, 2])
    assert w.grad is None


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.watch(Tensor([1, 2]), requiresGrad=True)
    with pytest.raises(ShapeError):
        tape.backward(add(x, x))


def test_backward_before_forward():
    with pytest.raises(RuntimeError, match="before forward"):
        Tape().backward(Tensor(1.0))


def test_ops_off_tape_do_not_record():
    out = add(Tensor([1]), Tensor([2]))
    assert out.tape is None
    assert not out.requiresGrad


def test_operators():
    a, b = Tensor([1, 2]), Tensor([3, 5])
    np.testing.assert_array_equal((a + b).data, [4, 7])
    np.testing.assert_array_equal((b - a).data, [2, 3])
    np.testing.assert_array_equal((a * b).data, [3, 10])
    np.testing.assert_array_equal((2 * a).data, [2, 4])
    np.testing.assert_array_equal((-a).data, [-1, -2])
    np.testing.assert_array_equal((1 - a).data, [0, -1])


def test_broadcast_gradients_sum_back():
    tape = Tape()
    x = tape.watch(Tensor(np.ones((3, 2))), requiresGrad=True)
    b = tape.watch(Tensor([1, 2]), requiresGrad=True)
    tape.backward(reduceSum(add(x, b)))
    np.testing.assert_array_equal(b.grad.data, [3, 3])
    assert x.grad.shape == (3, 2)


def test_linearity_of_backward():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))

    def grad(lossFn):
        tape = Tape()
        x = tape.watch(Tensor(a), requiresGrad=True)
        tape.backward(lossFn(x))
        return x.grad.data

    f = lambda x: reduceSum(mul(x, x))
    g = lambda x: reduceMean(scale(x, 3.0))
    np.testing.assert_allclose(grad(lambda x: add(f(x), g(x))), grad(f) + grad(g), rtol=1e-12, atol=1e-12)


def test_backward_is_deterministic():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))

    def run():
        tape = Tape()
        x = tape.watch(Tensor(a), requiresGrad=True)
        y = tape.watch(Tensor(b), requiresGrad=True)
        tape.backward(reduceSum(mul(matmul(x, y), matmul(x, y))))
        return x.grad.data.tobytes(), y.grad.data.tobytes()

    assert run() == run()


def test_second_backward_recomputes():
    tape = Tape()
    x = tape.watch(Tensor([1.0, 2.0]), requiresGrad=True)
    first = reduceSum(x)
    second = reduceSum(mul(x, x))
    tape.backward(first)
    tape.backward(second)
    np.testing.assert_array_equal(x.grad.data, [2, 4])


def test_finite_difference_linear():
    x = Tensor(np.random.default_rng(2).normal(size=5))
    g = finiteDifferenceGradient(lambda t: reduceSum(t), x, h=1e-3)
    np.testing.assert_allclose(g.data, np.ones(5), atol=1e-6)


def test_finite_difference_square():
    g = finiteDifferenceGradient(lambda t: reduceSum(mul(t, t)), Tensor([1.0]), h=1e-3)
    assert g.data[0] == pytest.approx(2.0, abs=1e-5)


def test_finite_difference_constant():
    g = finiteDifferenceGradient(lambda t: Tensor(4.0), Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(g.data, np.zeros(3))


def test_finite_difference_errors():
    with pytest.raises(ShapeError):
        finiteDifferenceGradient(lambda t: t, Tensor([1.0, 2.0]))
    with pytest.raises(ValueError):
        finiteDifferenceGradient(lambda t: reduceSum(t), Tensor([1.0]), h=0)


@pytest.mark.parametrize("op", [add, sub, mul])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b, r = rng.normal(size=(2, 3)), rng.normal(size=(3,)), rng.normal(size=(2, 3))
        assertGradientsMatch(lambda x, y: reduceSum(mul(op(x, y), Tensor(r))), a, b)


def test_matmul_and_reshape_gradients():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a, b, r = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assertGradientsMatch(lambda x, y: reduceSum(mul(reshape(matmul(x, y), (4, 2)), Tensor(r))), a, b)
