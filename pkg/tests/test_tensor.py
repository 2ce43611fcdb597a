import numpy as np
import pytest

from subcam import tensor as T
from subcam.tensor import ShapeError, Tensor


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, tensors, rtol=1e-6):
    """``build()`` returns a scalar Tensor computed from ``tensors``."""
    for t in tensors:
        t.grad = None
    T.backward(build())
    for t in tensors:
        def f():
            with T.no_grad():
                return float(build().data)
        num = numeric_grad(f, t.data)
        np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=1e-8)


def test_relu_values():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_gap_on_single_pixel_is_identity():
    x = np.arange(5.0).reshape(1, 1, 1, 5)
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(x)).data, x.reshape(1, 5))


def test_conv_all_ones_matches_sliding_window_oracle():
    x = np.ones((1, 5, 5, 1))
    w = np.ones((3, 3, 1, 1))
    out = T.conv2d(Tensor(x), Tensor(w), padding=1).data[0, :, :, 0]
    xp = np.pad(x[0, :, :, 0], 1)
    oracle = np.array([[xp[i:i + 3, j:j + 3].sum() for j in range(5)] for i in range(5)])
    np.testing.assert_array_equal(out, oracle)
    assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 2] == 6


def test_conv_random_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 6, 5, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    out = T.conv2d(Tensor(x), Tensor(w)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 6, 5, 4))
    for n in range(2):
        for i in range(6):
            for j in range(5):
                ref[n, i, j] = np.tensordot(xp[n, i:i + 3, j:j + 3, :], w, axes=3)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_backward_sum_gives_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tensor_sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.relu(x))


def test_backward_clears_tape():
    x = Tensor([1.0], requires_grad=True)
    y = T.tensor_sum(T.mul(x, x))
    assert len(T.active_tape()) > 0
    T.backward(y)
    assert len(T.active_tape()) == 0


def test_tape_is_topologically_ordered(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.tensor_mean(T.sigmoid(T.relu(T.matmul(x, w))))
    seen = {id(x), id(w)}
    for out, inputs, _ in T.active_tape().nodes:
        assert all(id(i) in seen for i in inputs)
        seen.add(id(out))
    T.active_tape().clear()


@pytest.mark.parametrize("op,args", [
    ("conv2d", [(2, 4, 4, 3), (3, 3, 2, 2)]),
    ("matmul", [(2, 3), (4, 2)]),
    ("add", [(2, 3), (3, 2)]),
    ("bias_add", [(2, 3), (2,)]),
    ("max_pool2d", [(1, 3, 4, 1)]),
])
def test_shape_mismatch_names_operation(op, args):
    with pytest.raises(ShapeError, match=op):
        T.forward_primitive(op, [np.zeros(s) for s in args])


def test_forward_primitive_records_only_with_grad():
    T.active_tape().clear()
    T.forward_primitive("relu", [Tensor([1.0])])
    assert len(T.active_tape()) == 0
    T.forward_primitive("relu", [Tensor([1.0], requires_grad=True)])
    assert len(T.active_tape()) == 1
    T.active_tape().clear()


def test_primitive_gradients_match_finite_differences(rng):
    x = Tensor(rng.uniform(-1, 1, size=(2, 4, 4, 3)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, size=(3, 3, 3, 2)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, size=2), requires_grad=True)
    g = rng.normal(size=(2, 2, 2, 2))
    check_grads(lambda: T.tensor_sum(T.mul(T.max_pool2d(T.relu(T.bias_add(T.conv2d(x, w), b))), Tensor(g))),
                [x, w, b])

    a = Tensor(rng.uniform(-1, 1, size=(3, 4)), requires_grad=True)
    m = Tensor(rng.uniform(-1, 1, size=(4, 2)), requires_grad=True)
    check_grads(lambda: T.tensor_mean(T.sigmoid(T.matmul(a, m))), [a, m])
    check_grads(lambda: T.tensor_sum(T.mul(T.transpose(a), T.transpose(a))), [a])

    f = Tensor(rng.uniform(-1, 1, size=(2, 3, 3, 5)), requires_grad=True)
    v = Tensor(rng.uniform(-1, 1, size=(4, 5)), requires_grad=True)
    tgt = (rng.random((2, 4)) < 0.5).astype(float)
    check_grads(lambda: T.bce_with_logits(T.linear(T.global_avg_pool(f), v), tgt), [f, v])
    check_grads(lambda: T.tensor_sum(T.add(T.scale(a, 3.0), T.mul(a, a))), [a])


def test_bce_is_stable_for_huge_logits():
    z = Tensor([1e4, -1e4], requires_grad=True)
    loss = T.bce_with_logits(z, [1.0, 0.0])
    assert np.isfinite(loss.data) and float(loss.data) == 0.0
    T.backward(loss)
    assert np.all(np.isfinite(z.grad))


def test_bce_rejects_non_binary_targets():
    with pytest.raises(ValueError):
        T.bce_with_logits(Tensor([0.0]), [0.5])


def test_gradient_accumulation_is_linear(rng):
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

    def l1():
        return T.tensor_sum(T.relu(T.matmul(x, w)))

    def l2():
        return T.tensor_mean(T.sigmoid(T.matmul(x, w)))

    T.backward(T.add(l1(), l2()))
    joint = x.grad.copy(), w.grad.copy()
    x.grad = w.grad = None
    T.backward(l1())
    T.backward(l2())
    np.testing.assert_allclose(x.grad, joint[0], rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(w.grad, joint[1], rtol=1e-13, atol=1e-15)


def test_deterministic_repeat(rng):
    x = rng.normal(size=(2, 8, 8, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    a = T.conv2d(Tensor(x), Tensor(w)).data
    b = T.conv2d(Tensor(x), Tensor(w)).data
    assert a.tobytes() == b.tobytes()
