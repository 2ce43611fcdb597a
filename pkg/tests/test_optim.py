import numpy as np
import pytest

from subcam.optim import AdamState, adam_step
from subcam.tensor import Tensor


def test_zero_gradient_no_decay_leaves_params():
    p = {"w": Tensor([1.0, -2.0])}
    st = AdamState(weight_decay=0.0)
    st.m["w"] = np.array([0.5, 0.5])
    st.v["w"] = np.array([0.1, 0.1])
    adam_step(st, p, {"w": np.zeros(2)})
    assert st.step == 1
    np.testing.assert_array_equal(np.abs(st.m["w"]) < 0.5, [True, True])
    st2 = AdamState(weight_decay=0.0)
    p2 = {"w": Tensor([1.0, -2.0])}
    adam_step(st2, p2, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p2["w"].data, [1.0, -2.0])


def test_first_step_closed_form():
    lr, eps = 1e-3, 1e-8
    p = {"w": Tensor([0.0])}
    st = AdamState(learning_rate=lr, weight_decay=0.0, epsilon=eps)
    adam_step(st, p, {"w": np.array([1.0])})
    # m_hat = v_hat = 1 after bias correction
    assert p["w"].data[0] == pytest.approx(-lr / (1 + eps), rel=1e-12)


def test_decoupled_weight_decay_shrinks_by_lr_wd_value():
    lr, wd = 1e-3, 5e-4
    p = {"w": Tensor([2.0, -4.0])}
    st = AdamState(learning_rate=lr, weight_decay=wd, decoupled=True)
    for _ in range(3):
        before = p["w"].data.copy()
        adam_step(st, p, {"w": np.zeros(2)})
        np.testing.assert_allclose(before - p["w"].data, lr * wd * before, rtol=0, atol=1e-15)


def test_l2_weight_decay_folds_into_gradient():
    lr, wd = 1e-3, 5e-4
    p = {"w": Tensor([2.0])}
    st = AdamState(learning_rate=lr, weight_decay=wd)
    adam_step(st, p, {"w": np.zeros(1)})
    g = wd * 2.0
    assert p["w"].data[0] == pytest.approx(2.0 - lr * g / (abs(g) + st.epsilon), rel=1e-12)


def test_missing_gradient_rejected():
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(AdamState(), {"w": Tensor([1.0])})


def test_step_counter_increments():
    st = AdamState()
    p = {"w": Tensor([1.0])}
    for i in range(4):
        adam_step(st, p, {"w": np.ones(1)})
        assert st.step == i + 1
        assert st.m["w"].shape == p["w"].shape
