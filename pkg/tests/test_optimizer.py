import numpy as np
import pytest

from Modules.errors import NumericalError
from Modules.optimizer import Adam, AdamState, adam_step
from Modules.tensor import Tape, Tensor, elementwise, reduce


class TestAdamStep:
    def test_first_step_moves_by_learning_rate(self):
        # With bias correction the first update is lr * sign(g).
        p = {"w": np.array([1.0, -1.0, 0.5])}
        state = AdamState(learning_rate=0.1)
        adam_step(state, p, {"w": np.array([2.0, -3.0, 0.0])})
        np.testing.assert_allclose(p["w"], [0.9, -0.9, 0.5], atol=1e-7)
        assert state.step == 1

    def test_weight_decay_is_added_to_gradient(self):
        p = {"w": np.array([2.0])}
        state = AdamState(learning_rate=0.1, weight_decay=0.5)
        adam_step(state, p, {"w": np.array([0.0])})
        np.testing.assert_allclose(p["w"], [1.9], atol=1e-7)

    def test_zero_learning_rate_leaves_parameters(self):
        p = {"w": np.array([1.0, 2.0])}
        adam_step(AdamState(learning_rate=0.0, weight_decay=1.0), p, {"w": np.array([5.0, 5.0])})
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_nan_gradient_names_parameter(self):
        p = {"encoder.0.weight": np.zeros(2)}
        with pytest.raises(NumericalError, match="encoder.0.weight"):
            adam_step(AdamState(), p, {"encoder.0.weight": np.array([np.nan, 0.0])})

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValueError):
            AdamState(beta1=1.0)
        with pytest.raises(ValueError):
            AdamState(learning_rate=-1.0)

    def test_matches_reference_recurrence(self, rng):
        p = rng.standard_normal(3)
        grads = [rng.standard_normal(3) for _ in range(5)]
        params = {"p": p.copy()}
        state = AdamState(learning_rate=0.01)
        m = np.zeros(3)
        v = np.zeros(3)
        expected = p.copy()
        for t, g in enumerate(grads, start=1):
            adam_step(state, params, {"p": g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            expected = expected - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(params["p"], expected, rtol=1e-12)


class TestAdam:
    def test_minimizes_quadratic(self):
        w = Tensor([3.0, -2.0], requires_grad=True, name="w")
        opt = Adam({"w": w}, lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            with Tape() as tape:
                loss = reduce("sum", elementwise("square", w))
            tape.backward(loss)
            opt.step()
        np.testing.assert_allclose(w.data, [0.0, 0.0], atol=1e-2)

    def test_step_subset_leaves_other_parameters(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([1.0], requires_grad=True)
        opt = Adam({"a": a, "b": b}, lr=0.1)
        a.grad = np.array([1.0])
        b.grad = np.array([1.0])
        opt.step(["a"])
        assert a.data[0] < 1.0
        assert b.data[0] == 1.0
