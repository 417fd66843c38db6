import numpy as np
import pytest

from offnadir.model import ParameterStore
from offnadir.optim import AdamState, adam_step, linear_decay
from offnadir.tensor import NonFiniteError


@pytest.fixture
def store():
    params = ParameterStore()
    params.add("conv.weight", np.array([1.0, -2.0]), decay=True)
    params.add("conv.bias", np.array([0.5]), decay=False)
    return params


def test_first_step_moves_by_learning_rate(store):
    state = AdamState.for_params(store)
    grads = {"conv.weight": np.array([3.0, -0.1]), "conv.bias": np.array([2.0])}
    adam_step(store, grads, state, lr=0.01)
    # Bias-corrected first step is lr * sign(g) up to eps.
    np.testing.assert_allclose(store["conv.weight"].data, [0.99, -1.99], atol=1e-7)
    np.testing.assert_allclose(store["conv.bias"].data, [0.49], atol=1e-7)
    assert state.step == 1


def test_matches_reference_update(store):
    state = AdamState.for_params(store)
    weight = store["conv.weight"].data.copy()
    first = np.zeros(2)
    second = np.zeros(2)
    for step, grad in enumerate([np.array([0.3, -1.0]), np.array([-0.2, 0.5])], start=1):
        adam_step(store, {"conv.weight": grad}, state, lr=1e-3)
        first = 0.9 * first + 0.1 * grad
        second = 0.999 * second + 0.001 * grad**2
        weight = weight - 1e-3 * (first / (1 - 0.9**step)) / (
            np.sqrt(second / (1 - 0.999**step)) + 1e-8
        )
    np.testing.assert_allclose(store["conv.weight"].data, weight, rtol=1e-12)


def test_weight_decay_only_on_flagged_parameters(store):
    state = AdamState.for_params(store)
    zero = {"conv.weight": np.zeros(2), "conv.bias": np.zeros(1)}
    adam_step(store, zero, state, lr=0.1, weight_decay=1e-2)
    weight = store["conv.weight"].data
    assert abs(weight[0]) < 1.0 and abs(weight[1]) < 2.0
    np.testing.assert_array_equal(store["conv.bias"].data, [0.5])


def test_missing_gradient_counts_as_zero(store):
    state = AdamState.for_params(store)
    adam_step(store, {"conv.weight": np.ones(2)}, state, lr=0.1)
    np.testing.assert_array_equal(store["conv.bias"].data, [0.5])


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_gradient_leaves_parameters(store, bad):
    state = AdamState.for_params(store)
    with pytest.raises(NonFiniteError, match="conv.bias"):
        adam_step(store, {"conv.weight": np.ones(2), "conv.bias": np.array([bad])},
                  state, lr=0.1)
    np.testing.assert_array_equal(store["conv.weight"].data, [1.0, -2.0])
    assert state.step == 0


@pytest.mark.parametrize(
    "iteration, expected",
    [
        pytest.param(0, 1e-4, id="start"),
        pytest.param(500, 5e-5, id="half"),
        pytest.param(999, 1e-7, id="last"),
        pytest.param(1000, 0.0, id="end"),
    ],
)
def test_linear_decay(iteration, expected):
    assert linear_decay(1e-4, iteration, 1000) == pytest.approx(expected)


def test_linear_decay_rejects_empty_schedule():
    with pytest.raises(ValueError):
        linear_decay(1e-4, 0, 0)


def test_decay_shrinks_norm_every_step(store):
    state = AdamState.for_params(store)
    zero = {"conv.weight": np.zeros(2), "conv.bias": np.zeros(1)}
    norms = [np.linalg.norm(store["conv.weight"].data)]
    for _ in range(5):
        adam_step(store, zero, state, lr=0.01, weight_decay=1e-4)
        norms.append(np.linalg.norm(store["conv.weight"].data))
    assert all(later < earlier for earlier, later in zip(norms, norms[1:]))
    np.testing.assert_array_equal(store["conv.bias"].data, [0.5])
