import numpy as np
import pytest

from brainage.exceptions import ConfigError, DimensionError, NumericError, StateError
from brainage.services.numerics import (
    AdamState,
    MLPParams,
    MLPSpec,
    Rng,
    adam_step,
    gaussian_sample,
    gradcheck,
    init_mlp,
    mlp_backward,
    mlp_forward,
)


def _mlp_loss(spec, x, upstream):
    def loss_fn(arrays):
        params = MLPParams.from_arrays(arrays)
        y, cache = mlp_forward(params, spec, x)
        grads, _ = mlp_backward(cache, upstream)
        return float(np.sum(y * upstream)), grads.to_arrays()

    return loss_fn


@pytest.mark.parametrize("output_activation", ["linear", "sigmoid"])
def test_mlp_backward_matches_central_differences(output_activation):
    spec = MLPSpec((3, 5, 4, 2), "tanh", output_activation)
    rng = Rng(11)
    params = init_mlp(spec, rng.child(0))
    x = rng.child(1).generator.standard_normal((6, 3))
    upstream = rng.child(2).generator.standard_normal((6, 2))

    report = gradcheck(_mlp_loss(spec, x, upstream), params.to_arrays(), floor=1e-6)

    assert report.passed, report


def test_mlp_input_gradient_matches_central_differences():
    spec = MLPSpec((3, 4, 1), "tanh", "linear")
    params = init_mlp(spec, Rng(2))
    x = Rng(3).generator.standard_normal((2, 3))
    upstream = np.ones((2, 1))

    def loss_fn(arrays):
        y, cache = mlp_forward(params, spec, arrays["x"])
        _, dx = mlp_backward(cache, upstream)
        return float(y.sum()), {"x": dx}

    assert gradcheck(loss_fn, {"x": x}).passed


def test_zero_weights_return_output_bias():
    spec = MLPSpec((4, 3, 2))
    params = init_mlp(spec, Rng(0)).zeros_like()
    params.biases[-1][:] = [1.5, -2.0]

    y, _ = mlp_forward(params, spec, np.ones((3, 4)))

    assert np.array_equal(y, np.tile([1.5, -2.0], (3, 1)))


def test_forward_rejects_wrong_width():
    spec = MLPSpec((4, 2))
    params = init_mlp(spec, Rng(0))
    with pytest.raises(DimensionError):
        mlp_forward(params, spec, np.ones((3, 5)))


def test_forward_rejects_non_finite_output():
    spec = MLPSpec((1, 1))
    params = init_mlp(spec, Rng(0))
    with pytest.raises(NumericError):
        mlp_forward(params, spec, np.array([[np.inf]]))


def test_backward_requires_cache():
    with pytest.raises(StateError):
        mlp_backward(None, np.ones((1, 1)))


def test_spec_rejects_bad_layers():
    with pytest.raises(ConfigError):
        MLPSpec((4,))
    with pytest.raises(ConfigError):
        MLPSpec((4, 0, 1))
    with pytest.raises(ConfigError):
        MLPSpec((4, 1), hidden_activation="gelu")


def test_params_round_trip_through_named_arrays():
    spec = MLPSpec((3, 2, 1))
    params = init_mlp(spec, Rng(5))
    arrays = params.to_arrays("enc1.")

    assert sorted(arrays) == ["enc1.W0", "enc1.W1", "enc1.b0", "enc1.b1"]
    restored = MLPParams.from_arrays(arrays, "enc1.")
    restored.check(spec)
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), restored.arrays()))
    with pytest.raises(StateError):
        MLPParams.from_arrays(arrays, "dec1.")


def test_first_adam_step_moves_by_learning_rate():
    params = MLPParams([np.array([[1.0]])], [np.array([0.0])])
    grads = MLPParams([np.array([[0.5]])], [np.array([-2.0])])
    state = AdamState.fresh(params, learning_rate=0.1)

    updated, state = adam_step(params, grads, state)

    assert state.t == 1
    assert updated.weights[0][0, 0] == pytest.approx(0.9, abs=1e-6)
    assert updated.biases[0][0] == pytest.approx(0.1, abs=1e-6)
    assert params.weights[0][0, 0] == 1.0


def test_adam_rejects_mismatched_gradients():
    params = MLPParams([np.zeros((2, 2))], [np.zeros(2)])
    grads = MLPParams([np.zeros((2, 3))], [np.zeros(2)])
    with pytest.raises(DimensionError):
        adam_step(params, grads, AdamState.fresh(params))


def test_rng_children_are_reproducible_and_distinct():
    first = Rng(42).child(1, 3).generator.standard_normal(5)
    again = Rng(42).child(1, 3).generator.standard_normal(5)
    sibling = Rng(42).child(1, 4).generator.standard_normal(5)

    assert np.array_equal(first, again)
    assert not np.array_equal(first, sibling)


def test_gaussian_sample_moments():
    draws = gaussian_sample(Rng(9), (200000,))
    assert abs(draws.mean()) < 0.01
    assert abs(draws.std() - 1.0) < 0.01
    with pytest.raises(DimensionError):
        gaussian_sample(Rng(9), (0, 3))


def test_gradcheck_flags_a_wrong_gradient():
    x = np.array([1.0, -2.0, 0.5])

    def right(arrays):
        return float(np.sum(arrays["x"] ** 2)), {"x": 2.0 * arrays["x"]}

    def wrong(arrays):
        return float(np.sum(arrays["x"] ** 2)), {"x": 3.0 * arrays["x"]}

    assert gradcheck(right, {"x": x}).passed
    report = gradcheck(wrong, {"x": x})
    assert not report.passed
    assert report.max_rel_err == pytest.approx(1.0 / 3.0, rel=1e-3)
