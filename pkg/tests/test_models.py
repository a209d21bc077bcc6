import numpy as np
import pytest

import autodiff as ad
from data_models import MlpSpec
from models import (
    ParamSet,
    forward_mlp,
    init_mlp,
    init_policy,
    join_params,
    layer_count,
    mlp_apply,
    policy_forward,
    split_params,
    truncated_normal,
)


@pytest.fixture
def regressor_spec():
    return MlpSpec(layer_sizes=[1, 40, 40, 1], activation="relu")


def _random_params(spec, rng, scale=0.3):
    base = init_mlp(spec, rng)
    return base.unflatten(rng.standard_normal(base.size) * scale)


def _loop_forward(spec, params, x):
    """Independent scalar-loop evaluation of an MLP."""
    rows = []
    for sample in x:
        h = list(sample)
        for layer in range(spec.n_layers):
            w, b = params[f"weight_{layer}"], params[f"bias_{layer}"]
            out = []
            for j in range(w.shape[1]):
                total = float(b[j])
                for i in range(w.shape[0]):
                    total += h[i] * float(w[i, j])
                if layer < spec.n_layers - 1:
                    total = max(total, 0.0) if spec.activation == "relu" else float(np.tanh(total))
                out.append(total)
            h = out
        rows.append(h)
    return np.array(rows)


# --- Initialization ---

def test_init_biases_are_zero_and_weights_truncated(regressor_spec):
    params = init_mlp(regressor_spec, np.random.default_rng(0))

    for name, tensor in params.items():
        if name.startswith("bias"):
            assert np.all(tensor == 0.0)
        else:
            assert np.all(np.abs(tensor) <= 0.02)


def test_init_is_deterministic_per_seed(regressor_spec):
    first = init_mlp(regressor_spec, np.random.default_rng(42))
    second = init_mlp(regressor_spec, np.random.default_rng(42))
    assert first == second


def test_init_layout_and_size(regressor_spec):
    params = init_mlp(regressor_spec, np.random.default_rng(0))

    assert params.names() == ["weight_0", "bias_0", "weight_1", "bias_1", "weight_2", "bias_2"]
    assert params.dims()["weight_1"] == (40, 40)
    assert params.size == 1 * 40 + 40 + 40 * 40 + 40 + 40 * 1 + 1


def test_truncated_normal_respects_the_bound():
    samples = truncated_normal(np.random.default_rng(1), (10000,), stddev=1.0, bound=2.0)
    assert np.all(np.abs(samples) <= 2.0)
    assert samples.std() == pytest.approx(0.88, abs=0.05)


def test_init_policy_adds_zero_log_variance():
    spec = MlpSpec(layer_sizes=[2, 100, 100, 2])
    policy = init_policy(spec, np.random.default_rng(0))

    assert policy.names()[-1] == "log_var"
    np.testing.assert_array_equal(policy["log_var"], [0.0, 0.0])
    np.testing.assert_array_equal(np.exp(0.5 * policy["log_var"]), [1.0, 1.0])


# --- ParamSet ---

def test_flatten_unflatten_is_a_bitwise_bijection(regressor_spec):
    params = _random_params(regressor_spec, np.random.default_rng(2))
    assert params.unflatten(params.flatten()) == params


def test_unflatten_rejects_wrong_length(regressor_spec):
    params = init_mlp(regressor_spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        params.unflatten(np.zeros(params.size + 1))


def test_paramset_rejects_duplicate_names():
    with pytest.raises(ValueError):
        ParamSet([("a", [1.0]), ("a", [2.0])])


def test_paramset_tensors_are_read_only():
    params = ParamSet({"a": [1.0, 2.0]})
    with pytest.raises(ValueError):
        params["a"][0] = 5.0


def test_prefixed_and_select_are_inverse():
    params = ParamSet({"w": [1.0], "b": [2.0]})
    merged = ParamSet.merge(params.prefixed("theta"), ParamSet({"other/x": [0.0]}))

    assert merged.names() == ["theta/w", "theta/b", "other/x"]
    assert merged.select("theta") == params


def test_equality_is_bitwise():
    assert ParamSet({"a": [0.0]}) != ParamSet({"a": [-0.0]})
    assert ParamSet({"a": [1.0], "b": [2.0]}) != ParamSet({"b": [2.0], "a": [1.0]})


def test_to_vars_and_back():
    params = ParamSet({"w": np.arange(6.0).reshape(2, 3), "b": [1.0, 2.0, 3.0]})
    tape = ad.Tape()
    assert ParamSet.from_vars(params.to_vars(tape)) == params


# --- Forward passes ---

def test_zero_weights_output_the_bias():
    spec = MlpSpec(layer_sizes=[3, 4, 2])
    params = init_mlp(spec, np.random.default_rng(0)).map(np.zeros_like)
    params = ParamSet.merge(
        ParamSet((n, t) for n, t in params.items() if n != "bias_1"),
        ParamSet({"bias_1": [0.5, -1.5]}),
    )
    out = mlp_apply(spec, params, np.random.default_rng(1).standard_normal((5, 3)))
    np.testing.assert_array_equal(out, np.tile([0.5, -1.5], (5, 1)))


def test_identity_single_layer_returns_its_input():
    spec = MlpSpec(layer_sizes=[3, 3])
    params = ParamSet({"weight_0": np.eye(3), "bias_0": np.zeros(3)})
    x = np.random.default_rng(0).standard_normal((4, 3))

    tape = ad.Tape()
    out = forward_mlp(spec, params.to_vars(tape), ad.constant(tape, x))

    np.testing.assert_array_equal(out.value, x)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_forward_matches_a_scalar_loop(regressor_spec, activation):
    # ARRANGE
    spec = regressor_spec.model_copy(update={"activation": activation})
    rng = np.random.default_rng(9)
    params = _random_params(spec, rng)
    x = rng.uniform(-5.0, 5.0, (5, 1))

    # ACT
    tape = ad.Tape()
    on_tape = forward_mlp(spec, params.to_vars(tape), ad.constant(tape, x)).value
    direct = mlp_apply(spec, params, x)

    # ASSERT
    np.testing.assert_allclose(on_tape, _loop_forward(spec, params, x), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(on_tape, direct)


def test_forward_rejects_wrong_input_width(regressor_spec):
    params = init_mlp(regressor_spec, np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        mlp_apply(regressor_spec, params, np.zeros((3, 2)))


def test_policy_mean_of_zero_net_is_the_bias():
    spec = MlpSpec(layer_sizes=[2, 2])
    params = ParamSet({"weight_0": np.zeros((2, 2)), "bias_0": [0.1, -0.2], "log_var": [0.0, 0.0]})

    tape = ad.Tape()
    mean, log_var = policy_forward(spec, params.to_vars(tape), ad.constant(tape, np.ones((3, 2))))

    np.testing.assert_array_equal(mean.value, np.tile([0.1, -0.2], (3, 1)))
    np.testing.assert_array_equal(log_var.value, [0.0, 0.0])


def test_policy_mean_gradient_matches_finite_differences():
    # ARRANGE
    rng = np.random.default_rng(4)
    spec = MlpSpec(layer_sizes=[2, 5, 2], activation="tanh")
    base = init_policy(spec, rng)
    params = base.unflatten(rng.uniform(-0.5, 0.5, base.size))
    states = rng.standard_normal((4, 2))
    weights = rng.standard_normal((4, 2))

    def objective(w0, tape=None):
        tape = tape or ad.Tape()
        variables = params.to_vars(tape)
        variables["weight_0"] = w0 if isinstance(w0, ad.Var) else ad.var(tape, w0)
        mean, _ = policy_forward(spec, variables, ad.constant(tape, states))
        return ad.reduce_sum(ad.mul(mean, ad.constant(tape, weights)))

    # ACT
    tape = ad.Tape()
    w0 = ad.var(tape, params["weight_0"])
    (analytic,) = ad.grad_values(objective(w0, tape), [w0])
    numeric = np.zeros((2, 5))
    for idx in np.ndindex(2, 5):
        plus, minus = params["weight_0"].copy(), params["weight_0"].copy()
        plus[idx] += 1e-5
        minus[idx] -= 1e-5
        numeric[idx] = (objective(plus).item() - objective(minus).item()) / 2e-5

    # ASSERT
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) <= 1e-6


# --- Shared / task-specific split ---

def test_split_at_zero_then_join_is_identity(regressor_spec):
    params = _random_params(regressor_spec, np.random.default_rng(0))
    composite = split_params(params, 0)

    assert len(composite.shared) == 0
    assert join_params(composite) == params


def test_split_at_last_layer_keeps_only_the_output_layer_task_specific(regressor_spec):
    params = init_mlp(regressor_spec, np.random.default_rng(0))

    composite = split_params(params, 2)

    assert composite.task_specific.names() == ["weight_2", "bias_2"]
    assert composite.shared.size + composite.task_specific.size == params.size
    assert join_params(composite) == params


def test_split_at_layer_count_leaves_nothing_task_specific(regressor_spec):
    params = init_mlp(regressor_spec, np.random.default_rng(0))
    composite = split_params(params, layer_count(params))
    assert len(composite.task_specific) == 0


def test_split_keeps_log_variance_task_specific():
    policy = init_policy(MlpSpec(layer_sizes=[2, 3, 2]), np.random.default_rng(0))
    composite = split_params(policy, 2)
    assert composite.task_specific.names() == ["log_var"]


def test_split_rejects_out_of_range_index(regressor_spec):
    params = init_mlp(regressor_spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        split_params(params, 4)
