import numpy as np
import pytest

import autodiff as ad
from config_loader import build_config
from data_models import MlpSpec
from errors import NumericalError
from metalearners import (
    META_LEARNERS,
    LrLstmLearner,
    MamlLearner,
    MetaSgdLearner,
    build_meta_learner,
    init_lstm_phi,
    lstm_adapt,
    lstm_input_size,
    lstm_lr_step,
    maml_adapt,
    meta_loss,
    meta_sgd_adapt,
    mlp_forward_fn,
    supervised_loss,
)
from models import ParamSet, init_mlp
from state_models import MamlState, MetaSgdState


def _linear_loss(coefficients):
    """L(theta) = sum(c * theta), whose gradient is c everywhere."""
    return lambda p: ad.reduce_sum(ad.mul(p["theta"], ad.constant(p["theta"].tape, coefficients)))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@pytest.fixture
def sine_cfg():
    return build_config({"experiment": "sine", "meta_learner": "metasgd", "seed": 1, "model.layer_sizes": [1, 8, 1]})


@pytest.fixture
def regression_data():
    rng = np.random.default_rng(0)
    x = rng.uniform(-5.0, 5.0, (5, 1))
    return x, np.sin(x)


# --- Meta-SGD and MAML ---

def test_meta_sgd_step_hand_example():
    # ARRANGE
    tape = ad.Tape()
    theta = {"theta": ad.var(tape, [1.0, 2.0])}
    alpha = {"theta": ad.var(tape, [0.1, 0.5])}

    # ACT
    result = meta_sgd_adapt(theta, alpha, _linear_loss(np.array([2.0, -1.0])))

    # ASSERT
    np.testing.assert_allclose(result.params["theta"].value, [0.8, 2.5], rtol=0, atol=1e-15)
    assert len(result.train_losses) == 1
    assert result.train_losses[0] == 0.0


def test_meta_sgd_with_zero_alpha_is_identity():
    tape = ad.Tape()
    theta = {"theta": ad.var(tape, [0.3, -1.7, 4.0])}
    alpha = {"theta": ad.var(tape, np.zeros(3))}

    result = meta_sgd_adapt(theta, alpha, _linear_loss(np.array([5.0, -2.0, 1.0])))

    np.testing.assert_array_equal(result.params["theta"].value, [0.3, -1.7, 4.0])


def test_meta_sgd_step_is_theta_minus_alpha_times_gradient():
    # ARRANGE
    rng = np.random.default_rng(8)
    tape = ad.Tape()
    theta_value, alpha_value, g = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal(6)

    # ACT
    result = meta_sgd_adapt({"theta": ad.var(tape, theta_value)}, {"theta": ad.var(tape, alpha_value)}, _linear_loss(g))

    # ASSERT
    np.testing.assert_array_equal(result.params["theta"].value, theta_value - alpha_value * g)


def test_maml_with_zero_steps_is_identity():
    tape = ad.Tape()
    theta = {"theta": ad.var(tape, [1.0, 2.0])}

    result = maml_adapt(theta, 0.5, 0, _linear_loss(np.array([1.0, 1.0])))

    assert result.params["theta"] is theta["theta"]
    assert result.train_losses == []


def test_maml_one_step_equals_meta_sgd_with_constant_alpha(regression_data):
    # ARRANGE
    x, y = regression_data
    spec = MlpSpec(layer_sizes=[1, 6, 1], activation="tanh")
    base = init_mlp(spec, np.random.default_rng(1))
    theta_value = base.unflatten(np.random.default_rng(2).uniform(-0.5, 0.5, base.size))
    train_loss = supervised_loss(mlp_forward_fn(spec), ad.mse_loss, x, y)

    # ACT
    tape_a = ad.Tape()
    maml = maml_adapt(theta_value.to_vars(tape_a), 0.01, 1, train_loss)
    tape_b = ad.Tape()
    metasgd = meta_sgd_adapt(
        theta_value.to_vars(tape_b), theta_value.full_like(0.01).to_vars(tape_b, requires_grad=False), train_loss
    )

    # ASSERT
    assert ParamSet.from_vars(maml.params) == ParamSet.from_vars(metasgd.params)


def test_maml_two_steps_on_a_quadratic():
    # L(theta) = 0.5 * a * theta^2, so theta_2 = (1 - alpha*a)^2 * theta_0.
    a, alpha, theta0 = 2.0, 0.1, 1.5
    tape = ad.Tape()
    theta = {"theta": ad.var(tape, [theta0])}

    result = maml_adapt(theta, alpha, 2, lambda p: ad.scale(ad.reduce_sum(ad.square(p["theta"])), 0.5 * a))

    assert result.params["theta"].value[0] == pytest.approx((1 - alpha * a) ** 2 * theta0, abs=1e-12)
    assert len(result.train_losses) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_loss_aborts_adaptation():
    tape = ad.Tape()
    theta = {"theta": ad.var(tape, [1.0])}
    exploding = lambda p: ad.reduce_sum(ad.exp(ad.scale(p["theta"], 1000.0)))

    with pytest.raises(NumericalError):
        maml_adapt(theta, 0.1, 1, exploding)


def test_supervised_loss_rejects_an_empty_data_set():
    with pytest.raises(ValueError):
        supervised_loss(mlp_forward_fn(MlpSpec(layer_sizes=[1, 1])), ad.mse_loss, np.zeros((0, 1)), np.zeros((0, 1)))


# --- meta_loss ---

def test_meta_loss_is_the_mean_of_per_example_losses(regression_data):
    # ARRANGE
    x, y = regression_data
    spec = MlpSpec(layer_sizes=[1, 4, 1], activation="tanh")
    rng = np.random.default_rng(3)
    params = init_mlp(spec, rng).unflatten(rng.uniform(-1.0, 1.0, 13))
    forward = mlp_forward_fn(spec)
    tape = ad.Tape()
    theta = params.to_vars(tape)
    adapted = meta_sgd_adapt(theta, params.full_like(0.0).to_vars(tape), supervised_loss(forward, ad.mse_loss, x, y))

    # ACT
    total = meta_loss(adapted, supervised_loss(forward, ad.mse_loss, x, y)).item()
    per_example = [meta_loss(adapted, supervised_loss(forward, ad.mse_loss, x[i : i + 1], y[i : i + 1])).item() for i in range(5)]

    # ASSERT
    assert total == pytest.approx(sum(per_example) / 5, abs=1e-12)


def test_meta_loss_of_a_perfect_predictor_is_zero():
    spec = MlpSpec(layer_sizes=[1, 1])
    params = ParamSet({"weight_0": [[2.0]], "bias_0": [1.0]})
    x = np.array([[0.0], [1.0], [-3.0]])
    tape = ad.Tape()
    theta = params.to_vars(tape)

    adapted = maml_adapt(theta, 0.1, 0, lambda p: None)
    loss = meta_loss(adapted, supervised_loss(mlp_forward_fn(spec), ad.mse_loss, x, 2.0 * x + 1.0))

    assert loss.item() == 0.0


# --- LSTM learning-rate meta-learner ---

def _lstm_inputs(tape, rng, n):
    return (
        ad.var(tape, rng.standard_normal(n)),
        ad.var(tape, rng.uniform(0.0, 3.0)),
        ad.var(tape, rng.standard_normal(n)),
    )


def test_lstm_rate_lies_strictly_between_zero_and_beta():
    rng = np.random.default_rng(0)
    n, hidden, beta = 5, 6, 0.1
    phi = init_lstm_phi(rng, lstm_input_size(n), hidden, 0.5, 1.0)
    for _ in range(20):
        tape = ad.Tape()
        theta2, loss, grad = _lstm_inputs(tape, rng, n)
        h = ad.var(tape, rng.standard_normal((1, hidden)))
        c = ad.var(tape, rng.standard_normal((1, hidden)))

        alpha, _, _ = lstm_lr_step(phi.to_vars(tape), beta, theta2, loss, grad, h, c)

        assert 0.0 < alpha.item() < beta


def test_lstm_rate_is_half_beta_with_zero_readout():
    # ARRANGE
    rng = np.random.default_rng(1)
    phi = init_lstm_phi(rng, lstm_input_size(3), 4, 0.1, 1.0)
    phi = ParamSet(
        (name, np.zeros_like(t) if name.startswith("readout") else t) for name, t in phi.items()
    )
    tape = ad.Tape()
    theta2, loss, grad = _lstm_inputs(tape, rng, 3)
    zeros = ad.constant(tape, np.zeros((1, 4)))

    # ACT
    alpha, _, _ = lstm_lr_step(phi.to_vars(tape), 0.3, theta2, loss, grad, zeros, zeros)

    # ASSERT
    assert alpha.item() == 0.15


def test_lstm_cell_matches_a_gate_by_gate_oracle():
    # ARRANGE
    rng = np.random.default_rng(2)
    n, hidden, beta = 3, 4, 0.2
    phi = init_lstm_phi(rng, lstm_input_size(n), hidden, 0.3, 1.0)
    theta2_v, grad_v = rng.standard_normal(n), rng.standard_normal(n)
    loss_v = 0.7
    h_prev, c_prev = rng.standard_normal((1, hidden)), rng.standard_normal((1, hidden))

    x = np.concatenate([theta2_v, [loss_v], grad_v])[None, :]
    gates = {g: x @ phi[f"w_{g}"] + h_prev @ phi[f"u_{g}"] + phi[f"b_{g}"] for g in ("i", "f", "o", "g")}
    c_expected = _sigmoid(gates["f"]) * c_prev + _sigmoid(gates["i"]) * np.tanh(gates["g"])
    h_expected = _sigmoid(gates["o"]) * np.tanh(c_expected)
    alpha_expected = beta * _sigmoid(h_expected @ phi["readout_w"] + phi["readout_b"][0])

    # ACT
    tape = ad.Tape()
    alpha, h, c = lstm_lr_step(
        phi.to_vars(tape),
        beta,
        ad.var(tape, theta2_v),
        ad.var(tape, loss_v),
        ad.var(tape, grad_v),
        ad.var(tape, h_prev),
        ad.var(tape, c_prev),
    )

    # ASSERT
    np.testing.assert_allclose(c.value, c_expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(h.value, h_expected, rtol=0, atol=1e-12)
    assert alpha.item() == pytest.approx(float(alpha_expected[0]), abs=1e-12)


def test_lstm_adapt_leaves_theta2_unchanged_on_a_flat_loss():
    # ARRANGE
    rng = np.random.default_rng(3)
    tape = ad.Tape()
    theta1 = {"weight_0": ad.var(tape, rng.standard_normal((1, 4)))}
    theta2_value = rng.standard_normal(5)
    theta2 = {"weight_1": ad.var(tape, theta2_value)}
    phi = init_lstm_phi(rng, lstm_input_size(5), 4, 0.1, 1.0).to_vars(tape)
    flat = lambda p: ad.shift(ad.reduce_sum(ad.mul(p["weight_1"], ad.constant(tape, np.zeros(5)))), 1.0)

    # ACT
    result = lstm_adapt(phi, 0.1, 3, theta1, theta2, flat)

    # ASSERT
    np.testing.assert_array_equal(result.adapted["weight_1"].value, theta2_value)
    assert result.train_losses == [1.0, 1.0, 1.0]
    assert len(result.learning_rates) == 3
    assert all(0.0 < a < 0.1 for a in result.learning_rates)
    assert result.params["weight_0"] is theta1["weight_0"]


def test_lstm_adapt_single_step_is_one_rate_then_one_gradient_step():
    # ARRANGE
    rng = np.random.default_rng(4)
    tape = ad.Tape()
    theta2_value = rng.standard_normal(3)
    coefficients = np.array([1.0, -2.0, 0.5])
    phi_values = init_lstm_phi(rng, lstm_input_size(3), 2, 0.3, 1.0)
    phi = phi_values.to_vars(tape)
    loss_fn = lambda p: ad.reduce_sum(ad.mul(p["theta"], ad.constant(p["theta"].tape, coefficients)))

    # ACT
    result = lstm_adapt(phi, 0.5, 1, {}, {"theta": ad.var(tape, theta2_value)}, loss_fn)
    check = ad.Tape()
    zeros = ad.constant(check, np.zeros((1, 2)))
    alpha, _, _ = lstm_lr_step(
        phi_values.to_vars(check),
        0.5,
        ad.var(check, theta2_value),
        ad.var(check, float((theta2_value * coefficients).sum())),
        ad.var(check, coefficients),
        zeros,
        zeros,
    )

    # ASSERT
    assert result.learning_rates == [alpha.item()]
    np.testing.assert_allclose(result.adapted["theta"].value, theta2_value - alpha.item() * coefficients, rtol=0, atol=1e-15)


# --- Strategies ---

def test_registry_covers_every_meta_learner(sine_cfg):
    assert set(META_LEARNERS) == {"metasgd", "maml", "lrlstm"}
    assert isinstance(build_meta_learner(sine_cfg), MetaSgdLearner)
    assert isinstance(build_meta_learner(sine_cfg.model_copy(update={"meta_learner": "maml"})), MamlLearner)
    assert isinstance(build_meta_learner(sine_cfg.model_copy(update={"meta_learner": "lrlstm"})), LrLstmLearner)


def test_meta_sgd_initial_alpha_is_one_value_in_range(sine_cfg):
    learner = MetaSgdLearner.from_config(sine_cfg)

    state = learner.init_state(sine_cfg, np.random.default_rng(0))

    values = np.unique(state.alpha.flatten())
    assert values.size == 1
    assert 0.005 <= values[0] <= 0.1
    assert state.alpha.dims() == state.theta.dims()


def test_meta_sgd_state_requires_alpha_to_mirror_theta():
    with pytest.raises(ValueError):
        MetaSgdState(theta=ParamSet({"w": [1.0, 2.0]}), alpha=ParamSet({"w": [1.0]}))


def test_maml_state_requires_positive_alpha():
    with pytest.raises(ValueError):
        MamlState(theta=ParamSet({"w": [1.0]}), alpha_scalar=0.0)


def test_frozen_alpha_is_not_trainable(sine_cfg):
    learner = MetaSgdLearner(learn_alpha=False)
    state = learner.init_state(sine_cfg, np.random.default_rng(0))

    names = learner.trainable(state).names()

    assert all(n.startswith("theta/") for n in names)
    updated = learner.with_trainable(state, learner.trainable(state).map(lambda t: t + 1.0))
    assert updated.alpha == state.alpha


def test_trainable_names_are_prefixed_per_learner(sine_cfg):
    lstm = LrLstmLearner.from_config(sine_cfg)
    state = lstm.init_state(sine_cfg, np.random.default_rng(0))

    prefixes = {n.split("/", 1)[0] for n in lstm.trainable(state).names()}

    assert prefixes == {"phi", "theta1", "theta2_init"}


def test_lstm_state_defaults_to_the_last_layer_task_specific(sine_cfg):
    learner = LrLstmLearner.from_config(sine_cfg)

    state = learner.init_state(sine_cfg, np.random.default_rng(0))

    assert state.split_layer == 1
    assert state.theta2_init.names() == ["weight_1", "bias_1"]
    assert state.phi.dims()["w_i"] == (lstm_input_size(9), 20)
    np.testing.assert_array_equal(state.phi["b_f"], np.ones(20))


@pytest.mark.parametrize("name", ["metasgd", "maml", "lrlstm"])
def test_pack_unpack_round_trip(sine_cfg, name):
    cfg = sine_cfg.model_copy(update={"meta_learner": name})
    learner = build_meta_learner(cfg)
    state = learner.init_state(cfg, np.random.default_rng(5))

    restored = learner.unpack(learner.pack(state), cfg)

    assert learner.pack(restored) == learner.pack(state)
    assert learner.base_params(restored) == learner.base_params(state)


@pytest.mark.parametrize("name", ["metasgd", "maml", "lrlstm"])
def test_adapt_values_matches_differentiable_adaptation(sine_cfg, regression_data, name):
    # ARRANGE
    x, y = regression_data
    cfg = sine_cfg.model_copy(update={"meta_learner": name})
    learner = build_meta_learner(cfg)
    state = learner.init_state(cfg, np.random.default_rng(6))
    train_loss = supervised_loss(mlp_forward_fn(cfg.model), ad.mse_loss, x, y)

    # ACT
    tape = ad.Tape()
    full = learner.adapt(state, tape, learner.trainable(state).to_vars(tape), train_loss, first_order=False)
    values = learner.adapted_params(state, train_loss)

    # ASSERT
    assert ParamSet.from_vars(full.params) == values
