"""
The optimizer-style meta-learners: Meta-SGD, MAML and the LSTM
learning-rate meta-learner.

Each learner adapts a base-learner to one task on a tape, keeping the inner
gradients differentiable (unless first_order is set) so that the outer
gradient of the post-adaptation test loss is exact. The strategy classes at
the bottom give the training loops, checkpoints and evaluation drivers one
uniform interface, dispatched through the META_LEARNERS registry.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

import autodiff as ad
from data_models import MlpSpec, RunConfig
from errors import NumericalError
from models import ParamSet, forward_mlp, init_mlp, init_policy, join_params, layer_count, split_params
from state_models import LrLstmState, MamlState, MetaSgdState

# Maps a full set of base-learner parameters (as Vars) to a scalar loss.
LossFn = Callable[[Mapping[str, ad.Var]], ad.Var]

LSTM_GATES = ("i", "f", "o", "g")


@dataclass
class AdaptResult:
    """Outcome of one task adaptation."""

    # Full base-learner parameters after adaptation (shared layers included).
    params: dict[str, ad.Var]
    # Only the adapted tensors: theta' for Meta-SGD/MAML, theta2^T for the LSTM learner.
    adapted: dict[str, ad.Var]
    # One entry per inner step.
    train_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)


def _checked(loss: ad.Var, step: int) -> ad.Var:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite training loss at inner step {step}")
    return loss


def supervised_loss(
    forward: Callable[[Mapping[str, ad.Var], ad.Var], ad.Var],
    loss: Callable[[ad.Var, np.ndarray], ad.Var],
    x: np.ndarray,
    y: np.ndarray,
) -> LossFn:
    """
    Binds a data set to a model and a loss, giving params -> mean loss.

    Raises:
        ValueError: If the data set has no examples.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("Cannot build a loss over an empty data set.")

    def bound(params: Mapping[str, ad.Var]) -> ad.Var:
        tape = next(iter(params.values())).tape
        return loss(forward(params, ad.constant(tape, x)), y)

    return bound


def mlp_forward_fn(spec: MlpSpec) -> Callable[[Mapping[str, ad.Var], ad.Var], ad.Var]:
    return lambda params, x: forward_mlp(spec, params, x)


# --- Meta-SGD and MAML ---

def meta_sgd_adapt(
    theta: Mapping[str, ad.Var],
    alpha: Mapping[str, ad.Var],
    train_loss: LossFn,
    first_order: bool = False,
) -> AdaptResult:
    """One step theta' = theta - alpha o grad L_train(theta)."""
    loss = _checked(train_loss(theta), 0)
    names = list(theta)
    grads = ad.grad(loss, [theta[n] for n in names], create_graph=not first_order)
    adapted = {n: ad.sub(theta[n], ad.mul(alpha[n], g)) for n, g in zip(names, grads)}
    return AdaptResult(params=adapted, adapted=adapted, train_losses=[loss.item()])


def maml_adapt(
    theta: Mapping[str, ad.Var],
    alpha_scalar: float,
    inner_steps: int,
    train_loss: LossFn,
    first_order: bool = False,
) -> AdaptResult:
    """`inner_steps` plain SGD steps with the fixed scalar rate alpha_scalar."""
    params = dict(theta)
    losses = []
    for step in range(inner_steps):
        loss = _checked(train_loss(params), step)
        losses.append(loss.item())
        names = list(params)
        grads = ad.grad(loss, [params[n] for n in names], create_graph=not first_order)
        params = {n: ad.sub(params[n], ad.scale(g, alpha_scalar)) for n, g in zip(names, grads)}
    return AdaptResult(params=params, adapted=params, train_losses=losses)


# --- LSTM learning-rate meta-learner ---

def lstm_input_size(theta2_size: int) -> int:
    """Width of the concatenated input [theta2; loss; grad]."""
    return 2 * theta2_size + 1


def init_lstm_phi(rng: np.random.Generator, input_size: int, hidden_size: int, init_scale: float, forget_bias: float) -> ParamSet:
    """Gate weights uniform in +-init_scale; biases zero except the forget gate."""
    tensors = []
    for gate in LSTM_GATES:
        tensors.append((f"w_{gate}", rng.uniform(-init_scale, init_scale, (input_size, hidden_size))))
        tensors.append((f"u_{gate}", rng.uniform(-init_scale, init_scale, (hidden_size, hidden_size))))
        tensors.append((f"b_{gate}", np.full(hidden_size, forget_bias if gate == "f" else 0.0)))
    tensors.append(("readout_w", rng.uniform(-init_scale, init_scale, hidden_size)))
    tensors.append(("readout_b", np.zeros(1)))
    return ParamSet(tensors)


def _flat(tensors: list[ad.Var]) -> ad.Var:
    return ad.concat([ad.reshape(t, (int(np.prod(t.dims, dtype=np.int64)),)) for t in tensors])


def lstm_lr_step(
    phi: Mapping[str, ad.Var],
    beta: float,
    theta2_t: ad.Var,
    loss_t: ad.Var,
    grad_t: ad.Var,
    h_prev: ad.Var,
    c_prev: ad.Var,
) -> tuple[ad.Var, ad.Var, ad.Var]:
    """
    One standard LSTM cell step on [theta2; loss; grad], returning
    (alpha_t, h, c) with alpha_t = beta * sigmoid(readout_w . h + readout_b).

    Raises:
        NumericalError: If any input value is non-finite.
    """
    for name, v in (("theta2", theta2_t), ("loss", loss_t), ("gradient", grad_t)):
        if not np.all(np.isfinite(v.tape.nodes[v.id].value)):
            raise NumericalError(f"non-finite {name} fed to the learning-rate LSTM")
    x = ad.concat([theta2_t, ad.reshape(loss_t, (1,)), grad_t])
    x = ad.reshape(x, (1, x.dims[0]))

    def gate(g: str) -> ad.Var:
        return ad.add_bias_row(ad.add(ad.matmul(x, phi[f"w_{g}"]), ad.matmul(h_prev, phi[f"u_{g}"])), phi[f"b_{g}"])

    i, f, o = (ad.sigmoid(gate(g)) for g in ("i", "f", "o"))
    candidate = ad.tanh(gate("g"))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, candidate))
    h = ad.mul(o, ad.tanh(c))
    hidden = h.dims[1]
    readout = ad.add_bias_row(ad.matmul(h, ad.reshape(phi["readout_w"], (hidden, 1))), phi["readout_b"])
    alpha = ad.reshape(ad.scale(ad.sigmoid(readout), beta), ())
    return alpha, h, c


def lstm_adapt(
    phi: Mapping[str, ad.Var],
    beta: float,
    steps: int,
    theta1: Mapping[str, ad.Var],
    theta2_init: Mapping[str, ad.Var],
    train_loss: LossFn,
    first_order: bool = False,
) -> AdaptResult:
    """
    T inner steps: alpha_t from the LSTM, then theta2 <- theta2 - alpha_t * grad.

    Every step stays on the tape, so the outer gradient reaches phi, theta1 and
    theta2^0 through the whole unrolled sequence.
    """
    tape = next(iter(phi.values())).tape
    hidden = phi["readout_w"].dims[0]
    h = ad.constant(tape, np.zeros((1, hidden)))
    c = ad.constant(tape, np.zeros((1, hidden)))
    names = list(theta2_init)
    theta2 = dict(theta2_init)
    losses, rates = [], []
    for step in range(steps):
        loss = _checked(train_loss({**theta1, **theta2}), step)
        grads = ad.grad(loss, [theta2[n] for n in names], create_graph=not first_order)
        alpha, h, c = lstm_lr_step(phi, beta, _flat([theta2[n] for n in names]), loss, _flat(grads), h, c)
        theta2 = {n: ad.sub(theta2[n], ad.mul(ad.fill(alpha, g.dims), g)) for n, g in zip(names, grads)}
        losses.append(loss.item())
        rates.append(alpha.item())
    return AdaptResult(params={**theta1, **theta2}, adapted=theta2, train_losses=losses, learning_rates=rates)


def meta_loss(adapted: AdaptResult, test_loss: LossFn) -> ad.Var:
    """Mean test loss of the adapted base-learner, on the adaptation tape."""
    return test_loss(adapted.params)


# --- Strategies ---

def init_base_learner(cfg: RunConfig, rng: np.random.Generator) -> ParamSet:
    if cfg.experiment.startswith("nav"):
        return init_policy(cfg.model, rng)
    return init_mlp(cfg.model, rng)


class MetaLearner(ABC):
    """Uniform interface the outer loops use for every meta-learner."""

    name: str

    @abstractmethod
    def init_state(self, cfg: RunConfig, rng: np.random.Generator):
        """A freshly initialised meta-state."""

    @abstractmethod
    def trainable(self, state) -> ParamSet:
        """Meta-parameters the outer optimizer updates, with prefixed names."""

    @abstractmethod
    def with_trainable(self, state, params: ParamSet):
        """A new state whose trainable meta-parameters are replaced by `params`."""

    @abstractmethod
    def adapt(self, state, tape: ad.Tape, meta_vars: Mapping[str, ad.Var], train_loss: LossFn, first_order: bool = False) -> AdaptResult:
        """Adapts to one task; `meta_vars` are `trainable(state)` on `tape`."""

    @abstractmethod
    def base_params(self, state) -> ParamSet:
        """The base-learner parameters before adaptation."""

    @abstractmethod
    def pack(self, state) -> ParamSet:
        """Every array needed to rebuild the state, for checkpoints."""

    @abstractmethod
    def unpack(self, arrays: ParamSet, cfg: RunConfig):
        """Inverse of `pack`."""

    def adapt_values(self, state, train_loss: LossFn) -> AdaptResult:
        """Adapts on a private tape without keeping the graph for an outer step."""
        tape = ad.Tape()
        meta_vars = self.trainable(state).to_vars(tape, requires_grad=True)
        return self.adapt(state, tape, meta_vars, train_loss, first_order=True)

    def adapted_params(self, state, train_loss: LossFn) -> ParamSet:
        return ParamSet.from_vars(self.adapt_values(state, train_loss).params)


class MetaSgdLearner(MetaLearner):
    name = "metasgd"

    def __init__(self, learn_alpha: bool = True, alpha_init_range: tuple[float, float] = (0.005, 0.1)):
        self.learn_alpha = learn_alpha
        self.alpha_init_range = alpha_init_range

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "MetaSgdLearner":
        return cls(learn_alpha=cfg.metasgd.learn_alpha, alpha_init_range=cfg.metasgd.alpha_init_range)

    def init_state(self, cfg: RunConfig, rng: np.random.Generator) -> MetaSgdState:
        theta = init_base_learner(cfg, rng)
        # One shared initial value for every coordinate.
        value = rng.uniform(*self.alpha_init_range)
        return MetaSgdState(theta=theta, alpha=theta.full_like(value))

    def trainable(self, state: MetaSgdState) -> ParamSet:
        if self.learn_alpha:
            return ParamSet.merge(state.theta.prefixed("theta"), state.alpha.prefixed("alpha"))
        return state.theta.prefixed("theta")

    def with_trainable(self, state: MetaSgdState, params: ParamSet) -> MetaSgdState:
        alpha = params.select("alpha") if self.learn_alpha else state.alpha
        return MetaSgdState(theta=params.select("theta"), alpha=alpha)

    def adapt(self, state, tape, meta_vars, train_loss, first_order=False) -> AdaptResult:
        theta = {n: meta_vars[f"theta/{n}"] for n in state.theta}
        if self.learn_alpha:
            alpha = {n: meta_vars[f"alpha/{n}"] for n in state.alpha}
        else:
            alpha = state.alpha.to_vars(tape, requires_grad=False)
        return meta_sgd_adapt(theta, alpha, train_loss, first_order)

    def base_params(self, state: MetaSgdState) -> ParamSet:
        return state.theta

    def pack(self, state: MetaSgdState) -> ParamSet:
        return ParamSet.merge(state.theta.prefixed("theta"), state.alpha.prefixed("alpha"))

    def unpack(self, arrays: ParamSet, cfg: RunConfig) -> MetaSgdState:
        return MetaSgdState(theta=arrays.select("theta"), alpha=arrays.select("alpha"))


class MamlLearner(MetaLearner):
    name = "maml"

    def __init__(self, alpha: float = 0.01, inner_steps: int = 1):
        self.alpha = alpha
        self.inner_steps = inner_steps

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "MamlLearner":
        return cls(alpha=cfg.maml.alpha, inner_steps=cfg.maml.inner_steps)

    def init_state(self, cfg: RunConfig, rng: np.random.Generator) -> MamlState:
        return MamlState(theta=init_base_learner(cfg, rng), alpha_scalar=self.alpha, inner_steps=self.inner_steps)

    def trainable(self, state: MamlState) -> ParamSet:
        return state.theta.prefixed("theta")

    def with_trainable(self, state: MamlState, params: ParamSet) -> MamlState:
        return MamlState(theta=params.select("theta"), alpha_scalar=state.alpha_scalar, inner_steps=state.inner_steps)

    def adapt(self, state, tape, meta_vars, train_loss, first_order=False) -> AdaptResult:
        theta = {n: meta_vars[f"theta/{n}"] for n in state.theta}
        return maml_adapt(theta, state.alpha_scalar, state.inner_steps, train_loss, first_order)

    def base_params(self, state: MamlState) -> ParamSet:
        return state.theta

    def pack(self, state: MamlState) -> ParamSet:
        hyper = ParamSet({"alpha": [state.alpha_scalar], "inner_steps": [float(state.inner_steps)]})
        return ParamSet.merge(state.theta.prefixed("theta"), hyper.prefixed("hyper"))

    def unpack(self, arrays: ParamSet, cfg: RunConfig) -> MamlState:
        hyper = arrays.select("hyper")
        return MamlState(
            theta=arrays.select("theta"),
            alpha_scalar=float(hyper["alpha"][0]),
            inner_steps=int(hyper["inner_steps"][0]),
        )


class LrLstmLearner(MetaLearner):
    name = "lrlstm"

    def __init__(self, hidden_size: int, beta: float, steps: int, split_layer: Optional[int], init_scale: float, forget_bias: float):
        self.hidden_size = hidden_size
        self.beta = beta
        self.steps = steps
        self.split_layer = split_layer
        self.init_scale = init_scale
        self.forget_bias = forget_bias

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "LrLstmLearner":
        c = cfg.lrlstm
        return cls(c.hidden_size, c.beta, c.steps, c.split_layer, c.init_scale, c.forget_bias)

    def init_state(self, cfg: RunConfig, rng: np.random.Generator) -> LrLstmState:
        full = init_base_learner(cfg, rng)
        split = self.split_layer if self.split_layer is not None else layer_count(full) - 1
        composite = split_params(full, split)
        phi = init_lstm_phi(rng, lstm_input_size(composite.task_specific.size), self.hidden_size, self.init_scale, self.forget_bias)
        return LrLstmState(
            phi=phi,
            beta_scale=self.beta,
            theta1=composite.shared,
            theta2_init=composite.task_specific,
            steps_T=self.steps,
            hidden_size=self.hidden_size,
            split_layer=split,
            spec=cfg.model,
        )

    def trainable(self, state: LrLstmState) -> ParamSet:
        return ParamSet.merge(state.phi.prefixed("phi"), state.theta1.prefixed("theta1"), state.theta2_init.prefixed("theta2_init"))

    def with_trainable(self, state: LrLstmState, params: ParamSet) -> LrLstmState:
        return state.model_copy(
            update={"phi": params.select("phi"), "theta1": params.select("theta1"), "theta2_init": params.select("theta2_init")}
        )

    def adapt(self, state, tape, meta_vars, train_loss, first_order=False) -> AdaptResult:
        phi = {n: meta_vars[f"phi/{n}"] for n in state.phi}
        theta1 = {n: meta_vars[f"theta1/{n}"] for n in state.theta1}
        theta2 = {n: meta_vars[f"theta2_init/{n}"] for n in state.theta2_init}
        return lstm_adapt(phi, state.beta_scale, state.steps_T, theta1, theta2, train_loss, first_order)

    def base_params(self, state: LrLstmState) -> ParamSet:
        return ParamSet.merge(state.theta1, state.theta2_init)

    def pack(self, state: LrLstmState) -> ParamSet:
        hyper = ParamSet(
            {
                "beta": [state.beta_scale],
                "steps": [float(state.steps_T)],
                "hidden_size": [float(state.hidden_size)],
                "split_layer": [float(state.split_layer)],
            }
        )
        return ParamSet.merge(self.trainable(state), hyper.prefixed("hyper"))

    def unpack(self, arrays: ParamSet, cfg: RunConfig) -> LrLstmState:
        hyper = arrays.select("hyper")
        return LrLstmState(
            phi=arrays.select("phi"),
            beta_scale=float(hyper["beta"][0]),
            theta1=arrays.select("theta1"),
            theta2_init=arrays.select("theta2_init"),
            steps_T=int(hyper["steps"][0]),
            hidden_size=int(hyper["hidden_size"][0]),
            split_layer=int(hyper["split_layer"][0]),
            spec=cfg.model,
        )


META_LEARNERS: dict[str, type[MetaLearner]] = {
    "metasgd": MetaSgdLearner,
    "maml": MamlLearner,
    "lrlstm": LrLstmLearner,
}


def build_meta_learner(cfg: RunConfig) -> MetaLearner:
    return META_LEARNERS[cfg.meta_learner].from_config(cfg)
