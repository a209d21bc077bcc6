"""
Outer meta-training loops, the outer optimizers and the evaluation drivers.

Each outer iteration records every task's adaptation and meta-test loss on a
fresh tape, sums the losses over the meta-batch, and applies one optimizer
step to all trainable meta-parameters of the learner. Task and rollout
randomness for iteration i comes from its own seeded stream, so a run is a
pure function of (config, seed).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

import autodiff as ad
import config
from data_models import ClusterTaskConfig, MetaTrainConfig, MlpSpec, RlTrainConfig, SineTaskConfig, TrainLog, TrainLogRow
from errors import NumericalError
from metalearners import LossFn, MetaLearner, meta_loss, mlp_forward_fn, supervised_loss
from models import ParamSet, mlp_apply
from rl import NavMode, mean_return, pg_surrogate_loss, rollouts, sample_nav_task
from seeding import SeedStreams
from tasks import AdaptFn, FewShotTask, evaluate_classification, evaluate_regression
from utils import confidence_interval

TaskSampler = Callable[[np.random.Generator], FewShotTask]
# (predictions, targets) -> scalar loss on the tape
SupervisedLoss = Callable[[ad.Var, np.ndarray], ad.Var]


# --- Outer optimizers ---

@dataclass(frozen=True)
class AdamState:
    """First and second moment estimates per tensor, plus the step count."""

    m: ParamSet
    v: ParamSet
    step: int = 0
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    epsilon: float = config.ADAM_EPSILON

    @classmethod
    def zeros_like(cls, params: ParamSet, **hyper: float) -> "AdamState":
        zeros = params.full_like(0.0)
        return cls(m=zeros, v=zeros, **hyper)


def _check_conforming(params: ParamSet, other: ParamSet, what: str) -> None:
    if params.dims() != other.dims() or params.names() != other.names():
        raise ValueError(f"{what} do not match the parameters' names and dims.")


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update. Returns new values; nothing is mutated."""
    _check_conforming(params, grads, "Gradients")
    _check_conforming(params, state.m, "Adam moments")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = ParamSet((n, b1 * state.m[n] + (1.0 - b1) * grads[n]) for n in params)
    v = ParamSet((n, b2 * state.v[n] + (1.0 - b2) * grads[n] * grads[n]) for n in params)
    new_params = ParamSet(
        (n, params[n] - lr * (m[n] / (1.0 - b1**t)) / (np.sqrt(v[n] / (1.0 - b2**t)) + state.epsilon)) for n in params
    )
    return new_params, AdamState(m=m, v=v, step=t, beta1=b1, beta2=b2, epsilon=state.epsilon)


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    _check_conforming(params, grads, "Gradients")
    return ParamSet((n, params[n] - lr * grads[n]) for n in params)


@dataclass
class TrainResult:
    """Final meta-state, the training log, and the optimizer state (Adam only)."""

    state: Any
    log: TrainLog = field(default_factory=TrainLog)
    optimizer: Optional[AdamState] = None
    iterations: int = 0


class _OuterLoop:
    """Shared plumbing of the supervised and RL loops: one optimizer step per iteration."""

    def __init__(self, learner: MetaLearner, state: Any, cfg: MetaTrainConfig, wall_clock: bool, optimizer: Optional[AdamState]):
        self.learner = learner
        self.state = state
        self.cfg = cfg
        self.wall_clock = wall_clock
        if cfg.optimizer == "adam" and optimizer is None:
            optimizer = AdamState.zeros_like(
                learner.trainable(state), beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, epsilon=cfg.adam_epsilon
            )
        self.optimizer = optimizer
        self.log = TrainLog()
        self.started = time.perf_counter()

    def begin(self) -> tuple[ad.Tape, dict[str, ad.Var]]:
        tape = ad.Tape()
        return tape, self.learner.trainable(self.state).to_vars(tape, requires_grad=True)

    def update(self, iteration: int, total: ad.Var, meta_vars: dict[str, ad.Var]) -> None:
        if self.cfg.l2 > 0.0:
            penalty = None
            for v in meta_vars.values():
                term = ad.reduce_sum(ad.square(v))
                penalty = term if penalty is None else ad.add(penalty, term)
            total = ad.add(total, ad.scale(penalty, self.cfg.l2))
        if not math.isfinite(total.item()):
            raise NumericalError("non-finite outer loss", iteration=iteration)
        names = list(meta_vars)
        grads = ParamSet(zip(names, ad.grad_values(total, [meta_vars[n] for n in names])))
        if not np.all(np.isfinite(grads.flatten())):
            raise NumericalError("non-finite meta-gradient", iteration=iteration)
        params = self.learner.trainable(self.state)
        if self.cfg.optimizer == "adam":
            params, self.optimizer = adam_step(params, grads, self.optimizer, self.cfg.outer_lr)
        else:
            params = sgd_step(params, grads, self.cfg.outer_lr)
        self.state = self.learner.with_trainable(self.state, params)

    def record(self, iteration: int, value: float, what: str) -> None:
        if iteration % self.cfg.log_interval != 0 and iteration != self.cfg.iterations:
            return
        elapsed_ms = (time.perf_counter() - self.started) * 1000.0
        self.log.append(TrainLogRow(iteration=iteration, value=value, wall_ms=elapsed_ms if self.wall_clock else 0.0))
        logging.info(f"Iteration {iteration}/{self.cfg.iterations}: {what} {value:.6f} ({elapsed_ms:.0f} ms elapsed)")

    def result(self) -> TrainResult:
        return TrainResult(state=self.state, log=self.log, optimizer=self.optimizer, iterations=self.cfg.iterations)


# --- Supervised meta-training ---

def meta_train_supervised(
    learner: MetaLearner,
    state: Any,
    sample_task: TaskSampler,
    spec: MlpSpec,
    loss: SupervisedLoss,
    cfg: MetaTrainConfig,
    streams: SeedStreams,
    wall_clock: bool = False,
    optimizer: Optional[AdamState] = None,
) -> TrainResult:
    """
    Meta-trains on tasks from `sample_task`, minimising the summed
    post-adaptation test loss over each meta-batch.

    Raises:
        NumericalError: If the outer loss or gradient becomes non-finite; the
            message carries the iteration index.
    """
    loop = _OuterLoop(learner, state, cfg, wall_clock, optimizer)
    forward = mlp_forward_fn(spec)
    for iteration in range(1, cfg.iterations + 1):
        rng = streams.stream("tasks", iteration)
        tape, meta_vars = loop.begin()
        total, losses = None, []
        try:
            for _ in range(cfg.meta_batch):
                task = sample_task(rng)
                adapted = learner.adapt(loop.state, tape, meta_vars, supervised_loss(forward, loss, task.train_x, task.train_y), cfg.first_order)
                test = meta_loss(adapted, supervised_loss(forward, loss, task.test_x, task.test_y))
                losses.append(test.item())
                total = test if total is None else ad.add(total, test)
        except NumericalError as e:
            raise NumericalError(str(e), iteration=iteration) from e
        loop.update(iteration, total, meta_vars)
        loop.record(iteration, float(np.mean(losses)), "mean meta-test loss")
    return loop.result()


# --- RL meta-training ---

def meta_train_rl(
    learner: MetaLearner,
    state: Any,
    mode: NavMode,
    spec: MlpSpec,
    cfg: MetaTrainConfig,
    rl_cfg: RlTrainConfig,
    streams: SeedStreams,
    wall_clock: bool = False,
    optimizer: Optional[AdamState] = None,
) -> TrainResult:
    """
    Per task: N1 rollouts with the initial policy, one differentiable inner
    step on their surrogate loss, N2 rollouts with the adapted policy, and the
    adapted policy's surrogate loss on those. The outer step descends the sum
    of the post-adaptation losses; the log records the mean post-adaptation
    return.
    """
    loop = _OuterLoop(learner, state, cfg, wall_clock, optimizer)
    for iteration in range(1, cfg.iterations + 1):
        task_rng = streams.stream("tasks", iteration)
        rollout_rng = streams.stream("rollouts", iteration)
        tape, meta_vars = loop.begin()
        total, returns = None, []
        try:
            for _ in range(cfg.meta_batch):
                mdp = sample_nav_task(mode, task_rng, rl_cfg)
                pre = rollouts(learner.base_params(loop.state), spec, mdp, rl_cfg.n1, rollout_rng)
                adapted = learner.adapt(loop.state, tape, meta_vars, _pg_loss(pre, spec, rl_cfg.gamma), cfg.first_order)
                post = rollouts(ParamSet.from_vars(adapted.params), spec, mdp, rl_cfg.n2, rollout_rng)
                post_loss = pg_surrogate_loss(post, adapted.params, spec, rl_cfg.gamma)
                returns.append(mean_return(post))
                total = post_loss if total is None else ad.add(total, post_loss)
        except NumericalError as e:
            raise NumericalError(str(e), iteration=iteration) from e
        loop.update(iteration, total, meta_vars)
        loop.record(iteration, float(np.mean(returns)), "mean post-adaptation return")
    return loop.result()


def _pg_loss(trajectories, spec: MlpSpec, gamma: float) -> LossFn:
    return lambda params: pg_surrogate_loss(trajectories, params, spec, gamma)


# --- Evaluation drivers ---

def supervised_adapter(learner: MetaLearner, spec: MlpSpec, loss: SupervisedLoss) -> AdaptFn:
    """Adapts on a task's training set and predicts with the adapted network."""
    forward = mlp_forward_fn(spec)

    def adapt_fn(state: Any, task: FewShotTask):
        params = learner.adapted_params(state, supervised_loss(forward, loss, task.train_x, task.train_y))
        return lambda x: mlp_apply(spec, params, x)

    return adapt_fn


def evaluate_sine(learner: MetaLearner, state: Any, spec: MlpSpec, task_cfg: SineTaskConfig, eval_cfg, streams: SeedStreams) -> dict[str, tuple[float, float]]:
    """Meta-test MSE for every testing shot count, keyed 'sine/<K>-shot'."""
    adapt_fn = supervised_adapter(learner, spec, ad.mse_loss)
    results = {}
    for k in eval_cfg.shots:
        rng = streams.stream("eval", k)
        results[f"sine/{k}-shot"] = evaluate_regression(
            state, adapt_fn, task_cfg, rng, eval_cfg.n_curves, eval_cfg.test_points, eval_cfg.repeats, shots=k
        )
    return results


def evaluate_cluster(learner: MetaLearner, state: Any, spec: MlpSpec, task_cfg: ClusterTaskConfig, eval_cfg, streams: SeedStreams) -> dict[str, tuple[float, float]]:
    """Mean test accuracy keyed 'cluster/<N>-way-<K>-shot', one entry per testing shot count."""
    adapt_fn = supervised_adapter(learner, spec, ad.softmax_cross_entropy)
    results = {}
    for k in eval_cfg.shots:
        rng = streams.stream("eval", k)
        results[f"cluster/{task_cfg.ways}-way-{k}-shot"] = evaluate_classification(
            state, adapt_fn, task_cfg, rng, eval_cfg.classification_tasks, shots=k
        )
    return results


@dataclass(frozen=True)
class RlEvaluation:
    mean: float
    ci95_half: float
    pre_mean: float
    pre_ci95_half: float
    improved_fraction: float


def evaluate_rl(
    learner: MetaLearner,
    state: Any,
    mode: NavMode,
    spec: MlpSpec,
    rl_cfg: RlTrainConfig,
    streams: SeedStreams,
    n_tasks: Optional[int] = None,
) -> RlEvaluation:
    """
    Per task: N1 rollouts, one inner adaptation, N2 fresh rollouts with the
    adapted policy; the task score is their mean undiscounted return. Gamma only
    enters through the surrogate loss used for adaptation.
    """
    n_tasks = rl_cfg.eval_tasks if n_tasks is None else n_tasks
    rng = streams.stream("eval", 0)
    pre_returns, post_returns = [], []
    for _ in range(n_tasks):
        mdp = sample_nav_task(mode, rng, rl_cfg)
        pre = rollouts(learner.base_params(state), spec, mdp, rl_cfg.n1, rng)
        adapted = learner.adapted_params(state, _pg_loss(pre, spec, rl_cfg.gamma))
        post = rollouts(adapted, spec, mdp, rl_cfg.n2, rng)
        pre_returns.append(mean_return(pre))
        post_returns.append(mean_return(post))
    mean, half = confidence_interval(post_returns)
    pre_mean, pre_half = confidence_interval(pre_returns)
    improved = float(np.mean(np.asarray(post_returns) > np.asarray(pre_returns)))
    return RlEvaluation(mean=mean, ci95_half=half, pre_mean=pre_mean, pre_ci95_half=pre_half, improved_fraction=improved)
