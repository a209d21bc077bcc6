"""
Gradient-check suites for the autodiff engine, the meta-learners and the
policy-gradient surrogate.

Each suite compares analytic gradients against central finite differences
(h = 1e-5, float64) or against a closed form, and reports the largest
relative error ||a - n|| / max(||a||, ||n||, 1e-12) against its tolerance.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import pandas as pd

import autodiff as ad
from data_models import GradCheckResult, MlpSpec, NavMdp
from metalearners import (
    LrLstmLearner,
    MamlLearner,
    MetaLearner,
    MetaSgdLearner,
    init_lstm_phi,
    lstm_input_size,
    meta_sgd_adapt,
    mlp_forward_fn,
    supervised_loss,
)
from models import ParamSet, init_mlp, init_policy, split_params
from rl import pg_surrogate_loss, rollouts
from state_models import LrLstmState, MamlState, MetaSgdState
from tracer import trace

FD_STEP = 1e-5
OP_TOLERANCE = 1e-6
CLOSED_FORM_TOLERANCE = 1e-9
META_TOLERANCE = 1e-5
RL_META_TOLERANCE = 1e-4


@dataclass
class GradCase:
    """A scalar function of some input arrays, built on a fresh tape each call."""

    name: str
    build: Callable[[list[ad.Var]], ad.Var]
    arrays: list[np.ndarray]


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    a = np.concatenate([np.ravel(x) for x in analytic]) if analytic else np.zeros(0)
    n = np.concatenate([np.ravel(x) for x in numeric]) if numeric else np.zeros(0)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def _evaluate(case: GradCase, arrays: Sequence[np.ndarray]) -> tuple[ad.Var, list[ad.Var]]:
    tape = ad.Tape()
    inputs = [ad.var(tape, a) for a in arrays]
    return case.build(inputs), inputs


def analytic_gradient(case: GradCase, arrays: Optional[Sequence[np.ndarray]] = None) -> list[np.ndarray]:
    out, inputs = _evaluate(case, case.arrays if arrays is None else arrays)
    return ad.grad_values(out, inputs)


def numeric_gradient(case: GradCase, h: float = FD_STEP) -> list[np.ndarray]:
    grads = []
    for i, base in enumerate(case.arrays):
        g = np.zeros_like(base)
        for j in np.ndindex(base.shape):
            values = []
            for sign in (1.0, -1.0):
                arrays = [a.copy() for a in case.arrays]
                arrays[i][j] += sign * h
                values.append(_evaluate(case, arrays)[0].item())
            g[j] = (values[0] - values[1]) / (2.0 * h)
        grads.append(g)
    return grads


def hessian_vector_error(case: GradCase, rng: np.random.Generator, h: float = FD_STEP) -> float:
    """Hessian-vector product through create_graph vs differences of first-order gradients."""
    directions = [rng.standard_normal(a.shape) for a in case.arrays]
    out, inputs = _evaluate(case, case.arrays)
    grads = ad.grad(out, inputs, create_graph=True)
    tape = out.tape
    dot = None
    for g, d in zip(grads, directions):
        term = ad.reduce_sum(ad.mul(g, ad.constant(tape, d)))
        dot = term if dot is None else ad.add(dot, term)
    analytic = ad.grad_values(dot, inputs)
    plus = analytic_gradient(case, [a + h * d for a, d in zip(case.arrays, directions)])
    minus = analytic_gradient(case, [a - h * d for a, d in zip(case.arrays, directions)])
    numeric = [(p - m) / (2.0 * h) for p, m in zip(plus, minus)]
    return relative_error(analytic, numeric)


@contextmanager
def inject_sign_fault(op: str) -> Iterator[None]:
    """Negates every vector-Jacobian product of `op` while active."""
    original = ad.VJP_RULES[op]

    def faulty(F, g, xs, out, vals, p):
        return tuple((lambda thunk=thunk: F.neg(thunk())) for thunk in original(F, g, xs, out, vals, p))

    ad.VJP_RULES[op] = faulty
    try:
        yield
    finally:
        ad.VJP_RULES[op] = original


def _result(suite: str, errors: dict[str, float], tolerance: float) -> GradCheckResult:
    worst = max(errors, key=errors.get)
    return GradCheckResult(
        suite=suite,
        max_rel_error=errors[worst],
        tolerance=tolerance,
        passed=all(e <= tolerance for e in errors.values()),
        worst_case=worst,
    )


# --- Per-op cases ---

def op_cases(rng: np.random.Generator) -> list[GradCase]:
    """One case per primitive op and loss; each output is contracted with fixed random weights."""

    def weighted(fn: Callable[..., ad.Var], out_shape: tuple[int, ...]) -> Callable[[list[ad.Var]], ad.Var]:
        weights = rng.standard_normal(out_shape)

        def build(xs: list[ad.Var]) -> ad.Var:
            out = fn(*xs)
            return ad.reduce_sum(ad.mul(out, ad.constant(out.tape, weights)))

        return build

    def normal(*shape):
        return np.asarray(rng.standard_normal(shape))

    def positive(*shape):
        return rng.uniform(0.5, 2.0, shape)

    def away_from_zero(*shape):
        return rng.uniform(0.2, 1.5, shape) * rng.choice([-1.0, 1.0], shape)

    labels = np.eye(4)[rng.integers(0, 4, 3)]
    target = normal(3, 2)
    unary = {
        "neg": ad.neg,
        "square": ad.square,
        "exp": ad.exp,
        "tanh": ad.tanh,
        "sigmoid": ad.sigmoid,
        "sin": ad.sin,
        "cos": ad.cos,
    }
    cases = [GradCase(name, weighted(fn, (3, 4)), [normal(3, 4)]) for name, fn in unary.items()]
    cases += [
        GradCase("add", weighted(ad.add, (3, 4)), [normal(3, 4), normal(3, 4)]),
        GradCase("sub", weighted(ad.sub, (3, 4)), [normal(3, 4), normal(3, 4)]),
        GradCase("mul", weighted(ad.mul, (3, 4)), [normal(3, 4), normal(3, 4)]),
        GradCase("scale", weighted(lambda x: ad.scale(x, 1.7), (3, 4)), [normal(3, 4)]),
        GradCase("shift", weighted(lambda x: ad.shift(x, -0.3), (3, 4)), [normal(3, 4)]),
        GradCase("log", weighted(ad.log, (3, 4)), [positive(3, 4)]),
        GradCase("reciprocal", weighted(ad.reciprocal, (3, 4)), [positive(3, 4)]),
        GradCase("relu", weighted(ad.relu, (3, 4)), [away_from_zero(3, 4)]),
        GradCase("matmul", weighted(ad.matmul, (3, 2)), [normal(3, 4), normal(4, 2)]),
        GradCase("transpose", weighted(ad.transpose, (4, 3)), [normal(3, 4)]),
        GradCase("add_bias_row", weighted(ad.add_bias_row, (3, 4)), [normal(3, 4), normal(4)]),
        GradCase("sum_rows", weighted(ad.sum_rows, (4,)), [normal(3, 4)]),
        GradCase("sum", weighted(ad.reduce_sum, ()), [normal(3, 4)]),
        GradCase("mean", weighted(ad.reduce_mean, ()), [normal(3, 4)]),
        GradCase("fill", weighted(lambda s: ad.fill(s, (2, 3)), (2, 3)), [normal()]),
        GradCase("reshape", weighted(lambda x: ad.reshape(x, (2, 6)), (2, 6)), [normal(3, 4)]),
        GradCase("concat", weighted(lambda a, b: ad.concat([a, b]), (5,)), [normal(3), normal(2)]),
        GradCase("slice_vec", weighted(lambda x: ad.slice_vec(x, 1, 4), (3,)), [normal(5)]),
        GradCase("pad_vec", weighted(lambda x: ad.pad_vec(x, 2, 6), (6,)), [normal(3)]),
        GradCase("mse_loss", lambda xs: ad.mse_loss(xs[0], target), [normal(3, 2)]),
        GradCase("softmax_cross_entropy", lambda xs: ad.softmax_cross_entropy(xs[0], labels), [normal(3, 4)]),
    ]
    return cases


@trace
def check_ops(seed: int = 0) -> GradCheckResult:
    cases = op_cases(np.random.default_rng(seed))
    errors = {c.name: relative_error(analytic_gradient(c), numeric_gradient(c)) for c in cases}
    return _result("ops", errors, OP_TOLERANCE)


@trace
def check_second_order_ops(seed: int = 0) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    cases = op_cases(rng)
    errors = {c.name: hessian_vector_error(c, rng) for c in cases}
    return _result("second_order_ops", errors, OP_TOLERANCE)


@trace
def check_hessian(seed: int = 0) -> GradCheckResult:
    """grad(grad(x^T A x)) against the analytic Hessian 2A."""
    rng = np.random.default_rng(seed)
    root = rng.standard_normal((3, 3))
    a = root + root.T
    tape = ad.Tape()
    x = ad.var(tape, rng.standard_normal(3))
    f = _quadratic_form(x, a, 1.0)
    (g,) = ad.grad(f, [x], create_graph=True)
    rows = [ad.grad_values(ad.reduce_sum(ad.mul(g, ad.constant(tape, np.eye(3)[i]))), [x])[0] for i in range(3)]
    return _result("hessian", {"x^T A x": relative_error([np.stack(rows)], [2.0 * a])}, CLOSED_FORM_TOLERANCE)


# --- Meta-gradient oracles ---

def _quadratic_form(v: ad.Var, matrix: np.ndarray, coefficient: float) -> ad.Var:
    n = v.dims[0]
    col = ad.reshape(v, (n, 1))
    return ad.scale(ad.reduce_sum(ad.mul(col, ad.matmul(ad.constant(v.tape, matrix), col))), coefficient)


@dataclass(frozen=True)
class QuadraticProblem:
    """Train loss 0.5 th^T A th, test loss 0.5 (th' - c)^T B (th' - c), one Meta-SGD step."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray

    @classmethod
    def default(cls) -> "QuadraticProblem":
        return cls(
            a=np.array([[2.0, 0.5, 0.0], [0.5, 1.5, 0.25], [0.0, 0.25, 1.0]]),
            b=np.array([[1.0, 0.2, 0.1], [0.2, 2.0, 0.0], [0.1, 0.0, 0.5]]),
            c=np.array([0.3, -0.7, 1.1]),
            theta=np.array([1.0, -0.5, 2.0]),
            alpha=np.array([0.1, 0.05, 0.2]),
        )

    def meta_gradient(self, first_order: bool) -> tuple[np.ndarray, np.ndarray]:
        tape = ad.Tape()
        theta = ad.var(tape, self.theta)
        alpha = ad.var(tape, self.alpha)
        adapted = meta_sgd_adapt(
            {"theta": theta},
            {"theta": alpha},
            lambda p: _quadratic_form(p["theta"], self.a, 0.5),
            first_order=first_order,
        )
        shifted = ad.sub(adapted.params["theta"], ad.constant(tape, self.c))
        d_theta, d_alpha = ad.grad_values(_quadratic_form(shifted, self.b, 0.5), [theta, alpha])
        return d_theta, d_alpha

    def closed_form(self) -> dict[str, np.ndarray]:
        """Hand-derived gradients: M = I - diag(alpha) A, r = B (theta' - c)."""
        g = self.a @ self.theta
        r = self.b @ (self.theta - self.alpha * g - self.c)
        hessian_term = -self.a @ (self.alpha * r)
        return {
            "theta": r + hessian_term,
            "alpha": -r * g,
            "theta_first_order": r,
            "hessian_term": hessian_term,
        }


@trace
def check_quadratic_meta_gradient() -> GradCheckResult:
    problem = QuadraticProblem.default()
    expected = problem.closed_form()
    d_theta, d_alpha = problem.meta_gradient(first_order=False)
    errors = {
        "theta": relative_error([d_theta], [expected["theta"]]),
        "alpha": relative_error([d_alpha], [expected["alpha"]]),
    }
    return _result("quadratic_meta_gradient", errors, CLOSED_FORM_TOLERANCE)


@trace
def check_first_order_ablation() -> GradCheckResult:
    """The stop-gradient meta-gradient differs from the full one by exactly the Hessian term."""
    problem = QuadraticProblem.default()
    expected = problem.closed_form()
    full_theta, _ = problem.meta_gradient(first_order=False)
    fo_theta, fo_alpha = problem.meta_gradient(first_order=True)
    errors = {
        "first_order_theta": relative_error([fo_theta], [expected["theta_first_order"]]),
        "first_order_alpha": relative_error([fo_alpha], [expected["alpha"]]),
        "difference": relative_error([full_theta - fo_theta], [expected["hessian_term"]]),
    }
    return _result("first_order_ablation", errors, CLOSED_FORM_TOLERANCE)


def meta_gradient_case(learner: MetaLearner, state, build_losses) -> GradCase:
    """
    Wraps (adapt on the training loss, then meta-loss on the test loss) as a
    function of the learner's trainable meta-parameters.
    """
    trainable = learner.trainable(state)
    names = trainable.names()

    def build(xs: list[ad.Var]) -> ad.Var:
        tape = xs[0].tape
        meta_vars = dict(zip(names, xs))
        train_loss, test_loss = build_losses(meta_vars)
        adapted = learner.adapt(state, tape, meta_vars, train_loss, first_order=False)
        return test_loss(adapted.params)

    return GradCase(learner.name, build, [trainable[n].copy() for n in names])


def _randomized(learner: MetaLearner, state, rng: np.random.Generator, scale: float = 0.5):
    trainable = learner.trainable(state)
    return learner.with_trainable(state, trainable.unflatten(rng.uniform(-scale, scale, trainable.size)))


def tiny_regression_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    spec = MlpSpec(layer_sizes=[1, 3, 1], activation="tanh")
    train_x = np.linspace(-2.0, 2.0, 4).reshape(4, 1)
    test_x = np.linspace(-1.5, 2.5, 5).reshape(5, 1)
    forward = mlp_forward_fn(spec)
    losses = lambda _: (
        supervised_loss(forward, ad.mse_loss, train_x, np.sin(train_x)),
        supervised_loss(forward, ad.mse_loss, test_x, np.sin(test_x)),
    )

    theta = init_mlp(spec, rng)
    metasgd = MetaSgdLearner(learn_alpha=True)
    metasgd_state = _randomized(metasgd, MetaSgdState(theta=theta, alpha=theta.full_like(0.1)), rng)
    maml = MamlLearner(alpha=0.1, inner_steps=2)
    maml_state = _randomized(maml, MamlState(theta=theta, alpha_scalar=0.1, inner_steps=2), rng)

    # Task-specific layer of 3 values, hidden size 4, two unrolled steps.
    lstm_spec = MlpSpec(layer_sizes=[1, 2, 1], activation="tanh")
    composite = split_params(init_mlp(lstm_spec, rng), 1)
    lstm = LrLstmLearner(hidden_size=4, beta=0.5, steps=2, split_layer=1, init_scale=0.5, forget_bias=1.0)
    lstm_state = LrLstmState(
        phi=init_lstm_phi(rng, lstm_input_size(composite.task_specific.size), 4, 0.5, 1.0),
        beta_scale=0.5,
        theta1=composite.shared,
        theta2_init=composite.task_specific,
        steps_T=2,
        hidden_size=4,
        split_layer=1,
        spec=lstm_spec,
    )
    lstm_state = _randomized(lstm, lstm_state, rng)
    lstm_forward = mlp_forward_fn(lstm_spec)
    lstm_losses = lambda _: (
        supervised_loss(lstm_forward, ad.mse_loss, train_x, np.sin(train_x)),
        supervised_loss(lstm_forward, ad.mse_loss, test_x, np.sin(test_x)),
    )
    return [
        meta_gradient_case(metasgd, metasgd_state, losses),
        meta_gradient_case(maml, maml_state, losses),
        meta_gradient_case(lstm, lstm_state, lstm_losses),
    ]


@trace
def check_meta_gradients(seed: int = 0) -> GradCheckResult:
    errors = {c.name: relative_error(analytic_gradient(c), numeric_gradient(c)) for c in tiny_regression_cases(seed)}
    return _result("meta_gradients", errors, META_TOLERANCE)


# --- Policy gradient ---

@dataclass(frozen=True)
class PolicyFixture:
    spec: MlpSpec
    policy: ParamSet
    pre: list
    post: list
    gamma: float


def policy_fixture(seed: int = 0) -> PolicyFixture:
    """A small tanh policy and two frozen pairs of short trajectories."""
    rng = np.random.default_rng(seed)
    spec = MlpSpec(layer_sizes=[2, 4, 2], activation="tanh")
    base = init_policy(spec, rng)
    policy = base.unflatten(rng.uniform(-0.3, 0.3, base.size))
    mdp = NavMdp(start=(0.0, 0.0), goal=(0.3, -0.2), horizon=5, goal_threshold=0.01, gamma=0.9)
    return PolicyFixture(
        spec=spec,
        policy=policy,
        pre=rollouts(policy, spec, mdp, 2, rng),
        post=rollouts(policy, spec, mdp, 2, rng),
        gamma=0.9,
    )


@trace
def check_policy_gradient(seed: int = 0) -> GradCheckResult:
    fx = policy_fixture(seed)
    names = fx.policy.names()
    case = GradCase(
        "pg_surrogate_loss",
        lambda xs: pg_surrogate_loss(fx.pre, dict(zip(names, xs)), fx.spec, fx.gamma),
        [fx.policy[n].copy() for n in names],
    )
    return _result("policy_gradient", {case.name: relative_error(analytic_gradient(case), numeric_gradient(case))}, OP_TOLERANCE)


@trace
def check_rl_meta_gradient(seed: int = 0) -> GradCheckResult:
    """Meta-SGD through one surrogate-loss inner step, on frozen trajectories."""
    fx = policy_fixture(seed)
    learner = MetaSgdLearner(learn_alpha=True)
    state = MetaSgdState(theta=fx.policy, alpha=fx.policy.full_like(0.05))
    losses = lambda _: (
        lambda p: pg_surrogate_loss(fx.pre, p, fx.spec, fx.gamma),
        lambda p: pg_surrogate_loss(fx.post, p, fx.spec, fx.gamma),
    )
    case = meta_gradient_case(learner, state, losses)
    return _result("rl_meta_gradient", {"metasgd": relative_error(analytic_gradient(case), numeric_gradient(case))}, RL_META_TOLERANCE)


SUITES: dict[str, Callable[[], GradCheckResult]] = {
    "ops": check_ops,
    "second_order_ops": check_second_order_ops,
    "hessian": check_hessian,
    "quadratic_meta_gradient": check_quadratic_meta_gradient,
    "first_order_ablation": check_first_order_ablation,
    "meta_gradients": check_meta_gradients,
    "policy_gradient": check_policy_gradient,
    "rl_meta_gradient": check_rl_meta_gradient,
}


@trace
def run_gradcheck(suites: Optional[Sequence[str]] = None, sign_fault: Optional[str] = None) -> list[GradCheckResult]:
    """
    Runs the named suites (all by default). `sign_fault` names an op whose
    vector-Jacobian product is negated for the duration of the run.
    """
    selected = list(SUITES) if suites is None else list(suites)
    unknown = [s for s in selected if s not in SUITES]
    if unknown:
        raise ValueError(f"Unknown gradcheck suite(s): {', '.join(unknown)}")
    if sign_fault is not None and sign_fault not in ad.VJP_RULES:
        raise ValueError(f"Cannot inject a fault into unknown op '{sign_fault}'.")
    if sign_fault is None:
        return [SUITES[s]() for s in selected]
    with inject_sign_fault(sign_fault):
        return [SUITES[s]() for s in selected]


def format_report(results: Sequence[GradCheckResult]) -> str:
    frame = pd.DataFrame([r.model_dump() for r in results], columns=["suite", "max_rel_error", "tolerance", "passed", "worst_case"])
    return frame.to_string(index=False, float_format=lambda v: f"{v:.3e}")
