"""
2D point navigation: task sampling, Gaussian-policy rollouts and the
REINFORCE surrogate loss used for inner adaptation.

The agent starts at `start`, each action is added to the state, and the
reward is the negative distance from the new state to the goal. An episode
ends once the agent is within `goal_threshold` of the goal or after
`horizon` steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Mapping, Optional, Sequence

import numpy as np

import autodiff as ad
from data_models import MlpSpec, NavMdp, RlTrainConfig
from errors import NumericalError
from models import mlp_apply, policy_forward
from seeding import box_muller

NavMode = Literal["fixed", "random"]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Trajectory:
    """States [L+1 × 2], actions [L × 2] and rewards [L] of one episode."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


def sample_nav_task(mode: NavMode, rng: np.random.Generator, cfg: Optional[RlTrainConfig] = None) -> NavMdp:
    """
    A goal uniform in the unit square; the start is the origin in fixed mode
    and uniform in the same square in random mode.
    """
    cfg = cfg or RlTrainConfig()
    goal = rng.uniform(-0.5, 0.5, size=2)
    start = rng.uniform(-0.5, 0.5, size=2) if mode == "random" else np.zeros(2)
    return NavMdp(
        start=tuple(float(v) for v in start),
        goal=tuple(float(v) for v in goal),
        horizon=cfg.horizon,
        goal_threshold=cfg.goal_threshold,
        gamma=cfg.gamma,
    )


def _transition(goal: np.ndarray, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows of next states and their rewards for rows of states and actions."""
    if not np.all(np.isfinite(actions)):
        raise NumericalError(f"non-finite action {actions}")
    next_states = states + actions
    return next_states, -np.linalg.norm(next_states - goal, axis=-1)


def _done(mdp: NavMdp, rewards: np.ndarray) -> np.ndarray:
    return -rewards <= mdp.goal_threshold


def step(mdp: NavMdp, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
    """
    Applies one action.

    Raises:
        NumericalError: If the action is not finite.
    """
    next_state, reward = _transition(
        np.asarray(mdp.goal), np.asarray(state, dtype=np.float64), np.asarray(action, dtype=np.float64)
    )
    return next_state, float(reward)


def rollouts(policy: Mapping[str, np.ndarray], spec: MlpSpec, mdp: NavMdp, n: int, rng: np.random.Generator) -> list[Trajectory]:
    """
    Samples n trajectories in lockstep.

    Actions are drawn from N(mean(state), diag(exp(log_var))) with Box-Muller
    noise; trajectories that reach the goal drop out while the rest continue.
    """
    goal = np.asarray(mdp.goal)
    std = np.exp(0.5 * np.asarray(policy["log_var"], dtype=np.float64))
    if not np.all(np.isfinite(std)):
        raise NumericalError("degenerate policy: non-finite log-variance")
    states = [[np.asarray(mdp.start, dtype=np.float64)] for _ in range(n)]
    actions: list[list[np.ndarray]] = [[] for _ in range(n)]
    rewards: list[list[float]] = [[] for _ in range(n)]
    current = np.tile(np.asarray(mdp.start, dtype=np.float64), (n, 1))
    active = ~_done(mdp, -np.linalg.norm(current - goal, axis=1))
    for _ in range(mdp.horizon):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        mean = mlp_apply(spec, policy, current[idx])
        action = mean + std * box_muller(rng, (idx.size, 2))
        nxt, reward = _transition(goal, current[idx], action)
        for row, k in enumerate(idx):
            actions[k].append(action[row])
            states[k].append(nxt[row])
            rewards[k].append(float(reward[row]))
        current[idx] = nxt
        active[idx] = ~_done(mdp, reward)
    return [
        Trajectory(
            states=np.array(s),
            actions=np.array(a).reshape(len(a), 2),
            rewards=np.array(r, dtype=np.float64),
        )
        for s, a, r in zip(states, actions, rewards)
    ]


def rollout(policy: Mapping[str, np.ndarray], spec: MlpSpec, mdp: NavMdp, rng: np.random.Generator) -> Trajectory:
    return rollouts(policy, spec, mdp, 1, rng)[0]


def discounted_return(rewards: Sequence[float] | Trajectory, gamma: float) -> float:
    """sum_t gamma^t r_t."""
    if isinstance(rewards, Trajectory):
        rewards = rewards.rewards
    total, discount = 0.0, 1.0
    for r in rewards:
        total += discount * float(r)
        discount *= gamma
    return total


def reward_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """G_t = sum_{t' >= t} gamma^(t'-t) r_t'."""
    out = np.zeros(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = float(rewards[t]) + gamma * running
        out[t] = running
    return out


def pg_surrogate_loss(trajectories: Sequence[Trajectory], params: Mapping[str, ad.Var], spec: MlpSpec, gamma: float) -> ad.Var:
    """
    -(1/N) sum_traj sum_t log pi(a_t|s_t) G_t for the diagonal Gaussian policy.

    Its gradient is the REINFORCE estimator and it stays differentiable with
    respect to `params`, so it can serve as an inner training loss. Trajectory
    data are constants; zero-length trajectories still count towards N.

    Raises:
        ValueError: If no trajectories are given.
    """
    if not trajectories:
        raise ValueError("pg_surrogate_loss needs at least one trajectory.")
    tape = params["log_var"].tape
    n = len(trajectories)
    steps = [t for t in trajectories if len(t)]
    log_var = params["log_var"]
    if not np.all(np.isfinite(log_var.tape.nodes[log_var.id].value)):
        raise NumericalError("degenerate policy: non-finite log-variance")
    if not steps:
        return ad.scale(ad.reduce_sum(log_var), 0.0)

    states = np.concatenate([t.states[:-1] for t in steps])
    actions = np.concatenate([t.actions for t in steps])
    returns = np.concatenate([reward_to_go(t.rewards, gamma) for t in steps])
    action_dim = actions.shape[1]

    mean, log_var = policy_forward(spec, params, ad.constant(tape, states))
    # -log pi = 0.5 * sum_d [(a - mu)^2 exp(-log_var) + log_var + log 2pi]
    sq_dev = ad.square(ad.sub(ad.constant(tape, actions), mean))
    weighted = ad.matmul(ad.constant(tape, returns.reshape(1, -1)), sq_dev)
    inv_var = ad.reshape(ad.exp(ad.neg(log_var)), (1, action_dim))
    total_return = float(returns.sum())
    quadratic = ad.reduce_sum(ad.mul(weighted, inv_var))
    normaliser = ad.scale(ad.reduce_sum(log_var), total_return)
    nll = ad.shift(ad.add(quadratic, normaliser), total_return * action_dim * _LOG_2PI)
    return ad.scale(nll, 0.5 / n)


def episode_return(traj: Trajectory) -> float:
    """The undiscounted reward sum of one episode."""
    return float(traj.rewards.sum())


def mean_return(trajectories: Sequence[Trajectory]) -> float:
    """Mean undiscounted return over trajectories; this is what evaluation and the train log report."""
    return float(np.mean([episode_return(t) for t in trajectories]))
