"""
Episodic task distributions and the meta-testing protocols.

Two distributions are provided: K-shot sine regression and a synthetic
N-way K-shot Gaussian-cluster classification episode. Samplers are pure
functions of (config, generator state), so the same seeded stream always
yields the same tasks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from data_models import ClusterTaskConfig, SineTaskConfig
from utils import confidence_interval

# Maps an input batch to predictions (regression) or logits (classification).
Predictor = Callable[[np.ndarray], np.ndarray]
# Adapts a meta-state to one task and returns the adapted predictor.
AdaptFn = Callable[[Any, "FewShotTask"], Predictor]


@dataclass(frozen=True)
class FewShotTask:
    """One episode: a training (support) set and a testing (query) set."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    descriptor: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.train_x.shape[0] < 1 or self.test_x.shape[0] < 1:
            raise ValueError("A task needs at least one training and one testing example.")

    @property
    def m_train(self) -> int:
        return int(self.train_x.shape[0])

    @property
    def m_test(self) -> int:
        return int(self.test_x.shape[0])


# --- Sine regression ---

def eval_sine(amplitude: float, omega: float, phase: float, x: Any) -> Any:
    """y = A sin(omega x + b)."""
    return amplitude * np.sin(omega * np.asarray(x, dtype=np.float64) + phase)


def sample_sine_curve(cfg: SineTaskConfig, rng: np.random.Generator) -> dict[str, float]:
    return {
        "amplitude": float(rng.uniform(*cfg.amplitude_range)),
        "omega": float(rng.uniform(*cfg.frequency_range)),
        "phase": float(rng.uniform(*cfg.phase_range)),
    }


def sine_task_for_curve(
    curve: dict[str, float],
    cfg: SineTaskConfig,
    rng: np.random.Generator,
    shots: Optional[int] = None,
    test_x: Optional[np.ndarray] = None,
) -> FewShotTask:
    """Samples training inputs (and testing inputs unless given) for a fixed curve."""
    shots = cfg.shots if shots is None else shots
    train_x = rng.uniform(*cfg.input_range, size=(shots, 1))
    if test_x is None:
        test_x = rng.uniform(*cfg.input_range, size=(cfg.test_size, 1))
    return FewShotTask(
        train_x=train_x,
        train_y=eval_sine(curve["amplitude"], curve["omega"], curve["phase"], train_x),
        test_x=test_x,
        test_y=eval_sine(curve["amplitude"], curve["omega"], curve["phase"], test_x),
        descriptor=dict(curve),
    )


def sample_sine_task(cfg: SineTaskConfig, rng: np.random.Generator, shots: Optional[int] = None) -> FewShotTask:
    """A random curve with K training and test_size testing inputs, all uniform in the input range."""
    return sine_task_for_curve(sample_sine_curve(cfg, rng), cfg, rng, shots)


def sine_grid(n: int, input_range: tuple[float, float] = (-5.0, 5.0)) -> np.ndarray:
    """n evenly spaced inputs covering the range, both endpoints included, as an [n×1] column."""
    return np.linspace(input_range[0], input_range[1], n).reshape(n, 1)


# --- Cluster classification ---

def sample_cluster_task(cfg: ClusterTaskConfig, rng: np.random.Generator, shots: Optional[int] = None) -> FewShotTask:
    """
    N centers uniform in the center range; each example is its class center
    plus isotropic Gaussian noise of stddev `spread`. Examples are grouped by
    class, labels are one-hot.
    """
    shots = cfg.shots if shots is None else shots
    centers = rng.uniform(*cfg.center_range, size=(cfg.ways, cfg.input_dim))

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(cfg.ways), per_class)
        noise = rng.standard_normal((labels.size, cfg.input_dim)) * cfg.spread
        return centers[labels] + noise, np.eye(cfg.ways)[labels]

    train_x, train_y = draw(shots)
    test_x, test_y = draw(cfg.queries)
    return FewShotTask(train_x, train_y, test_x, test_y, descriptor={"centers": centers})


# --- Meta-testing protocols ---

def evaluate_regression(
    meta_state: Any,
    adapt_fn: AdaptFn,
    cfg: SineTaskConfig,
    rng: np.random.Generator,
    n_curves: int = 100,
    test_points: int = 100,
    repeats: int = 100,
    shots: Optional[int] = None,
) -> tuple[float, float]:
    """
    Mean meta-test MSE and its 95% CI half-width.

    For each sampled curve: draw K training points, adapt, measure the MSE on
    the evenly spaced grid; average over `repeats` draws. The CI is taken
    across the per-curve averages.
    """
    grid = sine_grid(test_points, cfg.input_range)
    per_curve = []
    for _ in range(n_curves):
        curve = sample_sine_curve(cfg, rng)
        errors = []
        for _ in range(repeats):
            task = sine_task_for_curve(curve, cfg, rng, shots, test_x=grid)
            predict = adapt_fn(meta_state, task)
            errors.append(float(np.mean((predict(task.test_x) - task.test_y) ** 2)))
        per_curve.append(float(np.mean(errors)))
    return confidence_interval(per_curve)


def evaluate_classification(
    meta_state: Any,
    adapt_fn: AdaptFn,
    cfg: ClusterTaskConfig,
    rng: np.random.Generator,
    n_tasks: int = 1000,
    shots: Optional[int] = None,
) -> tuple[float, float]:
    """Mean episode accuracy on the testing sets and its 95% CI half-width."""
    accuracies = []
    for _ in range(n_tasks):
        task = sample_cluster_task(cfg, rng, shots)
        logits = adapt_fn(meta_state, task)(task.test_x)
        accuracies.append(float(np.mean(np.argmax(logits, axis=1) == np.argmax(task.test_y, axis=1))))
    return confidence_interval(accuracies)
