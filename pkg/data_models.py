"""
Defines the configuration and record structures for MetaLab using Pydantic.

Every knob an experiment exposes lives in one of these validated models, so an
invalid value is rejected at load time with the offending key named, rather
than surfacing as a numerical failure thousands of iterations later. The
top-level RunConfig bundles them and fills experiment-specific defaults.
"""
import copy
import math
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

import config

Range = tuple[float, float]


def _check_range(value: Range) -> Range:
    low, high = value
    if not (math.isfinite(low) and math.isfinite(high)) or low > high:
        raise ValueError(f"range must be finite with low <= high, got {value}")
    return value


class StrictModel(BaseModel):
    """Base for every config model: unknown keys are errors."""

    model_config = ConfigDict(extra="forbid")


class MlpSpec(StrictModel):
    """A fully connected base-learner: layer widths from input to output."""

    # Input width first, output width last; at least one affine layer.
    layer_sizes: list[int] = Field(..., min_length=2, description="Layer widths, input first.")
    # Applied to hidden layers only; the output layer is affine.
    activation: Literal["relu", "tanh"] = Field("relu", description="Hidden-layer nonlinearity.")

    @field_validator("layer_sizes")
    @classmethod
    def _positive(cls, sizes: list[int]) -> list[int]:
        if any(s <= 0 for s in sizes):
            raise ValueError("every layer size must be positive")
        return sizes

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


class SineTaskConfig(StrictModel):
    """Task distribution for K-shot sine regression, y = A sin(wx + b)."""

    amplitude_range: Range = config.SINE_AMPLITUDE_RANGE
    frequency_range: Range = config.SINE_FREQUENCY_RANGE
    phase_range: Range = config.SINE_PHASE_RANGE
    input_range: Range = config.SINE_INPUT_RANGE
    shots: int = Field(config.SINE_SHOTS, ge=1, description="Training examples per task (K).")
    test_size: int = Field(config.SINE_TEST_SIZE, ge=1, description="Testing examples per task.")

    @field_validator("amplitude_range", "frequency_range", "phase_range", "input_range")
    @classmethod
    def _ordered(cls, value: Range) -> Range:
        return _check_range(value)


class ClusterTaskConfig(StrictModel):
    """Synthetic N-way K-shot Gaussian-cluster classification episodes."""

    ways: int = Field(config.CLUSTER_WAYS, ge=2, description="Classes per episode (N).")
    shots: int = Field(config.CLUSTER_SHOTS, ge=1, description="Training examples per class (K).")
    queries: int = Field(config.CLUSTER_QUERIES, ge=1, description="Testing examples per class.")
    input_dim: int = Field(config.CLUSTER_INPUT_DIM, ge=1)
    spread: float = Field(config.CLUSTER_SPREAD, ge=0.0, description="Per-coordinate stddev around a center.")
    center_range: Range = config.CLUSTER_CENTER_RANGE

    @field_validator("center_range")
    @classmethod
    def _ordered(cls, value: Range) -> Range:
        return _check_range(value)


class RlTrainConfig(StrictModel):
    """
    Trajectory budgets and MDP constants for 2D navigation.

    Outer iterations and tasks per iteration live in MetaTrainConfig; the nav
    experiments default them to 100 and 20.
    """

    n1: int = Field(config.NAV_TRAJECTORIES, ge=1, description="Trajectories per task before adaptation.")
    n2: int = Field(config.NAV_TRAJECTORIES, ge=1, description="Trajectories per task after adaptation.")
    eval_tasks: int = Field(config.NAV_EVAL_TASKS, ge=1)
    gamma: float = Field(config.NAV_GAMMA, ge=0.0, le=1.0)
    horizon: int = Field(config.NAV_HORIZON, ge=1)
    goal_threshold: float = Field(config.NAV_GOAL_THRESHOLD, gt=0.0)


class MetaTrainConfig(StrictModel):
    """Outer-loop settings shared by every meta-learner."""

    iterations: int = Field(0, ge=0)
    meta_batch: int = Field(1, ge=1, description="Tasks per outer step.")
    outer_lr: float = Field(config.OUTER_LR, gt=0.0, description="Outer learning rate (beta).")
    optimizer: Literal["adam", "sgd"] = "adam"
    l2: float = Field(0.0, ge=0.0, description="Coefficient of the L2 penalty on meta-parameters.")
    first_order: bool = Field(False, description="Treat inner gradients as constants.")
    log_interval: int = Field(config.LOG_INTERVAL, ge=1)
    adam_beta1: float = Field(config.ADAM_BETA1, ge=0.0, lt=1.0)
    adam_beta2: float = Field(config.ADAM_BETA2, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(config.ADAM_EPSILON, gt=0.0)


class MetaSgdConfig(StrictModel):
    alpha_init_range: Range = config.METASGD_ALPHA_INIT_RANGE
    # False freezes alpha and removes it from the outer update.
    learn_alpha: bool = True

    @field_validator("alpha_init_range")
    @classmethod
    def _ordered(cls, value: Range) -> Range:
        return _check_range(value)


class MamlConfig(StrictModel):
    alpha: float = Field(config.MAML_ALPHA, gt=0.0)
    inner_steps: int = Field(config.MAML_INNER_STEPS, ge=0)


class LrLstmConfig(StrictModel):
    hidden_size: int = Field(config.LSTM_HIDDEN_SIZE, ge=1)
    beta: float = Field(config.LSTM_BETA, gt=0.0, description="Upper bound of the emitted learning rate.")
    steps: int = Field(config.LSTM_STEPS, ge=1, description="Inner steps T.")
    # Index of the first task-specific layer; None means the last layer only.
    split_layer: Optional[int] = Field(None, ge=0)
    init_scale: float = Field(config.LSTM_INIT_SCALE, gt=0.0)
    forget_bias: float = config.LSTM_FORGET_BIAS


class EvalConfig(StrictModel):
    n_curves: int = Field(config.EVAL_CURVES, ge=1)
    test_points: int = Field(config.EVAL_TEST_POINTS, ge=2)
    repeats: int = Field(config.EVAL_REPEATS, ge=1)
    shots: list[int] = Field(default_factory=lambda: list(config.EVAL_SHOTS), min_length=1)
    classification_tasks: int = Field(config.EVAL_CLASSIFICATION_TASKS, ge=1)

    @field_validator("shots")
    @classmethod
    def _positive_shots(cls, shots: list[int]) -> list[int]:
        if any(k < 1 for k in shots):
            raise ValueError("every testing shot count must be >= 1")
        return shots


class OutputConfig(StrictModel):
    dir: str = config.DEFAULT_OUTPUT_DIR
    # Real elapsed time in the train log CSV; off keeps CSVs a pure function of (config, seed).
    wall_clock: bool = False
    trace: bool = False


Experiment = Literal["sine", "cluster", "nav-fixed", "nav-random"]
MetaLearnerName = Literal["metasgd", "maml", "lrlstm"]


def default_layer_sizes(experiment: str, cluster: Any = None) -> list[int]:
    """The base-learner architecture an experiment uses when none is configured."""
    if experiment == "sine":
        return [1, *config.REGRESSOR_HIDDEN, 1]
    if experiment == "cluster":
        if isinstance(cluster, BaseModel):
            cluster = cluster.model_dump()
        cluster = cluster or {}
        dim = cluster.get("input_dim", config.CLUSTER_INPUT_DIM)
        ways = cluster.get("ways", config.CLUSTER_WAYS)
        return [dim, *config.CLASSIFIER_HIDDEN, ways]
    return [2, *config.POLICY_HIDDEN, 2]


def _deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class RunConfig(StrictModel):
    """
    The complete, validated description of one experiment run.

    Construction fills the per-experiment defaults from config.py for any
    section the caller leaves out, so a three-key config file already
    reproduces the published settings.
    """

    experiment: Experiment
    meta_learner: MetaLearnerName
    seed: int = Field(..., ge=0)
    model: MlpSpec
    sine: SineTaskConfig = Field(default_factory=SineTaskConfig)
    cluster: ClusterTaskConfig = Field(default_factory=ClusterTaskConfig)
    rl: RlTrainConfig = Field(default_factory=RlTrainConfig)
    train: MetaTrainConfig = Field(default_factory=MetaTrainConfig)
    metasgd: MetaSgdConfig = Field(default_factory=MetaSgdConfig)
    maml: MamlConfig = Field(default_factory=MamlConfig)
    lrlstm: LrLstmConfig = Field(default_factory=LrLstmConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="before")
    @classmethod
    def _fill_experiment_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict) or data.get("experiment") not in config.EXPERIMENT_DEFAULTS:
            return data
        experiment = data["experiment"]
        merged = _deep_merge(config.EXPERIMENT_DEFAULTS[experiment], data)
        model = merged.get("model", {})
        if isinstance(model, dict) and "layer_sizes" not in model:
            merged["model"] = {**model, "layer_sizes": default_layer_sizes(experiment, merged.get("cluster"))}
        evaluation = merged.get("eval", {})
        if experiment == "cluster" and isinstance(evaluation, dict) and "shots" not in evaluation:
            # score the shot count the model was trained with
            cluster = merged.get("cluster") if isinstance(merged.get("cluster"), dict) else {}
            merged["eval"] = {**evaluation, "shots": [cluster.get("shots", config.CLUSTER_SHOTS)]}
        return merged

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        sizes = self.model.layer_sizes
        if self.experiment == "sine" and (sizes[0] != 1 or sizes[-1] != 1):
            raise ValueError("sine regression needs a 1-input, 1-output model")
        if self.experiment == "cluster" and (sizes[0] != self.cluster.input_dim or sizes[-1] != self.cluster.ways):
            raise ValueError("cluster model must map input_dim inputs to ways outputs")
        if self.experiment.startswith("nav"):
            if sizes[0] != 2 or sizes[-1] != 2:
                raise ValueError("navigation policy must map 2-d states to 2-d action means")
            if self.meta_learner == "lrlstm":
                raise ValueError("navigation experiments support metasgd and maml only")
        split = self.lrlstm.split_layer
        if self.meta_learner == "lrlstm" and split is not None and split >= self.model.n_layers:
            raise ValueError(
                f"lrlstm.split_layer {split} must be below the {self.model.n_layers} model layers to leave a task-specific layer"
            )
        return self


class NavMdp(StrictModel):
    """A 2D point-navigation task: additive transitions, reward -||s' - goal||."""

    start: tuple[float, float] = (0.0, 0.0)
    goal: tuple[float, float]
    horizon: int = Field(config.NAV_HORIZON, ge=1)
    goal_threshold: float = Field(config.NAV_GOAL_THRESHOLD, gt=0.0)
    gamma: float = Field(config.NAV_GAMMA, ge=0.0, le=1.0)

    @field_validator("goal")
    @classmethod
    def _goal_in_square(cls, goal: tuple[float, float]) -> tuple[float, float]:
        if not all(-0.5 <= g <= 0.5 for g in goal):
            raise ValueError(f"goal {goal} lies outside [-0.5, 0.5]^2")
        return goal


class TrainLogRow(BaseModel):
    """One logged outer iteration: mean meta-test loss (or mean post-adaptation return)."""

    iteration: int
    value: float
    wall_ms: float = 0.0


class TrainLog(BaseModel):
    rows: list[TrainLogRow] = Field(default_factory=list)

    def append(self, row: TrainLogRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError("train log iterations must be strictly increasing")
        self.rows.append(row)


class EvalRow(BaseModel):
    """One line of an evaluation summary: a setting with mean and 95% CI half-width."""

    setting: str
    mean: float
    ci95_half: float


class GradCheckResult(BaseModel):
    """Outcome of one gradient-check suite."""

    suite: str
    max_rel_error: float
    tolerance: float
    passed: bool
    # Name of the case with the largest error, e.g. the offending op.
    worst_case: str = ""
