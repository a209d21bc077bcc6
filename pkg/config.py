import math

# Sine regression task distribution.
SINE_AMPLITUDE_RANGE = (0.1, 5.0)
SINE_FREQUENCY_RANGE = (0.8, 1.2)
SINE_PHASE_RANGE = (0.0, math.pi)
SINE_INPUT_RANGE = (-5.0, 5.0)
SINE_SHOTS = 5
SINE_TEST_SIZE = 10

# Synthetic N-way K-shot cluster classification proxy.
CLUSTER_WAYS = 5
CLUSTER_SHOTS = 1
CLUSTER_QUERIES = 15
CLUSTER_INPUT_DIM = 2
CLUSTER_SPREAD = 0.5
CLUSTER_CENTER_RANGE = (-5.0, 5.0)

# 2D navigation.
NAV_HORIZON = 100
NAV_GOAL_THRESHOLD = 0.01
NAV_GAMMA = 0.99
NAV_TRAJECTORIES = 20
NAV_EVAL_TASKS = 600

# Base-learner architectures.
REGRESSOR_HIDDEN = [40, 40]
CLASSIFIER_HIDDEN = [40, 40]
POLICY_HIDDEN = [100, 100]
INIT_STDDEV = 0.01
INIT_TRUNCATION = 2.0

# Meta-learners.
METASGD_ALPHA_INIT_RANGE = (0.005, 0.1)
MAML_ALPHA = 0.01
MAML_INNER_STEPS = 1
LSTM_HIDDEN_SIZE = 20
LSTM_BETA = 0.1
LSTM_STEPS = 3
LSTM_INIT_SCALE = 0.1
LSTM_FORGET_BIAS = 1.0

# Outer loop.
OUTER_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
LOG_INTERVAL = 100

# Meta-testing protocol.
EVAL_CURVES = 100
EVAL_TEST_POINTS = 100
EVAL_REPEATS = 100
EVAL_SHOTS = [5, 10, 20]
EVAL_CLASSIFICATION_TASKS = 1000
CI_Z = 1.96

# Per-experiment training defaults; keys mirror the nested RunConfig layout.
EXPERIMENT_DEFAULTS = {
    "sine": {"train": {"iterations": 60000, "meta_batch": 4}},
    "cluster": {"train": {"iterations": 10000, "meta_batch": 4}},
    "nav-fixed": {"train": {"iterations": 100, "meta_batch": 20}},
    "nav-random": {"train": {"iterations": 100, "meta_batch": 20}},
}

# Output artefacts.
DEFAULT_OUTPUT_DIR = "runs"
TRAIN_LOG_FILE = "train_log.csv"
EVAL_SUMMARY_FILE = "eval_summary.csv"
CHECKPOINT_FILE = "checkpoint.bin"
RESOLVED_CONFIG_FILE = "config.json"
TRACE_FILE = "trace.json"
