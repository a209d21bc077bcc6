import pytest

from config_loader import build_config
from metalearners import build_meta_learner
from orchestrator import evaluate_meta_learner, train_meta_learner
from seeding import SeedStreams

# Test Protocol for the sine regression acceptance runs.
# Each run trains from scratch at published scale; run with --runslow.


def _train_and_evaluate(**overrides):
    cfg = build_config({"experiment": "sine", "meta_learner": "metasgd", "seed": 0, **overrides})
    streams = SeedStreams(cfg.seed)
    learner = build_meta_learner(cfg)
    result = train_meta_learner(cfg, learner, learner.init_state(cfg, streams.stream("init")), streams)
    return {row.setting: row.mean for row in evaluate_meta_learner(cfg, learner, result.state, streams)}


@pytest.mark.slow
def test_ACC_SIN_001_meta_sgd_beats_maml_at_five_shots():
    """
    Tests ACC-SIN-001: with default settings Meta-SGD's 5-shot MSE is at most
    1.2 and strictly below MAML trained identically with alpha = 0.01.
    """
    metasgd = _train_and_evaluate(**{"eval.shots": [5]})
    maml = _train_and_evaluate(meta_learner="maml", **{"maml.alpha": 0.01, "eval.shots": [5]})

    assert metasgd["sine/5-shot"] <= 1.2
    assert metasgd["sine/5-shot"] < maml["sine/5-shot"]


@pytest.mark.slow
def test_ACC_SIN_002_smoke_run_reaches_the_smoke_threshold():
    """
    Tests ACC-SIN-002: a shortened Meta-SGD run reaches a 5-shot MSE of at most 3.0.
    """
    results = _train_and_evaluate(**{"train.iterations": 5000, "eval.shots": [5]})

    assert results["sine/5-shot"] <= 3.0


@pytest.mark.slow
def test_ACC_SIN_003_error_does_not_grow_with_more_shots():
    """
    Tests ACC-SIN-003: for one trained model, mean MSE is nonincreasing from
    5-shot to 10-shot to 20-shot testing.
    """
    results = _train_and_evaluate(**{"eval.shots": [5, 10, 20]})

    assert results["sine/5-shot"] >= results["sine/10-shot"] >= results["sine/20-shot"]
