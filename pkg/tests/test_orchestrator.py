import json
import logging
import os

import numpy as np
import pytest

import config
import orchestrator
from checkpoint import load_checkpoint, save_checkpoint
from config_loader import build_config
from errors import CheckpointError, ConfigError, NumericalError
from metalearners import MetaSgdLearner
from models import ParamSet
from run_logger import CURVE_HEADER, EVAL_SUMMARY_HEADER, TRAIN_LOG_HEADER

TINY_EVAL = {"eval.n_curves": 2, "eval.test_points": 10, "eval.repeats": 2, "eval.shots": [5]}


@pytest.fixture
def tiny_config(tmp_path):
    """A sine run small enough to finish in well under a second."""

    def make(subdir="run", **overrides):
        data = {
            "experiment": "sine",
            "meta_learner": "metasgd",
            "seed": 0,
            "model.layer_sizes": [1, 8, 1],
            "train.iterations": 10,
            "train.meta_batch": 2,
            "train.log_interval": 1,
            "output.dir": str(tmp_path / subdir),
            **TINY_EVAL,
        }
        data.update(overrides)
        return build_config(data)

    return make


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _lines(path):
    with open(path, "r", encoding="utf-8") as f:
        return f.read().splitlines()


# --- Full runs ---

def test_tiny_sine_run_writes_every_artefact(tiny_config):
    # ARRANGE
    cfg = tiny_config()

    # ACT
    code = orchestrator.run_experiment(cfg)

    # ASSERT
    out = cfg.output.dir
    assert code == 0
    train_log = _lines(os.path.join(out, config.TRAIN_LOG_FILE))
    assert train_log[0] == ",".join(TRAIN_LOG_HEADER)
    assert [int(line.split(",")[0]) for line in train_log[1:]] == list(range(1, 11))
    summary = _lines(os.path.join(out, config.EVAL_SUMMARY_FILE))
    assert summary[0] == ",".join(EVAL_SUMMARY_HEADER)
    assert summary[1].startswith("sine/5-shot,")
    with open(os.path.join(out, config.RESOLVED_CONFIG_FILE), encoding="utf-8") as f:
        assert json.load(f)["train.iterations"] == 10
    assert not os.path.exists(os.path.join(out, config.TRACE_FILE))


def test_checkpoint_holds_the_meta_state_and_run_metadata(tiny_config):
    cfg = tiny_config()
    orchestrator.run_experiment(cfg)

    arrays = load_checkpoint(os.path.join(cfg.output.dir, config.CHECKPOINT_FILE))

    assert {"theta/weight_0", "alpha/weight_0", "adam/m/theta/weight_0", "adam/step", "meta/iteration", "meta/config_hash"} <= set(arrays.names())
    assert arrays["adam/step"][0] == 10.0
    assert arrays["meta/iteration"][0] == 10.0


def test_reruns_are_byte_identical(tiny_config):
    first, second = tiny_config("a"), tiny_config("b")

    orchestrator.run_experiment(first)
    orchestrator.run_experiment(second)

    for name in (config.TRAIN_LOG_FILE, config.EVAL_SUMMARY_FILE, config.CHECKPOINT_FILE):
        assert _read(os.path.join(first.output.dir, name)) == _read(os.path.join(second.output.dir, name))


def test_eval_of_the_checkpoint_reproduces_the_summary(tiny_config, tmp_path):
    cfg = tiny_config()
    orchestrator.run_experiment(cfg)

    code = orchestrator.run_eval(cfg, os.path.join(cfg.output.dir, config.CHECKPOINT_FILE), str(tmp_path / "eval"))

    assert code == 0
    assert _read(tmp_path / "eval" / config.EVAL_SUMMARY_FILE) == _read(os.path.join(cfg.output.dir, config.EVAL_SUMMARY_FILE))


def test_numerical_abort_propagates_without_an_eval_summary(tiny_config, mocker):
    # ARRANGE
    cfg = tiny_config()
    mocker.patch("orchestrator.train_meta_learner", side_effect=NumericalError("non-finite outer loss", iteration=3))
    evaluate = mocker.patch("orchestrator.evaluate_meta_learner")

    # ACT
    with pytest.raises(NumericalError, match="iteration 3"):
        orchestrator.run_experiment(cfg)

    # ASSERT
    evaluate.assert_not_called()
    assert not os.path.exists(os.path.join(cfg.output.dir, config.EVAL_SUMMARY_FILE))


@pytest.mark.parametrize(
    "overrides",
    [
        {"meta_learner": "maml"},
        {"meta_learner": "lrlstm", "lrlstm.hidden_size": 4, "lrlstm.steps": 2},
        {"train.optimizer": "sgd", "train.first_order": True},
    ],
)
def test_other_learners_and_optimizers_complete(tiny_config, overrides):
    cfg = tiny_config(**overrides)

    assert orchestrator.run_experiment(cfg) == 0
    assert len(_lines(os.path.join(cfg.output.dir, config.TRAIN_LOG_FILE))) == 11


def test_tiny_cluster_run(tiny_config):
    cfg = tiny_config(
        experiment="cluster",
        **{"model.layer_sizes": [2, 8, 3], "cluster.ways": 3, "train.iterations": 3, "eval.classification_tasks": 4},
    )

    orchestrator.run_experiment(cfg)

    summary = _lines(os.path.join(cfg.output.dir, config.EVAL_SUMMARY_FILE))
    assert summary[1].startswith("cluster/3-way-5-shot,")
    assert 0.0 <= float(summary[1].split(",")[1]) <= 1.0


def test_tiny_navigation_run(tiny_config):
    cfg = tiny_config(
        experiment="nav-fixed",
        **{
            "model.layer_sizes": [2, 4, 2],
            "train.iterations": 3,
            "rl.n1": 2,
            "rl.n2": 2,
            "rl.horizon": 5,
            "rl.eval_tasks": 3,
        },
    )

    orchestrator.run_experiment(cfg)

    assert len(_lines(os.path.join(cfg.output.dir, config.TRAIN_LOG_FILE))) == 4
    settings = [line.split(",")[0] for line in _lines(os.path.join(cfg.output.dir, config.EVAL_SUMMARY_FILE))[1:]]
    assert settings == ["nav-fixed/post-adaptation", "nav-fixed/pre-adaptation", "nav-fixed/improved-fraction"]


def test_trace_file_records_the_orchestration_calls(tiny_config):
    cfg = tiny_config(**{"output.trace": True, "train.iterations": 2})

    orchestrator.run_experiment(cfg)

    with open(os.path.join(cfg.output.dir, config.TRACE_FILE), encoding="utf-8") as f:
        entries = json.load(f)
    functions = [e.get("function") for e in entries]
    assert "orchestrator.train_meta_learner" in functions
    assert "orchestrator.evaluate_meta_learner" in functions
    assert {"type": "EVENT", "event_name": "orchestrator.checkpoint_saved", "details": {"iterations": "2", "rows": "2"}} in entries


# --- Checkpoints ---

def test_unpacking_a_checkpoint_without_the_meta_state_fails(tiny_config):
    cfg = tiny_config()
    with pytest.raises(CheckpointError):
        orchestrator.unpack_checkpoint(ParamSet({"meta/iteration": [1.0]}), MetaSgdLearner(), cfg)


def test_unpacking_a_checkpoint_for_another_architecture_fails(tiny_config):
    cfg = tiny_config()
    orchestrator.run_experiment(cfg)
    arrays = load_checkpoint(os.path.join(cfg.output.dir, config.CHECKPOINT_FILE))

    with pytest.raises(CheckpointError):
        orchestrator.unpack_checkpoint(arrays, MetaSgdLearner(), tiny_config(**{"model.layer_sizes": [1, 16, 1]}))


def test_loading_under_a_different_config_warns(tiny_config, caplog):
    cfg = tiny_config()
    orchestrator.run_experiment(cfg)
    path = os.path.join(cfg.output.dir, config.CHECKPOINT_FILE)

    with caplog.at_level(logging.WARNING):
        _, loaded = orchestrator.load_trained_state(tiny_config(seed=1), path)

    assert "hash mismatch" in caplog.text
    assert loaded.iteration == 10


def test_loading_under_the_training_config_is_silent(tiny_config, caplog):
    cfg = tiny_config()
    orchestrator.run_experiment(cfg)

    with caplog.at_level(logging.WARNING):
        orchestrator.load_trained_state(cfg, os.path.join(cfg.output.dir, config.CHECKPOINT_FILE))

    assert "hash mismatch" not in caplog.text


def test_optimizer_state_survives_the_checkpoint(tiny_config, tmp_path):
    cfg = tiny_config()
    orchestrator.run_experiment(cfg)
    arrays = load_checkpoint(os.path.join(cfg.output.dir, config.CHECKPOINT_FILE))

    loaded = orchestrator.unpack_checkpoint(arrays, MetaSgdLearner(), cfg)
    save_checkpoint(str(tmp_path / "copy.bin"), arrays)

    assert loaded.optimizer.step == 10
    assert loaded.optimizer.m.names() == ["theta/" + n for n in loaded.state.theta.names()] + ["alpha/" + n for n in loaded.state.alpha.names()]
    assert _read(tmp_path / "copy.bin") == _read(os.path.join(cfg.output.dir, config.CHECKPOINT_FILE))


# --- Curves ---

def test_export_curve_writes_one_row_per_grid_point(tiny_config):
    cfg = tiny_config()
    orchestrator.run_experiment(cfg)

    path = orchestrator.export_curve(os.path.join(cfg.output.dir, config.CHECKPOINT_FILE), task_seed=7)

    lines = _lines(path)
    assert os.path.basename(path) == "curve_7.csv"
    assert lines[0] == ",".join(CURVE_HEADER)
    assert len(lines) == 11
    xs = np.array([float(line.split(",")[0]) for line in lines[1:]])
    assert xs[0] == -5.0 and xs[-1] == 5.0


def test_export_curve_is_deterministic_per_task_seed(tiny_config, tmp_path):
    cfg = tiny_config()
    orchestrator.run_experiment(cfg)
    checkpoint = os.path.join(cfg.output.dir, config.CHECKPOINT_FILE)

    a = orchestrator.export_curve(checkpoint, 3, output_path=str(tmp_path / "a.csv"))
    b = orchestrator.export_curve(checkpoint, 3, output_path=str(tmp_path / "b.csv"))
    c = orchestrator.export_curve(checkpoint, 4, output_path=str(tmp_path / "c.csv"))

    assert _read(a) == _read(b)
    assert _read(a) != _read(c)


def test_curves_need_a_sine_experiment(tiny_config):
    cfg = tiny_config(experiment="cluster", **{"model.layer_sizes": [2, 8, 5]})
    with pytest.raises(ConfigError, match="sine"):
        orchestrator.adaptation_curve(cfg, None, None, 0)
