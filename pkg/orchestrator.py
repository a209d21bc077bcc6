"""
Experiment orchestration for MetaLab.

This module wires the pieces of a run together: it builds the meta-learner a
config names, drives the matching outer loop (supervised or RL), evaluates
the trained meta-state with the experiment's meta-testing protocol, and
persists every artefact (train log, eval summary, checkpoint, resolved
config, optional call trace) into the output directory.

All randomness flows from one SeedStreams instance per run, so the CSVs and
the checkpoint are a pure function of (config, seed).
"""
import logging
import os
from dataclasses import dataclass
from typing import Any, Optional

import autodiff as ad
import config
from checkpoint import config_hash, load_checkpoint, save_checkpoint
from config_loader import canonical_json, parse_config, serialize_config
from data_models import EvalRow, RunConfig
from errors import CheckpointError, ConfigError
from metalearners import MetaLearner, build_meta_learner
from models import ParamSet, mlp_apply
from run_logger import CURVE_HEADER, RunLogger
from seeding import SeedStreams
from tasks import eval_sine, sample_cluster_task, sample_sine_curve, sample_sine_task, sine_grid, sine_task_for_curve
from tracer import global_tracer, log_event, trace
from train import (
    AdamState,
    TrainResult,
    evaluate_cluster,
    evaluate_rl,
    evaluate_sine,
    meta_train_rl,
    meta_train_supervised,
    supervised_adapter,
)


def _nav_mode(cfg: RunConfig) -> str:
    return "fixed" if cfg.experiment == "nav-fixed" else "random"


@trace
def train_meta_learner(cfg: RunConfig, learner: MetaLearner, state: Any, streams: SeedStreams) -> TrainResult:
    """
    Runs the outer loop that matches the experiment.

    Args:
        cfg: The validated run configuration.
        learner: The meta-learner strategy built from `cfg`.
        state: The initial meta-state.
        streams: The run's seeded random streams.

    Returns:
        The trained meta-state, its TrainLog and the final optimizer state.
    """
    wall_clock = cfg.output.wall_clock
    if cfg.experiment == "sine":
        return meta_train_supervised(
            learner, state, lambda rng: sample_sine_task(cfg.sine, rng), cfg.model, ad.mse_loss, cfg.train, streams, wall_clock
        )
    if cfg.experiment == "cluster":
        return meta_train_supervised(
            learner, state, lambda rng: sample_cluster_task(cfg.cluster, rng), cfg.model, ad.softmax_cross_entropy, cfg.train, streams, wall_clock
        )
    return meta_train_rl(learner, state, _nav_mode(cfg), cfg.model, cfg.train, cfg.rl, streams, wall_clock)


@trace
def evaluate_meta_learner(cfg: RunConfig, learner: MetaLearner, state: Any, streams: SeedStreams) -> list[EvalRow]:
    """
    Applies the experiment's meta-testing protocol and returns one EvalRow per
    reported setting.
    """
    if cfg.experiment == "sine":
        results = evaluate_sine(learner, state, cfg.model, cfg.sine, cfg.eval, streams)
        return [EvalRow(setting=k, mean=m, ci95_half=h) for k, (m, h) in results.items()]
    if cfg.experiment == "cluster":
        results = evaluate_cluster(learner, state, cfg.model, cfg.cluster, cfg.eval, streams)
        return [EvalRow(setting=k, mean=m, ci95_half=h) for k, (m, h) in results.items()]
    rl = evaluate_rl(learner, state, _nav_mode(cfg), cfg.model, cfg.rl, streams)
    return [
        EvalRow(setting=f"{cfg.experiment}/post-adaptation", mean=rl.mean, ci95_half=rl.ci95_half),
        EvalRow(setting=f"{cfg.experiment}/pre-adaptation", mean=rl.pre_mean, ci95_half=rl.pre_ci95_half),
        EvalRow(setting=f"{cfg.experiment}/improved-fraction", mean=rl.improved_fraction, ci95_half=0.0),
    ]


# --- Checkpoint packing ---

def pack_checkpoint(learner: MetaLearner, result: TrainResult, cfg: RunConfig) -> ParamSet:
    """Meta-parameters, Adam moments and run metadata as one set of named arrays."""
    parts = [learner.pack(result.state)]
    if result.optimizer is not None:
        opt = result.optimizer
        parts.append(opt.m.prefixed("adam/m"))
        parts.append(opt.v.prefixed("adam/v"))
        parts.append(ParamSet({"adam/step": [float(opt.step)]}))
    parts.append(
        ParamSet(
            {
                "meta/iteration": [float(result.iterations)],
                "meta/config_hash": [config_hash(canonical_json(cfg))],
            }
        )
    )
    return ParamSet.merge(*parts)


@dataclass
class LoadedCheckpoint:
    state: Any
    optimizer: Optional[AdamState]
    iteration: int
    config_hash: float


def unpack_checkpoint(arrays: ParamSet, learner: MetaLearner, cfg: RunConfig) -> LoadedCheckpoint:
    """
    Rebuilds the meta-state a checkpoint holds for `learner`.

    Raises:
        CheckpointError: If arrays the learner needs are missing or malformed.
    """
    try:
        state = learner.unpack(arrays, cfg)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Checkpoint does not hold a valid {learner.name} meta-state: {e}") from e
    expected = learner.pack(learner.init_state(cfg, SeedStreams(cfg.seed).stream("init"))).dims()
    if learner.pack(state).dims() != expected:
        raise CheckpointError(f"Checkpoint arrays do not match the {learner.name} meta-state the config describes.")
    optimizer = None
    if "adam/step" in arrays:
        m, v = arrays.select("adam/m"), arrays.select("adam/v")
        optimizer = AdamState(
            m=m,
            v=v,
            step=int(arrays["adam/step"][0]),
            beta1=cfg.train.adam_beta1,
            beta2=cfg.train.adam_beta2,
            epsilon=cfg.train.adam_epsilon,
        )
    meta = arrays.select("meta")
    return LoadedCheckpoint(
        state=state,
        optimizer=optimizer,
        iteration=int(meta["iteration"][0]) if "iteration" in meta else 0,
        config_hash=float(meta["config_hash"][0]) if "config_hash" in meta else float("nan"),
    )


# --- Commands ---

def _start_trace(cfg: RunConfig) -> None:
    global_tracer.reset()
    global_tracer.enable(cfg.output.trace)


def _finish_trace(cfg: RunConfig, run_log: RunLogger) -> None:
    if cfg.output.trace:
        run_log.write_json(config.TRACE_FILE, global_tracer.get_trace())
    global_tracer.enable(False)


def run_experiment(cfg: RunConfig) -> int:
    """
    Meta-trains, evaluates and writes all artefacts of one run.

    Args:
        cfg: The validated run configuration.

    Returns:
        0 on success. Failures propagate as exceptions so the entry point can
        map them onto exit codes.
    """
    _start_trace(cfg)
    run_log = RunLogger(cfg.output.dir)
    logging.info(f"Starting {cfg.experiment}/{cfg.meta_learner} run with seed {cfg.seed} -> {cfg.output.dir}")
    streams = SeedStreams(cfg.seed)
    learner = build_meta_learner(cfg)
    state = learner.init_state(cfg, streams.stream("init"))

    result = train_meta_learner(cfg, learner, state, streams)
    run_log.write_train_log(config.TRAIN_LOG_FILE, result.log)
    save_checkpoint(run_log.path(config.CHECKPOINT_FILE), pack_checkpoint(learner, result, cfg))
    log_event("checkpoint_saved", {"iterations": result.iterations, "rows": len(result.log.rows)})
    run_log.write_json(config.RESOLVED_CONFIG_FILE, serialize_config(cfg))

    rows = evaluate_meta_learner(cfg, learner, result.state, streams)
    run_log.write_eval_summary(config.EVAL_SUMMARY_FILE, rows)
    for row in rows:
        logging.info(f"{row.setting}: {row.mean:.4f} +- {row.ci95_half:.4f}")
    _finish_trace(cfg, run_log)
    return 0


def load_trained_state(cfg: RunConfig, checkpoint_path: str) -> tuple[MetaLearner, LoadedCheckpoint]:
    learner = build_meta_learner(cfg)
    loaded = unpack_checkpoint(load_checkpoint(checkpoint_path), learner, cfg)
    expected = config_hash(canonical_json(cfg))
    if loaded.config_hash != expected:
        logging.warning(f"Checkpoint {checkpoint_path} was written under a different config (hash mismatch).")
    return learner, loaded


def run_eval(cfg: RunConfig, checkpoint_path: str, output_dir: Optional[str] = None) -> int:
    """
    Evaluates a saved meta-state and writes the eval summary.

    With the config the checkpoint was trained under, the summary is
    byte-identical to the one the training run wrote.
    """
    _start_trace(cfg)
    run_log = RunLogger(output_dir or cfg.output.dir)
    learner, loaded = load_trained_state(cfg, checkpoint_path)
    logging.info(f"Evaluating {checkpoint_path} (trained for {loaded.iteration} iterations)")
    log_event("checkpoint_loaded", {"path": checkpoint_path, "iteration": loaded.iteration})
    rows = evaluate_meta_learner(cfg, learner, loaded.state, SeedStreams(cfg.seed))
    run_log.write_eval_summary(config.EVAL_SUMMARY_FILE, rows)
    for row in rows:
        logging.info(f"{row.setting}: {row.mean:.4f} +- {row.ci95_half:.4f}")
    _finish_trace(cfg, run_log)
    return 0


def resolved_config_for(checkpoint_path: str, config_path: Optional[str] = None) -> RunConfig:
    """The config given explicitly, else the config.json saved next to the checkpoint."""
    path = config_path or os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), config.RESOLVED_CONFIG_FILE)
    return parse_config(path)


@trace
def adaptation_curve(cfg: RunConfig, learner: MetaLearner, state: Any, task_seed: int) -> list[tuple[float, float, float, float]]:
    """
    One sine task's curve data on the evenly spaced grid: true y, prediction
    before adaptation and prediction after adapting on K sampled points.
    """
    if cfg.experiment != "sine":
        raise ConfigError(f"export-curve needs a sine experiment, got '{cfg.experiment}'.")
    rng = SeedStreams(task_seed).stream("curve")
    curve = sample_sine_curve(cfg.sine, rng)
    grid = sine_grid(cfg.eval.test_points, cfg.sine.input_range)
    task = sine_task_for_curve(curve, cfg.sine, rng, test_x=grid)
    pre = mlp_apply(cfg.model, learner.base_params(state), grid)
    post = supervised_adapter(learner, cfg.model, ad.mse_loss)(state, task)(grid)
    true_y = eval_sine(curve["amplitude"], curve["omega"], curve["phase"], grid)
    return [
        (float(x), float(y), float(p), float(q))
        for x, y, p, q in zip(grid[:, 0], true_y[:, 0], pre[:, 0], post[:, 0])
    ]


def export_curve(checkpoint_path: str, task_seed: int, config_path: Optional[str] = None, output_path: Optional[str] = None) -> str:
    """Writes the adaptation curve CSV and returns its path."""
    cfg = resolved_config_for(checkpoint_path, config_path)
    learner, loaded = load_trained_state(cfg, checkpoint_path)
    rows = adaptation_curve(cfg, learner, loaded.state, task_seed)
    if output_path is None:
        output_path = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), f"curve_{task_seed}.csv")
    run_log = RunLogger(os.path.dirname(os.path.abspath(output_path)))
    return run_log.write_csv(os.path.basename(output_path), CURVE_HEADER, rows)
