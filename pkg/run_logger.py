import csv
import io
import json
import logging
import os
import tempfile
import threading
from typing import Any, Iterable, Sequence

from data_models import EvalRow, TrainLog
from utils import format_float

TRAIN_LOG_HEADER = ["iteration", "mean_test_loss_or_return", "wall_ms"]
EVAL_SUMMARY_HEADER = ["setting", "mean", "ci95_half"]
CURVE_HEADER = ["x", "true_y", "pre_adaptation", "post_adaptation"]


def atomic_write_text(filepath: str, text: str) -> None:
    """Writes to a temporary file in the target directory, then renames it over `filepath`."""
    directory = os.path.dirname(os.path.abspath(filepath))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(filepath))
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp_path, filepath)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_bytes(filepath: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(filepath))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(filepath))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, filepath)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


class RunLogger:
    """
    Writes a run's CSV artefacts into one output directory.

    Every file is rendered in memory and replaced atomically, so a crashed run
    never leaves a half-written CSV behind. Floats use the shortest
    representation that round-trips, making the files a pure function of the
    values written.
    """

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.lock = threading.Lock()

    def path(self, filename: str) -> str:
        return os.path.join(self.output_dir, filename)

    def _serialize(self, value: Any) -> str:
        if isinstance(value, float):
            return format_float(value)
        return str(value)

    def write_csv(self, filename: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([self._serialize(v) for v in row])
        filepath = self.path(filename)
        with self.lock:
            atomic_write_text(filepath, buffer.getvalue())
        logging.info(f"Wrote {filepath}")
        return filepath

    def write_train_log(self, filename: str, log: TrainLog) -> str:
        return self.write_csv(filename, TRAIN_LOG_HEADER, ((r.iteration, float(r.value), float(r.wall_ms)) for r in log.rows))

    def write_eval_summary(self, filename: str, rows: Sequence[EvalRow]) -> str:
        return self.write_csv(filename, EVAL_SUMMARY_HEADER, ((r.setting, float(r.mean), float(r.ci95_half)) for r in rows))

    def write_json(self, filename: str, payload: Any) -> str:
        filepath = self.path(filename)
        with self.lock:
            atomic_write_text(filepath, json.dumps(payload, indent=2, sort_keys=True) + "\n")
        logging.info(f"Wrote {filepath}")
        return filepath
