"""
Optional call tracing for MetaLab runs.

`@trace` marks the orchestration-level functions whose calls should appear in
trace.json; `log_event` drops a named marker into whichever traced call is
currently open. Both are no-ops until `global_tracer.enable()` is called, so
the decorator costs one flag check per call during normal runs.
"""
import functools
import re
import sys
import time
from typing import Any, Callable, Optional

MAX_REPR = 200
_ADDRESS = re.compile(r"\s+at\s+0x[0-9a-fA-F]+")


def short_repr(value: Any) -> str:
    """repr without memory addresses, cut to MAX_REPR characters."""
    text = _ADDRESS.sub("", repr(value))
    return text if len(text) <= MAX_REPR else text[: MAX_REPR - 3] + "..."


def _module_label(module_name: str) -> str:
    return module_name.rsplit(".", 1)[-1]


class Tracer:
    """Builds a nested call tree of traced functions and events."""

    def __init__(self):
        self.enabled = False
        self.reset()

    def reset(self) -> None:
        self.roots: list[dict] = []
        self.open_calls: list[dict] = []

    def enable(self, enabled: bool = True) -> None:
        self.enabled = enabled

    def _attach(self, entry: dict) -> None:
        if self.open_calls:
            self.open_calls[-1].setdefault("nested_calls", []).append(entry)
        else:
            self.roots.append(entry)

    def start_trace(self, module: str, func_name: str) -> None:
        entry = {"function": f"{module}.{func_name}", "_t0": time.perf_counter()}
        self._attach(entry)
        self.open_calls.append(entry)

    def end_trace(self, outcome: Any, is_exception: bool = False) -> None:
        if not self.open_calls:
            return
        entry = self.open_calls.pop()
        entry["duration_ms"] = round((time.perf_counter() - entry.pop("_t0")) * 1000.0, 3)
        if is_exception:
            entry["exception"] = short_repr(outcome)
        elif outcome is not None and not (isinstance(outcome, (list, dict, tuple, str)) and len(outcome) == 0):
            entry["return_value"] = short_repr(outcome)

    def event(self, name: str, details: Optional[dict] = None) -> None:
        entry: dict[str, Any] = {"type": "EVENT", "event_name": name}
        if details:
            entry["details"] = {k: short_repr(v) for k, v in details.items()}
        self._attach(entry)

    def get_trace(self) -> list[dict]:
        return self.roots


global_tracer = Tracer()


def log_event(event_name: str, details: Optional[dict] = None) -> None:
    """Records `<caller module>.<event_name>` in the global trace, if enabled."""
    if not global_tracer.enabled:
        return
    caller = sys._getframe(1).f_globals.get("__name__", "")
    global_tracer.event(f"{_module_label(caller)}.{event_name}", details)


def trace(func: Callable) -> Callable:
    """Records each call of `func` as a node in the global trace, if enabled."""
    label = _module_label(func.__module__)

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        if not global_tracer.enabled:
            return func(*args, **kwargs)
        global_tracer.start_trace(label, func.__qualname__)
        try:
            result = func(*args, **kwargs)
        except Exception as e:
            global_tracer.end_trace(e, is_exception=True)
            raise
        global_tracer.end_trace(result)
        return result

    return wrapper
