"""
Parameterized base-learners: fully connected networks, the Gaussian
navigation policy, and the shared/task-specific split used by the LSTM
learning-rate meta-learner.

Parameters are carried as ParamSets (ordered, named, read-only float64
tensors). A network is evaluated either on the tape (`forward_mlp`,
`policy_forward`) when gradients are needed, or directly on arrays
(`mlp_apply`) for rollouts and predictions.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Union

import numpy as np

import autodiff as ad
import config
from data_models import MlpSpec

_LAYER_NAME = re.compile(r"^(weight|bias)_(\d+)$")


class ParamSet:
    """
    An ordered collection of uniquely named float64 tensors.

    Tensors are stored read-only; every transformation returns a new set.
    Flattening walks the names in order (layer order, weight before bias,
    extras such as `log_var` last) and each tensor in row-major order.
    """

    def __init__(self, tensors: Union[Mapping[str, np.ndarray], Iterable[tuple[str, np.ndarray]]] = ()):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        self._tensors: dict[str, np.ndarray] = {}
        for name, value in items:
            if name in self._tensors:
                raise ValueError(f"Duplicate parameter name '{name}'.")
            array = np.array(value, dtype=np.float64)
            array.flags.writeable = False
            self._tensors[name] = array

    # --- Mapping-like access ---

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> list[tuple[str, np.ndarray]]:
        return list(self._tensors.items())

    def dims(self) -> dict[str, tuple[int, ...]]:
        return {name: t.shape for name, t in self._tensors.items()}

    @property
    def size(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def __eq__(self, other: object) -> bool:
        """Bitwise equality of names, order, dims and values."""
        if not isinstance(other, ParamSet) or self.names() != other.names():
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._tensors.values(), other._tensors.values())
        )

    def __repr__(self) -> str:
        return f"ParamSet({', '.join(f'{n}{t.shape}' for n, t in self._tensors.items())})"

    # --- Flat vector view ---

    def flatten(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.ravel() for t in self._tensors.values()])

    def unflatten(self, vector: np.ndarray) -> ParamSet:
        """A set with this set's names and dims, filled from `vector`."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ValueError(f"Expected a flat vector of length {self.size}, got shape {vector.shape}.")
        out, offset = [], 0
        for name, t in self._tensors.items():
            out.append((name, vector[offset : offset + t.size].reshape(t.shape)))
            offset += t.size
        return ParamSet(out)

    # --- Transformations ---

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> ParamSet:
        return ParamSet((name, fn(t)) for name, t in self._tensors.items())

    def full_like(self, value: float) -> ParamSet:
        return self.map(lambda t: np.full(t.shape, float(value)))

    def prefixed(self, prefix: str) -> ParamSet:
        return ParamSet((f"{prefix}/{name}", t) for name, t in self._tensors.items())

    def select(self, prefix: str) -> ParamSet:
        """The tensors named `prefix/...`, with the prefix stripped."""
        head = f"{prefix}/"
        return ParamSet((name[len(head) :], t) for name, t in self._tensors.items() if name.startswith(head))

    @staticmethod
    def merge(*sets: ParamSet) -> ParamSet:
        return ParamSet(item for s in sets for item in s.items())

    # --- Tape bridge ---

    def to_vars(self, tape: ad.Tape, requires_grad: bool = True) -> dict[str, ad.Var]:
        return {name: ad.var(tape, t, requires_grad=requires_grad) for name, t in self._tensors.items()}

    @classmethod
    def from_vars(cls, variables: Mapping[str, ad.Var]) -> ParamSet:
        return cls((name, v.value) for name, v in variables.items())


@dataclass(frozen=True)
class CompositeParamSet:
    """Task-shared layers (theta1) and task-specific layers (theta2), split at `split_layer`."""

    shared: ParamSet
    task_specific: ParamSet
    split_layer: int


# --- Initialization ---

def truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], stddev: float, bound: float = config.INIT_TRUNCATION) -> np.ndarray:
    """Normal(0, stddev^2) samples redrawn until they lie within +-bound*stddev."""
    samples = rng.standard_normal(shape)
    rejected = np.abs(samples) > bound
    while np.any(rejected):
        samples[rejected] = rng.standard_normal(int(rejected.sum()))
        rejected = np.abs(samples) > bound
    return samples * stddev


def init_mlp(spec: MlpSpec, rng: np.random.Generator, stddev: float = config.INIT_STDDEV) -> ParamSet:
    """
    Weights from a truncated normal (mean 0, stddev 0.01, cut at 2 stddev);
    biases zero. Deterministic for a given generator state.
    """
    tensors = []
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        tensors.append((f"weight_{i}", truncated_normal(rng, (fan_in, fan_out), stddev)))
        tensors.append((f"bias_{i}", np.zeros(fan_out)))
    return ParamSet(tensors)


def init_policy(spec: MlpSpec, rng: np.random.Generator) -> ParamSet:
    """The mean network plus a trainable diagonal log-variance initialised at 0."""
    return ParamSet.merge(init_mlp(spec, rng), ParamSet({"log_var": np.zeros(spec.layer_sizes[-1])}))


# --- Forward passes ---

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}
_NUMPY_ACTIVATIONS = {"relu": lambda h: np.maximum(h, 0.0), "tanh": np.tanh}


def forward_mlp(spec: MlpSpec, params: Mapping[str, ad.Var], x: ad.Var) -> ad.Var:
    """Affine + activation for each hidden layer, affine output layer."""
    if len(x.dims) != 2 or x.dims[1] != spec.layer_sizes[0]:
        raise ad.ShapeError(f"MLP expects [batch×{spec.layer_sizes[0]}] inputs, got {x.dims}.")
    activation = _ACTIVATIONS[spec.activation]
    h = x
    for i in range(spec.n_layers):
        h = ad.add_bias_row(ad.matmul(h, params[f"weight_{i}"]), params[f"bias_{i}"])
        if i < spec.n_layers - 1:
            h = activation(h)
    return h


def mlp_apply(spec: MlpSpec, params: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """`forward_mlp` evaluated directly on arrays."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.layer_sizes[0]:
        raise ad.ShapeError(f"MLP expects [batch×{spec.layer_sizes[0]}] inputs, got {x.shape}.")
    activation = _NUMPY_ACTIVATIONS[spec.activation]
    h = x
    for i in range(spec.n_layers):
        h = h @ params[f"weight_{i}"] + params[f"bias_{i}"]
        if i < spec.n_layers - 1:
            h = activation(h)
    return h


def policy_forward(spec: MlpSpec, params: Mapping[str, ad.Var], state: ad.Var) -> tuple[ad.Var, ad.Var]:
    """Gaussian policy head: per-row action means and the shared log-variance."""
    if len(state.dims) != 2 or state.dims[1] != 2:
        raise ad.ShapeError(f"Policy expects [batch×2] states, got {state.dims}.")
    return forward_mlp(spec, params, state), params["log_var"]


# --- Shared / task-specific split ---

def layer_count(params: ParamSet) -> int:
    indices = [int(m.group(2)) for m in map(_LAYER_NAME.match, params.names()) if m]
    return max(indices) + 1 if indices else 0


def split_params(full: ParamSet, split_layer: int) -> CompositeParamSet:
    """
    Layers below `split_layer` become shared; the rest, plus any non-layer
    extras, become task-specific. split_layer == 0 leaves nothing shared.
    """
    n_layers = layer_count(full)
    if not 0 <= split_layer <= n_layers:
        raise ValueError(f"split_layer {split_layer} outside [0, {n_layers}].")
    shared, specific = [], []
    for name, t in full.items():
        m = _LAYER_NAME.match(name)
        (shared if m and int(m.group(2)) < split_layer else specific).append((name, t))
    return CompositeParamSet(shared=ParamSet(shared), task_specific=ParamSet(specific), split_layer=split_layer)


def join_params(composite: CompositeParamSet) -> ParamSet:
    return ParamSet.merge(composite.shared, composite.task_specific)
