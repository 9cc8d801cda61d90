"""
Dense MLP layers with analytic backward passes, Adam, seeded Gaussian draws
and a central-difference gradient check.

Matrices are float64 numpy arrays shaped (batch, features). Weights are stored
(out, in), so a layer computes ``Y = X @ W.T + b`` and its backward pass is

    dX = dY @ W,   dW = dY.T @ X,   db = dY.sum(axis=0)
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigError, DimensionError, NumericError, StateError

logger = logging.getLogger("brainage.services.numerics")

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("linear", "sigmoid")


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Return ``x`` as a 2-D float64 array."""
    array = np.asarray(x, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {array.shape}")
    return array


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large negative inputs
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths and activations of a fully connected network."""

    layer_sizes: Tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(size) for size in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("An MLP needs at least an input and an output size")
        if any(size < 1 for size in sizes):
            raise ConfigError(f"Layer sizes must be >= 1, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"Unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"Unknown output activation {self.output_activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MLPSpec":
        return cls(
            layer_sizes=tuple(data["layer_sizes"]),
            hidden_activation=data["hidden_activation"],
            output_activation=data["output_activation"],
        )


@dataclass
class MLPParams:
    """Per-layer weights (out x in) and biases (out)."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MLPParams":
        return MLPParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def arrays(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases]

    def to_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        """Flat name -> array view, e.g. ``enc1.W0``."""
        named = {}
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"{prefix}W{index}"] = w
            named[f"{prefix}b{index}"] = b
        return named

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], prefix: str = "") -> "MLPParams":
        weights, biases = [], []
        index = 0
        while f"{prefix}W{index}" in arrays:
            weights.append(np.asarray(arrays[f"{prefix}W{index}"], dtype=np.float64))
            biases.append(np.asarray(arrays[f"{prefix}b{index}"], dtype=np.float64))
            index += 1
        if not weights:
            raise StateError(f"No layers found under prefix {prefix!r}")
        return cls(weights, biases)

    def add(self, other: "MLPParams") -> "MLPParams":
        return MLPParams(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scale(self, factor: float) -> "MLPParams":
        return MLPParams([w * factor for w in self.weights], [b * factor for b in self.biases])

    @property
    def n_params(self) -> int:
        return int(sum(array.size for array in self.arrays()))

    def check(self, spec: MLPSpec) -> None:
        """Raise DimensionError unless shapes match ``spec``."""
        if len(self.weights) != spec.n_layers or len(self.biases) != spec.n_layers:
            raise DimensionError(f"Expected {spec.n_layers} layers, got {len(self.weights)}")
        for index, (n_in, n_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
            if self.weights[index].shape != (n_out, n_in) or self.biases[index].shape != (n_out,):
                raise DimensionError(
                    f"Layer {index}: expected W {(n_out, n_in)}, b {(n_out,)}, "
                    f"got {self.weights[index].shape}, {self.biases[index].shape}"
                )


@dataclass
class MLPCache:
    """Activations recorded by ``mlp_forward`` for the backward pass."""

    spec: MLPSpec
    params: MLPParams
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray


def init_mlp(spec: MLPSpec, rng: "Rng") -> MLPParams:
    """Glorot-normal weights, zero biases."""
    weights, biases = [], []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        scale = np.sqrt(2.0 / (n_in + n_out))
        weights.append(rng.generator.standard_normal((n_out, n_in)) * scale)
        biases.append(np.zeros(n_out))
    return MLPParams(weights, biases)


def _activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    return x


def _activation_grad(pre: np.ndarray, out: np.ndarray, upstream: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return upstream * (pre > 0)
    if kind == "tanh":
        return upstream * (1.0 - out * out)
    if kind == "sigmoid":
        return upstream * out * (1.0 - out)
    return upstream


def mlp_forward(params: MLPParams, spec: MLPSpec, x) -> Tuple[np.ndarray, MLPCache]:
    """Run the network on a (batch, in) matrix."""
    x = as_matrix(x)
    if x.shape[1] != spec.in_dim:
        raise DimensionError(f"Expected {spec.in_dim} input columns, got {x.shape[1]}")
    params.check(spec)

    inputs, pre_activations = [], []
    activation = x
    for index, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(activation)
        pre = activation @ w.T + b
        pre_activations.append(pre)
        last = index == spec.n_layers - 1
        activation = _activate(pre, spec.output_activation if last else spec.hidden_activation)

    if not np.all(np.isfinite(activation)):
        raise NumericError("MLP forward pass produced non-finite values")
    return activation, MLPCache(spec, params, inputs, pre_activations, activation)


def mlp_backward(cache: Optional[MLPCache], upstream_grad) -> Tuple[MLPParams, np.ndarray]:
    """Gradients of a scalar loss w.r.t. parameters and input, given dL/dY."""
    if cache is None:
        raise StateError("mlp_backward needs the cache returned by mlp_forward")
    spec, params = cache.spec, cache.params
    grad = as_matrix(upstream_grad, "upstream_grad")
    if grad.shape != cache.output.shape:
        raise DimensionError(f"Upstream grad shape {grad.shape} != output shape {cache.output.shape}")

    weight_grads: List[np.ndarray] = [None] * spec.n_layers
    bias_grads: List[np.ndarray] = [None] * spec.n_layers
    for index in reversed(range(spec.n_layers)):
        last = index == spec.n_layers - 1
        kind = spec.output_activation if last else spec.hidden_activation
        out = cache.output if last else cache.inputs[index + 1]
        grad = _activation_grad(cache.pre_activations[index], out, grad, kind)
        weight_grads[index] = grad.T @ cache.inputs[index]
        bias_grads[index] = grad.sum(axis=0)
        grad = grad @ params.weights[index]
    return MLPParams(weight_grads, bias_grads), grad


@dataclass(frozen=True)
class AdamState:
    """Adam moments for one network."""

    m: MLPParams
    v: MLPParams
    t: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: MLPParams, learning_rate: float = 0.001) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), t=0, learning_rate=learning_rate)

    def with_learning_rate(self, learning_rate: float) -> "AdamState":
        return replace(self, learning_rate=learning_rate)


def adam_step(params: MLPParams, grads: MLPParams, state: AdamState) -> Tuple[MLPParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if len(params.arrays()) != len(grads.arrays()):
        raise DimensionError("Gradient structure does not match parameters")
    t = state.t + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        if p.shape != g.shape:
            raise DimensionError(f"Gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        step = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        new_arrays.append(p - step)
        new_m.append(m)
        new_v.append(v)

    n = len(params.weights)

    def _split(arrays):
        return MLPParams(arrays[:n], arrays[n:])

    return _split(new_arrays), replace(state, m=_split(new_m), v=_split(new_v), t=t)


class Rng:
    """Seeded generator; children derive from (seed, *keys) and never share state."""

    def __init__(self, seed: int, keys: Sequence[int] = ()):
        self.seed = int(seed)
        self.keys = tuple(int(key) for key in keys)
        entropy = [self.seed, *self.keys]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, (*self.keys, *keys))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, keys={self.keys})"


def gaussian_sample(rng: Rng, shape) -> np.ndarray:
    """Standard-normal draws of the given shape."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if any(s < 1 for s in shape):
        raise DimensionError(f"Sample shape must be positive, got {shape}")
    return rng.generator.standard_normal(shape)


@dataclass
class GradcheckReport:
    max_rel_err: float
    max_abs_err: float
    passed: bool
    worst: str = ""


LossFn = Callable[[Mapping[str, np.ndarray]], Tuple[float, Mapping[str, np.ndarray]]]


def gradcheck(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8,
) -> GradcheckReport:
    """Compare analytic gradients with central differences, entry by entry.

    ``loss_fn(params)`` returns ``(loss, grads)`` with ``grads`` keyed like
    ``params``. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    work = {name: np.array(value, dtype=np.float64, copy=True) for name, value in params.items()}
    loss, analytic = loss_fn(work)
    if not np.isfinite(loss):
        raise NumericError("gradcheck: loss is not finite", {"loss": float(loss)})

    max_rel, max_abs, worst = 0.0, 0.0, ""
    for name, array in work.items():
        grad = np.asarray(analytic.get(name, np.zeros_like(array)), dtype=np.float64)
        if grad.shape != array.shape:
            raise DimensionError(f"gradcheck: gradient for {name} has shape {grad.shape}")
        flat = array.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + h
            plus, _ = loss_fn(work)
            flat[index] = original - h
            minus, _ = loss_fn(work)
            flat[index] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError("gradcheck: perturbed loss is not finite", {"parameter": name})
            numeric = (plus - minus) / (2.0 * h)
            exact = grad.reshape(-1)[index]
            abs_err = abs(exact - numeric)
            rel_err = abs_err / max(abs(exact), abs(numeric), floor)
            max_abs = max(max_abs, abs_err)
            if rel_err > max_rel:
                max_rel, worst = rel_err, f"{name}[{index}]"
    logger.debug("gradcheck max_rel_err=%.3e at %s", max_rel, worst)
    return GradcheckReport(max_rel_err=max_rel, max_abs_err=max_abs, passed=max_rel <= tol, worst=worst)
