"""Dense two-block classifier with explicit forward and backward passes.

Models are flat float64 parameter vectors plus a per-layer layout derived
from a ModelSpec, so structurally identical models support element-wise
arithmetic (averaging, differencing, squared distances) without any layer
bookkeeping at the call site. The network is a stack of dense layers with a
leaky-rectifier activation (the base block, ending in the feature layer)
followed by one dense layer to 2 class logits (the head block).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ContractError, InputError

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: base widths, feature width, binary head."""

    input_dim: int
    base_hidden: tuple[int, ...] = (128,)
    feature_dim: int = 128
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "base_hidden", tuple(int(h) for h in self.base_hidden))
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1 (got {self.input_dim})")
        if not self.base_hidden or any(h < 1 for h in self.base_hidden):
            raise ConfigError(f"base_hidden widths must all be >= 1 (got {self.base_hidden})")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1 (got {self.feature_dim})")
        if self.num_classes != 2:
            raise ConfigError("the classifier is binary: num_classes must be 2")
        if self.base_hidden[-1] != self.feature_dim:
            raise ConfigError(
                f"feature_dim ({self.feature_dim}) must equal the last base-block "
                f"width ({self.base_hidden[-1]})"
            )

    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        """(fan_in, fan_out) per dense layer, base block first, head last."""
        dims = []
        prev = self.input_dim
        for h in self.base_hidden:
            dims.append((prev, h))
            prev = h
        dims.append((prev, self.num_classes))
        return tuple(dims)

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims())


@lru_cache(maxsize=None)
def _layout(spec: ModelSpec) -> tuple[tuple[int, int, int, int, int], ...]:
    """Per-layer (w_start, w_end, fan_in, fan_out, b_end) offsets into the flat vector."""
    slots = []
    off = 0
    for fi, fo in spec.layer_dims():
        w_end = off + fi * fo
        b_end = w_end + fo
        slots.append((off, w_end, fi, fo, b_end))
        off = b_end
    return tuple(slots)


@dataclass
class ModelParams:
    """Flat parameter vector bound to the ModelSpec that defines its layout."""

    spec: ModelSpec
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.spec.n_params,):
            raise ContractError(
                f"parameter vector length {self.values.shape} does not match "
                f"layout ({self.spec.n_params},)"
            )

    @staticmethod
    def zeros(spec: ModelSpec) -> "ModelParams":
        return ModelParams(spec, np.zeros(spec.n_params, dtype=np.float64))

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, self.values.copy())

    def layers(self):
        """Yields (W, b) views into the flat vector, base block first."""
        for w0, w1, fi, fo, b1 in _layout(self.spec):
            yield self.values[w0:w1].reshape(fi, fo), self.values[w1:b1]


@dataclass
class GradBuffer:
    """Flat gradient accumulator congruent with a ModelParams layout."""

    spec: ModelSpec
    values: np.ndarray

    @staticmethod
    def zeros(spec: ModelSpec) -> "GradBuffer":
        return GradBuffer(spec, np.zeros(spec.n_params, dtype=np.float64))

    def zero_(self):
        self.values[:] = 0.0

    def add_scaled_(self, other: np.ndarray, scale: float = 1.0):
        self.values += scale * other

    def layers(self):
        for w0, w1, fi, fo, b1 in _layout(self.spec):
            yield self.values[w0:w1].reshape(fi, fo), self.values[w1:b1]


@dataclass
class ForwardTrace:
    """Everything the backward pass needs from one forward evaluation."""

    params: ModelParams
    x: np.ndarray
    pre_acts: list[np.ndarray]  # base-layer inputs to the activation
    acts: list[np.ndarray]      # base-layer activations; acts[-1] is the feature matrix
    logits: np.ndarray
    probs: np.ndarray

    @property
    def features(self) -> np.ndarray:
        return self.acts[-1]

    @property
    def n(self) -> int:
        return self.x.shape[0]


def check_congruent(a: ModelParams, b: ModelParams):
    if a.spec != b.spec:
        raise ContractError(f"model layouts differ: {a.spec} vs {b.spec}")


def init_model(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic given rng state."""
    params = ModelParams.zeros(spec)
    for w, _b in params.layers():
        bound = 1.0 / np.sqrt(w.shape[0])
        w[:] = rng.uniform(-bound, bound, size=w.shape)
    return params


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ModelParams, x: np.ndarray) -> ForwardTrace:
    """Run the network on a (n, input_dim) batch, caching the backward state."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise InputError(
            f"batch has feature dimension {x.shape[1] if x.ndim == 2 else x.shape}, "
            f"model expects {params.spec.input_dim}"
        )
    layers = list(params.layers())
    pre_acts, acts = [], []
    a = x
    for w, b in layers[:-1]:
        z = a @ w + b
        pre_acts.append(z)
        a = np.where(z >= 0.0, z, LEAKY_SLOPE * z)
        acts.append(a)
    w_head, b_head = layers[-1]
    logits = a @ w_head + b_head
    return ForwardTrace(params, x, pre_acts, acts, logits, softmax(logits))


def backward(
    trace: ForwardTrace,
    d_logits: np.ndarray | None,
    d_features: np.ndarray | None,
    grads: GradBuffer,
) -> GradBuffer:
    """Accumulate into grads the exact gradient of d_logits.logits + d_features.features.

    Upstream gradients injected at the base/head boundary (d_features) add to
    the gradient propagated down from the head, so feature-level losses and
    logit-level losses can share one backward sweep.
    """
    if grads.spec != trace.params.spec:
        raise ContractError("gradient buffer layout does not match the traced model")
    if d_logits is None and d_features is None:
        return grads
    if d_logits is not None and d_logits.shape != trace.logits.shape:
        raise ContractError(
            f"d_logits shape {d_logits.shape} does not match trace {trace.logits.shape}"
        )
    if d_features is not None and d_features.shape != trace.features.shape:
        raise ContractError(
            f"d_features shape {d_features.shape} does not match trace {trace.features.shape}"
        )

    param_layers = list(trace.params.layers())
    grad_layers = list(grads.layers())

    upstream = None
    if d_logits is not None:
        gw, gb = grad_layers[-1]
        gw += trace.features.T @ d_logits
        gb += d_logits.sum(axis=0)
        upstream = d_logits @ param_layers[-1][0].T
    if d_features is not None:
        upstream = d_features if upstream is None else upstream + d_features

    for i in range(len(trace.pre_acts) - 1, -1, -1):
        dz = upstream * np.where(trace.pre_acts[i] >= 0.0, 1.0, LEAKY_SLOPE)
        inp = trace.x if i == 0 else trace.acts[i - 1]
        gw, gb = grad_layers[i]
        gw += inp.T @ dz
        gb += dz.sum(axis=0)
        if i > 0:
            upstream = dz @ param_layers[i][0].T
    return grads


def sgd_step(params: ModelParams, grads: GradBuffer, eta: float) -> ModelParams:
    """Plain gradient-descent step; returns new params, never mutates inputs."""
    if grads.spec != params.spec:
        raise ContractError("gradient buffer layout does not match the model")
    if eta < 0:
        raise InputError(f"learning rate must be >= 0 (got {eta})")
    return ModelParams(params.spec, params.values - eta * grads.values)


def param_sq_distance(a: ModelParams, b: ModelParams) -> float:
    """Squared L2 distance over the full flat parameter vectors."""
    check_congruent(a, b)
    diff = a.values - b.values
    return float(diff @ diff)
