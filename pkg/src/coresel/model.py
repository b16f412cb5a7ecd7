"""Feedforward ReLU classifier with exact per-example backpropagation.

The network is a stack of affine layers with ReLU on every hidden layer and
identity on the output; the loss is softmax cross-entropy. Parameters flatten
in one canonical order used everywhere (gradients, sgd steps, checkpoints):
layer-0 weights row-major, layer-0 bias, layer-1 weights, layer-1 bias, ...

A GradSelector names the layers whose (weight, bias) blocks appear in an
extracted gradient; the restricted flattening concatenates those blocks in
layer order, so a partial gradient is exactly a slice-and-concatenate of the
full one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyInputError, FormatError
from .ioutil import atomic_write_bytes

__all__ = [
    "ParamSet",
    "GradSelector",
    "PerExampleGrads",
    "init_params",
    "forward",
    "forward_batch",
    "embeddings",
    "loss",
    "per_example_gradients",
    "mean_gradient",
    "sgd_step",
    "accuracy",
    "flatten_params",
    "unflatten_params",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ParamSet:
    """Immutable stack of (weight, bias) pairs; weight l has shape (out_l, in_l)."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix, at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimensionError(f"layer {l}: weight {w.shape} incompatible with bias {b.shape}")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise DimensionError(
                    f"layer {l} expects {w.shape[1]} inputs but layer {l-1} emits "
                    f"{self.weights[l-1].shape[0]}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        """(input dim, hidden dims..., output dim)."""
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def block_slices(self) -> tuple[slice, ...]:
        """Per-layer (weights+bias) extents within the full flattening."""
        slices = []
        offset = 0
        for w, b in zip(self.weights, self.biases):
            size = w.size + b.size
            slices.append(slice(offset, offset + size))
            offset += size
        return tuple(slices)

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class GradSelector:
    """Which layers' gradient blocks to extract; stored sorted and duplicate-free."""

    layers: tuple[int, ...]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("GradSelector needs at least one layer")
        object.__setattr__(self, "layers", tuple(sorted(set(int(l) for l in self.layers))))

    def resolve(self, n_layers: int) -> tuple[int, ...]:
        if self.layers[0] < 0 or self.layers[-1] >= n_layers:
            raise DimensionError(f"selector layers {self.layers} outside 0..{n_layers - 1}")
        return self.layers

    @classmethod
    def all_layers(cls, n_layers: int) -> "GradSelector":
        return cls(tuple(range(n_layers)))


@dataclass(frozen=True)
class PerExampleGrads:
    """Rows are exact per-example loss gradients over the selected layers."""

    matrix: np.ndarray  # (B, P') float64
    selector: GradSelector

    @property
    def batch_size(self) -> int:
        return self.matrix.shape[0]


def init_params(layer_sizes, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise DimensionError(f"need at least (input, output) positive dims, got {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ParamSet(tuple(weights), tuple(biases))


def _check_batch(params: ParamSet, x: np.ndarray, y=None) -> tuple[np.ndarray, np.ndarray | None]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a (batch, features) matrix, got shape {x.shape}")
    if x.shape[0] == 0:
        raise EmptyInputError("empty batch")
    if x.shape[1] != params.input_dim:
        raise DimensionError(f"batch has {x.shape[1]} features, model expects {params.input_dim}")
    if y is None:
        return x, None
    y = np.asarray(y)
    if y.shape != (x.shape[0],):
        raise DimensionError(f"labels shape {y.shape} does not match batch of {x.shape[0]}")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= params.n_classes:
        raise DimensionError(f"labels must lie in 0..{params.n_classes - 1}")
    return x, y


def _forward_pass(params: ParamSet, x: np.ndarray):
    """Return (activations per layer input, pre-activations, logits)."""
    acts = [x]
    preacts = []
    a = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        preacts.append(z)
        a = np.maximum(z, 0.0) if l < last else z
        acts.append(a)
    return acts, preacts, acts[-1]


def forward_batch(params: ParamSet, x) -> np.ndarray:
    """Logits for a (batch, features) matrix."""
    x, _ = _check_batch(params, x)
    return _forward_pass(params, x)[2]


def forward(params: ParamSet, x) -> np.ndarray:
    """Logits for a single example vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a feature vector, got shape {x.shape}")
    return forward_batch(params, x[None, :])[0]


def embeddings(params: ParamSet, x) -> np.ndarray:
    """Penultimate activations: the input to the final layer (post-ReLU)."""
    x, _ = _check_batch(params, x)
    return _forward_pass(params, x)[0][-2]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_example_losses(params: ParamSet, x, y) -> np.ndarray:
    x, y = _check_batch(params, x, y)
    log_p = _log_softmax(_forward_pass(params, x)[2])
    return -log_p[np.arange(x.shape[0]), y]


def loss(params: ParamSet, x, y) -> float:
    """Mean softmax cross-entropy over the batch."""
    return float(per_example_losses(params, x, y).mean())


def _backward_deltas(params: ParamSet, x: np.ndarray, y: np.ndarray):
    """Activations plus per-layer deltas d ℓ_n / d z_l for every example n."""
    acts, preacts, logits = _forward_pass(params, x)
    probs = np.exp(_log_softmax(logits))
    delta = probs
    delta[np.arange(x.shape[0]), y] -= 1.0
    deltas = [None] * params.n_layers
    deltas[-1] = delta
    for l in range(params.n_layers - 2, -1, -1):
        deltas[l] = (deltas[l + 1] @ params.weights[l + 1]) * (preacts[l] > 0.0)
    return acts, deltas


def per_example_gradients(params: ParamSet, x, y, selector: GradSelector | None = None) -> PerExampleGrads:
    """Exact gradient of each example's own loss, flattened per `selector`."""
    x, y = _check_batch(params, x, y)
    if selector is None:
        selector = GradSelector.all_layers(params.n_layers)
    chosen = selector.resolve(params.n_layers)
    acts, deltas = _backward_deltas(params, x, y)
    b = x.shape[0]
    blocks = []
    for l in chosen:
        dw = np.einsum("bo,bi->boi", deltas[l], acts[l]).reshape(b, -1)
        blocks.append(dw)
        blocks.append(deltas[l])
    return PerExampleGrads(np.concatenate(blocks, axis=1), selector)


def mean_gradient(params: ParamSet, x, y, selector: GradSelector | None = None) -> np.ndarray:
    """Gradient of the mean batch loss, computed in one fused pass."""
    x, y = _check_batch(params, x, y)
    if selector is None:
        selector = GradSelector.all_layers(params.n_layers)
    chosen = selector.resolve(params.n_layers)
    acts, deltas = _backward_deltas(params, x, y)
    b = x.shape[0]
    blocks = []
    for l in chosen:
        blocks.append((deltas[l].T @ acts[l]).ravel() / b)
        blocks.append(deltas[l].mean(axis=0))
    return np.concatenate(blocks)


def flatten_params(params: ParamSet) -> np.ndarray:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten_params(flat, layer_sizes) -> ParamSet:
    flat = np.asarray(flat, dtype=np.float64)
    sizes = [int(s) for s in layer_sizes]
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in).copy())
        offset += fan_out * fan_in
        biases.append(flat[offset : offset + fan_out].copy())
        offset += fan_out
    if offset != flat.shape[0]:
        raise DimensionError(f"flat vector has {flat.shape[0]} entries, layout needs {offset}")
    return ParamSet(tuple(weights), tuple(biases))


def sgd_step(params: ParamSet, mean_grad, lr: float) -> ParamSet:
    """Return params minus lr times a FULL-flattening gradient."""
    grad = np.asarray(mean_grad, dtype=np.float64)
    if grad.shape != (params.param_count,):
        raise DimensionError(f"gradient length {grad.shape} != parameter count {params.param_count}")
    if lr < 0:
        raise DimensionError("learning rate must be nonnegative")
    return unflatten_params(flatten_params(params) - lr * grad, params.layer_sizes)


def accuracy(params: ParamSet, x, y) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    x, y = _check_batch(params, x, y)
    preds = np.argmax(forward_batch(params, x), axis=1)
    return float((preds == y).mean())


def save_checkpoint(params: ParamSet, path: str) -> None:
    """Header line of layer dims, then the flat params as little-endian float64."""
    header = " ".join(str(d) for d in params.layer_sizes) + "\n"
    payload = flatten_params(params).astype("<f8").tobytes()
    atomic_write_bytes(path, header.encode("ascii") + payload)


def load_checkpoint(path: str) -> ParamSet:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        sizes = [int(tok) for tok in header.decode("ascii").split()]
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header") from exc
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise FormatError(f"{path}: checkpoint header must list layer dims, got {header!r}")
    expected = sum((i + 1) * o for i, o in zip(sizes[:-1], sizes[1:]))
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.shape[0] != expected:
        raise FormatError(
            f"{path}: checkpoint holds {flat.shape[0]} floats, dims {sizes} need {expected}"
        )
    return unflatten_params(flat.astype(np.float64), sizes)
