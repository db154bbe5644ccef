"""Dense ReLU networks in float64: forward pass, reverse-mode gradients, path gains.

Everything here is a pure function of immutable inputs.  Arrays are never
mutated after a :class:`DenseModel` is built.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Array dimensions do not chain or do not match the model."""


class NumericError(ArithmeticError):
    def __init__(self, message: str, layer: int):
        super().__init__(f"{message} (layer {layer})")
        self.layer = layer


class GatingNotFixedError(ValueError):
    """A downstream ReLU can change state somewhere inside the feature box."""


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    relu: bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass(frozen=True)
class DenseModel:
    """Fully connected network; layer 0 is the attack layer."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        layers = []
        for k, layer in enumerate(self.layers):
            w = np.array(layer.weight, dtype=np.float64)
            b = np.array(layer.bias, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape}")
            if k > 0 and w.shape[1] != layers[-1].weight.shape[0]:
                raise ShapeError(
                    f"layer {k} expects {w.shape[1]} inputs, previous layer emits "
                    f"{layers[-1].weight.shape[0]}"
                )
            w.setflags(write=False)
            b.setflags(write=False)
            layers.append(Layer(w, b, bool(layer.relu)))
        if layers[-1].relu:
            raise ShapeError("final layer must be linear")
        object.__setattr__(self, "layers", tuple(layers))

    @classmethod
    def from_arrays(cls, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> "DenseModel":
        """ReLU after every layer except the last."""
        n = len(weights)
        return cls(tuple(Layer(w, b, k < n - 1) for k, (w, b) in enumerate(zip(weights, biases))))

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def n_attack(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "DenseModel":
        """Same architecture, new parameter arrays (ordered as :meth:`params`)."""
        if len(params) != 2 * len(self.layers):
            raise ShapeError("parameter list does not match the model")
        layers = []
        for k, layer in enumerate(self.layers):
            w, b = params[2 * k], params[2 * k + 1]
            if np.shape(w) != layer.weight.shape or np.shape(b) != layer.bias.shape:
                raise ShapeError(f"layer {k}: parameter shape mismatch")
            layers.append(Layer(w, b, layer.relu))
        return DenseModel(tuple(layers))


@dataclass(frozen=True)
class Batch:
    """Victim records.  ``targets`` are floats (regression) or int class indices."""

    features: np.ndarray
    targets: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ShapeError(f"features must be a non-empty (B, d) array, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite values")
        if self.n_classes is None:
            y = np.array(self.targets, dtype=np.float64)
        else:
            y = np.array(self.targets, dtype=np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError(f"class index outside [0, {self.n_classes})")
        if y.shape[0] != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} feature rows but {y.shape[0]} targets")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Batch":
        return Batch(self.features[idx], self.targets[idx], self.n_classes)


@dataclass(frozen=True)
class GradientReport:
    """Gradients of the batch-mean loss, one (dW, db) pair per layer."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @property
    def attack_weight(self) -> np.ndarray:
        return self.weights[0]

    @property
    def attack_bias(self) -> np.ndarray:
        return self.biases[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_params(cls, params: Sequence[np.ndarray]) -> "GradientReport":
        return cls(tuple(params[0::2]), tuple(params[1::2]))

    def scaled(self, factor: float) -> "GradientReport":
        return GradientReport.from_params([factor * p for p in self.params()])

    def max_abs_diff(self, other: "GradientReport") -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.params(), other.params()))


# -- losses ------------------------------------------------------------------


class LossKind:
    name = "abstract"
    classification = False

    def value(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-sample loss for outputs ``z`` (B, C) and targets ``y`` (B,)."""
        raise NotImplementedError

    def output_grad(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-sample dL_j/dz^L, shape (B, C)."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self))


class SquaredError(LossKind):
    """L_j = (z - y)^2 on a scalar output."""

    name = "squared-error"

    def value(self, z, y):
        return (z[:, 0] - y) ** 2

    def output_grad(self, z, y):
        return 2.0 * (z - np.asarray(y, dtype=np.float64)[:, None])


class CrossEntropy(LossKind):
    """Softmax cross-entropy on class indices."""

    name = "cross-entropy"
    classification = True

    @staticmethod
    def _log_softmax(z):
        m = np.max(z, axis=1, keepdims=True)
        return z - m - np.log(np.sum(np.exp(z - m), axis=1, keepdims=True))

    def value(self, z, y):
        ls = self._log_softmax(z)
        return -ls[np.arange(z.shape[0]), np.asarray(y, dtype=np.int64)]

    def output_grad(self, z, y):
        p = np.exp(self._log_softmax(z))
        p[np.arange(z.shape[0]), np.asarray(y, dtype=np.int64)] -= 1.0
        return p


LOSSES = {"squared-error": SquaredError, "cross-entropy": CrossEntropy}


def loss_from_name(name: str) -> LossKind:
    try:
        return LOSSES[name]()
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}") from None


# -- forward / backward --------------------------------------------------------


def _as_rows(model: DenseModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    if rows.ndim != 2 or rows.shape[1] != model.input_dim:
        raise ShapeError(f"input has shape {x.shape}, model expects {model.input_dim} features")
    return rows


def forward_rows(model: DenseModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Batched forward pass.

    Returns the output ``(B, C)`` together with per-layer pre-activations and
    post-activations (the post list starts with the input itself).
    """
    h = _as_rows(model, x)
    pre, post = [], [h]
    for layer in model.layers:
        a = h @ layer.weight.T + layer.bias
        pre.append(a)
        # strict inequality: exactly zero counts as inactive
        h = np.where(a > 0.0, a, 0.0) if layer.relu else a
        post.append(h)
    return h, pre, post


def forward(model: DenseModel, x: np.ndarray):
    """Single-sample forward pass: ``(output, pre_activations, post_activations)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("forward expects one sample; use forward_rows for batches")
    out, pre, post = forward_rows(model, x)
    return out[0], [p[0] for p in pre], [p[0] for p in post]


def _backward(model: DenseModel, pre, post, delta: np.ndarray, scale: float):
    """Reverse pass from output errors ``delta`` (B, C); returns per-layer (dW, db)."""
    dws, dbs = [], []
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.relu:
            delta = delta * (pre[k] > 0.0)
        if not np.all(np.isfinite(delta)):
            raise NumericError("non-finite backpropagated error", k)
        dws.append(scale * (delta.T @ post[k]))
        dbs.append(scale * delta.sum(axis=0))
        if k:
            delta = delta @ layer.weight
    return tuple(reversed(dws)), tuple(reversed(dbs))


def batch_gradient(model: DenseModel, batch: Batch, loss: LossKind) -> GradientReport:
    """Exact gradient of ``(1/B) * sum_j L_j`` with respect to every parameter."""
    if batch.dim != model.input_dim:
        raise ShapeError(f"batch has {batch.dim} features, model expects {model.input_dim}")
    out, pre, post = forward_rows(model, batch.features)
    for k, a in enumerate(pre):
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite activation", k)
    delta = loss.output_grad(out, batch.targets)
    dws, dbs = _backward(model, pre, post, delta, 1.0 / batch.size)
    return GradientReport(dws, dbs)


def batch_loss(model: DenseModel, batch: Batch, loss: LossKind) -> float:
    out, _, _ = forward_rows(model, batch.features)
    return float(np.mean(loss.value(out, batch.targets)))


def per_sample_output_grad(model: DenseModel, x: np.ndarray, y, loss: LossKind) -> np.ndarray:
    """dL_j/dz^L for one sample.  Shape ``(C,)``; for squared error C == 1."""
    out, _, _ = forward_rows(model, np.asarray(x, dtype=np.float64)[None, :])
    return loss.output_grad(out, np.asarray([y]))[0]


# -- fixed gating ----------------------------------------------------------------


def propagate_box(model: DenseModel, lower: np.ndarray, upper: np.ndarray):
    """Interval bounds of every pre-activation over the input box ``[lower, upper]``."""
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    bounds = []
    for layer in model.layers:
        wp = np.clip(layer.weight, 0.0, None)
        wn = np.clip(layer.weight, None, 0.0)
        a_lo = wp @ lo + wn @ hi + layer.bias
        a_hi = wp @ hi + wn @ lo + layer.bias
        bounds.append((a_lo, a_hi))
        if layer.relu:
            lo, hi = np.maximum(a_lo, 0.0), np.maximum(a_hi, 0.0)
        else:
            lo, hi = a_lo, a_hi
    return bounds


def downstream_gates(model: DenseModel, lower, upper) -> dict[int, np.ndarray]:
    """On/off pattern of every ReLU after the attack layer, constant over the box.

    Raises :class:`GatingNotFixedError` when interval arithmetic cannot rule
    out a sign change.  The check is conservative.
    """
    bounds = propagate_box(model, lower, upper)
    gates = {}
    for k in range(1, len(model.layers)):
        if not model.layers[k].relu:
            continue
        a_lo, a_hi = bounds[k]
        on = a_lo > 0.0
        off = a_hi < 0.0
        if not np.all(on | off):
            bad = int(np.flatnonzero(~(on | off))[0])
            raise GatingNotFixedError(f"layer {k} unit {bad} may switch over the feature box")
        gates[k] = on
    return gates


def path_gain(model: DenseModel, lower, upper, head: np.ndarray | None = None) -> np.ndarray:
    """Constant Jacobian dz^L/dz^a_i of the output w.r.t. each attack-layer unit.

    For a scalar output this is the chain product of downstream weights over
    the always-on gates.  With a rank-1 classification head ``W^L = c u^T``
    pass ``head=c``; the returned factor is then built from ``u``.
    """
    gates = downstream_gates(model, lower, upper)
    last = model.layers[-1].weight
    if head is None:
        if last.shape[0] != 1:
            raise ShapeError("multi-output model needs a head projection vector")
        jac = last
    else:
        c = np.asarray(head, dtype=np.float64)
        if c.shape != (last.shape[0],):
            raise ShapeError("head vector does not match the output layer")
        jac = (c @ last)[None, :] / float(c @ c)
    for k in range(len(model.layers) - 2, 0, -1):
        jac = (jac * gates[k]) @ model.layers[k].weight
    g = jac[0]
    if np.any(g == 0.0):
        raise GatingNotFixedError(f"zero path gain at units {np.flatnonzero(g == 0.0).tolist()}")
    return g
