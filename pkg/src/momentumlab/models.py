"""Differentiable model families with exact hand-coded gradients.

Four families share one `network_value_and_grad` entry point:

* quadratic:      F(w) = 0.5 w'Aw - b'w                     (demo objective)
* diagonal_net:   F(w) = L(u * v), w = [u; v]               (2-layer diagonal net)
* relu_mlp:       squared error of a fully-connected ReLU net (with biases)
* deep_linear:    squared error of a bias-free linear chain

Gradients are written out per family rather than pulled from an autodiff
framework, which keeps the dependency surface minimal and every gradient bit
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Dataset
from .errors import DimensionMismatchError, NonFiniteError

# --- squared-error regression loss -------------------------------------------


def loss(dataset: Dataset, theta: np.ndarray) -> float:
    """(1/2n) sum_i (y_i - <x_i, theta>)^2."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (dataset.d,):
        raise DimensionMismatchError(f"theta must have shape ({dataset.d},), got {theta.shape}")
    r = dataset.features @ theta - dataset.targets
    return float(r @ r) / (2.0 * dataset.n)


def grad_loss(dataset: Dataset, theta: np.ndarray) -> np.ndarray:
    """(1/n) X'(X theta - y)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (dataset.d,):
        raise DimensionMismatchError(f"theta must have shape ({dataset.d},), got {theta.shape}")
    r = dataset.features @ theta - dataset.targets
    return dataset.features.T @ r / dataset.n


def batch_grad(dataset: Dataset, batch, theta: np.ndarray) -> np.ndarray:
    """Gradient of the partial loss (1/2B) sum_{i in batch} (y_i - <x_i, theta>)^2."""
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    if batch.min() < 0 or batch.max() >= dataset.n:
        raise IndexError(f"batch indices must lie in [0, {dataset.n})")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (dataset.d,):
        raise DimensionMismatchError(f"theta must have shape ({dataset.d},), got {theta.shape}")
    xb = dataset.features[batch]
    r = xb @ theta - dataset.targets[batch]
    return xb.T @ r / batch.size


# --- weight-state reparametrisation -------------------------------------------


@dataclass
class WeightState:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.shape != self.v.shape:
            raise DimensionMismatchError("u and v must have the same shape")


@dataclass
class PMState:
    w_plus: np.ndarray
    w_minus: np.ndarray

    def __post_init__(self):
        self.w_plus = np.asarray(self.w_plus, dtype=float)
        self.w_minus = np.asarray(self.w_minus, dtype=float)
        if self.w_plus.shape != self.w_minus.shape:
            raise DimensionMismatchError("w_plus and w_minus must have the same shape")


def pm_of(ws: WeightState) -> PMState:
    return PMState(ws.u + ws.v, ws.u - ws.v)


def ws_of(pm: PMState) -> WeightState:
    return WeightState((pm.w_plus + pm.w_minus) / 2.0, (pm.w_plus - pm.w_minus) / 2.0)


def predictor(pm: PMState) -> np.ndarray:
    """theta = (w_plus^2 - w_minus^2)/4 = u * v."""
    return (pm.w_plus**2 - pm.w_minus**2) / 4.0


def balancedness(pm: PMState) -> np.ndarray:
    """Coordinate-wise |w_plus * w_minus| = |u^2 - v^2|."""
    return np.abs(pm.w_plus * pm.w_minus)


def init_scale(ws: WeightState) -> float:
    """alpha = max(||u||_inf, ||v||_inf)."""
    return float(max(np.max(np.abs(ws.u)), np.max(np.abs(ws.v))))


# --- model specs ---------------------------------------------------------------


@dataclass
class ModelSpec:
    kind: str                      # quadratic | diagonal_net | relu_mlp | deep_linear
    parameter_dim: int
    quad_matrix: np.ndarray | None = None
    quad_shift: np.ndarray | None = None
    dataset: Dataset | None = None
    widths: tuple[int, ...] | None = None


def quadratic_model(A: np.ndarray, b: np.ndarray) -> ModelSpec:
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
        raise DimensionMismatchError("A must be square and b compatible")
    return ModelSpec(kind="quadratic", parameter_dim=A.shape[0], quad_matrix=A, quad_shift=b)


def diagonal_net_model(dataset: Dataset) -> ModelSpec:
    return ModelSpec(kind="diagonal_net", parameter_dim=2 * dataset.d, dataset=dataset)


def relu_mlp_model(dataset: Dataset, widths: tuple[int, ...]) -> ModelSpec:
    widths = tuple(int(w) for w in widths)
    if widths[0] != dataset.d or widths[-1] != 1:
        raise DimensionMismatchError("widths must run from the input dim to a scalar output")
    return ModelSpec(
        kind="relu_mlp", parameter_dim=_mlp_dim(widths, with_biases=True), dataset=dataset, widths=widths
    )


def deep_linear_model(dataset: Dataset, widths: tuple[int, ...]) -> ModelSpec:
    widths = tuple(int(w) for w in widths)
    if widths[0] != dataset.d or widths[-1] != 1:
        raise DimensionMismatchError("widths must run from the input dim to a scalar output")
    return ModelSpec(
        kind="deep_linear", parameter_dim=_mlp_dim(widths, with_biases=False), dataset=dataset, widths=widths
    )


# --- feed-forward machinery ----------------------------------------------------


def _mlp_dim(widths, with_biases: bool) -> int:
    dim = 0
    for nin, nout in zip(widths[:-1], widths[1:]):
        dim += nin * nout + (nout if with_biases else 0)
    return dim


def _unpack(w: np.ndarray, widths, with_biases: bool):
    layers = []
    k = 0
    for nin, nout in zip(widths[:-1], widths[1:]):
        W = w[k : k + nin * nout].reshape(nout, nin)
        k += nin * nout
        if with_biases:
            b = w[k : k + nout]
            k += nout
        else:
            b = None
        layers.append((W, b))
    return layers


def mlp_random_weights(widths, rng: np.random.Generator, with_biases: bool, scale: float | None = None) -> np.ndarray:
    """He-style initialisation (or fixed `scale` stddev) packed into a flat vector."""
    parts = []
    for nin, nout in zip(widths[:-1], widths[1:]):
        sd = scale if scale is not None else np.sqrt(2.0 / nin)
        parts.append(sd * rng.standard_normal(nin * nout))
        if with_biases:
            parts.append(np.zeros(nout))
    return np.concatenate(parts)


def mlp_predict(w: np.ndarray, inputs: np.ndarray, widths, activation: str = "relu") -> np.ndarray:
    """Network outputs for a batch of inputs (rows)."""
    with_biases = activation == "relu"
    layers = _unpack(np.asarray(w, dtype=float), widths, with_biases)
    h = np.asarray(inputs, dtype=float)
    for i, (W, b) in enumerate(layers):
        z = h @ W.T
        if b is not None:
            z = z + b
        h = np.maximum(z, 0.0) if (activation == "relu" and i < len(layers) - 1) else z
    return h[:, 0]


def _mlp_value_and_grad(spec: ModelSpec, w: np.ndarray):
    data = spec.dataset
    with_biases = spec.kind == "relu_mlp"
    relu = spec.kind == "relu_mlp"
    layers = _unpack(w, spec.widths, with_biases)
    n = data.n

    acts = [data.features]
    pre = []
    h = data.features
    for i, (W, b) in enumerate(layers):
        z = h @ W.T
        if b is not None:
            z = z + b
        pre.append(z)
        h = np.maximum(z, 0.0) if (relu and i < len(layers) - 1) else z
        acts.append(h)

    resid = acts[-1][:, 0] - data.targets
    value = float(resid @ resid) / (2.0 * n)

    grad = np.zeros_like(w)
    delta = (resid / n)[:, None]                      # d value / d output
    k = grad.size
    for i in range(len(layers) - 1, -1, -1):
        W, b = layers[i]
        if b is not None:
            k -= b.size
            grad[k : k + b.size] = delta.sum(axis=0)
        gW = delta.T @ acts[i]
        k -= W.size
        grad[k : k + W.size] = gW.ravel()
        if i > 0:
            delta = delta @ W
            if relu:
                delta = delta * (pre[i - 1] > 0.0)
    return value, grad


def network_value_and_grad(spec: ModelSpec, w: np.ndarray):
    """Loss value and full gradient for any model family."""
    w = np.asarray(w, dtype=float)
    if w.shape != (spec.parameter_dim,):
        raise DimensionMismatchError(f"w must have shape ({spec.parameter_dim},), got {w.shape}")

    with np.errstate(over="ignore", invalid="ignore"):
        if spec.kind == "quadratic":
            Aw = spec.quad_matrix @ w
            value = 0.5 * float(w @ Aw) - float(spec.quad_shift @ w)
            grad = Aw - spec.quad_shift
        elif spec.kind == "diagonal_net":
            d = spec.dataset.d
            u, v = w[:d], w[d:]
            theta = u * v
            value = loss(spec.dataset, theta)
            g = grad_loss(spec.dataset, theta)
            grad = np.concatenate((g * v, g * u))
        elif spec.kind in ("relu_mlp", "deep_linear"):
            value, grad = _mlp_value_and_grad(spec, w)
        else:
            raise ValueError(f"unknown model kind {spec.kind!r}")

    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite loss or gradient in {spec.kind} evaluation", location=spec.kind)
    return value, grad
