"""Linear and small-MLP regressors: losses, exact gradients, and a full-batch
SGD trainer that retains its whole parameter trajectory."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset

LEAKY_SLOPE_DEFAULT = 0.01
MLP_HIDDEN_DEFAULT = (32, 8)
MLP_BIAS_INIT = 1e-2


@dataclass(frozen=True)
class Architecture:
    """Model shape descriptor: plain linear or a fixed feed-forward MLP."""

    kind: str
    layer_widths: tuple[int, ...]
    leaky_slope: float = LEAKY_SLOPE_DEFAULT

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.layer_widths) < 2 or any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.layer_widths[-1] != 1:
            raise ValueError("output width must be 1")
        if self.kind == "linear" and len(self.layer_widths) != 2:
            raise ValueError("linear model has exactly one layer")

    @staticmethod
    def linear(n_features: int) -> "Architecture":
        return Architecture("linear", (int(n_features), 1))

    @staticmethod
    def mlp(n_features: int, hidden=MLP_HIDDEN_DEFAULT,
            leaky_slope: float = LEAKY_SLOPE_DEFAULT) -> "Architecture":
        return Architecture("mlp", (int(n_features), *map(int, hidden), 1), leaky_slope)

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_features(self) -> int:
        return self.layer_widths[0]


@dataclass
class ModelParams:
    """Per-layer weight matrices (fan_in x fan_out) and bias vectors.

    The same container is used for gradients and for tangent/adjoint vectors,
    so it supports basic vector-space arithmetic.
    """

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        widths = self.arch.layer_widths
        if len(self.weights) != self.arch.n_layers or len(self.biases) != self.arch.n_layers:
            raise ValueError("layer count does not match architecture")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (widths[l], widths[l + 1]) or b.shape != (widths[l + 1],):
                raise ValueError(f"layer {l} shape mismatch")

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, [W.copy() for W in self.weights],
                           [b.copy() for b in self.biases])

    def axpy(self, coef: float, other: "ModelParams") -> "ModelParams":
        """Return self + coef * other."""
        return ModelParams(
            self.arch,
            [W + coef * V for W, V in zip(self.weights, other.weights)],
            [b + coef * c for b, c in zip(self.biases, other.biases)],
        )

    def scaled(self, coef: float) -> "ModelParams":
        return ModelParams(self.arch, [coef * W for W in self.weights],
                           [coef * b for b in self.biases])

    def flatten(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts) if parts else np.empty(0)

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        """Rebuild a parameter container from a flat vector (row-major layers)."""
        flat = np.asarray(flat, dtype=np.float64)
        weights, biases, off = [], [], 0
        for W, b in zip(self.weights, self.biases):
            weights.append(flat[off:off + W.size].reshape(W.shape).copy())
            off += W.size
            biases.append(flat[off:off + b.size].copy())
            off += b.size
        if off != flat.size:
            raise ValueError("flat vector length mismatch")
        return ModelParams(self.arch, weights, biases)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(W * W)) for W in self.weights)
                             + sum(float(np.sum(b * b)) for b in self.biases)))

    def is_finite(self) -> bool:
        return all(np.isfinite(W).all() for W in self.weights) and \
            all(np.isfinite(b).all() for b in self.biases)

    @staticmethod
    def zeros(arch: Architecture) -> "ModelParams":
        widths = arch.layer_widths
        return ModelParams(
            arch,
            [np.zeros((widths[l], widths[l + 1])) for l in range(arch.n_layers)],
            [np.zeros(widths[l + 1]) for l in range(arch.n_layers)],
        )


@dataclass
class Trajectory:
    """The full sequence of parameter states produced by SGD (length steps+1)."""

    states: list[ModelParams]
    eta: float
    steps: int

    @property
    def final(self) -> ModelParams:
        return self.states[-1]


def init_params(arch: Architecture, seed: int = 0) -> ModelParams:
    """Zeros for the linear model; Xavier-uniform weights and 1e-2 biases for the MLP."""
    if arch.kind == "linear":
        return ModelParams.zeros(arch)
    rng = np.random.default_rng(seed)
    widths = arch.layer_widths
    weights, biases = [], []
    for l in range(arch.n_layers):
        fan_in, fan_out = widths[l], widths[l + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.full(fan_out, MLP_BIAS_INIT))
    return ModelParams(arch, weights, biases)


def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _leaky_mask(z: np.ndarray, slope: float) -> np.ndarray:
    # derivative of LeakyReLU; the kink at 0 takes the negative-side slope
    return np.where(z > 0, 1.0, slope)


def _forward_pass(params: ModelParams, X: np.ndarray):
    """Return (activations, pre-activations, predictions).

    activations[l] is the input to layer l; the last hidden activation list
    entry is the network output block. Hidden layers use LeakyReLU, the output
    layer is affine.
    """
    slope = params.arch.leaky_slope
    L = params.arch.n_layers
    acts = [X]
    zs = []
    a = X
    for l in range(L):
        z = a @ params.weights[l] + params.biases[l]
        zs.append(z)
        a = _leaky(z, slope) if l < L - 1 else z
        acts.append(a)
    return acts, zs, a[:, 0]


def forward(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Model predictions for each row of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.arch.n_features:
        raise ValueError(
            f"expected (n, {params.arch.n_features}) input, got {X.shape}")
    return _forward_pass(params, X)[2]


def mse_loss(params: ModelParams, ds: Dataset, lam: float = 0.0) -> float:
    """Half mean squared error plus optional ridge penalty on the weights.

    loss = (1/2n) sum (f(x_i) - y_i)^2 + lam * (1/2) sum ||W_l||^2
    Biases are excluded from the penalty.
    """
    if ds.n < 1:
        raise ValueError("empty dataset")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    r = forward(params, ds.X) - ds.y
    loss = 0.5 * float(r @ r) / ds.n
    if lam:
        loss += lam * 0.5 * sum(float(np.sum(W * W)) for W in params.weights)
    return loss


def grad_loss(params: ModelParams, ds: Dataset, lam: float = 0.0) -> ModelParams:
    """Exact analytic gradient of `mse_loss` with the same container shape."""
    if ds.n < 1:
        raise ValueError("empty dataset")
    L = params.arch.n_layers
    slope = params.arch.leaky_slope
    acts, zs, out = _forward_pass(params, ds.X)
    delta = ((out - ds.y) / ds.n)[:, None]
    gW = [None] * L
    gb = [None] * L
    for l in range(L - 1, -1, -1):
        dz = delta if l == L - 1 else delta * _leaky_mask(zs[l], slope)
        gW[l] = acts[l].T @ dz
        if lam:
            gW[l] = gW[l] + lam * params.weights[l]
        gb[l] = dz.sum(axis=0)
        delta = dz @ params.weights[l].T
    return ModelParams(params.arch, gW, gb)


def loss_input_grads(params: ModelParams, X: np.ndarray, y: np.ndarray):
    """Gradients of the unregularized loss w.r.t. inputs and labels.

    Returns (dL/dX of shape (n, m), dL/dy of shape (n,)) for
    L = (1/2n) sum (f(x_i) - y_i)^2.
    """
    n = X.shape[0]
    L = params.arch.n_layers
    slope = params.arch.leaky_slope
    acts, zs, out = _forward_pass(params, X)
    r = out - y
    delta = (r / n)[:, None]
    for l in range(L - 1, -1, -1):
        dz = delta if l == L - 1 else delta * _leaky_mask(zs[l], slope)
        delta = dz @ params.weights[l].T
    return delta, -r / n


def per_sample_grads(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-point parameter gradients of the squared loss 0.5 (f(x_i) - y_i)^2.

    Returns an (n, P) matrix with one flattened gradient per row, layers in
    row-major order (matching ModelParams.flatten).
    """
    n = X.shape[0]
    L = params.arch.n_layers
    slope = params.arch.leaky_slope
    acts, zs, out = _forward_pass(params, X)
    delta = (out - y)[:, None]
    blocks = [None] * L
    for l in range(L - 1, -1, -1):
        dz = delta if l == L - 1 else delta * _leaky_mask(zs[l], slope)
        gw = np.einsum("ni,nj->nij", acts[l], dz).reshape(n, -1)
        blocks[l] = np.concatenate([gw, dz], axis=1)
        delta = dz @ params.weights[l].T
    return np.concatenate(blocks, axis=1)


def sgd_train(params0: ModelParams, ds: Dataset, eta: float, steps: int,
              lam: float = 0.0) -> Trajectory:
    """Full-batch gradient descent, retaining every intermediate state."""
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    if steps < 0:
        raise ValueError("step count must be non-negative")
    states = [params0.copy()]
    w = states[0]
    for t in range(steps):
        g = grad_loss(w, ds, lam)
        w = w.axpy(-eta, g)
        if not w.is_finite():
            raise RuntimeError(f"training diverged: non-finite parameters at iteration {t + 1}")
        states.append(w)
    return Trajectory(states, eta=eta, steps=steps)


def residual_sigma(params: ModelParams, ds: Dataset) -> float:
    """Residual standard error sqrt(sum r_i^2 / df) with df = n - m - 1."""
    df = ds.n - ds.m - 1
    if df < 1:
        raise ValueError(f"insufficient degrees of freedom (df={df})")
    r = forward(params, ds.X) - ds.y
    return float(np.sqrt(float(r @ r) / df))


@dataclass
class TrainConfig:
    """How to fit a model for evaluation or inside a defense."""

    kind: str = "linear"
    eta: float = 0.1
    epochs: int = 40
    lam: float = 0.0
    seed: int = 0
    hidden: tuple[int, ...] = MLP_HIDDEN_DEFAULT

    def architecture(self, n_features: int) -> Architecture:
        if self.kind == "linear":
            return Architecture.linear(n_features)
        return Architecture.mlp(n_features, self.hidden)


def fit(ds: Dataset, cfg: TrainConfig) -> ModelParams:
    """Initialize per config and run full-batch SGD; return the final state."""
    arch = cfg.architecture(ds.m)
    params0 = init_params(arch, cfg.seed)
    return sgd_train(params0, ds, cfg.eta, cfg.epochs, cfg.lam).final


def save_params(params: ModelParams, path) -> None:
    """Serialize architecture plus flat parameter arrays as JSON."""
    payload = {
        "kind": params.arch.kind,
        "layer_widths": list(params.arch.layer_widths),
        "leaky_slope": params.arch.leaky_slope,
        "weights": [W.ravel().tolist() for W in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }
    Path(path).write_text(json.dumps(payload))


def load_params(path) -> ModelParams:
    payload = json.loads(Path(path).read_text())
    arch = Architecture(payload["kind"], tuple(payload["layer_widths"]),
                        payload["leaky_slope"])
    widths = arch.layer_widths
    weights = [np.asarray(w, dtype=np.float64).reshape(widths[l], widths[l + 1])
               for l, w in enumerate(payload["weights"])]
    biases = [np.asarray(b, dtype=np.float64) for b in payload["biases"]]
    return ModelParams(arch, weights, biases)
