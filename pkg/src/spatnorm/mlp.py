"""Feedforward binary classifier trained with Adam on binary cross-entropy.

The network is sigmoid(W_{L+1} relu(W_L ... relu(W_1 x))) on standardized
features; an empty hidden-layer list gives the linear logistic baseline.
Dropout (inverted, so inference is a plain forward pass) regularizes the
hidden activations during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ClassifierModel",
    "NetworkConfig",
    "TrainingDivergence",
    "adam_step",
    "forward",
    "forward_batch",
    "gradient",
    "linear_config",
    "load_model",
    "loss",
    "save_model",
    "train",
]

_PROB_CLAMP = 1e-12


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and optimizer settings; layer_widths=() means linear."""

    layer_widths: tuple = (256, 128)
    dropout_rate: float = 0.3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class ClassifierModel:
    """Trained classifier: weights, biases, and feature standardization."""

    config: NetworkConfig
    weights: list  # W_i with shape (n_i, n_{i-1}); last maps to 1 output
    biases: list
    feature_means: np.ndarray
    feature_sds: np.ndarray
    final_loss: float | None = None
    loss_history: list = field(default_factory=list)  # (epoch, full-set loss)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _standardize(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    return (x - model.feature_means) / model.feature_sds


def _forward_acts(model: ClassifierModel, xs: np.ndarray, masks=None):
    """Hidden activations (post-ReLU, post-dropout) and output probabilities."""
    acts = [xs]
    a = xs
    n_hidden = len(model.weights) - 1
    for i in range(n_hidden):
        a = np.maximum(a @ model.weights[i].T + model.biases[i], 0.0)
        if masks is not None:
            a = a * masks[i]
        acts.append(a)
    logits = (a @ model.weights[-1].T + model.biases[-1]).ravel()
    probs = _sigmoid(logits)
    return acts, probs


def forward_batch(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    """Classifier scores for an (N, m) feature matrix; dropout-free."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.input_dim:
        raise ValueError(f"expected {model.input_dim} features, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    _, probs = _forward_acts(model, _standardize(model, x))
    return np.clip(probs, _PROB_CLAMP, 1.0 - _PROB_CLAMP)


def forward(model: ClassifierModel, features) -> float:
    """Score of a single feature vector."""
    return float(forward_batch(model, np.asarray(features, dtype=float).reshape(1, -1))[0])


def loss(model: ClassifierModel, x: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy of the model on a batch."""
    probs = forward_batch(model, x)
    y = np.asarray(y, dtype=float)
    return float(-np.mean(y * np.log(probs) + (1.0 - y) * np.log(1.0 - probs)))


def gradient(model: ClassifierModel, x: np.ndarray, y: np.ndarray, masks=None):
    """Exact gradient of the mean cross-entropy w.r.t. every weight and bias.

    Pass `masks` (one 0/scale matrix per hidden layer) to differentiate the
    dropout-perturbed loss used during training.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[1] != model.input_dim:
        raise ValueError(f"expected {model.input_dim} features, got {x.shape[1]}")
    xs = _standardize(model, x)
    acts, probs = _forward_acts(model, xs, masks)
    n = x.shape[0]
    delta = ((probs - y) / n)[:, None]
    d_ws = [None] * len(model.weights)
    d_bs = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        d_ws[i] = delta.T @ acts[i]
        d_bs[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.weights[i]
            if masks is not None:
                delta = delta * masks[i - 1]
            delta = delta * (acts[i] > 0.0)
    return d_ws, d_bs


def adam_step(param, grad, mom, vel, step: int, config: NetworkConfig) -> None:
    """One in-place Adam update with bias-corrected moment estimates."""
    mom *= config.beta1
    mom += (1.0 - config.beta1) * grad
    vel *= config.beta2
    vel += (1.0 - config.beta2) * (grad * grad)
    m_hat = mom / (1.0 - config.beta1**step)
    v_hat = vel / (1.0 - config.beta2**step)
    param -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)


def _he_uniform_init(config: NetworkConfig, m: int, rng) -> tuple[list, list]:
    dims = [m] + list(config.layer_widths) + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def train(config: NetworkConfig, x: np.ndarray, y: np.ndarray) -> ClassifierModel:
    """Fit the classifier on an (N, m) feature matrix and 0/1 labels.

    Standardization constants come from the training set; weights start
    He-uniform from the seed; optimization is Adam with bias-corrected
    moments over shuffled mini-batches.  Deterministic given the seed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, m = x.shape
    if y.shape != (n,):
        raise ValueError("labels must align with the feature rows")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    if not (np.any(y == 0.0) and np.any(y == 1.0)):
        raise ValueError("training set must contain both labels")
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds training set size {n}")

    means = x.mean(axis=0)
    sds = x.std(axis=0)
    sds = np.where(sds > 0.0, sds, 1.0)

    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    weights, biases = _he_uniform_init(config, m, rng)
    model = ClassifierModel(config, weights, biases, means, sds)

    mw = [np.zeros_like(w) for w in weights]
    vw = [np.zeros_like(w) for w in weights]
    mb = [np.zeros_like(b) for b in biases]
    vb = [np.zeros_like(b) for b in biases]
    step = 0
    rate = config.dropout_rate
    n_hidden = len(config.layer_widths)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            masks = None
            if rate > 0.0 and n_hidden > 0:
                masks = [
                    (rng.random((idx.size, w)) >= rate) / (1.0 - rate)
                    for w in config.layer_widths
                ]
            d_ws, d_bs = gradient(model, x[idx], y[idx], masks)
            step += 1
            for i in range(len(weights)):
                for g, mom, vel, param in (
                    (d_ws[i], mw[i], vw[i], weights[i]),
                    (d_bs[i], mb[i], vb[i], biases[i]),
                ):
                    if not np.all(np.isfinite(g)):
                        raise TrainingDivergence(
                            f"non-finite gradient at epoch {epoch}, step {step}"
                        )
                    adam_step(param, g, mom, vel, step, config)
        if epoch % 10 == 9 or epoch == config.epochs - 1:
            full = loss(model, x, y)
            if not np.isfinite(full):
                raise TrainingDivergence(f"non-finite loss after epoch {epoch}")
            model.loss_history.append((epoch + 1, full))

    model.final_loss = model.loss_history[-1][1]
    return model


def linear_config(base: NetworkConfig, seed: int | None = None) -> NetworkConfig:
    """The logistic-regression baseline trained with the identical loop."""
    return replace(
        base,
        layer_widths=(),
        dropout_rate=0.0,
        seed=base.seed if seed is None else seed,
    )


# ---------------------------------------------------------------------------
# versioned text serialization (17 significant digits; bitwise round trip)
# ---------------------------------------------------------------------------

_FORMAT_VERSION = 1


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_model(path, model: ClassifierModel) -> None:
    cfg = model.config
    with open(path, "w") as fh:
        fh.write(f"spatnorm-classifier {_FORMAT_VERSION}\n")
        fh.write(f"m {model.input_dim}\n")
        fh.write("widths " + (",".join(str(w) for w in cfg.layer_widths) or "-") + "\n")
        fh.write(f"dropout {_fmt(cfg.dropout_rate)}\n")
        fh.write(
            f"adam {_fmt(cfg.learning_rate)} {_fmt(cfg.beta1)} {_fmt(cfg.beta2)} {_fmt(cfg.epsilon)}\n"
        )
        fh.write(f"epochs {cfg.epochs}\n")
        fh.write(f"batch {cfg.batch_size}\n")
        fh.write(f"seed {cfg.seed}\n")
        fh.write(f"final_loss {_fmt(model.final_loss) if model.final_loss is not None else '-'}\n")
        fh.write("means " + " ".join(_fmt(v) for v in model.feature_means) + "\n")
        fh.write("sds " + " ".join(_fmt(v) for v in model.feature_sds) + "\n")
        for i, (w, b) in enumerate(zip(model.weights, model.biases), start=1):
            fh.write(f"W{i} {w.shape[0]} {w.shape[1]}\n")
            for row in w:
                fh.write(" ".join(_fmt(v) for v in row) + "\n")
            fh.write(f"b{i} " + " ".join(_fmt(v) for v in b) + "\n")


def load_model(path) -> ClassifierModel:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    it = iter(lines)

    def take(prefix: str) -> str:
        line = next(it)
        if not line.startswith(prefix + " "):
            raise ValueError(f"malformed model file: expected {prefix!r}, got {line!r}")
        return line[len(prefix) + 1 :]

    header = next(it).split()
    if header[0] != "spatnorm-classifier" or int(header[1]) != _FORMAT_VERSION:
        raise ValueError("unsupported model file format")
    m = int(take("m"))
    widths_s = take("widths")
    widths = tuple(int(w) for w in widths_s.split(",")) if widths_s != "-" else ()
    dropout = float(take("dropout"))
    lr, b1, b2, eps = (float(v) for v in take("adam").split())
    epochs = int(take("epochs"))
    batch = int(take("batch"))
    seed = int(take("seed"))
    fl = take("final_loss")
    final_loss = None if fl == "-" else float(fl)
    means = np.array([float(v) for v in take("means").split()])
    sds = np.array([float(v) for v in take("sds").split()])
    config = NetworkConfig(widths, dropout, lr, b1, b2, eps, epochs, batch, seed)
    weights, biases = [], []
    for i in range(len(widths) + 1):
        rows, cols = (int(v) for v in take(f"W{i + 1}").split())
        w = np.array([[float(v) for v in next(it).split()] for _ in range(rows)])
        if w.shape != (rows, cols):
            raise ValueError("malformed weight block")
        weights.append(w)
        biases.append(np.array([float(v) for v in take(f"b{i + 1}").split()]))
    if weights[0].shape[1] != m:
        raise ValueError("weight shape disagrees with declared input dimension")
    return ClassifierModel(config, weights, biases, means, sds, final_loss)
