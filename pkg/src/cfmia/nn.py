"""Feed-forward ReLU classifier with hand-written backprop and Adam.

Parameters and gradients are flat lists ``[W0, b0, W1, b1, ...]`` with
``W`` of shape (fan_in, fan_out). Per-example gradients use the same list
layout with a leading batch axis on every array.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class MlpConfig:
    input_dim: int
    num_classes: int = 2
    layer_widths: tuple[int, ...] = (32, 16, 32, 16)
    dropout_rate: float = 0.0
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    activation: str = "relu"

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        if self.input_dim < 1 or any(w < 1 for w in self.layer_widths):
            raise ValueError("layer sizes must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation != "relu":
            raise ValueError("only relu is supported")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size must be positive and epochs >= 0")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.layer_widths, self.num_classes]

    @property
    def dropout_layer(self) -> int | None:
        """Hidden layer index (0-based) followed by dropout, if any."""
        if self.dropout_rate == 0 or not self.layer_widths:
            return None
        return int(np.argmax(self.layer_widths))


def eeg_preset(input_dim: int = 14, **kw) -> MlpConfig:
    return MlpConfig(input_dim=input_dim, num_classes=kw.pop("num_classes", 2), layer_widths=(32, 16, 32, 16), **kw)


def inlocation_preset(input_dim: int = 529, num_classes: int = 3, **kw) -> MlpConfig:
    kw.setdefault("dropout_rate", 0.2)
    return MlpConfig(
        input_dim=input_dim, num_classes=num_classes,
        layer_widths=(600, 700, 600, 300, 600, 300, 128), **kw,
    )


PRESETS = {"eeg": eeg_preset, "inlocation": inlocation_preset}


@dataclass
class MlpModel:
    config: MlpConfig
    params: list[np.ndarray]
    train_mode: bool = False
    rng: np.random.Generator = field(default=None, repr=False)
    opt_m: list[np.ndarray] | None = field(default=None, repr=False)
    opt_v: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng([self.config.seed, 1])
        dims = self.config.dims
        if len(self.params) != 2 * (len(dims) - 1):
            raise ShapeError("parameter list does not match config")
        for i in range(len(dims) - 1):
            if self.params[2 * i].shape != (dims[i], dims[i + 1]) or self.params[2 * i + 1].shape != (dims[i + 1],):
                raise ShapeError(f"layer {i} has wrong shape")

    @property
    def weights(self) -> list[np.ndarray]:
        return self.params[0::2]

    @property
    def biases(self) -> list[np.ndarray]:
        return self.params[1::2]

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.config, [p.copy() for p in self.params], self.train_mode,
            np.random.default_rng([self.config.seed, 1]),
            None if self.opt_m is None else [m.copy() for m in self.opt_m],
            None if self.opt_v is None else [v.copy() for v in self.opt_v],
        )

    def predict_proba(self, x) -> np.ndarray:
        """Eval-mode posteriors for a batch (or single row)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = _check_input(self, x)
        _, logits = _forward(self, X, train=False)
        p = softmax(logits)
        return p[0] if single else p

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=-1)


def init_model(config: MlpConfig) -> MlpModel:
    """He-uniform weights seeded per layer, zero biases."""
    dims = config.dims
    params = []
    for i in range(len(dims) - 1):
        rng = np.random.default_rng([config.seed, 0, i])
        limit = np.sqrt(6.0 / dims[i])
        params.append(rng.uniform(-limit, limit, size=(dims[i], dims[i + 1])))
        params.append(np.zeros(dims[i + 1]))
    return MlpModel(config, params)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.ndim != 2 or X.shape[1] != model.config.input_dim:
        raise ShapeError(f"expected {model.config.input_dim} features, got shape {np.shape(x)}")
    if not np.isfinite(X).all():
        raise InputError("input contains non-finite values")
    return X


def _forward(model: MlpModel, X: np.ndarray, train: bool):
    """Returns (cache, logits). cache[i] = (layer input, relu mask, dropout mask)."""
    cache = []
    a = X
    n_layers = len(model.config.dims) - 1
    drop_at = model.config.dropout_layer if train else None
    rate = model.config.dropout_rate
    for i in range(n_layers):
        W, b = model.params[2 * i], model.params[2 * i + 1]
        z = a @ W + b
        if i == n_layers - 1:
            cache.append((a, None, None))
            return cache, z
        relu = z > 0
        h = np.where(relu, z, 0.0)
        dmask = None
        if drop_at == i:
            dmask = (model.rng.random(h.shape) >= rate) / (1.0 - rate)
            h = h * dmask
        cache.append((a, relu, dmask))
        a = h
    raise AssertionError("unreachable")


def forward(model: MlpModel, x) -> np.ndarray:
    """Posterior vector(s) for ``x``; dropout is active only in train mode."""
    x = np.asarray(x, dtype=float)
    X = _check_input(model, x)
    _, logits = _forward(model, X, train=model.train_mode)
    p = softmax(logits)
    return p[0] if x.ndim == 1 else p


def _batch(model: MlpModel, batch) -> tuple[np.ndarray, np.ndarray]:
    X, y = batch
    X = _check_input(model, X)
    y = np.asarray(y, dtype=int).reshape(-1)
    if len(y) == 0 or len(X) == 0:
        raise ShapeError("empty batch")
    if len(y) != len(X):
        raise ShapeError("features and labels differ in length")
    if y.min() < 0 or y.max() >= model.config.num_classes:
        raise ShapeError("label outside [0, K)")
    return X, y


def _backward(model: MlpModel, cache, delta: np.ndarray, per_example: bool) -> list[np.ndarray]:
    grads: list[np.ndarray] = [None] * len(model.params)
    for i in range(len(cache) - 1, -1, -1):
        a, _, _ = cache[i]
        if per_example:
            grads[2 * i] = a[:, :, None] * delta[:, None, :]
            grads[2 * i + 1] = delta.copy()
        else:
            grads[2 * i] = a.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            _, relu, dmask = cache[i - 1]
            delta = delta @ model.params[2 * i].T
            if dmask is not None:
                delta = delta * dmask
            delta = delta * relu
    return grads


def loss_and_grads(model: MlpModel, batch) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient."""
    X, y = _batch(model, batch)
    cache, logits = _forward(model, X, train=model.train_mode)
    logp = _log_softmax(logits)
    n = len(y)
    loss = float(-logp[np.arange(n), y].mean())
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    return loss, _backward(model, cache, delta / n, per_example=False)


def per_example_grads(model: MlpModel, batch) -> list[np.ndarray]:
    """Gradient of each example's loss, stacked along a leading batch axis."""
    X, y = _batch(model, batch)
    cache, logits = _forward(model, X, train=model.train_mode)
    delta = softmax(logits)
    delta[np.arange(len(y)), y] -= 1.0
    return _backward(model, cache, delta, per_example=True)


def unstack(per_example: list[np.ndarray]) -> list[list[np.ndarray]]:
    """Stacked per-example grads -> one parameter-shaped list per example."""
    n = len(per_example[0])
    return [[g[i] for g in per_example] for i in range(n)]


def adam_step(model: MlpModel, grads: list[np.ndarray], step_index: int) -> MlpModel:
    """One in-place Adam update (bias-corrected); returns the model."""
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    if len(grads) != len(model.params) or any(g.shape != p.shape for g, p in zip(grads, model.params)):
        raise ShapeError("gradient structure does not match parameters")
    if model.opt_m is None:
        model.opt_m = [np.zeros_like(p) for p in model.params]
        model.opt_v = [np.zeros_like(p) for p in model.params]
    lr = model.config.learning_rate
    c1 = 1.0 - ADAM_BETA1**step_index
    c2 = 1.0 - ADAM_BETA2**step_index
    for p, g, m, v in zip(model.params, grads, model.opt_m, model.opt_v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return model


def accuracy(model: MlpModel, data: Dataset) -> float:
    return float((model.predict(data.rows) == data.labels).mean())


def train(config: MlpConfig, train: Dataset, valid: Dataset) -> tuple[MlpModel, dict]:
    """Minibatch Adam on mean cross-entropy. Deterministic under ``config.seed``."""
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("train and valid must be nonempty")
    model = init_model(config)
    order_rng = np.random.default_rng([config.seed, 2])
    history = {"loss": [], "train_acc": [], "valid_acc": []}
    step = 0
    n = len(train)
    for _ in range(config.epochs):
        model.train_mode = True
        perm = order_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss, grads = loss_and_grads(model, (train.rows[idx], train.labels[idx]))
            step += 1
            adam_step(model, grads, step)
            losses.append(loss)
        model.train_mode = False
        history["loss"].append(float(np.mean(losses)))
        history["train_acc"].append(accuracy(model, train))
        history["valid_acc"].append(accuracy(model, valid))
    model.train_mode = False
    return model, history


def classification_metrics(y_true, y_pred, num_classes: int | None = None) -> dict:
    """Accuracy plus macro precision/recall over classes seen in either vector."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if len(y_true) == 0:
        raise ValueError("empty evaluation set")
    classes = np.union1d(y_true, y_pred)
    prec, rec = [], []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        pp = np.sum(y_pred == c)
        ap = np.sum(y_true == c)
        prec.append(tp / pp if pp else 0.0)
        rec.append(tp / ap if ap else 0.0)
    return {
        "accuracy": float(np.mean(y_true == y_pred)),
        "macro_precision": float(np.mean(prec)),
        "macro_recall": float(np.mean(rec)),
    }


def evaluate(model: MlpModel, data: Dataset) -> dict:
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    return classification_metrics(data.labels, model.predict(data.rows), model.config.num_classes)


CHECKPOINT_FORMAT = "cfmia-mlp"
CHECKPOINT_VERSION = 1


def checkpoint_dict(model: MlpModel, scaler_ref: str | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {**asdict(model.config), "layer_widths": list(model.config.layer_widths)},
        "scaler": scaler_ref,
        "params": [{"shape": list(p.shape), "data": p.ravel(order="C").tolist()} for p in model.params],
    }


def save_checkpoint(model: MlpModel, path: str | Path, scaler_ref: str | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, scaler_ref)))


def model_from_dict(doc: dict) -> MlpModel:
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a supported checkpoint")
    config = MlpConfig(**doc["config"])
    params = [np.array(p["data"], dtype=float).reshape(p["shape"]) for p in doc["params"]]
    return MlpModel(config, params)


def load_checkpoint(path: str | Path) -> tuple[MlpModel, str | None]:
    doc = json.loads(Path(path).read_text())
    return model_from_dict(doc), doc.get("scaler")
