"""Two-layer LSTM regressor in plain numpy.

The network maps a (w, F) window to one scalar: LSTM(F -> H1) -> dropout ->
LSTM(H1 -> H2) -> dropout on the last hidden state -> dense(H2 -> 1) ->
output activation. Gates are stacked in the order input, forget, cell,
output, so each layer holds ``W`` (4H x in), ``U`` (4H x H) and ``b`` (4H).
All passes are batched over the leading axis.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import LossSpec, batch_loss, loss_grad

logger = logging.getLogger(__name__)

PARAM_ORDER = ("l1.W", "l1.U", "l1.b", "l2.W", "l2.U", "l2.b", "head.W", "head.b")
CHECKPOINT_MAGIC = b"ASYMLOAD-LSTM\n"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmModel:
    params: dict
    input_size: int = 6
    hidden1: int = 64
    hidden2: int = 32
    dropout_rate: float = 0.2
    activation: str = "identity"
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation not in ("identity", "relu"):
            raise ValueError(f"unknown output activation {self.activation!r}")
        shapes = self.shapes()
        for name in PARAM_ORDER:
            if self.params[name].shape != shapes[name]:
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {shapes[name]}")

    def shapes(self) -> dict:
        return param_shapes(self.input_size, self.hidden1, self.hidden2)

    def copy(self) -> "LstmModel":
        return LstmModel(
            {k: v.copy() for k, v in self.params.items()},
            self.input_size,
            self.hidden1,
            self.hidden2,
            self.dropout_rate,
            self.activation,
            self.rng_seed,
        )

    def config(self) -> dict:
        return {
            "input_size": self.input_size,
            "hidden1": self.hidden1,
            "hidden2": self.hidden2,
            "dropout_rate": self.dropout_rate,
            "activation": self.activation,
            "rng_seed": self.rng_seed,
        }


def param_shapes(input_size: int, hidden1: int, hidden2: int) -> dict:
    return {
        "l1.W": (4 * hidden1, input_size),
        "l1.U": (4 * hidden1, hidden1),
        "l1.b": (4 * hidden1,),
        "l2.W": (4 * hidden2, hidden1),
        "l2.U": (4 * hidden2, hidden2),
        "l2.b": (4 * hidden2,),
        "head.W": (1, hidden2),
        "head.b": (1,),
    }


def init_model(
    input_size: int = 6,
    hidden1: int = 64,
    hidden2: int = 32,
    dropout_rate: float = 0.2,
    activation: str = "identity",
    rng_seed: int = 0,
) -> LstmModel:
    """Glorot-uniform weights, zero biases except a forget-gate bias of 1."""
    rng = np.random.default_rng(rng_seed)
    params = {}
    for name, shape in param_shapes(input_size, hidden1, hidden2).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    params["l1.b"][hidden1 : 2 * hidden1] = 1.0
    params["l2.b"][hidden2 : 2 * hidden2] = 1.0
    return LstmModel(params, input_size, hidden1, hidden2, dropout_rate, activation, rng_seed)


def zero_model(**kwargs) -> LstmModel:
    m = init_model(**kwargs)
    for v in m.params.values():
        v[...] = 0.0
    return m


# ---------------------------------------------------------------------------
# forward / backward


def _layer_forward(x, W, U, b):
    B, T, _ = x.shape
    H = U.shape[1]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    xw = x @ W.T + b  # (B, T, 4H)
    hs = np.empty((B, T, H))
    steps = []
    for t in range(T):
        z = xw[:, t] + h @ U.T
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = sigmoid(z[:, 3 * H :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        steps.append((h, c, i, f, g, o, tc))
        h, c = o * tc, c_new
        hs[:, t] = h
    return hs, steps


def _layer_backward(dhs, x, W, U, steps):
    B, T, H = dhs.shape
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(W.shape[0])
    dx = np.empty_like(x)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        h_prev, c_prev, i, f, g, o, tc = steps[t]
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate(
            [dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f), dc * i * (1.0 - g * g), do * o * (1.0 - o)],
            axis=1,
        )
        dc_next = dc * f
        dW += dz.T @ x[:, t]
        dU += dz.T @ h_prev
        db += dz.sum(axis=0)
        dx[:, t] = dz @ W
        dh_next = dz @ U
    return dx, dW, dU, db


@dataclass
class ForwardCache:
    x: np.ndarray
    h1: np.ndarray
    steps1: list
    x2: np.ndarray
    steps2: list
    mask1: np.ndarray | None
    mask2: np.ndarray | None
    last: np.ndarray
    pre: np.ndarray
    shapes: dict = field(default_factory=dict)


def _mask(rng, shape, p):
    if p == 0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def forward_batch(model: LstmModel, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
    """Predictions for a (B, w, F) batch and the cache needed for backprop."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != model.input_size:
        raise ValueError(f"expected (batch, w, {model.input_size}) inputs, got shape {x.shape}")
    P = model.params
    p = model.dropout_rate if train else 0.0
    if p and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    h1, steps1 = _layer_forward(x, P["l1.W"], P["l1.U"], P["l1.b"])
    mask1 = _mask(rng, h1.shape, p)
    x2 = h1 * mask1 if mask1 is not None else h1
    h2, steps2 = _layer_forward(x2, P["l2.W"], P["l2.U"], P["l2.b"])
    mask2 = _mask(rng, h2[:, -1].shape, p)
    last = h2[:, -1] * mask2 if mask2 is not None else h2[:, -1]
    pre = last @ P["head.W"][0] + P["head.b"][0]
    pred = np.maximum(pre, 0.0) if model.activation == "relu" else pre
    cache = ForwardCache(x, h1, steps1, x2, steps2, mask1, mask2, last, pre, model.shapes())
    return pred, cache


def backward_batch(model: LstmModel, cache: ForwardCache, dpred) -> dict:
    """Gradients of ``sum(dpred * prediction)`` with respect to every parameter."""
    if cache.shapes != model.shapes():
        raise ValueError("cache was produced by a model with different shapes")
    P = model.params
    dpred = np.broadcast_to(np.asarray(dpred, dtype=np.float64), cache.pre.shape)
    dpre = dpred * (cache.pre > 0) if model.activation == "relu" else dpred
    grads = {"head.W": (dpre @ cache.last)[None, :], "head.b": np.array([dpre.sum()])}
    dlast = dpre[:, None] * P["head.W"][0][None, :]
    if cache.mask2 is not None:
        dlast = dlast * cache.mask2
    B, T, _ = cache.x.shape
    dh2 = np.zeros((B, T, model.hidden2))
    dh2[:, -1] = dlast
    dx2, grads["l2.W"], grads["l2.U"], grads["l2.b"] = _layer_backward(dh2, cache.x2, P["l2.W"], P["l2.U"], cache.steps2)
    dh1 = dx2 * cache.mask1 if cache.mask1 is not None else dx2
    _, grads["l1.W"], grads["l1.U"], grads["l1.b"] = _layer_backward(dh1, cache.x, P["l1.W"], P["l1.U"], cache.steps1)
    return grads


def lstm_forward(model: LstmModel, window, mode: str = "eval", rng: np.random.Generator | None = None):
    """Single-window forward pass; returns ``(prediction, cache)``."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ValueError(f"expected a (w, F) window, got shape {window.shape}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(model.rng_seed)
    pred, cache = forward_batch(model, window[None], train=mode == "train", rng=rng)
    return float(pred[0]), cache


def lstm_backward(model: LstmModel, cache: ForwardCache, dloss_dpred: float) -> dict:
    return backward_batch(model, cache, np.array([dloss_dpred], dtype=np.float64))


def predict(model: LstmModel, inputs, chunk: int = 4096) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(inputs) == 0:
        return np.zeros(0)
    return np.concatenate([forward_batch(model, inputs[s : s + chunk])[0] for s in range(0, len(inputs), chunk)])


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name in params:
        if name not in grads:
            raise KeyError(f"missing gradient for {name}")
        if grads[name].shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon_hat)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    shuffle_seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    learning_rate: float = 1e-3
    clip_norm: float | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def clip_gradients(grads: dict, max_norm: float) -> dict:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def train(model: LstmModel, inputs, targets, config: TrainConfig) -> tuple[LstmModel, list[float]]:
    """Mini-batch training; returns a trained copy and the per-epoch mean loss.

    Each epoch reshuffles with a generator seeded by ``shuffle_seed``;
    dropout masks come from a separate generator seeded by the model's
    ``rng_seed``. The epoch loss is the sample-weighted mean of the batch
    losses seen while training.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(targets)
    if n == 0:
        raise ValueError("training set is empty")
    model = model.copy()
    order_rng = np.random.default_rng(config.shuffle_seed)
    drop_rng = np.random.default_rng([model.rng_seed, 1])
    state = AdamState(learning_rate=config.learning_rate)
    trace = []
    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        total = 0.0
        for k, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            pred, cache = forward_batch(model, inputs[idx], train=True, rng=drop_rng)
            e = pred - targets[idx]
            loss = batch_loss(e, config.loss)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {k + 1}")
            grads = backward_batch(model, cache, loss_grad(e, config.loss) / len(idx))
            if config.clip_norm is not None:
                grads = clip_gradients(grads, config.clip_norm)
            try:
                adam_step(model.params, grads, state)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch + 1}, batch {k + 1}: {exc}") from None
            total += loss * len(idx)
        trace.append(total / n)
        logger.debug("epoch %d loss %.6g", epoch + 1, trace[-1])
    return model, trace


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: LstmModel, metadata: dict | None = None) -> None:
    """Write a versioned binary checkpoint.

    Layout: magic line, 4-byte little-endian header length, JSON header
    (model config, tensor shapes, caller metadata), then each tensor as
    little-endian float64 in :data:`PARAM_ORDER`.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "model": model.config(),
        "tensors": [[name, list(model.params[name].shape)] for name in PARAM_ORDER],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in PARAM_ORDER:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[LstmModel, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", data[off : off + 4])
    off += 4
    header = json.loads(data[off : off + hlen])
    off += hlen
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    params = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return LstmModel(params, **header["model"]), header["metadata"]


def params_digest(model: LstmModel) -> str:
    h = hashlib.sha256()
    for name in PARAM_ORDER:
        h.update(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    return h.hexdigest()
