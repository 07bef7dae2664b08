"""Local learning stack: LSTM forecaster, linear reference model, MSE,
RMSProp/SGD and weight serialization.

All gradients are hand-derived reverse mode over numpy arrays. Parameters
live in one flat float64 vector whose layout is fixed by :class:`Arch`, so
averaging, serialization and optimizer state all work on plain vectors.

LSTM layout, in order: ``W_x (in, 4H)``, ``W_h (H, 4H)``, ``b (4H,)``,
``W_out (H, 2*horizon)``, ``b_out (2*horizon,)``. Gate blocks along the 4H
axis are input, forget, output, candidate.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np


class TrainingDiverged(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class Arch:
    kind: str = "lstm"
    input_dim: int = 2
    hidden: int = 16
    history: int = 32
    horizon: int = 48

    def __post_init__(self):
        if self.kind not in ("lstm", "linear"):
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def out_dim(self) -> int:
        return self.horizon * self.input_dim

    def shapes(self):
        d, h, o = self.input_dim, self.hidden, self.out_dim
        if self.kind == "lstm":
            return [("W_x", (d, 4 * h)), ("W_h", (h, 4 * h)), ("b", (4 * h,)),
                    ("W_out", (h, o)), ("b_out", (o,))]
        return [("W", (self.history * d, o)), ("b", (o,))]

    @property
    def count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def descriptor(self) -> str:
        return (f"{self.kind};in={self.input_dim};hidden={self.hidden};"
                f"history={self.history};horizon={self.horizon}")

    def digest(self) -> bytes:
        return hashlib.sha256(self.descriptor().encode()).digest()[:8]

    def unpack(self, values):
        """Views into ``values`` keyed by parameter name."""
        out, i = {}, 0
        for name, shape in self.shapes():
            n = int(np.prod(shape))
            out[name] = values[i:i + n].reshape(shape)
            i += n
        return out

    def fan_in(self, name) -> int:
        if self.kind == "lstm":
            return self.input_dim + self.hidden if name in ("W_x", "W_h", "b") else self.hidden
        return self.history * self.input_dim


DEFAULT_ARCH = Arch()


@dataclass
class ModelWeights:
    arch: Arch
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (self.arch.count,):
            raise ValueError(f"expected {self.arch.count} values, got {self.values.shape}")

    @property
    def count(self) -> int:
        return self.arch.count

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.arch, self.values.copy())

    def to_bytes(self, precision: str = "f4") -> bytes:
        """Architecture hash followed by little-endian floats.

        ``f4`` is the interchange format; ``f8`` is lossless and is what
        robots put in the tuple space.
        """
        if precision not in ("f4", "f8"):
            raise ValueError(precision)
        return self.arch.digest() + self.values.astype("<" + precision).tobytes()

    @classmethod
    def from_bytes(cls, arch: Arch, data: bytes, precision: str = "f4") -> "ModelWeights":
        if data[:8] != arch.digest():
            raise ValueError("architecture hash mismatch")
        vals = np.frombuffer(data[8:], dtype="<" + precision)
        return cls(arch, vals.astype(np.float64))


def init_weights(arch: Arch, rng) -> ModelWeights:
    """Uniform in +-1/sqrt(fan_in) for every parameter."""
    parts = []
    for name, shape in arch.shapes():
        bound = 1.0 / np.sqrt(arch.fan_in(name))
        parts.append(rng.uniform(-bound, bound, size=shape).ravel())
    return ModelWeights(arch, np.concatenate(parts))


def zero_weights(arch: Arch) -> ModelWeights:
    return ModelWeights(arch, np.zeros(arch.count))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _lstm_forward(p, X, mask):
    B, T, _ = X.shape
    H = p["W_h"].shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = []
    for t in range(T):
        z = X[:, t] @ p["W_x"] + h @ p["W_h"] + p["b"]
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        o = _sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.append((h_prev, c_prev, i, f, o, g, tc))
    d = h if mask is None else h * mask
    y = d @ p["W_out"] + p["b_out"]
    return y, (cache, d)


def _lstm_backward(p, X, mask, aux, dy):
    cache, d = aux
    B, T, _ = X.shape
    H = p["W_h"].shape[0]
    g_ = {k: np.zeros_like(v) for k, v in p.items()}
    g_["W_out"] = d.T @ dy
    g_["b_out"] = dy.sum(axis=0)
    dh = dy @ p["W_out"].T
    if mask is not None:
        dh = dh * mask
    dc = np.zeros((B, H))
    dz = np.empty((B, 4 * H))
    for t in reversed(range(T)):
        h_prev, c_prev, i, f, o, g, tc = cache[t]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H:] = dc * i * (1.0 - g * g)
        g_["W_x"] += X[:, t].T @ dz
        g_["W_h"] += h_prev.T @ dz
        g_["b"] += dz.sum(axis=0)
        dh = dz @ p["W_h"].T
        dc = dc * f
    return g_


def _dropout_mask(rng, shape, rate):
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _check_inputs(arch, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != arch.history or X.shape[2] != arch.input_dim:
        raise ValueError(f"expected inputs shaped (n, {arch.history}, {arch.input_dim}), got {X.shape}")
    return X


def _raw_forward(weights, X, mask):
    arch = weights.arch
    p = arch.unpack(weights.values)
    if arch.kind == "lstm":
        y, aux = _lstm_forward(p, X, mask)
    else:
        flat = X.reshape(len(X), -1)
        y, aux = flat @ p["W"] + p["b"], flat
    return y, (p, aux)


def forward(weights: ModelWeights, inputs, rng=None, dropout: float = 0.0):
    """Predict ``(n, horizon, 2)`` trajectories from ``(n, history, 2)`` inputs.

    ``inputs`` may be a single ``(history, 2)`` sequence. Dropout applies only
    when an ``rng`` is passed (training mode) and only to the LSTM's final
    hidden state.
    """
    arch = weights.arch
    single = np.ndim(inputs) == 2
    X = _check_inputs(arch, inputs)
    mask = None
    if arch.kind == "lstm":
        mask = _dropout_mask(rng, (len(X), arch.hidden), dropout)
    y, _ = _raw_forward(weights, X, mask)
    y = y.reshape(len(X), arch.horizon, arch.input_dim)
    return y[0] if single else y


def mse_loss(predicted, target) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {target.shape}")
    if predicted.size == 0:
        raise ValueError("empty input")
    return float(np.mean((predicted - target) ** 2))


def loss_and_grad(weights: ModelWeights, inputs, targets, mask=None):
    """MSE over every output scalar and its gradient w.r.t. the flat weights.

    ``mask`` is an explicit dropout mask (already scaled) for the LSTM's final
    hidden state; ``None`` means evaluation mode.
    """
    arch = weights.arch
    X = _check_inputs(arch, inputs)
    Y = np.asarray(targets, dtype=np.float64).reshape(len(X), arch.out_dim)
    y, (p, aux) = _raw_forward(weights, X, mask)
    err = y - Y
    loss = float(np.mean(err * err))
    dy = (2.0 / err.size) * err
    if arch.kind == "lstm":
        g = _lstm_backward(p, X, mask, aux, dy)
    else:
        g = {"W": aux.T @ dy, "b": dy.sum(axis=0)}
    grad = np.concatenate([g[name].ravel() for name, _ in arch.shapes()])
    return loss, grad


@dataclass
class OptimizerState:
    kind: str = "rmsprop"
    learning_rate: float = 1e-3
    rms_decay: float = 0.9
    epsilon: float = 1e-7
    accumulators: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("rmsprop", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.rms_decay < 1.0:
            raise ValueError("rms_decay must lie in (0, 1)")

    def fresh(self) -> "OptimizerState":
        return OptimizerState(self.kind, self.learning_rate, self.rms_decay, self.epsilon)

    def apply(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return values - self.learning_rate * grad
        if self.accumulators is None:
            self.accumulators = np.zeros_like(values)
        acc = self.accumulators
        acc *= self.rms_decay
        acc += (1.0 - self.rms_decay) * grad * grad
        return values - self.learning_rate * grad / (np.sqrt(acc) + self.epsilon)


def train_epoch(weights: ModelWeights, inputs, targets, optimizer: OptimizerState, rng,
                minibatch_size: int = 32, dropout: float = 0.2):
    """One shuffled pass over the batch; returns ``(new_weights, mean_loss)``.

    ``optimizer`` is updated in place. ``minibatch_size=None`` means full
    batch. The reported loss is the sample-weighted mean of the minibatch
    training losses.
    """
    arch = weights.arch
    X = _check_inputs(arch, inputs)
    Y = np.asarray(targets, dtype=np.float64)
    n = len(X)
    if n == 0:
        raise ValueError("empty training batch")
    if len(Y) != n:
        raise ValueError("inputs and targets differ in length")
    bs = n if minibatch_size is None else int(minibatch_size)
    order = rng.permutation(n)
    values = weights.values.copy()
    total = 0.0
    for start in range(0, n, bs):
        idx = order[start:start + bs]
        mask = None
        if arch.kind == "lstm":
            mask = _dropout_mask(rng, (len(idx), arch.hidden), dropout)
        loss, grad = loss_and_grad(ModelWeights(arch, values), X[idx], Y[idx], mask)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"non-finite loss at minibatch starting {start}")
        values = optimizer.apply(values, grad)
        total += loss * len(idx)
    return ModelWeights(arch, values), total / n


def validation_loss(weights: ModelWeights, inputs, targets) -> float | None:
    """Mean MSE in evaluation mode; ``None`` for an empty set."""
    if len(inputs) == 0:
        return None
    return mse_loss(forward(weights, inputs), np.asarray(targets).reshape(len(inputs), -1, 2))


def encode_contribution(weights: ModelWeights, n_samples: int) -> bytes:
    """Tuple-space payload: sample count then lossless weights."""
    return struct.pack("<Q", int(n_samples)) + weights.to_bytes("f8")


def decode_contribution(arch: Arch, data: bytes):
    (n,) = struct.unpack_from("<Q", data)
    return ModelWeights.from_bytes(arch, data[8:], "f8"), n
