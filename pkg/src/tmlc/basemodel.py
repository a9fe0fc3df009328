"""The base classifier: a ReLU MLP, its per-sample losses, and optimizers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datagen import ConfigError, FormatError

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class BaseModelState:
    layer_sizes: list[int]
    params: list[nc.Tensor]  # W_0, b_0, W_1, b_1, ...

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def weights(self) -> list[nc.Tensor]:
        return self.params[0::2]

    @property
    def biases(self) -> list[nc.Tensor]:
        return self.params[1::2]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "BaseModelState":
        return BaseModelState(list(self.layer_sizes), [nc.parameter(p.value) for p in self.params])


def mlp_init(layer_sizes, seed: int = 0) -> BaseModelState:
    """Glorot-uniform weights, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ConfigError("an MLP needs at least an input and an output layer")
    if any(s < 1 for s in sizes):
        raise ConfigError(f"zero-width layer in {sizes}")
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(nc.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out))))
        params.append(nc.parameter(np.zeros(fan_out)))
    return BaseModelState(sizes, params)


def forward_batch(model: BaseModelState, x, params=None):
    """Logits and rowwise softmax probabilities for a batch ``x`` (B x d).

    ``params`` substitutes tensors for the model's own parameters, which is how
    a virtual lookahead step is evaluated.
    """
    params = model.params if params is None else params
    h = nc.as_tensor(x)
    if h.value.ndim != 2 or h.shape[1] != model.layer_sizes[0]:
        raise nc.DimensionError(f"input shape {h.shape} does not match model input width {model.layer_sizes[0]}")
    n_layers = len(params) // 2
    for k in range(n_layers):
        h = nc.add(nc.matmul(h, params[2 * k]), params[2 * k + 1])
        if k < n_layers - 1:
            h = nc.relu(h)
    return h, nc.softmax(h)


def predict_proba(model: BaseModelState, x: np.ndarray) -> np.ndarray:
    with nc.no_grad():
        return forward_batch(model, x)[1].value


def predict(model: BaseModelState, x: np.ndarray) -> np.ndarray:
    return np.argmax(predict_proba(model, x), axis=1)


def per_sample_losses(probs, targets) -> nc.Tensor:
    """Soft cross-entropy of each row; their mean is the base loss."""
    return nc.soft_cross_entropy(probs, targets)


def base_loss(probs, targets) -> nc.Tensor:
    return nc.mean(per_sample_losses(probs, targets))


def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def virtual_sgd_step(model: BaseModelState, x: np.ndarray, logit_grad: nc.Tensor, lr: float) -> list[nc.Tensor]:
    """``theta - lr * J^T logit_grad`` as graph tensors.

    ``logit_grad`` (B x C) is d(loss)/d(logits) and may depend on other
    parameters; the Jacobian is taken at the current weights, so the result
    stays differentiable with respect to whatever produced ``logit_grad``.
    The backward pass through the MLP is written out with constant
    activations, hence no second-order machinery is needed.
    """
    acts = [np.asarray(x, dtype=np.float64)]
    with nc.no_grad():
        h = nc.Tensor(acts[0])
        n_layers = len(model.params) // 2
        for k in range(n_layers - 1):
            h = nc.relu(nc.add(nc.matmul(h, model.params[2 * k]), model.params[2 * k + 1]))
            acts.append(h.value)
    ones = nc.Tensor(np.ones((1, acts[0].shape[0])))
    g = logit_grad
    new_params: list[nc.Tensor] = [None] * len(model.params)
    for k in reversed(range(len(model.params) // 2)):
        w, b = model.params[2 * k], model.params[2 * k + 1]
        grad_w = nc.matmul(nc.Tensor(acts[k].T), g)
        grad_b = nc.reshape(nc.matmul(ones, g), b.shape)
        new_params[2 * k] = nc.sub(nc.Tensor(w.value), nc.scale(grad_w, lr))
        new_params[2 * k + 1] = nc.sub(nc.Tensor(b.value), nc.scale(grad_b, lr))
        if k > 0:
            g = nc.mul(nc.matmul(g, nc.Tensor(w.value.T)), nc.Tensor((acts[k] > 0).astype(np.float64)))
    return new_params


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimizerConfig:
    kind: str = "sgd_momentum"
    learning_rate: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    milestones: tuple = ()
    decay: float = 0.1

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        self.milestones = tuple(int(m) for m in self.milestones)

    def lr_at(self, epoch: int) -> float:
        """Step-decayed learning rate for a 1-based epoch."""
        passed = sum(1 for m in self.milestones if epoch > m)
        return self.learning_rate * self.decay ** passed


@dataclass
class Optimizer:
    config: OptimizerConfig
    state: dict = field(default_factory=dict)
    steps: int = 0

    def step(self, params, grads, lr: float | None = None) -> None:
        """In-place update of ``params`` (Tensors) from ``grads`` (arrays)."""
        cfg = self.config
        lr = cfg.learning_rate if lr is None else lr
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient after {self.steps} optimizer steps")
        self.steps += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.value
            if cfg.kind == "sgd_momentum":
                v = self.state.get(i)
                if v is None:
                    v = self.state[i] = g.copy()
                else:
                    v *= cfg.momentum
                    v += g
                p.value -= lr * v
            else:
                if i not in self.state:
                    self.state[i] = (np.zeros_like(g), np.zeros_like(g))
                m, s = self.state[i]
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                s *= cfg.beta2
                s += (1 - cfg.beta2) * g * g
                m_hat = m / (1 - cfg.beta1 ** self.steps)
                denom = np.sqrt(s / (1 - cfg.beta2 ** self.steps))
                denom += cfg.eps
                m_hat *= lr
                m_hat /= denom
                p.value -= m_hat


def optimizer_step(params, grads, optimizer: Optimizer, lr: float | None = None) -> None:
    optimizer.step(params, grads, lr)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: BaseModelState, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": model.layer_sizes,
        "params": [p.value.reshape(-1).tolist() for p in model.params],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> BaseModelState:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    model = mlp_init(doc["layer_sizes"])
    if len(doc["params"]) != len(model.params):
        raise FormatError(f"{path}: params has {len(doc['params'])} arrays, layer_sizes needs {len(model.params)}")
    for p, flat in zip(model.params, doc["params"]):
        if len(flat) != p.size:
            raise FormatError(f"{path}: parameter length {len(flat)} != {p.size}")
        p.value[...] = np.asarray(flat, dtype=np.float64).reshape(p.shape)
    return model
