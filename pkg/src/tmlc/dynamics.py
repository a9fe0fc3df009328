"""Per-sample training-dynamics features and the per-sample recurrent store.

Features for one mini-batch, in this order:

* category-normalized loss: loss over the mean loss of the batch samples that
  share the noisy label,
* global-normalized loss: loss over the batch mean loss,
* prediction entropy of the model's softmax output,
* the noisy label, either one-hot (``standard``, width C) or as the pair
  ``[p_noisy, argmax == noisy]`` (``agnostic``, width 2).

The ``raw`` variants replace the two normalized losses with the raw loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .datagen import ConfigError

DENOM_FLOOR = 1e-12
FEATURE_MODES = ("standard", "agnostic")


def compute_gnl(losses: np.ndarray) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    return losses / max(losses.mean(), DENOM_FLOOR)


def compute_cnl(losses: np.ndarray, noisy_labels: np.ndarray) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(noisy_labels, dtype=np.int64)
    counts = np.bincount(labels)
    sums = np.bincount(labels, weights=losses)
    group_mean = sums[labels] / counts[labels]
    return losses / np.maximum(group_mean, DENOM_FLOOR)


def compute_pe(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(p, out=np.zeros_like(p), where=p > 0)
    logp *= p
    return -logp.sum(axis=1)


def feature_width(mode: str, num_classes: int, normalized: bool = True) -> int:
    if mode not in FEATURE_MODES:
        raise ConfigError(f"unknown feature mode {mode!r}")
    loss_part = 2 if normalized else 1
    return loss_part + 1 + (num_classes if mode == "standard" else 2)


def _label_part(probs: np.ndarray, noisy_labels: np.ndarray, mode: str) -> np.ndarray:
    n, c = probs.shape
    if mode == "standard":
        out = np.zeros((n, c))
        out[np.arange(n), noisy_labels] = 1.0
        return out
    if mode == "agnostic":
        p_noisy = probs[np.arange(n), noisy_labels]
        agree = (np.argmax(probs, axis=1) == noisy_labels).astype(np.float64)
        return np.stack([p_noisy, agree], axis=1)
    raise ConfigError(f"unknown feature mode {mode!r}")


def build_features(losses, probs, noisy_labels, mode: str = "standard", normalized: bool = True) -> np.ndarray:
    """Feature matrix (B x width) for one mini-batch."""
    losses = np.asarray(losses, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
    if losses.ndim != 1 or probs.ndim != 2 or probs.shape[0] != losses.size or noisy_labels.shape != losses.shape:
        raise nc.DimensionError(f"batch dims disagree: losses {losses.shape}, probs {probs.shape}, labels {noisy_labels.shape}")
    if mode not in FEATURE_MODES:
        raise ConfigError(f"unknown feature mode {mode!r}")
    n, c = probs.shape
    k = 2 if normalized else 1
    out = np.zeros((n, feature_width(mode, c, normalized)))
    if normalized:
        out[:, 0] = compute_cnl(losses, noisy_labels)
        out[:, 1] = compute_gnl(losses)
    else:
        out[:, 0] = losses
    out[:, k] = compute_pe(probs)
    rows = np.arange(n)
    if mode == "standard":
        out[rows, k + 1 + noisy_labels] = 1.0
    else:
        out[:, k + 1] = probs[rows, noisy_labels]
        out[:, k + 2] = probs.argmax(axis=1) == noisy_labels
    return out


def build_features_graph(losses: nc.Tensor, probs: nc.Tensor, noisy_labels, mode: str = "standard",
                         normalized: bool = True) -> nc.Tensor:
    """Same as :func:`build_features` but differentiable through losses and probs.

    The agnostic agreement flag is piecewise constant and enters as a constant.
    """
    noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
    b = noisy_labels.size
    same = (noisy_labels[:, None] == noisy_labels[None, :]).astype(np.float64)
    group_avg = same / same.sum(axis=1, keepdims=True)
    col = nc.reshape(losses, (b, 1))
    if normalized:
        class_mean = nc.clamp_min(nc.matmul(nc.Tensor(group_avg), col), DENOM_FLOOR)
        global_mean = nc.clamp_min(nc.matmul(nc.Tensor(np.full((b, b), 1.0 / b)), col), DENOM_FLOOR)
        loss_parts = [nc.div(col, class_mean), nc.div(col, global_mean)]
    else:
        loss_parts = [col]
    entropy = nc.scale(nc.sum(nc.mul(probs, nc.log(probs, clamp=1e-300)), axis=1), -1.0)
    parts = loss_parts + [nc.reshape(entropy, (b, 1))]
    if mode == "standard":
        parts.append(nc.Tensor(_label_part(probs.value, noisy_labels, mode)))
    elif mode == "agnostic":
        pick = np.zeros(probs.shape)
        pick[np.arange(b), noisy_labels] = 1.0
        p_noisy = nc.reshape(nc.sum(nc.mul(probs, nc.Tensor(pick)), axis=1), (b, 1))
        agree = (np.argmax(probs.value, axis=1) == noisy_labels).astype(np.float64)[:, None]
        parts += [p_noisy, nc.Tensor(agree)]
    else:
        raise ConfigError(f"unknown feature mode {mode!r}")
    return nc.concat(parts)


@dataclass
class DynamicsStore:
    """Latest recurrent state, previous prediction, and feature history per sample."""

    num_samples: int
    hidden_size: int
    num_classes: int
    feature_width: int = 0
    history_depth: int = 1
    state: np.ndarray = field(init=False)
    h: np.ndarray = field(init=False)
    c: np.ndarray = field(init=False)
    prev_probs: np.ndarray = field(init=False)
    history: np.ndarray = field(init=False)
    history_len: np.ndarray = field(init=False)
    epoch: int = 0

    def __post_init__(self):
        # h and c are column views of one array so a batch is one gather/scatter
        self.state = np.zeros((self.num_samples, 2 * self.hidden_size))
        self.h = self.state[:, :self.hidden_size]
        self.c = self.state[:, self.hidden_size:]
        self.prev_probs = np.full((self.num_samples, self.num_classes), 1.0 / self.num_classes)
        self.history = np.zeros((self.num_samples, max(self.history_depth, 1), self.feature_width))
        self.history_len = np.zeros(self.num_samples, dtype=np.int64)

    def _check(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_samples):
            raise IndexError(f"sample index outside [0, {self.num_samples})")
        return idx

    def get(self, indices):
        hc = self.gather(indices)
        return hc[:, :self.hidden_size], hc[:, self.hidden_size:]

    def update(self, indices, h: np.ndarray, c: np.ndarray) -> None:
        self.scatter(indices, np.concatenate([h, c], axis=1))

    def gather(self, indices) -> np.ndarray:
        """``[h | c]`` rows for ``indices`` (a copy)."""
        return self.state[self._check(indices)]

    def scatter(self, indices, hc: np.ndarray) -> None:
        self.state[self._check(indices)] = hc

    def record(self, indices, features: np.ndarray, probs: np.ndarray) -> None:
        """Push this epoch's features to the ring buffer and remember the prediction."""
        idx = self._check(indices)
        if self.history.shape[2] == features.shape[1]:
            if self.history.shape[1] > 1:
                self.history[idx, :-1] = self.history[idx, 1:]
            self.history[idx, -1] = features
            self.history_len[idx] = np.minimum(self.history_len[idx] + 1, self.history.shape[1])
        self.prev_probs[idx] = probs


def store_get(store: DynamicsStore, indices):
    return store.get(indices)


def store_update(store: DynamicsStore, indices, h, c) -> None:
    store.update(indices, h, c)


def dynamics_records(indices, epoch: int, features: np.ndarray, losses: np.ndarray,
                     noisy_labels: np.ndarray, true_labels: np.ndarray) -> list[dict]:
    """JSON-lines records for one batch of normalized features."""
    return [
        {"index": int(i), "epoch": int(epoch), "cnl": float(f[0]), "gnl": float(f[1]), "pe": float(f[2]),
         "loss": float(l), "noisy_label": int(yn), "true_label": int(y)}
        for i, f, l, yn, y in zip(indices, features, losses, noisy_labels, true_labels)
    ]
