"""Training configuration and helpers shared by the meta loop and the baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basemodel import OptimizerConfig, mlp_init, predict
from .datagen import ConfigError, NoisyDataset


@dataclass
class TrainConfig:
    hidden: tuple = (32,)
    epochs: int = 60
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0          # base-model initialization
    shuffle_seed: int = 0  # mini-batch order

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def layer_sizes(self, dataset: NoisyDataset) -> list[int]:
        return [dataset.dim, *self.hidden, dataset.num_classes]

    def init_model(self, dataset: NoisyDataset):
        return mlp_init(self.layer_sizes(dataset), self.seed)


def minibatches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices)
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]


def noisy_label_losses(probs: np.ndarray, noisy_labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy against the observed (noisy) label."""
    picked = probs[np.arange(len(noisy_labels)), noisy_labels]
    return -np.log(np.maximum(picked, 1e-12))


def epoch_metrics(model, train: NoisyDataset, test: NoisyDataset | None) -> dict:
    pred = predict(model, train.features)
    out = {
        "acc_train_noisy": float(np.mean(pred == train.noisy_labels)),
        "acc_train_true": float(np.mean(pred == train.true_labels)),
        "acc_test": None,
    }
    if test is not None:
        out["acc_test"] = float(np.mean(predict(model, test.features) == test.true_labels))
    return out
