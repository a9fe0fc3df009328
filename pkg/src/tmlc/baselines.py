"""Reference training methods and the corrector ablations.

All reference methods share one training loop and differ only in how the
per-batch targets (and, for forward correction, the predicted distribution)
are built, so identity settings reproduce plain cross-entropy bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .basemodel import Optimizer, TrainingDiverged, base_loss, forward_batch, onehot
from .datagen import ConfigError, DataSplit, NoisyDataset, split_support_query, transition_matrix
from .metaloop import MetaConfig, MetaTrainResult, meta_train, soften_label
from .runlog import RunLog
from .training import TrainConfig, epoch_metrics, minibatches

METHOD_KINDS = ("ce", "label_smoothing", "forward_correction", "bootstrap",
                "tmlc", "tmlc_wo_nnp", "tmlc_wo_tse", "tmlc_wo_sd")
ABLATIONS = {"tmlc_wo_nnp": "wo_nnp", "tmlc_wo_tse": "wo_tse", "tmlc_wo_sd": "wo_sd"}


@dataclass
class MethodSpec:
    kind: str = "ce"
    epsilon: float = 0.1        # label smoothing
    lam: float = 0.8            # bootstrap weight on the given label
    q_source: str = "true"      # forward correction: "true" or "identity"
    q_matrix: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}")
        if self.kind == "label_smoothing" and not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"label smoothing epsilon must lie in [0, 1), got {self.epsilon}")
        if self.kind == "bootstrap" and not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"bootstrap lambda must lie in [0, 1], got {self.lam}")
        if self.q_source not in ("true", "identity", "given"):
            raise ConfigError(f"unknown q_source {self.q_source!r}")


def _check_stochastic(q: np.ndarray, c: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (c, c) or np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-9):
        raise ConfigError("forward-correction matrix must be a row-stochastic C x C matrix")
    return q


def _train(dataset: NoisyDataset, cfg: TrainConfig, method: str, make_targets, transform=None,
           test_set: NoisyDataset | None = None, metadata: dict | None = None) -> RunLog:
    """Shared loop: ``make_targets(noisy, probs)`` -> soft targets for a batch;
    ``transform`` optionally maps the predicted probabilities before the loss."""
    c = dataset.num_classes
    model = cfg.init_model(dataset)
    opt = Optimizer(cfg.optimizer)
    rng = np.random.default_rng(cfg.shuffle_seed)
    runlog = RunLog(method, metadata=metadata or {})
    indices = np.arange(len(dataset))
    for t in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        lr = cfg.optimizer.lr_at(t)
        batch_losses = []
        for batch in minibatches(indices, cfg.batch_size, rng):
            _, probs = forward_batch(model, dataset.features[batch])
            targets = make_targets(dataset.noisy_labels[batch], probs.value)
            pred = probs if transform is None else transform(probs)
            loss = base_loss(pred, targets)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"{method}: non-finite loss at epoch {t}")
            opt.step(model.params, nc.gradients(loss, model.params), lr)
            batch_losses.append(loss.item())
        runlog.epoch_seconds.append(time.perf_counter() - tic)
        runlog.append(epoch=t, split="baseline", loss_base=float(np.mean(batch_losses)),
                      **epoch_metrics(model, dataset, test_set))
    runlog.model = model
    return runlog


def run_ce(dataset, cfg: TrainConfig, test_set=None) -> RunLog:
    c = dataset.num_classes
    return _train(dataset, cfg, "ce", lambda yn, p: onehot(yn, c), test_set=test_set)


def run_label_smoothing(dataset, cfg: TrainConfig, epsilon: float, test_set=None) -> RunLog:
    c = dataset.num_classes
    return _train(dataset, cfg, "label_smoothing", lambda yn, p: soften_label(yn, epsilon, c),
                  test_set=test_set, metadata={"epsilon": epsilon})


def run_forward_correction(dataset, cfg: TrainConfig, q=None, test_set=None) -> RunLog:
    """Cross-entropy of ``Q^T p`` against the noisy label (forward loss correction)."""
    c = dataset.num_classes
    q = transition_matrix(dataset.noise, c) if q is None else q
    q = nc.Tensor(_check_stochastic(q, c))
    return _train(dataset, cfg, "forward_correction", lambda yn, p: onehot(yn, c),
                  transform=lambda probs: nc.matmul(probs, q), test_set=test_set,
                  metadata={"direction": "forward: loss = CE(Q^T p, onehot(noisy))",
                            "Q": q.value.tolist()})


def run_bootstrap(dataset, cfg: TrainConfig, lam: float, test_set=None) -> RunLog:
    """Soft bootstrap: target = lam * onehot(noisy) + (1 - lam) * p (p held constant)."""
    c = dataset.num_classes
    return _train(dataset, cfg, "bootstrap", lambda yn, p: lam * onehot(yn, c) + (1.0 - lam) * p,
                  test_set=test_set, metadata={"lambda": lam})


def run_tmlc(dataset, cfg: TrainConfig, meta_cfg: MetaConfig, split: DataSplit | None = None,
             test_set=None, **kwargs) -> MetaTrainResult:
    split = split or split_support_query(dataset, meta_cfg.query_fraction, meta_cfg.seed)
    return meta_train(dataset, split, cfg, meta_cfg, test_set=test_set, **kwargs)


def run_ablation(kind: str, dataset, cfg: TrainConfig, meta_cfg: MetaConfig, split: DataSplit | None = None,
                 test_set=None) -> MetaTrainResult:
    if kind not in ABLATIONS:
        raise ConfigError(f"unknown ablation {kind!r}; expected one of {sorted(ABLATIONS)}")
    variant_cfg = MetaConfig(**{**meta_cfg.__dict__, "variant": ABLATIONS[kind]})
    return run_tmlc(dataset, cfg, variant_cfg, split=split, test_set=test_set)


def run_method(spec: MethodSpec, dataset, cfg: TrainConfig, meta_cfg: MetaConfig | None = None,
               test_set=None):
    """Dispatch on ``spec.kind``; returns a RunLog (or MetaTrainResult for corrector methods)."""
    if spec.kind == "ce":
        return run_ce(dataset, cfg, test_set)
    if spec.kind == "label_smoothing":
        return run_label_smoothing(dataset, cfg, spec.epsilon, test_set)
    if spec.kind == "forward_correction":
        q = None
        if spec.q_source == "identity":
            q = np.eye(dataset.num_classes)
        elif spec.q_source == "given":
            q = spec.q_matrix
        return run_forward_correction(dataset, cfg, q, test_set)
    if spec.kind == "bootstrap":
        return run_bootstrap(dataset, cfg, spec.lam, test_set)
    meta_cfg = meta_cfg or MetaConfig()
    if spec.kind == "tmlc":
        return run_tmlc(dataset, cfg, meta_cfg, test_set=test_set)
    return run_ablation(spec.kind, dataset, cfg, meta_cfg, test_set=test_set)
