"""Meta-training and meta-testing of the label corrector.

Meta-train alternates, per epoch, a pass over the support set in which the
corrector's output is the base model's soft target, with (every
``update_period`` epochs) one Adam step on the corrector from a single query
mini-batch. Snapshots of the corrector are kept at chosen fractions of the run
and later drive a frozen meta-test on a new task, each snapshot covering an
equal contiguous range of epochs.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .basemodel import (BaseModelState, Optimizer, OptimizerConfig, TrainingDiverged, base_loss, forward_batch,
                        onehot, predict_proba, virtual_sgd_step)
from .corrector import (CorrectorParams, check_compatible, correct_batch, correct_from_features, hard_labels,
                        init_corrector)
from .datagen import ConfigError, DataSplit, NoisyDataset
from .dynamics import DynamicsStore, build_features, build_features_graph, dynamics_records
from .runlog import RunLog
from .training import TrainConfig, epoch_metrics, minibatches, noisy_label_losses

log = logging.getLogger(__name__)

VARIANTS = ("full", "wo_nnp", "wo_tse", "wo_sd")
SUPERVISION = ("softened_noisy", "clean_meta")


@dataclass
class MetaConfig:
    outer_lr: float = 1e-3
    epsilon: float = 0.1
    update_period: int = 1
    warmup_epochs: int = 5
    snapshot_fractions: tuple = (1 / 3, 2 / 3, 1.0)
    query_fraction: float = 0.1
    meta_supervision: str = "softened_noisy"
    mode: str = "standard"
    hidden_size: int = 64
    decoder_width: int | None = None
    include_raw_features: bool = False
    history_depth: int = 1
    variant: str = "full"
    lookahead: bool = False
    seed: int = 0

    def __post_init__(self):
        self.snapshot_fractions = tuple(float(f) for f in self.snapshot_fractions)
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.update_period < 1:
            raise ConfigError("update_period must be >= 1")
        if not self.snapshot_fractions or any(not 0.0 < f <= 1.0 for f in self.snapshot_fractions):
            raise ConfigError(f"snapshot fractions must lie in (0, 1], got {self.snapshot_fractions}")
        if self.meta_supervision not in SUPERVISION:
            raise ConfigError(f"unknown meta_supervision {self.meta_supervision!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.outer_lr > 0:
            raise ConfigError("outer_lr must be positive")

    def snapshot_epochs(self, epochs: int) -> list[int]:
        return sorted({min(epochs, max(1, math.ceil(f * epochs - 1e-9))) for f in self.snapshot_fractions})


@dataclass
class SnapshotSet:
    snapshots: list = field(default_factory=list)  # CorrectorParams, ascending epoch_tag

    def add(self, params: CorrectorParams) -> None:
        if self.snapshots and params.epoch_tag <= self.snapshots[-1].epoch_tag:
            raise ValueError("snapshot epoch tags must be strictly increasing")
        self.snapshots.append(params)

    @property
    def tags(self) -> list[int]:
        return [s.epoch_tag for s in self.snapshots]

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self):
        return iter(self.snapshots)


@dataclass
class MetaTrainResult:
    model: BaseModelState
    snapshots: SnapshotSet
    log: RunLog
    corrector: CorrectorParams
    corrected_labels: np.ndarray  # last epoch's y_hat for the support set, rows ordered like split.support_indices
    dynamics: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


@dataclass
class MetaTestResult:
    model: BaseModelState
    log: RunLog
    corrected_labels: np.ndarray
    snapshot_schedule: list  # epoch -> snapshot epoch_tag


def soften_label(noisy_label, epsilon: float, num_classes: int) -> np.ndarray:
    """``(1 - eps) * onehot + eps / C``; vectorized over an array of labels."""
    labels = np.atleast_1d(np.asarray(noisy_label, dtype=np.int64))
    out = (1.0 - epsilon) * onehot(labels, num_classes) + epsilon / num_classes
    return out[0] if np.ndim(noisy_label) == 0 else out


def snapshot_schedule(tags, epochs: int) -> list[int]:
    """Snapshot tag used at each epoch 1..epochs: equal contiguous ranges in tag order."""
    k = len(tags)
    return [tags[min(k - 1, (t * k) // epochs)] for t in range(epochs)]


def _variant_corrector(num_classes: int, cfg: MetaConfig) -> CorrectorParams:
    return init_corrector(
        num_classes, mode=cfg.mode, hidden_size=cfg.hidden_size, decoder_width=cfg.decoder_width,
        include_raw_features=cfg.include_raw_features,
        encoder="feedforward" if cfg.variant == "wo_tse" else "lstm",
        normalized_features=cfg.variant != "wo_nnp", seed=cfg.seed)


def _meta_targets(dataset: NoisyDataset, idx: np.ndarray, cfg: MetaConfig) -> np.ndarray:
    c = dataset.num_classes
    if cfg.meta_supervision == "clean_meta":
        return onehot(dataset.true_labels[idx], c)
    return soften_label(dataset.noisy_labels[idx], cfg.epsilon, c)


def _inner_targets(y_hat: np.ndarray, noisy: np.ndarray, epoch: int, cfg: MetaConfig, c: int) -> np.ndarray:
    if epoch <= cfg.warmup_epochs:
        return soften_label(noisy, cfg.epsilon, c)
    if cfg.variant == "wo_sd":
        return onehot(hard_labels(y_hat), c)
    return y_hat


def _direct_meta_loss(model, corrector, store, dataset, qb, cfg):
    x, yn = dataset.features[qb], dataset.noisy_labels[qb]
    probs = predict_proba(model, x)
    losses = noisy_label_losses(probs, yn)
    feats = build_features(losses, probs, yn, corrector.mode, corrector.normalized_features)
    y_hat = correct_from_features(feats, qb, yn, probs, store, corrector, advance=True)
    store.record(qb, feats, probs)
    return y_hat


def _lookahead_meta_loss(model, corrector, store, dataset, qb, sb, alpha, cfg):
    """Corrector output on the query batch after a virtual SGD step on ``sb``.

    The virtual step uses the corrector's targets for ``sb``, so the query
    loss depends on the corrector both directly and through the stepped
    base-model weights.
    """
    xs, yns = dataset.features[sb], dataset.noisy_labels[sb]
    probs_s = predict_proba(model, xs)
    losses_s = noisy_label_losses(probs_s, yns)
    y_hat_s = correct_batch(probs_s, losses_s, yns, sb, store, corrector, advance=False)
    # d(mean soft CE)/d(logits) = (p - y_hat) / B
    logit_grad = nc.scale(nc.sub(nc.Tensor(probs_s), y_hat_s), 1.0 / len(sb))
    stepped = virtual_sgd_step(model, xs, logit_grad, alpha)

    xq, ynq = dataset.features[qb], dataset.noisy_labels[qb]
    _, probs_q = forward_batch(model, xq, params=stepped)
    picked = nc.sum(nc.mul(probs_q, nc.Tensor(onehot(ynq, dataset.num_classes))), axis=1)
    losses_q = nc.scale(nc.log(picked), -1.0)
    feats = build_features_graph(losses_q, probs_q, ynq, corrector.mode, corrector.normalized_features)
    y_hat = correct_from_features(feats, qb, ynq, probs_q, store, corrector, advance=True)
    store.record(qb, feats.value, probs_q.value)
    return y_hat


def outer_update(model, corrector, store, dataset, qb, meta_opt, cfg, alpha=0.0, sb=None):
    """One corrector update from query batch ``qb``; returns (sum KL, mean KL)."""
    if cfg.lookahead and sb is not None:
        y_hat = _lookahead_meta_loss(model, corrector, store, dataset, qb, sb, alpha, cfg)
    else:
        y_hat = _direct_meta_loss(model, corrector, store, dataset, qb, cfg)
    kl = nc.kl_divergence(_meta_targets(dataset, qb, cfg), y_hat)
    loss = nc.sum(kl)
    grads = nc.gradients(loss, corrector.params)
    meta_opt.step(corrector.params, grads)
    corrector.invalidate()
    return loss.item(), float(kl.value.mean())


def one_step_lookahead_update(model, corrector, store, dataset, qb, sb, alpha, meta_opt, cfg):
    """Outer update whose meta-loss is evaluated after a virtual inner step."""
    if not cfg.lookahead:
        raise ConfigError("lookahead mode is not enabled in this MetaConfig")
    return outer_update(model, corrector, store, dataset, qb, meta_opt, cfg, alpha=alpha, sb=sb)


def meta_train(dataset: NoisyDataset, split: DataSplit, train_cfg: TrainConfig, meta_cfg: MetaConfig,
               test_set: NoisyDataset | None = None, record_dynamics: bool = False) -> MetaTrainResult:
    c = dataset.num_classes
    epochs = train_cfg.epochs
    if meta_cfg.warmup_epochs >= epochs:
        raise ConfigError(f"warmup_epochs ({meta_cfg.warmup_epochs}) must be below epochs ({epochs})")
    support, query = np.asarray(split.support_indices), np.asarray(split.query_indices)
    if np.intersect1d(support, query).size:
        raise ConfigError("support and query sets overlap")

    notes = []
    cfg = meta_cfg
    if cfg.lookahead and cfg.variant in ("wo_sd", "wo_tse"):
        msg = f"lookahead is not supported with variant {cfg.variant!r}; using the direct outer update"
        warnings.warn(msg)
        notes.append(msg)
        cfg = MetaConfig(**{**cfg.__dict__, "lookahead": False})

    model = train_cfg.init_model(dataset)
    opt = Optimizer(train_cfg.optimizer)
    corrector = _variant_corrector(c, cfg)
    meta_opt = Optimizer(OptimizerConfig("adam", cfg.outer_lr))
    store = DynamicsStore(len(dataset), cfg.hidden_size, c, corrector.feature_width, cfg.history_depth)
    shuffle_rng = np.random.default_rng(train_cfg.shuffle_seed)
    query_rng = np.random.default_rng([cfg.seed, 1])
    snap_epochs = set(cfg.snapshot_epochs(epochs))
    snapshots = SnapshotSet()
    runlog = RunLog("tmlc" if cfg.variant == "full" else f"tmlc_{cfg.variant}",
                    metadata={"mode": cfg.mode, "meta_supervision": cfg.meta_supervision,
                              "lookahead": cfg.lookahead, "variant": cfg.variant})
    support_set = dataset.subset(support)
    row_of = np.full(len(dataset), -1)
    row_of[support] = np.arange(support.size)
    y_hat_epoch = np.zeros((support.size, c))
    dynamics = []

    for t in range(1, epochs + 1):
        tic = time.perf_counter()
        lr = train_cfg.optimizer.lr_at(t)
        base_losses = []
        last_batch = None
        for batch in minibatches(support, train_cfg.batch_size, shuffle_rng):
            x, yn = dataset.features[batch], dataset.noisy_labels[batch]
            _, probs = forward_batch(model, x)
            losses = noisy_label_losses(probs.value, yn)
            with nc.no_grad():
                y_hat = correct_batch(probs.value, losses, yn, batch, store, corrector).value
            y_hat_epoch[row_of[batch]] = y_hat
            if record_dynamics:
                feats = store.history[batch, -1] if corrector.normalized_features else None
                if feats is not None:
                    dynamics += dynamics_records(batch, t, feats, losses, yn, dataset.true_labels[batch])
            loss = base_loss(probs, _inner_targets(y_hat, yn, t, cfg, c))
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"non-finite base loss at epoch {t}, batch starting {batch[:4].tolist()}")
            opt.step(model.params, nc.gradients(loss, model.params), lr)
            base_losses.append(loss.item())
            last_batch = batch

        loss_meta = kl_meta = None
        if t % cfg.update_period == 0:
            qb = np.sort(query_rng.choice(query, size=min(train_cfg.batch_size, query.size), replace=False))
            loss_meta, kl_meta = outer_update(model, corrector, store, dataset, qb, meta_opt, cfg,
                                              alpha=lr, sb=last_batch)
            if not np.isfinite(loss_meta):
                raise TrainingDiverged(f"non-finite meta loss at epoch {t}")
        store.epoch = t
        if t in snap_epochs:
            snapshots.add(corrector.copy(epoch_tag=t))
        runlog.epoch_seconds.append(time.perf_counter() - tic)

        corrected = float(np.mean(hard_labels(y_hat_epoch) == support_set.true_labels))
        runlog.append(epoch=t, split="meta_train", loss_base=float(np.mean(base_losses)), loss_meta=loss_meta,
                      corrected_label_acc=corrected, kl_meta=kl_meta,
                      **epoch_metrics(model, support_set, test_set))
        log.debug("meta-train epoch %d: %s", t, runlog.rows[-1])

    return MetaTrainResult(model, snapshots, runlog, corrector, y_hat_epoch.copy(), dynamics, notes)


def meta_test(dataset: NoisyDataset, train_cfg: TrainConfig, snapshots: SnapshotSet, epochs: int | None = None,
              test_set: NoisyDataset | None = None, warmup_epochs: int = 5, epsilon: float = 0.1) -> MetaTestResult:
    """Train a fresh model on ``dataset`` with labels from frozen snapshots.

    The snapshots are never updated; a fresh per-sample store is used. As in
    meta-training, the first ``warmup_epochs`` train on ``epsilon``-softened
    noisy labels while the corrector's recurrent states warm up; its output
    drives the targets from then on.
    """
    if not len(snapshots):
        raise ConfigError("meta_test needs at least one snapshot")
    c = dataset.num_classes
    for snap in snapshots:
        check_compatible(snap, c)
    epochs = train_cfg.epochs if epochs is None else epochs
    tags = snapshots.tags
    schedule = snapshot_schedule(tags, epochs)
    by_tag = {s.epoch_tag: s for s in snapshots}
    fingerprints = [s.fingerprint() for s in snapshots]

    first = snapshots.snapshots[0]
    model = train_cfg.init_model(dataset)
    opt = Optimizer(train_cfg.optimizer)
    store = DynamicsStore(len(dataset), first.hidden_size, c, first.feature_width)
    shuffle_rng = np.random.default_rng(train_cfg.shuffle_seed)
    runlog = RunLog("tmlc_meta_test", metadata={"snapshot_tags": tags, "mode": first.mode})
    indices = np.arange(len(dataset))
    y_hat_epoch = np.zeros((len(dataset), c))

    for t in range(1, epochs + 1):
        tic = time.perf_counter()
        lr = train_cfg.optimizer.lr_at(t)
        corrector = by_tag[schedule[t - 1]]
        base_losses = []
        for batch in minibatches(indices, train_cfg.batch_size, shuffle_rng):
            x, yn = dataset.features[batch], dataset.noisy_labels[batch]
            _, probs = forward_batch(model, x)
            losses = noisy_label_losses(probs.value, yn)
            with nc.no_grad():
                y_hat = correct_batch(probs.value, losses, yn, batch, store, corrector).value
            y_hat_epoch[batch] = y_hat
            targets = soften_label(yn, epsilon, c) if t <= warmup_epochs else y_hat
            loss = base_loss(probs, targets)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"non-finite base loss at meta-test epoch {t}")
            opt.step(model.params, nc.gradients(loss, model.params), lr)
            base_losses.append(loss.item())
        runlog.epoch_seconds.append(time.perf_counter() - tic)
        corrected = float(np.mean(hard_labels(y_hat_epoch) == dataset.true_labels))
        runlog.append(epoch=t, split="meta_test", loss_base=float(np.mean(base_losses)),
                      corrected_label_acc=corrected, **epoch_metrics(model, dataset, test_set))

    if [s.fingerprint() for s in snapshots] != fingerprints:
        raise AssertionError("meta_test modified a frozen corrector snapshot")
    return MetaTestResult(model, runlog, y_hat_epoch, schedule)
