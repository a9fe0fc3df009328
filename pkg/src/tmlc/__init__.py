"""Meta-learned label correction for noisy-label training, on a small
reverse-mode autodiff core."""

from .basemodel import BaseModelState, OptimizerConfig, TrainingDiverged, forward_batch, mlp_init, predict
from .baselines import ABLATIONS, METHOD_KINDS, MethodSpec, run_ablation, run_ce, run_method
from .corrector import CorrectorParams, correct_batch, init_corrector, snapshot_load, snapshot_save
from .datagen import (ConfigError, DataSplit, FormatError, NoiseSpec, NoisyDataset, gen_blobs, gen_rings,
                      gen_two_moons, inject_noise, split_support_query, transition_matrix)
from .dynamics import DynamicsStore, build_features
from .evalharness import ExperimentConfig, MetricsReport, accuracy, correction_metrics, macro_f1, transfer_grid
from .metaloop import MetaConfig, SnapshotSet, meta_test, meta_train, soften_label
from .runlog import RunLog
from .training import TrainConfig

__version__ = "0.1.0"
