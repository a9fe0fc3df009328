import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmlc import numcore as nc
from tmlc.basemodel import Optimizer, OptimizerConfig, TrainingDiverged, mlp_init
from tmlc.corrector import PARAM_NAMES, init_corrector
from tmlc.datagen import ConfigError, FormatError, NoiseSpec, gen_blobs, inject_noise, split_support_query
from tmlc.dynamics import DynamicsStore
from tmlc.gradsuite import run_case
from tmlc.metaloop import (MetaConfig, SnapshotSet, meta_test, meta_train, outer_update, snapshot_schedule,
                           soften_label)
from tmlc.runlog import LOG_COLUMNS
from tmlc.training import TrainConfig


@pytest.fixture(scope="module")
def task():
    ds = inject_noise(gen_blobs(3, 60, seed=1), NoiseSpec("symmetric", 0.4, seed=2))
    return ds, split_support_query(ds, 0.2, seed=0)


def _small(epochs=6, **meta):
    meta = {"hidden_size": 6, "warmup_epochs": 1, **meta}
    return TrainConfig(epochs=epochs, batch_size=32), MetaConfig(**meta)


class TestSoftenLabel:
    def test_formula(self):
        out = soften_label(3, 0.1, 10)
        assert out[3] == pytest.approx(0.91, abs=1e-15)
        np.testing.assert_allclose(np.delete(out, 3), 0.01, atol=1e-15)
        assert out.sum() == pytest.approx(1.0, abs=1e-15)

    def test_endpoints(self):
        np.testing.assert_array_equal(soften_label(2, 0.0, 4), np.eye(4)[2])
        np.testing.assert_allclose(soften_label(2, 1.0, 4), 0.25)

    @settings(max_examples=10_000, deadline=None)
    @given(st.integers(0, 19), st.floats(0, 1), st.integers(20, 30))
    def test_simplex_and_bounds(self, label, eps, c):
        out = soften_label(label, eps, c)
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) <= 1e-9
        assert out.min() == pytest.approx(eps / c, abs=1e-15)
        assert out.max() == pytest.approx(1 - eps + eps / c, abs=1e-15)


class TestSchedule:
    def test_partition(self):
        assert snapshot_schedule([10, 20, 30], 9) == [10] * 3 + [20] * 3 + [30] * 3

    def test_snapshot_epochs(self):
        assert MetaConfig(snapshot_fractions=(1.0,)).snapshot_epochs(3) == [3]
        assert MetaConfig().snapshot_epochs(60) == [20, 40, 60]

    def test_single_snapshot_run(self, task):
        ds, split = task
        train, meta = _small(epochs=3, snapshot_fractions=(1.0,))
        res = meta_train(ds, split, train, meta)
        assert res.snapshots.tags == [3]

    def test_tags_strictly_increasing(self):
        s = SnapshotSet()
        s.add(init_corrector(3, hidden_size=2).copy(epoch_tag=5))
        with pytest.raises(ValueError):
            s.add(init_corrector(3, hidden_size=2).copy(epoch_tag=5))

    @pytest.mark.parametrize("kwargs", [{"epsilon": 1.5}, {"update_period": 0}, {"snapshot_fractions": (0.0,)},
                                        {"meta_supervision": "oracle"}, {"outer_lr": 0.0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            MetaConfig(**kwargs)


class TestMetaTrain:
    def test_log_schema_and_outer_count(self, task):
        ds, split = task
        train, meta = _small(epochs=7, update_period=3)
        res = meta_train(ds, split, train, meta)
        assert len(res.log.rows) == 7
        assert res.log.to_csv().splitlines()[0] == ",".join(LOG_COLUMNS)
        assert sum(r["loss_meta"] is not None for r in res.log.rows) == 7 // 3
        assert len(res.snapshots) == 3
        assert res.corrected_labels.shape == (split.support_indices.size, 3)

    def test_warmup_must_be_below_epochs(self, task):
        ds, split = task
        train, meta = _small(epochs=3, warmup_epochs=3)
        with pytest.raises(ConfigError):
            meta_train(ds, split, train, meta)

    def test_deterministic_logs(self, task):
        ds, split = task
        train, meta = _small(mode="agnostic", meta_supervision="clean_meta")
        a, b = meta_train(ds, split, train, meta), meta_train(ds, split, train, meta)
        assert a.log.to_csv() == b.log.to_csv()
        assert a.corrector.fingerprint() == b.corrector.fingerprint()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self, task):
        ds, split = task
        train = TrainConfig(epochs=4, batch_size=32, optimizer=OptimizerConfig(learning_rate=1e305))
        with pytest.raises(TrainingDiverged):
            meta_train(ds, split, train, MetaConfig(hidden_size=4, warmup_epochs=1))

    def test_lookahead_with_hard_labels_falls_back(self, task):
        ds, split = task
        train, meta = _small(epochs=3, lookahead=True, variant="wo_sd")
        with pytest.warns(UserWarning):
            res = meta_train(ds, split, train, meta)
        assert res.warnings

    def test_uniform_supervision_optimum(self):
        # eps = 1 makes every meta target uniform, so KL(uniform || y_hat) has its minimum at y_hat = uniform
        ds = inject_noise(gen_blobs(3, 30, seed=4), NoiseSpec("symmetric", 0.3, seed=5))
        model = mlp_init([2, 8, 3], seed=0)
        cfg = MetaConfig(epsilon=1.0, hidden_size=8, outer_lr=1e-2)
        corrector = init_corrector(3, hidden_size=8, seed=3)
        store = DynamicsStore(len(ds), 8, 3, corrector.feature_width)
        meta_opt = Optimizer(OptimizerConfig("adam", cfg.outer_lr))
        qb = np.arange(0, 90, 3)
        for _ in range(200):
            _, kl = outer_update(model, corrector, store, ds, qb, meta_opt, cfg)
        assert kl <= 1e-2


class TestLookahead:
    def _setup(self, seed, lookahead):
        ds = inject_noise(gen_blobs(3, 20, seed=seed), NoiseSpec("symmetric", 0.3, seed=seed))
        model = mlp_init([2, 5, 3], seed=seed)
        cfg = MetaConfig(mode="agnostic", hidden_size=4, meta_supervision="clean_meta", lookahead=lookahead)
        corrector = init_corrector(3, "agnostic", hidden_size=4, seed=seed)
        store = DynamicsStore(len(ds), 4, 3, corrector.feature_width)
        store.state[:] = np.random.default_rng(seed).normal(scale=0.3, size=store.state.shape)
        return ds, model, cfg, corrector, store, Optimizer(OptimizerConfig("adam", 1e-2))

    @pytest.mark.parametrize("seed", range(3))
    def test_zero_alpha_equals_direct(self, seed):
        qb, sb = np.arange(0, 30, 2), np.arange(1, 30, 2)
        ds, model, cfg, corr_a, store_a, opt_a = self._setup(seed, True)
        outer_update(model, corr_a, store_a, ds, qb, opt_a, cfg, alpha=0.0, sb=sb)
        ds, model, cfg, corr_b, store_b, opt_b = self._setup(seed, False)
        outer_update(model, corr_b, store_b, ds, qb, opt_b, cfg)
        for name in PARAM_NAMES:
            np.testing.assert_allclose(corr_a.tensors[name].value, corr_b.tensors[name].value, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("name", PARAM_NAMES)
    def test_gradient(self, name):
        assert max(run_case(f"lookahead_{name}", s) for s in range(20)) <= 1e-4

    def test_update_deterministic(self):
        qb, sb = np.arange(0, 30, 2), np.arange(1, 30, 2)
        outs = []
        for _ in range(2):
            ds, model, cfg, corr, store, opt = self._setup(7, True)
            outer_update(model, corr, store, ds, qb, opt, cfg, alpha=0.1, sb=sb)
            outs.append(corr.fingerprint())
        assert outs[0] == outs[1]

    def test_changes_update_when_alpha_positive(self):
        qb, sb = np.arange(0, 30, 2), np.arange(1, 30, 2)
        prints = []
        for alpha in (0.0, 0.5):
            ds, model, cfg, corr, store, opt = self._setup(2, True)
            outer_update(model, corr, store, ds, qb, opt, cfg, alpha=alpha, sb=sb)
            prints.append(corr.fingerprint())
        assert prints[0] != prints[1]


class TestMetaTest:
    def test_frozen_and_partitioned(self, task):
        ds, split = task
        train, meta = _small(epochs=6, mode="agnostic")
        res = meta_train(ds, split, train, meta)
        before = [s.fingerprint() for s in res.snapshots]
        target = inject_noise(gen_blobs(3, 40, seed=9), NoiseSpec("symmetric", 0.2, seed=9))
        out = meta_test(target, TrainConfig(epochs=9, batch_size=32), res.snapshots, warmup_epochs=1)
        assert [s.fingerprint() for s in res.snapshots] == before
        tags = res.snapshots.tags
        assert out.snapshot_schedule == [tags[0]] * 3 + [tags[1]] * 3 + [tags[2]] * 3
        assert len(out.log.rows) == 9

    def test_incompatible_snapshot(self, task):
        ds, split = task
        train, meta = _small(epochs=3, snapshot_fractions=(1.0,))
        res = meta_train(ds, split, train, meta)
        other = gen_blobs(4, 10, seed=0)
        with pytest.raises(FormatError):
            meta_test(other, train, res.snapshots)

    def test_empty_snapshot_set(self, task):
        with pytest.raises(ConfigError):
            meta_test(task[0], TrainConfig(epochs=2), SnapshotSet())
