import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tmlc import numcore as nc
from tmlc.datagen import ConfigError
from tmlc.dynamics import (DynamicsStore, build_features, build_features_graph, compute_cnl, compute_gnl,
                           compute_pe, dynamics_records, feature_width, store_get, store_update)


@st.composite
def batches(draw, max_b=40, max_c=8):
    b = draw(st.integers(1, max_b))
    c = draw(st.integers(2, max_c))
    losses = draw(arrays(np.float64, b, elements=st.floats(1e-6, 20.0)))
    labels = draw(arrays(np.int64, b, elements=st.integers(0, c - 1)))
    logits = draw(arrays(np.float64, (b, c), elements=st.floats(-30, 30)))
    return losses, labels, nc.softmax_np(logits)


class TestNormalizedLosses:
    def test_cnl_hand_example(self):
        cnl = compute_cnl(np.array([2.0, 1.0, 1.0, 5.0]), np.array([2, 2, 2, 0]))
        assert cnl[0] == pytest.approx(1.5, abs=1e-15)

    def test_cnl_alone_in_class(self):
        assert compute_cnl(np.array([0.7, 3.0, 1.0]), np.array([1, 0, 0]))[0] == 1.0

    def test_equal_losses(self):
        losses = np.full(9, 0.37)
        labels = np.arange(9) % 3
        np.testing.assert_allclose(compute_cnl(losses, labels), 1.0, rtol=1e-15)
        np.testing.assert_allclose(compute_gnl(losses), 1.0, rtol=1e-15)

    def test_gnl_example(self):
        np.testing.assert_allclose(compute_gnl(np.array([1.0, 2.0, 3.0])), [0.5, 1.0, 1.5], rtol=1e-15)

    def test_all_zero_losses(self):
        np.testing.assert_array_equal(compute_gnl(np.zeros(4)), 0.0)
        np.testing.assert_array_equal(compute_cnl(np.zeros(4), np.array([0, 0, 1, 1])), 0.0)

    @settings(max_examples=500, deadline=None)
    @given(batches())
    def test_mean_identities(self, batch):
        losses, labels, _ = batch
        gnl, cnl = compute_gnl(losses), compute_cnl(losses, labels)
        assert abs(gnl.mean() - 1.0) <= 1e-9
        for k in np.unique(labels):
            assert abs(cnl[labels == k].mean() - 1.0) <= 1e-9
        assert np.all(gnl >= 0) and np.all(cnl >= 0)


class TestEntropy:
    def test_uniform(self):
        assert compute_pe(np.full((1, 10), 0.1))[0] == pytest.approx(math.log(10), abs=1e-12)
        assert compute_pe(np.full((1, 10), 0.1))[0] == pytest.approx(2.302585, abs=1e-6)

    def test_onehot(self):
        assert compute_pe(np.eye(4)[[2]])[0] == 0.0

    def test_half(self):
        assert compute_pe(np.array([[0.5, 0.5]]))[0] == pytest.approx(0.693147, abs=1e-6)

    @settings(max_examples=500, deadline=None)
    @given(batches())
    def test_range(self, batch):
        _, _, probs = batch
        pe = compute_pe(probs)
        assert np.all(pe >= 0) and np.all(pe <= math.log(probs.shape[1]) + 1e-9)


class TestBuildFeatures:
    def test_standard_width(self, rng):
        f = build_features(rng.uniform(size=4), nc.softmax_np(rng.normal(size=(4, 3))), [0, 1, 2, 1], "standard")
        assert f.shape == (4, 6) == (4, feature_width("standard", 3))

    @pytest.mark.parametrize("c", [2, 3, 10])
    def test_agnostic_width_independent_of_c(self, rng, c):
        probs = nc.softmax_np(rng.normal(size=(5, c)))
        assert build_features(rng.uniform(size=5), probs, rng.integers(0, c, 5), "agnostic").shape == (5, 5)

    def test_agnostic_label_pair(self):
        f = build_features([0.5], [[0.2, 0.5, 0.3]], [1], "agnostic")
        np.testing.assert_array_equal(f[0, 3:], [0.5, 1.0])

    def test_column_order(self):
        losses, probs, labels = np.array([1.0, 3.0]), np.array([[0.5, 0.5], [0.9, 0.1]]), np.array([0, 0])
        f = build_features(losses, probs, labels, "standard")
        np.testing.assert_allclose(f[:, 0], compute_cnl(losses, labels))
        np.testing.assert_allclose(f[:, 1], compute_gnl(losses))
        np.testing.assert_allclose(f[:, 2], compute_pe(probs))
        np.testing.assert_array_equal(f[:, 3:], [[1, 0], [1, 0]])

    def test_raw_variant(self):
        f = build_features([1.0, 3.0], [[0.5, 0.5], [0.9, 0.1]], [0, 1], "standard", normalized=False)
        assert f.shape == (2, 4)
        np.testing.assert_array_equal(f[:, 0], [1.0, 3.0])

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            build_features([1.0], [[1.0, 0.0]], [0], "fancy")

    def test_dimension_mismatch(self):
        with pytest.raises(nc.DimensionError):
            build_features([1.0, 2.0], [[1.0, 0.0]], [0, 1])

    @settings(max_examples=200, deadline=None)
    @given(batches(), st.sampled_from(["standard", "agnostic"]), st.booleans())
    def test_graph_matches_numpy(self, batch, mode, normalized):
        losses, labels, probs = batch
        a = build_features(losses, probs, labels, mode, normalized)
        b = build_features_graph(nc.Tensor(losses), nc.Tensor(probs), labels, mode, normalized).value
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        assert np.all(np.isfinite(a))

    def test_pure(self, rng):
        args = rng.uniform(size=6), nc.softmax_np(rng.normal(size=(6, 3))), rng.integers(0, 3, 6)
        assert build_features(*args).tobytes() == build_features(*args).tobytes()


class TestStore:
    def test_fresh_is_zero(self):
        h, c = store_get(DynamicsStore(10, 4, 3), [0, 5, 9])
        np.testing.assert_array_equal(h, np.zeros((3, 4)))
        np.testing.assert_array_equal(c, np.zeros((3, 4)))

    def test_write_read(self, rng):
        store = DynamicsStore(10, 4, 3)
        h, c = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        store_update(store, [3, 7], h, c)
        h2, c2 = store_get(store, [3, 7])
        np.testing.assert_array_equal(h2, h)
        np.testing.assert_array_equal(c2, c)

    def test_untouched_unchanged(self, rng):
        store = DynamicsStore(10, 4, 3)
        store.state[:] = rng.normal(size=store.state.shape)
        before = store.state.copy()
        store_update(store, [1, 2], np.ones((2, 4)), np.ones((2, 4)))
        keep = np.setdiff1d(np.arange(10), [1, 2])
        np.testing.assert_array_equal(store.state[keep], before[keep])

    def test_get_returns_copy(self):
        store = DynamicsStore(3, 2, 2)
        h, _ = store.get([0])
        h[:] = 5.0
        np.testing.assert_array_equal(store.h, 0.0)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            DynamicsStore(3, 2, 2).get([3])

    def test_prev_probs_start_uniform(self):
        np.testing.assert_array_equal(DynamicsStore(4, 2, 5).prev_probs, 0.2)

    def test_ring_buffer(self):
        store = DynamicsStore(2, 1, 2, feature_width=1, history_depth=2)
        for t in range(3):
            store.record([0], np.array([[float(t)]]), np.array([[0.5, 0.5]]))
        np.testing.assert_array_equal(store.history[0, :, 0], [1.0, 2.0])
        assert store.history_len.tolist() == [2, 0]


def test_dynamics_records_schema():
    recs = dynamics_records([4], 2, np.array([[1.0, 0.5, 0.1, 1.0, 0.0]]), np.array([0.3]), [0], [1])
    assert recs == [{"index": 4, "epoch": 2, "cnl": 1.0, "gnl": 0.5, "pe": 0.1, "loss": 0.3,
                     "noisy_label": 0, "true_label": 1}]
