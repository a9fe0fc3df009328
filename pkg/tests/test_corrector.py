import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmlc import numcore as nc
from tmlc.corrector import (PARAM_NAMES, correct_batch, decode, decode_mixing, hard_labels, init_corrector,
                            lstm_step, snapshot_dumps, snapshot_load, snapshot_loads, snapshot_save)
from tmlc.datagen import FormatError
from tmlc.dynamics import DynamicsStore, build_features
from tmlc.gradsuite import run_case


def _random_params(c, mode, hs, seed, scale=0.5):
    p = init_corrector(c, mode, hidden_size=hs, seed=seed)
    r = np.random.default_rng(seed)
    for v in p.tensors.values():
        v.value[...] = r.normal(scale=scale, size=v.shape)
    p.invalidate()
    return p


def _batch(rng, b, c):
    probs = nc.softmax_np(rng.normal(size=(b, c)) * 2)
    noisy = rng.integers(0, c, size=b)
    losses = -np.log(probs[np.arange(b), noisy])
    return probs, losses, noisy


class TestLstmStep:
    def test_zero_weights(self, rng):
        p = init_corrector(3, hidden_size=4, zero=True)
        h, c = lstm_step(rng.normal(size=(2, 6)), np.zeros((2, 4)), np.zeros((2, 4)), p)
        np.testing.assert_array_equal(h.value, 0.0)
        np.testing.assert_array_equal(c.value, 0.0)

    def test_scalar_cell_by_hand(self):
        p = init_corrector(2, "agnostic", hidden_size=1, zero=True)  # feature width 5
        wx = np.zeros((5, 4))
        wx[0] = [0.5, -0.3, 0.8, 1.2]          # only the first feature drives the gates
        p.tensors["W_x"].value[...] = wx
        p.tensors["U"].value[...] = [[0.1, 0.2, -0.4, 0.7]]
        p.tensors["b"].value[...] = [0.05, 0.0, -0.1, 0.2]
        x, h0, c0 = 0.9, -0.3, 0.6
        sig = lambda z: 1 / (1 + math.exp(-z))  # noqa: E731
        gi = sig(0.5 * x + 0.1 * h0 + 0.05)
        gf = sig(-0.3 * x + 0.2 * h0)
        go = sig(0.8 * x - 0.4 * h0 - 0.1)
        u = math.tanh(1.2 * x + 0.7 * h0 + 0.2)
        c1 = gf * c0 + gi * u
        h1 = go * math.tanh(c1)
        feats = np.array([[x, 0, 0, 0, 0]])
        h, c = lstm_step(feats, np.array([[h0]]), np.array([[c0]]), p)
        assert h.value[0, 0] == pytest.approx(h1, abs=1e-15)
        assert c.value[0, 0] == pytest.approx(c1, abs=1e-15)

    def test_width_mismatch(self):
        p = init_corrector(3, hidden_size=2)
        with pytest.raises(nc.DimensionError):
            lstm_step(np.zeros((1, 5)), np.zeros((1, 2)), np.zeros((1, 2)), p)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 20.0))
    def test_hidden_bounded(self, seed, scale):
        r = np.random.default_rng(seed)
        p = _random_params(3, "standard", 5, seed, scale)
        h, _ = lstm_step(r.normal(size=(4, 6)) * scale, r.normal(size=(4, 5)), r.normal(size=(4, 5)) * scale, p)
        assert np.all(np.abs(h.value) <= 1)
        # strict below saturation; past |z| ~ 19 float64 tanh and sigmoid round to exactly 1
        if scale <= 1.0:
            assert np.all(np.abs(h.value) < 1)

    @pytest.mark.parametrize("name", ["W_x", "U", "b"])
    def test_gradients(self, name):
        assert max(run_case(f"lstm_step_{name}", s) for s in range(20)) <= 1e-4


class TestDecode:
    def test_zero_weights_uniform(self, rng):
        p = init_corrector(4, hidden_size=3, zero=True)
        np.testing.assert_allclose(decode(rng.normal(size=(5, 3)), p).value, 0.25)

    def test_decode_in_agnostic_mode(self):
        p = init_corrector(3, "agnostic", hidden_size=2)
        with pytest.raises(nc.ContractViolation):
            decode(np.zeros((1, 2)), p)
        with pytest.raises(nc.ContractViolation):
            decode_mixing(np.zeros((1, 2)), init_corrector(3, hidden_size=2), *[np.eye(3)[:1]] * 3)

    def test_tie_break_lowest_index(self):
        np.testing.assert_array_equal(hard_labels(np.array([[0.4, 0.4, 0.2], [0.25, 0.25, 0.5], [1 / 3] * 3])),
                                      [0, 2, 0])

    def test_mixing_zero_weights_is_mean(self, rng):
        p = init_corrector(3, "agnostic", hidden_size=4, zero=True)
        dists = [np.eye(3)[[1, 2]], nc.softmax_np(rng.normal(size=(2, 3))), nc.softmax_np(rng.normal(size=(2, 3)))]
        out = decode_mixing(rng.normal(size=(2, 4)), p, *dists).value
        np.testing.assert_allclose(out, sum(dists) / 3, atol=1e-15)

    def test_mixing_endpoint_reproduces_noisy_label(self, rng):
        p = init_corrector(3, "agnostic", hidden_size=2, zero=True)
        p.tensors["b_2"].value[...] = [60.0, 0.0, 0.0]
        noisy = np.eye(3)[[0, 2]]
        out = decode_mixing(np.zeros((2, 2)), p, noisy, np.full((2, 3), 1 / 3), np.full((2, 3), 1 / 3)).value
        np.testing.assert_allclose(out, noisy, atol=1e-25)

    def test_mixing_zero_pattern(self, rng):
        p = _random_params(4, "agnostic", 3, 1)
        zero_col = np.array([[0.5, 0.5, 0.0, 0.0]])
        out = decode_mixing(rng.normal(size=(1, 3)), p, np.eye(4)[[0]], zero_col, np.array([[0.0, 0.3, 0.0, 0.7]]))
        assert out.value[0, 2] == 0.0

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 7), st.floats(0.1, 10.0))
    def test_outputs_on_simplex(self, seed, c, scale):
        r = np.random.default_rng(seed)
        h = np.tanh(r.normal(size=(6, 4)) * scale)
        std = decode(h, _random_params(c, "standard", 4, seed, scale)).value
        a, b = nc.softmax_np(r.normal(size=(2, 6, c)) * scale)
        mix = decode_mixing(h, _random_params(c, "agnostic", 4, seed, scale), np.eye(c)[r.integers(0, c, 6)], a, b).value
        for out in (std, mix):
            assert np.all(out >= 0)
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9, rtol=0)


class TestCorrectBatch:
    def test_untrained_uniform(self, rng):
        p = init_corrector(3, hidden_size=4, zero=True)
        probs, losses, noisy = _batch(rng, 5, 3)
        out = correct_batch(probs, losses, noisy, np.arange(5), DynamicsStore(5, 4, 3, 6), p)
        np.testing.assert_allclose(out.value, 1 / 3)

    def test_stateful(self, rng):
        p = _random_params(3, "standard", 4, 2)
        store = DynamicsStore(5, 4, 3, 6)
        probs, losses, noisy = _batch(rng, 5, 3)
        first = correct_batch(probs, losses, noisy, np.arange(5), store, p).value
        second = correct_batch(probs, losses, noisy, np.arange(5), store, p).value
        assert not np.allclose(first, second)

    def test_deterministic(self, rng):
        p = _random_params(3, "agnostic", 4, 3)
        probs, losses, noisy = _batch(rng, 6, 3)
        outs = [correct_batch(probs, losses, noisy, np.arange(6), DynamicsStore(6, 4, 3, 5), p).value
                for _ in range(2)]
        assert outs[0].tobytes() == outs[1].tobytes()

    @pytest.mark.parametrize("mode", ["standard", "agnostic"])
    @pytest.mark.parametrize("seed", range(5))
    def test_fast_path_matches_graph(self, mode, seed):
        r = np.random.default_rng(seed)
        c, hs, b = 3, 8, 7
        p = _random_params(c, mode, hs, seed)
        stores = [DynamicsStore(b, hs, c, p.feature_width) for _ in range(2)]
        for s in stores:
            s.state[:] = np.random.default_rng(seed + 100).normal(size=s.state.shape)
        outs = []
        for k, s in enumerate(stores):
            steps = []
            for t in range(3):
                probs, losses, noisy = _batch(np.random.default_rng([seed, t]), b, c)
                if k == 0:
                    steps.append(correct_batch(probs, losses, noisy, np.arange(b), s, p).value)
                else:
                    with nc.no_grad():
                        steps.append(correct_batch(probs, losses, noisy, np.arange(b), s, p).value)
            outs.append(np.array(steps))
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-13, rtol=0)
        np.testing.assert_allclose(stores[0].state, stores[1].state, atol=1e-13, rtol=0)

    @pytest.mark.parametrize("mode", ["standard", "agnostic"])
    @pytest.mark.parametrize("name", PARAM_NAMES)
    def test_pipeline_gradient(self, mode, name):
        assert max(run_case(f"pipeline_{mode}_{name}", s) for s in range(20)) <= 1e-4

    def test_feedforward_encoder_ignores_history(self, rng):
        p = init_corrector(3, hidden_size=4, encoder="feedforward", seed=1)
        store = DynamicsStore(4, 4, 3, 6)
        probs, losses, noisy = _batch(rng, 4, 3)
        a = correct_batch(probs, losses, noisy, np.arange(4), store, p).value
        b = correct_batch(probs, losses, noisy, np.arange(4), store, p).value
        np.testing.assert_array_equal(a, b)


class TestSnapshots:
    def test_byte_identical_round_trip(self, tmp_path):
        p = _random_params(3, "standard", 4, 7)
        p.epoch_tag = 40
        snapshot_save(p, tmp_path / "a.json")
        back = snapshot_load(tmp_path / "a.json")
        snapshot_save(back, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert back.epoch_tag == 40
        assert back.fingerprint() == p.fingerprint()

    def test_standard_needs_same_c(self, tmp_path):
        snapshot_save(init_corrector(3, hidden_size=2), tmp_path / "s.json")
        with pytest.raises(FormatError, match="c_out"):
            snapshot_load(tmp_path / "s.json", num_classes=5)

    @pytest.mark.parametrize("c", [2, 3, 10])
    def test_agnostic_loads_anywhere(self, tmp_path, c):
        snapshot_save(init_corrector(3, "agnostic", hidden_size=2), tmp_path / "s.json")
        assert snapshot_load(tmp_path / "s.json", num_classes=c).mode == "agnostic"

    def test_bad_version_and_width(self):
        doc = snapshot_dumps(init_corrector(3, hidden_size=2))
        with pytest.raises(FormatError, match="version"):
            snapshot_loads(doc.replace('"version": 1', '"version": 2'))
        with pytest.raises(FormatError, match="W_x"):
            snapshot_loads(doc.replace('"feature_width": 6', '"feature_width": 7'))
