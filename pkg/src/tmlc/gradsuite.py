"""Finite-difference checks for every differentiable operation and for the
corrector pipeline end to end.

Each case draws a random instance from a seeded generator and reduces the
operation's output to a scalar with a random weighting, so the whole Jacobian
is exercised. Inputs are kept away from kinks (relu at 0, clamp floors) where
the derivative is undefined.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numcore as nc
from .basemodel import base_loss, forward_batch, mlp_init, onehot
from .corrector import correct_batch, decode, decode_mixing, init_corrector, lstm_step
from .dynamics import DynamicsStore, build_features_graph
from .metaloop import MetaConfig, _lookahead_meta_loss
from .datagen import NoisyDataset

TOLERANCE = 1e-4


def _weighted(out: nc.Tensor, w: np.ndarray) -> nc.Tensor:
    return nc.sum(nc.mul(out, nc.Tensor(w.reshape(out.shape))))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _unary(op, make_input):
    def case(rng):
        x = make_input(rng)
        w = rng.normal(size=np.shape(op(nc.Tensor(x)).value))
        return lambda t: _weighted(op(t), w), x
    return case


def _binary(op, make_a, make_b, wrt: int):
    def case(rng):
        a, b = make_a(rng), make_b(rng)
        w = rng.normal(size=op(nc.Tensor(a), nc.Tensor(b)).shape)
        if wrt == 0:
            return lambda t: _weighted(op(t, nc.Tensor(b)), w), a
        return lambda t: _weighted(op(nc.Tensor(a), t), w), b
    return case


def _normal(*shape):
    return lambda rng: rng.normal(size=shape)


def _positive(*shape):
    return lambda rng: rng.uniform(0.5, 2.0, size=shape)


def _softmax_target(rng, n=4, c=3):
    return nc.softmax_np(rng.normal(size=(n, c)))


def _cross_entropy_case(rng):
    target = _softmax_target(rng)
    w = rng.uniform(0.5, 1.5, size=4)
    return lambda t: _weighted(nc.soft_cross_entropy(nc.softmax(t), target), w), rng.normal(size=(4, 3))


def _kl_case(rng):
    target = _softmax_target(rng)
    w = rng.uniform(0.5, 1.5, size=4)
    return lambda t: _weighted(nc.kl_divergence(target, nc.softmax(t)), w), rng.normal(size=(4, 3))


def _features_case(mode: str, wrt: str):
    def case(rng):
        b, c = 6, 3
        noisy = rng.integers(0, c, size=b)
        noisy[:c] = np.arange(c)
        logits = rng.normal(size=(b, c))
        losses = rng.uniform(0.2, 2.0, size=b)
        width = build_features_graph(nc.Tensor(losses), nc.softmax(nc.Tensor(logits)), noisy, mode).shape[1]
        w = rng.normal(size=(b, width))
        if wrt == "losses":
            return (lambda t: _weighted(build_features_graph(t, nc.softmax(nc.Tensor(logits)), noisy, mode), w),
                    losses)
        return (lambda t: _weighted(build_features_graph(nc.Tensor(losses), nc.softmax(t), noisy, mode), w),
                logits)
    return case


def _swap_param(params, name: str, t: nc.Tensor, fn):
    saved = params.tensors[name]
    params.tensors[name] = t
    try:
        return fn()
    finally:
        params.tensors[name] = saved


def _corrector_case(name: str, mode: str, stage: str):
    """Gradient w.r.t. one corrector tensor of lstm_step, decode or the full pipeline."""
    def case(rng):
        b, c, hs = 5, 3, 4
        params = init_corrector(c, mode, hidden_size=hs, decoder_width=3, seed=int(rng.integers(1 << 30)))
        for k, v in params.tensors.items():
            v.value[...] = rng.normal(scale=0.5, size=v.shape)
        feats = rng.normal(size=(b, params.feature_width))
        h0, c0 = rng.normal(size=(b, hs)), rng.normal(size=(b, hs))
        probs = _softmax_target(rng, b, c)
        noisy = rng.integers(0, c, size=b)
        losses = -np.log(probs[np.arange(b), noisy])
        prev = _softmax_target(rng, b, c)
        w = rng.normal(size=(b, c))

        def run():
            if stage == "lstm":
                h, cell = lstm_step(feats, h0, c0, params)
                return nc.add(_weighted(h, w[:, :1] * np.ones((1, hs))), _weighted(cell, np.ones((b, hs))))
            if stage == "decode":
                h, _ = lstm_step(feats, h0, c0, params)
                if mode == "standard":
                    return _weighted(decode(h, params), w)
                return _weighted(decode_mixing(h, params, onehot(noisy, c), probs, prev), w)
            store = DynamicsStore(b, hs, c, params.feature_width)
            store.h[:], store.c[:], store.prev_probs[:] = h0, c0, prev
            y_hat = correct_batch(probs, losses, noisy, np.arange(b), store, params, advance=False)
            return nc.sum(nc.kl_divergence(_softmax_target(np.random.default_rng(7), b, c), y_hat))

        x = params.tensors[name].value.copy()
        return lambda t: _swap_param(params, name, t, run), x
    return case


def _base_model_case(layer: int):
    def case(rng):
        model = mlp_init([2, 5, 3], seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=(6, 2))
        targets = _softmax_target(rng, 6, 3)

        def f(t):
            params = list(model.params)
            params[layer] = t
            _, probs = forward_batch(model, x, params)
            return base_loss(probs, targets)
        return f, model.params[layer].value.copy()
    return case


def _lookahead_case(name: str):
    """Meta-loss after a virtual inner step, differentiated w.r.t. one corrector tensor."""
    def case(rng):
        c, hs, n = 3, 3, 12
        feats = rng.normal(size=(n, 2))
        true = np.arange(n) % c
        noisy = np.where(rng.random(n) < 0.3, (true + 1) % c, true)
        ds = NoisyDataset(feats, true, noisy, c, "toy")
        model = mlp_init([2, 4, c], seed=int(rng.integers(1 << 30)))
        cfg = MetaConfig(mode="agnostic", hidden_size=hs, meta_supervision="clean_meta", lookahead=True)
        params = init_corrector(c, "agnostic", hidden_size=hs, decoder_width=3, seed=int(rng.integers(1 << 30)))
        for v in params.tensors.values():
            v.value[...] = rng.normal(scale=0.5, size=v.shape)
        store = DynamicsStore(n, hs, c, params.feature_width)
        store.state[:] = rng.normal(size=store.state.shape)
        sb, qb = np.arange(0, 6), np.arange(6, 12)
        target = onehot(true[qb], c)

        def run():
            y_hat = _lookahead_meta_loss(model, params, store, ds, qb, sb, 0.5, cfg)
            return nc.sum(nc.kl_divergence(target, y_hat))

        snapshot = store.state.copy(), store.prev_probs.copy(), store.history.copy()

        def f(t):
            store.state[:], store.prev_probs[:], store.history[:] = snapshot
            return _swap_param(params, name, t, run)
        return f, params.tensors[name].value.copy()
    return case


CASES: dict[str, Callable] = {
    "matmul_a": _binary(nc.matmul, _normal(3, 4), _normal(4, 2), 0),
    "matmul_b": _binary(nc.matmul, _normal(3, 4), _normal(4, 2), 1),
    "add": _binary(nc.add, _normal(3, 4), _normal(3, 4), 0),
    "add_bias": _binary(nc.add, _normal(3, 4), _normal(4), 1),
    "sub": _binary(nc.sub, _normal(3, 4), _normal(3, 4), 1),
    "mul": _binary(nc.mul, _normal(3, 4), _normal(3, 4), 0),
    "div_num": _binary(nc.div, _normal(3, 4), _positive(3, 4), 0),
    "div_den": _binary(nc.div, _normal(3, 4), _positive(3, 4), 1),
    "scale": _unary(lambda t: nc.scale(t, -1.7), _normal(3, 4)),
    "clamp_min": _unary(lambda t: nc.clamp_min(t, 0.0), lambda rng: _away_from_zero(rng, (3, 4))),
    "relu": _unary(nc.relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "sigmoid": _unary(nc.sigmoid, _normal(3, 4)),
    "tanh": _unary(nc.tanh, _normal(3, 4)),
    "log": _unary(nc.log, _positive(3, 4)),
    "softmax": _unary(nc.softmax, _normal(3, 4)),
    "sum_all": _unary(lambda t: nc.reshape(nc.sum(t), (1,)), _normal(3, 4)),
    "sum_rows": _unary(lambda t: nc.sum(t, axis=1), _normal(3, 4)),
    "mean": _unary(lambda t: nc.reshape(nc.mean(t), (1,)), _normal(3, 4)),
    "reshape": _unary(lambda t: nc.reshape(t, (2, 6)), _normal(3, 4)),
    "columns": _unary(lambda t: nc.columns(t, 1, 3), _normal(3, 4)),
    "concat": _unary(lambda t: nc.concat([t, nc.scale(t, 2.0)]), _normal(3, 4)),
    "soft_cross_entropy": _cross_entropy_case,
    "kl_divergence": _kl_case,
    "features_standard_losses": _features_case("standard", "losses"),
    "features_standard_probs": _features_case("standard", "probs"),
    "features_agnostic_losses": _features_case("agnostic", "losses"),
    "features_agnostic_probs": _features_case("agnostic", "probs"),
}
for _name in ("W_x", "U", "b"):
    CASES[f"lstm_step_{_name}"] = _corrector_case(_name, "standard", "lstm")
for _name in ("W_x", "U", "b", "W_1", "b_1", "W_2", "b_2"):
    CASES[f"decode_{_name}"] = _corrector_case(_name, "standard", "decode")
    CASES[f"decode_mixing_{_name}"] = _corrector_case(_name, "agnostic", "decode")
    CASES[f"pipeline_standard_{_name}"] = _corrector_case(_name, "standard", "pipeline")
    CASES[f"pipeline_agnostic_{_name}"] = _corrector_case(_name, "agnostic", "pipeline")
    CASES[f"lookahead_{_name}"] = _lookahead_case(_name)
for _layer in range(4):
    CASES[f"base_model_param{_layer}"] = _base_model_case(_layer)


def run_case(name: str, seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    f, x = CASES[name](rng)
    return nc.finite_difference_check(f, x, h=h)


def run_suite(seeds: int = 20, names=None) -> dict[str, float]:
    """Worst relative error per case over ``seeds`` random instances."""
    names = list(CASES) if names is None else list(names)
    return {name: max(run_case(name, s) for s in range(seeds)) for name in names}
