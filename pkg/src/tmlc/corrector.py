"""The label corrector: an LSTM over per-sample dynamics plus a softmax decoder.

In ``standard`` mode the decoder maps the hidden state to a distribution over
the task's C classes. In ``agnostic`` mode it emits three mixing weights and
the corrected label is the convex combination
``w1 * onehot(noisy) + w2 * p_now + w3 * p_prev``, which works for any C.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datagen import ConfigError, FormatError
from .dynamics import DynamicsStore, build_features, feature_width

SNAPSHOT_VERSION = 1
PARAM_NAMES = ("W_x", "U", "b", "W_1", "b_1", "W_2", "b_2")
ENCODERS = ("lstm", "feedforward")


@dataclass
class CorrectorParams:
    mode: str
    hidden_size: int
    feature_width: int
    c_out: int
    decoder_width: int
    include_raw_features: bool = False
    encoder: str = "lstm"
    normalized_features: bool = True
    epoch_tag: int = 0
    tensors: dict = field(default_factory=dict)
    _packed: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def params(self) -> list[nc.Tensor]:
        return [self.tensors[k] for k in PARAM_NAMES]

    def copy(self, epoch_tag: int | None = None) -> "CorrectorParams":
        out = CorrectorParams(**{k: getattr(self, k) for k in _META_FIELDS})
        out.epoch_tag = self.epoch_tag if epoch_tag is None else epoch_tag
        out.tensors = {k: nc.parameter(v.value) for k, v in self.tensors.items()}
        return out

    def packed(self):
        """Cached transposed inference weights.

        The gate matrix is ``[W_x; U; b]^T`` with the sigmoid gate rows halved.
        Call :meth:`invalidate` after changing the tensors in place.
        """
        if self._packed is None:
            hs = self.hidden_size
            t = {k: v.value for k, v in self.tensors.items()}
            w = np.concatenate([t["W_x"], t["U"], t["b"][None, :]], axis=0).T.copy()
            w[:3 * hs] *= 0.5
            self._packed = (w, t["W_1"].T.copy(), t["b_1"][:, None].copy(), t["W_2"].T.copy(), t["b_2"][:, None].copy())
        return self._packed

    def invalidate(self) -> None:
        self._packed = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in PARAM_NAMES:
            h.update(self.tensors[k].value.tobytes())
        return h.hexdigest()


_META_FIELDS = ("mode", "hidden_size", "feature_width", "c_out", "decoder_width",
                "include_raw_features", "encoder", "normalized_features")


def init_corrector(num_classes: int, mode: str = "standard", hidden_size: int = 64,
                   decoder_width: int | None = None, include_raw_features: bool = False,
                   encoder: str = "lstm", normalized_features: bool = True, seed: int = 0,
                   zero: bool = False) -> CorrectorParams:
    """Glorot-uniform weights and zero biases (or all zeros with ``zero=True``)."""
    if mode not in ("standard", "agnostic"):
        raise ConfigError(f"unknown corrector mode {mode!r}")
    if encoder not in ENCODERS:
        raise ConfigError(f"unknown encoder {encoder!r}")
    width = feature_width(mode, num_classes, normalized_features)
    dec = hidden_size if decoder_width is None else decoder_width
    c_out = num_classes if mode == "standard" else 3
    dec_in = hidden_size + (width if include_raw_features else 0)
    shapes = {
        "W_x": (width, 4 * hidden_size), "U": (hidden_size, 4 * hidden_size), "b": (4 * hidden_size,),
        "W_1": (dec_in, dec), "b_1": (dec,), "W_2": (dec, c_out), "b_2": (c_out,),
    }
    rng = np.random.default_rng(seed)
    tensors = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        if zero or len(shape) == 1:
            tensors[name] = nc.parameter(np.zeros(shape))
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = nc.parameter(rng.uniform(-limit, limit, size=shape))
    return CorrectorParams(mode, hidden_size, width, c_out, dec, include_raw_features, encoder,
                           normalized_features, 0, tensors)


def lstm_step(features, h, c, params: CorrectorParams):
    """One LSTM step for a batch: returns ``(h_new, c_new)`` as tensors.

    Gate blocks of the 4H pre-activation are ordered input, forget, output,
    candidate.
    """
    f = nc.as_tensor(features)
    if f.value.ndim != 2 or f.shape[1] != params.feature_width:
        raise nc.DimensionError(f"feature width {f.shape} does not match corrector input width {params.feature_width}")
    t = params.tensors
    hs = params.hidden_size
    pre = nc.add(nc.add(nc.matmul(f, t["W_x"]), nc.matmul(nc.as_tensor(h), t["U"])), t["b"])
    gates = nc.sigmoid(nc.columns(pre, 0, 3 * hs))
    gate_i = nc.columns(gates, 0, hs)
    gate_f = nc.columns(gates, hs, 2 * hs)
    gate_o = nc.columns(gates, 2 * hs, 3 * hs)
    cand = nc.tanh(nc.columns(pre, 3 * hs, 4 * hs))
    c_new = nc.add(nc.mul(gate_f, nc.as_tensor(c)), nc.mul(gate_i, cand))
    h_new = nc.mul(gate_o, nc.tanh(c_new))
    return h_new, c_new


def _decoder_logits(h, params: CorrectorParams, features=None) -> nc.Tensor:
    t = params.tensors
    inp = nc.as_tensor(h)
    if params.include_raw_features:
        if features is None:
            raise nc.ContractViolation("include_raw_features needs the feature matrix")
        inp = nc.concat([nc.as_tensor(features), inp])
    hidden = nc.relu(nc.add(nc.matmul(inp, t["W_1"]), t["b_1"]))
    return nc.add(nc.matmul(hidden, t["W_2"]), t["b_2"])


def decode(h, params: CorrectorParams, features=None) -> nc.Tensor:
    """``softmax(W_2 relu(W_1 h + b_1) + b_2)`` over the C classes."""
    if params.mode != "standard":
        raise nc.ContractViolation("decode is for standard mode; use decode_mixing")
    return nc.softmax(_decoder_logits(h, params, features))


def decode_mixing(h, params: CorrectorParams, noisy_onehot, probs_now, probs_prev, features=None) -> nc.Tensor:
    if params.mode != "agnostic":
        raise nc.ContractViolation("decode_mixing is for agnostic mode; use decode")
    w = nc.softmax(_decoder_logits(h, params, features))
    out = None
    for k, dist in enumerate((noisy_onehot, probs_now, probs_prev)):
        dist = nc.as_tensor(dist)
        weight = nc.matmul(nc.columns(w, k, k + 1), nc.Tensor(np.ones((1, dist.shape[1]))))
        term = nc.mul(weight, dist)
        out = term if out is None else nc.add(out, term)
    return out


def hard_labels(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.argmax(probs, axis=1)


def _infer_np(features: np.ndarray, hc: np.ndarray, params: CorrectorParams, noisy_onehot=None,
              probs_now=None, probs_prev=None):
    """Graph-free forward pass used when no gradient is needed.

    ``hc`` holds ``[h | c]`` per row. Matches the tensor path up to rounding.
    Work is done on transposed (feature-major) arrays so that every gate block
    is a contiguous row range, and the sigmoid's half-scaling and the gate bias
    are folded into one packed weight matrix: one matmul and one tanh give all
    four gates. Returns ``(y_hat, [h_new | c_new])``.
    """
    hs, width = params.hidden_size, params.feature_width
    w_gates, w_1, b_1, w_2, b_2 = params.packed()
    b = features.shape[0]
    x = np.empty((width + hs + 1, b))
    x[:width] = features.T
    x[width:width + hs] = hc[:, :hs].T
    x[-1] = 1.0
    z = w_gates @ x
    np.tanh(z, out=z)
    z[:3 * hs] += 1.0
    new = np.empty((2 * hs, b))
    h_new, c_new = new[:hs], new[hs:]
    np.multiply(z[hs:2 * hs], hc[:, hs:].T, out=c_new)
    z[3 * hs:] *= z[:hs]
    c_new += z[3 * hs:]
    c_new *= 0.5
    np.tanh(c_new, out=h_new)
    h_new *= z[2 * hs:3 * hs]
    h_new *= 0.5
    inp = np.concatenate([features.T, h_new], axis=0) if params.include_raw_features else h_new
    hidden = w_1 @ inp
    hidden += b_1
    np.maximum(hidden, 0.0, out=hidden)
    logits = w_2 @ hidden
    logits += b_2
    logits -= logits.max(axis=0)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=0)
    if params.mode == "agnostic":
        out = logits[0][:, None] * noisy_onehot + logits[1][:, None] * probs_now + logits[2][:, None] * probs_prev
    else:
        out = logits.T
    return out, new.T


def encode(features, indices, store: DynamicsStore | None, params: CorrectorParams):
    """Hidden state for a batch, starting from the stored per-sample state."""
    b = np.asarray(features.value if isinstance(features, nc.Tensor) else features).shape[0]
    if params.encoder == "feedforward" or store is None:
        zeros = np.zeros((b, params.hidden_size))
        return lstm_step(features, zeros, zeros, params)
    h_prev, c_prev = store.get(indices)
    return lstm_step(features, h_prev, c_prev, params)


def correct_from_features(features, indices, noisy_labels, probs_now, store: DynamicsStore | None,
                          params: CorrectorParams, advance: bool = True) -> nc.Tensor:
    """Encode, decode, and (optionally) write the new states back to ``store``."""
    onehot = prev = None
    if params.mode == "agnostic":
        num_classes = nc.as_tensor(probs_now).shape[1]
        onehot = np.zeros((len(noisy_labels), num_classes))
        onehot[np.arange(len(noisy_labels)), noisy_labels] = 1.0
        prev = store.prev_probs[np.asarray(indices)] if store is not None else np.full(onehot.shape, 1.0 / num_classes)
    if not nc.is_grad_enabled():
        feats = features.value if isinstance(features, nc.Tensor) else np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != params.feature_width:
            raise nc.DimensionError(f"feature width {feats.shape} does not match corrector input width {params.feature_width}")
        if params.encoder == "feedforward" or store is None:
            hc = np.zeros((feats.shape[0], 2 * params.hidden_size))
        else:
            hc = store.gather(indices)
        now = probs_now.value if isinstance(probs_now, nc.Tensor) else probs_now
        out, hc_new = _infer_np(feats, hc, params, onehot, now, prev)
        if advance and store is not None and params.encoder == "lstm":
            store.scatter(indices, hc_new)
        return nc.Tensor(out)
    h, c = encode(features, indices, store, params)
    if params.mode == "standard":
        y_hat = decode(h, params, features)
    else:
        y_hat = decode_mixing(h, params, onehot, probs_now, prev, features)
    if advance and store is not None and params.encoder == "lstm":
        store.update(indices, h.value, c.value)
    return y_hat


def correct_batch(model_probs, losses, noisy_labels, indices, store: DynamicsStore | None,
                  params: CorrectorParams, advance: bool = True) -> nc.Tensor:
    """Features, then recurrent encoding, then decoding for one mini-batch.

    The store's states, feature history and previous predictions are advanced
    unless ``advance`` is False. Gradients flow to ``params`` only.
    """
    probs = np.asarray(model_probs.value if isinstance(model_probs, nc.Tensor) else model_probs)
    feats = build_features(losses, probs, noisy_labels, params.mode, params.normalized_features)
    y_hat = correct_from_features(feats, indices, noisy_labels, probs, store, params, advance)
    if advance and store is not None:
        store.record(indices, feats, probs)
    return y_hat


def check_compatible(params: CorrectorParams, num_classes: int) -> None:
    if params.mode == "standard" and params.c_out != num_classes:
        raise FormatError(f"c_out: snapshot decodes {params.c_out} classes but the task has {num_classes}")
    expected = feature_width(params.mode, num_classes, params.normalized_features)
    if params.feature_width != expected:
        raise FormatError(f"feature_width: snapshot expects {params.feature_width}, task produces {expected}")


# ---------------------------------------------------------------- snapshots

def snapshot_dumps(params: CorrectorParams) -> str:
    doc = {
        "version": SNAPSHOT_VERSION,
        "mode": params.mode,
        "hidden_size": params.hidden_size,
        "feature_width": params.feature_width,
        "c_out": params.c_out,
        "decoder_width": params.decoder_width,
        "include_raw_features": params.include_raw_features,
        "encoder": params.encoder,
        "normalized_features": params.normalized_features,
        "epoch_tag": params.epoch_tag,
        "params": {k: params.tensors[k].value.reshape(-1).tolist() for k in PARAM_NAMES},
    }
    return json.dumps(doc, sort_keys=True)


def snapshot_save(params: CorrectorParams, path) -> None:
    Path(path).write_text(snapshot_dumps(params))


def snapshot_loads(text: str, source: str = "<snapshot>") -> CorrectorParams:
    doc = json.loads(text)
    if doc.get("version") != SNAPSHOT_VERSION:
        raise FormatError(f"{source}: version {doc.get('version')!r} is not {SNAPSHOT_VERSION}")
    for key in _META_FIELDS + ("epoch_tag", "params"):
        if key not in doc:
            raise FormatError(f"{source}: missing field {key}")
    hs, width, dec, c_out = doc["hidden_size"], doc["feature_width"], doc["decoder_width"], doc["c_out"]
    dec_in = hs + (width if doc["include_raw_features"] else 0)
    shapes = {
        "W_x": (width, 4 * hs), "U": (hs, 4 * hs), "b": (4 * hs,),
        "W_1": (dec_in, dec), "b_1": (dec,), "W_2": (dec, c_out), "b_2": (c_out,),
    }
    tensors = {}
    for name in PARAM_NAMES:
        flat = doc["params"].get(name)
        if flat is None:
            raise FormatError(f"{source}: missing parameter {name}")
        if len(flat) != int(np.prod(shapes[name])):
            raise FormatError(f"{source}: {name} has {len(flat)} values, expected shape {shapes[name]}")
        tensors[name] = nc.parameter(np.asarray(flat, dtype=np.float64).reshape(shapes[name]))
    meta = {k: doc[k] for k in _META_FIELDS}
    return CorrectorParams(**meta, epoch_tag=doc["epoch_tag"], tensors=tensors)


def snapshot_load(path, num_classes: int | None = None) -> CorrectorParams:
    params = snapshot_loads(Path(path).read_text(), str(path))
    if num_classes is not None:
        check_compatible(params, num_classes)
    return params
