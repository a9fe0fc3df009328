"""Synthetic classification sets, IDX loading, and label-noise injection."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numcore import sigmoid_np


class ConfigError(ValueError):
    """Invalid experiment or generator parameters."""


class FormatError(ValueError):
    """A file does not match the expected on-disk format."""


NOISE_KINDS = ("none", "symmetric", "asymmetric", "instance_dependent")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    rate: float = 0.0
    pair_map: dict | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"noise rate must lie in [0, 1], got {self.rate}")
        if self.pair_map is not None:
            # json round-trips turn int keys into strings
            object.__setattr__(self, "pair_map", {int(k): int(v) for k, v in self.pair_map.items()})
            for src, dst in self.pair_map.items():
                if src == dst:
                    raise ConfigError(f"pair_map sends class {src} to itself")

    def to_dict(self) -> dict:
        pair_map = None if self.pair_map is None else {str(k): v for k, v in sorted(self.pair_map.items())}
        return {"kind": self.kind, "rate": self.rate, "pair_map": pair_map, "seed": self.seed}


@dataclass
class NoisyDataset:
    features: np.ndarray
    true_labels: np.ndarray
    noisy_labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.true_labels.shape != (n,) or self.noisy_labels.shape != (n,):
            raise ConfigError("features and labels disagree on sample count")
        for labels in (self.true_labels, self.noisy_labels):
            if n and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ConfigError(f"labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def noisy_accuracy(self) -> float:
        return float(np.mean(self.noisy_labels == self.true_labels))

    def subset(self, indices) -> "NoisyDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, features=self.features[idx], true_labels=self.true_labels[idx],
                       noisy_labels=self.noisy_labels[idx])


@dataclass(frozen=True)
class DataSplit:
    support_indices: np.ndarray
    query_indices: np.ndarray


# ---------------------------------------------------------------- generators

def blob_centers(num_classes: int, spread: float) -> np.ndarray:
    radius = 4.0 * spread * num_classes / np.pi
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gen_blobs(num_classes: int, per_class: int, dim: int = 2, spread: float = 0.5,
              seed: int = 0) -> NoisyDataset:
    """Gaussian clusters whose centers sit evenly on a circle of radius 4*spread*C/pi.

    The circle lives in the first two coordinates; extra dimensions are pure
    noise around zero.
    """
    if num_classes < 2 or per_class < 1 or dim < 2 or not spread > 0:
        raise ConfigError(f"invalid blob parameters C={num_classes}, n={per_class}, d={dim}, spread={spread}")
    rng = np.random.default_rng(seed)
    centers = np.zeros((num_classes, dim))
    centers[:, :2] = blob_centers(num_classes, spread)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return NoisyDataset(x[order], labels[order], labels[order].copy(), num_classes, name="blobs")


def gen_two_moons(n: int, noise_std: float = 0.1, seed: int = 0) -> NoisyDataset:
    if n < 2 or n % 2:
        raise ConfigError(f"two moons needs an even n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    half = n // 2
    t = np.pi * rng.random(half)
    s = np.pi * rng.random(half)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(s), 0.5 - np.sin(s)], axis=1)
    x = np.concatenate([upper, lower]) + noise_std * rng.standard_normal((n, 2))
    y = np.repeat([0, 1], half)
    order = rng.permutation(n)
    return NoisyDataset(x[order], y[order], y[order].copy(), 2, name="two_moons")


def gen_rings(n: int, seed: int = 0, radii=(1.0, 2.0), width: float = 0.25) -> NoisyDataset:
    """Two concentric annuli; class k is the ring of radius ``radii[k]``."""
    if n < 2 or n % 2:
        raise ConfigError(f"rings needs an even n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    half = n // 2
    y = np.repeat([0, 1], half)
    r = np.asarray(radii)[y] + width * (rng.random(n) - 0.5)
    theta = 2.0 * np.pi * rng.random(n)
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    order = rng.permutation(n)
    return NoisyDataset(x[order], y[order], y[order].copy(), 2, name="rings")


# ---------------------------------------------------------------- IDX files

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset 0")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at byte offset 0, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: payload ends at byte offset {len(raw)}, expected {expected} for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> NoisyDataset:
    images = _read_idx(images_path, _IDX_IMAGES, 3)
    labels = _read_idx(labels_path, _IDX_LABELS, 1).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    c = num_classes or int(labels.max()) + 1
    return NoisyDataset(x, labels, labels.copy(), c, name=Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", _IDX_IMAGES, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", _IDX_LABELS, labels.shape[0]) + labels.tobytes())


# ---------------------------------------------------------------- JSON lines

def save_jsonl(dataset: NoisyDataset, path) -> None:
    with open(path, "w") as fh:
        for x, y, yn in zip(dataset.features, dataset.true_labels, dataset.noisy_labels):
            fh.write(json.dumps({"features": x.tolist(), "y": int(y), "y_noisy": int(yn)}) + "\n")


def load_jsonl(path, num_classes: int | None = None, name: str | None = None) -> NoisyDataset:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise FormatError(f"{path}: no records")
    x = np.array([r["features"] for r in rows], dtype=np.float64)
    y = np.array([r["y"] for r in rows])
    yn = np.array([r["y_noisy"] for r in rows])
    c = num_classes or int(max(y.max(), yn.max())) + 1
    return NoisyDataset(x, y, yn, c, name=name or Path(path).stem)


# ---------------------------------------------------------------- noise

def transition_matrix(spec: NoiseSpec, num_classes: int) -> np.ndarray:
    """Row c gives P(noisy = c' | true = c) for symmetric/asymmetric noise.

    Instance-dependent noise has no single matrix; its marginal (symmetric
    with the same rate) is returned.
    """
    c, r = num_classes, spec.rate
    if spec.kind == "none" or r == 0.0:
        return np.eye(c)
    if spec.kind in ("symmetric", "instance_dependent"):
        q = np.full((c, c), r / (c - 1))
        np.fill_diagonal(q, 1.0 - r)
        return q
    if not spec.pair_map:
        raise ConfigError("asymmetric noise needs a pair_map")
    q = np.eye(c)
    for src, dst in spec.pair_map.items():
        if not (0 <= src < c and 0 <= dst < c):
            raise ConfigError(f"pair_map entry {src}->{dst} outside [0, {c})")
        q[src, src] = 1.0 - r
        q[src, dst] = r
    return q


def _other_class(rng, labels: np.ndarray, num_classes: int) -> np.ndarray:
    # uniform over the C-1 classes different from each label
    shift = rng.integers(1, num_classes, size=labels.size)
    return (labels + shift) % num_classes


def _stratified_flips(rng, labels: np.ndarray, k: int, rate: float) -> np.ndarray:
    # exactly round(rate * n_k) members of class k, chosen uniformly at random
    idx = np.flatnonzero(labels == k)
    return rng.permutation(idx)[:int(round(rate * idx.size))]


def inject_noise(dataset: NoisyDataset, spec: NoiseSpec) -> NoisyDataset:
    """Resample noisy labels from the clean ones according to ``spec``.

    Symmetric and asymmetric noise are stratified: each true class flips
    exactly round(rate * n_k) randomly chosen labels and, for symmetric noise,
    the flips are spread as evenly as possible over the other classes. Every
    label's marginal still follows its transition row, while the empirical
    confusion matrix matches the transition matrix up to rounding.
    """
    y = dataset.true_labels
    c = dataset.num_classes
    rng = np.random.default_rng(spec.seed)
    noisy = y.copy()
    if spec.kind == "none" or spec.rate == 0.0:
        pass
    elif spec.kind == "symmetric":
        for k in range(c):
            chosen = _stratified_flips(rng, y, k, spec.rate)
            others = rng.permutation(np.delete(np.arange(c), k))
            noisy[chosen] = others[rng.permutation(np.arange(chosen.size) % (c - 1))]
    elif spec.kind == "asymmetric":
        transition_matrix(spec, c)  # validates the pair map
        for k in sorted(spec.pair_map):
            noisy[_stratified_flips(rng, y, int(k), spec.rate)] = spec.pair_map[k]
    else:
        w = rng.standard_normal(dataset.dim)
        score = sigmoid_np(dataset.features @ w)
        prob = np.clip(spec.rate * score / max(score.mean(), 1e-12), 0.0, 1.0)
        flip = rng.random(y.size) < prob
        noisy[flip] = _other_class(rng, y[flip], c)
    return replace(dataset, noisy_labels=noisy, noise=spec)


def empirical_transition(dataset: NoisyDataset) -> np.ndarray:
    c = dataset.num_classes
    counts = np.zeros((c, c))
    np.add.at(counts, (dataset.true_labels, dataset.noisy_labels), 1.0)
    return counts / np.maximum(counts.sum(axis=1, keepdims=True), 1.0)


def split_support_query(dataset: NoisyDataset, query_fraction: float, seed: int = 0) -> DataSplit:
    """Stratified split by noisy label into disjoint support and query sets."""
    if not 0.0 < query_fraction < 1.0:
        raise ConfigError(f"query_fraction must lie in (0, 1), got {query_fraction}")
    rng = np.random.default_rng(seed)
    support, query = [], []
    for k in range(dataset.num_classes):
        members = np.flatnonzero(dataset.noisy_labels == k)
        if members.size == 0:
            continue
        if members.size < 2:
            raise ConfigError(f"noisy class {k} has fewer than 2 samples; cannot split")
        members = rng.permutation(members)
        n_query = min(max(1, int(round(query_fraction * members.size))), members.size - 1)
        query.append(members[:n_query])
        support.append(members[n_query:])
    return DataSplit(np.sort(np.concatenate(support)), np.sort(np.concatenate(query)))
