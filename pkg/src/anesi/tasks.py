"""Multi-digit addition, a synthetic digit channel, IDX loading and boolean constraint tasks."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .problem import Space, SymbolicFn

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_INT64_DIGITS = 17


# -- multi-digit addition -----------------------------------------------------

def digits_to_int(digits: Sequence[int]) -> int:
    value = 0
    for d in digits:
        value = value * 10 + int(d)
    return value


def int_to_digits(value: int, width: int) -> tuple[int, ...]:
    out = []
    for _ in range(width):
        value, d = divmod(value, 10)
        out.append(d)
    if value:
        raise ValueError("value does not fit in the requested number of digits")
    return tuple(reversed(out))


def c_sum(w: Sequence[int], N: int) -> tuple[int, ...]:
    """Sum the two N-digit numbers in ``w`` and return the N+1 digits of the result."""
    if len(w) != 2 * N:
        raise ValueError(f"world must have {2 * N} digits, got {len(w)}")
    return int_to_digits(digits_to_int(w[:N]) + digits_to_int(w[N:]), N + 1)


def c_sum_batch(ws: np.ndarray, N: int) -> np.ndarray:
    ws = np.asarray(ws, dtype=np.int64)
    if N > MAX_INT64_DIGITS:
        return np.array([c_sum(w, N) for w in ws], dtype=np.int64)
    powers = 10 ** np.arange(N - 1, -1, -1, dtype=np.int64)
    total = ws[:, :N] @ powers + ws[:, N:] @ powers
    out_powers = 10 ** np.arange(N, -1, -1, dtype=np.int64)
    return (total[:, None] // out_powers[None, :]) % 10


@dataclass(frozen=True)
class AdditionTask:
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")

    @property
    def w_space(self) -> Space:
        return Space((10,) * (2 * self.N))

    @property
    def y_space(self) -> Space:
        return Space((2,) + (10,) * self.N)

    def symbolic_fn(self) -> SymbolicFn:
        N = self.N
        return SymbolicFn(self.w_space, self.y_space, lambda w: c_sum(w, N),
                          batch=lambda ws: c_sum_batch(ws, N), name=f"sum{N}")

    def output_value(self, y: Sequence[int]) -> int:
        return digits_to_int(y)


@dataclass
class AdditionDataset:
    """Disjoint 2N-tuples drawn from a digit pool.

    ``indices`` points into the pool (and into ``features`` when present),
    ``digits`` holds the labels and ``outputs`` the digit-decomposed sums.
    """

    N: int
    indices: np.ndarray
    digits: np.ndarray
    outputs: np.ndarray
    features: np.ndarray | None = None

    def __len__(self):
        return len(self.digits)

    def __iter__(self) -> Iterator[tuple[tuple[int, ...], tuple[int, ...]]]:
        for d, y in zip(self.digits, self.outputs):
            yield tuple(int(v) for v in d), tuple(int(v) for v in y)

    def inputs(self, rows) -> np.ndarray:
        """Perception inputs for the selected instances, shape (B, 2N, F)."""
        if self.features is None:
            raise ValueError("dataset has no perception features attached")
        return self.features[self.indices[rows]]


def make_dataset(N: int, digit_pool_size: int | None = None, seed: int = 0,
                 labels: np.ndarray | None = None,
                 proportions: Sequence[float] | None = None) -> AdditionDataset:
    """Partition a pool of digit labels into disjoint 2N-tuples.

    The pool is ``labels`` when given (e.g. MNIST labels), otherwise
    ``digit_pool_size`` labels drawn from ``proportions`` (uniform by default).
    Leftover pool elements that do not fill a tuple are dropped.
    """
    rng = np.random.default_rng(seed)
    if labels is None:
        if digit_pool_size is None:
            raise ValueError("need either a pool size or explicit labels")
        p = None if proportions is None else np.asarray(proportions) / np.sum(proportions)
        labels = rng.choice(10, size=digit_pool_size, p=p)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) < 2 * N:
        raise ValueError(f"pool of {len(labels)} digits is smaller than one instance ({2 * N})")
    count = len(labels) // (2 * N)
    order = rng.permutation(len(labels))[:count * 2 * N].reshape(count, 2 * N)
    digits = labels[order]
    return AdditionDataset(N, order, digits, c_sum_batch(digits, N))


# -- synthetic digit channel --------------------------------------------------

@dataclass(frozen=True)
class SyntheticDigitConfig:
    feature_dim: int = 16
    flip_rate: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_rate < 0.5:
            raise ValueError("flip rate must lie in [0, 0.5)")
        if self.feature_dim < 10:
            raise ValueError("feature dimension must be at least 10")

    @property
    def effective_flip_rate(self) -> float:
        """Probability the anchor differs from the label (replacement may coincide)."""
        return self.flip_rate * 0.9

    def reference_digit_accuracy(self) -> float:
        return 1.0 - self.effective_flip_rate


def synth_features(labels: np.ndarray, config: SyntheticDigitConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """Feature vectors for a batch of labels.

    Each vector is the one-hot code of an anchor digit in the first ten
    coordinates plus Gaussian noise on every coordinate. With probability
    ``flip_rate`` the anchor is redrawn uniformly from all ten digits.
    """
    labels = np.asarray(labels, dtype=np.int64)
    flat = labels.ravel()
    anchors = flat.copy()
    flip = rng.random(flat.shape) < config.flip_rate
    anchors[flip] = rng.integers(0, 10, size=int(flip.sum()))
    feats = np.zeros((flat.size, config.feature_dim))
    feats[np.arange(flat.size), anchors] = 1.0
    if config.noise_std > 0:
        feats += rng.normal(0.0, config.noise_std, size=feats.shape)
    return feats.reshape(labels.shape + (config.feature_dim,))


def synth_perceive(label: int, config: SyntheticDigitConfig, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= int(label) <= 9:
        raise ValueError(f"label {label} is not a digit")
    return synth_features(np.array([label]), config, rng)[0]


def synthetic_addition(N: int, pool_size: int, config: SyntheticDigitConfig) -> AdditionDataset:
    """Addition dataset over a fresh pool of digits carrying synthetic features."""
    pool = np.random.default_rng(config.seed).integers(0, 10, size=pool_size)
    ds = make_dataset(N, labels=pool, seed=config.seed)
    ds.features = synth_features(pool, config, np.random.default_rng([config.seed, 1]))
    return ds


# -- IDX files ----------------------------------------------------------------

class IdxError(ValueError):
    pass


class IdxBadMagic(IdxError):
    pass


class IdxTruncated(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


@dataclass
class IdxDataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def _read_idx(path, magic: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise IdxTruncated(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise IdxBadMagic(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxTruncated(f"{path}: truncated dimension header")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims))
    payload = buf[header:]
    if len(payload) < count:
        raise IdxTruncated(f"{path}: payload has {len(payload)} bytes, header promises {count}")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims).copy()


def load_idx(images_path, labels_path) -> IdxDataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxCountMismatch(f"count mismatch: {len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise IdxError("labels must be digits 0-9")
    return IdxDataset(images, labels)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used for fixtures and round trips)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def idx_addition(N: int, data: IdxDataset, seed: int = 0) -> AdditionDataset:
    ds = make_dataset(N, labels=data.labels, seed=seed)
    ds.features = data.images.reshape(len(data.images), -1).astype(np.float64) / 255.0
    return ds


# -- boolean constraint tasks -------------------------------------------------

def boolean_constraint_task(num_vars: int, formula: str = "disjunction") -> SymbolicFn:
    """c(w) = 1 iff the formula over ``num_vars`` booleans holds."""
    if not 1 <= num_vars <= 20:
        raise ValueError("num_vars must be between 1 and 20")
    if formula == "disjunction":
        def fn(w):
            return (int(any(w)),)

        def batch(ws):
            return ws.any(axis=1, keepdims=True).astype(np.int64)
    elif formula == "conjunction":
        def fn(w):
            return (int(all(w)),)

        def batch(ws):
            return ws.all(axis=1, keepdims=True).astype(np.int64)
    else:
        raise ValueError(f"unknown formula {formula!r}")
    return SymbolicFn(Space((2,) * num_vars), Space((2,)), fn, batch=batch, name=formula)
