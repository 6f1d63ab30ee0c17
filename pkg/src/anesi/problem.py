"""Structured spaces, beliefs, symbolic functions and brute-force oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .ndauto import LOG_FLOOR

ENUMERATION_LIMIT = 10**7


class EnumerationTooLarge(ValueError):
    pass


class NoPossibleWorlds(ValueError):
    pass


@dataclass(frozen=True)
class Space:
    """A product of finite choices ``{0..d_1-1} x ... x {0..d_n-1}``."""

    cards: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "cards", tuple(int(d) for d in self.cards))
        if not self.cards or any(d < 1 for d in self.cards):
            raise ValueError(f"invalid cardinalities {self.cards}")

    def __len__(self):
        return len(self.cards)

    @cached_property
    def offsets(self) -> np.ndarray:
        out = np.concatenate([[0], np.cumsum(self.cards)[:-1]]).astype(np.int64)
        out.flags.writeable = False
        return out

    @cached_property
    def width(self) -> int:
        """Length of the concatenated one-hot encoding."""
        return int(np.sum(self.cards))

    @property
    def size(self) -> int:
        return math.prod(self.cards)

    def validate(self, values: Sequence[int]) -> tuple[int, ...]:
        values = tuple(int(v) for v in values)
        if len(values) != len(self.cards):
            raise ValueError(f"expected {len(self.cards)} values, got {len(values)}")
        for i, (v, d) in enumerate(zip(values, self.cards)):
            if not 0 <= v < d:
                raise IndexError(f"value {v} out of range for variable {i} with {d} options")
        return values

    def one_hot(self, values: np.ndarray, width: int | None = None) -> np.ndarray:
        """Concatenated one-hot codes for a batch of (possibly partial) sequences.

        ``values`` has shape (B, k) with k <= len(self); the encoding is zero
        padded to ``width`` (default: the full width of the space).
        """
        values = np.asarray(values, dtype=np.int64)
        if values.ndim == 1:
            values = values[None, :]
        width = self.width if width is None else width
        out = np.zeros((values.shape[0], width))
        k = values.shape[1]
        out[np.arange(values.shape[0])[:, None], self.offsets[:k] + values] = 1.0
        return out

    def enumerate(self) -> np.ndarray:
        """All elements in lexicographic order, shape (size, len)."""
        if self.size > ENUMERATION_LIMIT:
            raise EnumerationTooLarge(
                f"space has {self.size} elements, enumeration limit is {ENUMERATION_LIMIT}")
        grids = np.indices(self.cards).reshape(len(self.cards), -1)
        return grids.T.copy()


@dataclass
class Belief:
    """One categorical distribution per world variable."""

    rows: list[np.ndarray]

    def __post_init__(self):
        self.rows = [np.asarray(r, dtype=np.float64) for r in self.rows]
        for i, r in enumerate(self.rows):
            if r.ndim != 1 or np.any(r < 0) or abs(r.sum() - 1.0) > 1e-6:
                raise ValueError(f"belief row {i} is not a probability vector")

    @classmethod
    def uniform(cls, space: Space) -> "Belief":
        return cls([np.full(d, 1.0 / d) for d in space.cards])

    @classmethod
    def from_flat(cls, flat: np.ndarray, space: Space) -> "Belief":
        flat = np.asarray(flat, dtype=np.float64)
        return cls([flat[o:o + d] for o, d in zip(space.offsets, space.cards)])

    @property
    def space(self) -> Space:
        return Space(tuple(len(r) for r in self.rows))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.rows)


@dataclass
class SymbolicFn:
    """Deterministic map ``c: W -> Y`` with declared spaces.

    ``batch`` optionally maps an int array (B, |W|) to (B, |Y|); when absent it
    is derived by looping over ``fn``.
    """

    w_space: Space
    y_space: Space
    fn: Callable[[tuple[int, ...]], Sequence[int]]
    batch: Callable[[np.ndarray], np.ndarray] | None = field(default=None)
    name: str = "c"

    def __call__(self, w: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(v) for v in self.fn(tuple(int(x) for x in w)))

    def apply(self, ws: np.ndarray) -> np.ndarray:
        ws = np.asarray(ws, dtype=np.int64)
        if self.batch is not None:
            return np.asarray(self.batch(ws), dtype=np.int64)
        return np.array([self(w) for w in ws], dtype=np.int64).reshape(len(ws), len(self.y_space))


def batch_world_log_prob(beliefs: np.ndarray, ws: np.ndarray, space: Space) -> np.ndarray:
    """log p(w|P) for flattened beliefs (B, width) and worlds (B, |W|)."""
    beliefs = np.atleast_2d(beliefs)
    ws = np.atleast_2d(np.asarray(ws, dtype=np.int64))
    idx = space.offsets[None, :] + ws
    picked = np.take_along_axis(beliefs, idx, axis=1)
    return np.log(np.maximum(picked, LOG_FLOOR)).sum(axis=1)


def world_log_prob(belief: Belief, w: Sequence[int]) -> float:
    w = belief.space.validate(w)
    return float(sum(np.log(max(r[v], LOG_FLOOR)) for r, v in zip(belief.rows, w)))


def _enumerated_joint(belief: Belief, c: SymbolicFn):
    worlds = c.w_space.enumerate()
    flat = belief.flat()
    probs = np.ones(len(worlds))
    for j, o in enumerate(c.w_space.offsets):
        probs *= flat[o + worlds[:, j]]
    outputs = c.apply(worlds)
    return worlds, probs, outputs


def exact_output_distribution(belief: Belief, c: SymbolicFn) -> dict[tuple[int, ...], float]:
    """p(y|P) for every reachable y, by enumerating all worlds."""
    _, probs, outputs = _enumerated_joint(belief, c)
    keys, inverse = np.unique(outputs, axis=0, return_inverse=True)
    totals = np.bincount(inverse.ravel(), weights=probs, minlength=len(keys))
    return {tuple(int(v) for v in k): float(t) for k, t in zip(keys, totals)}


def exact_wmc(belief: Belief, c: SymbolicFn, y: Sequence[int]) -> float:
    """Sum of p(w|P) over the possible worlds of ``y``."""
    y = c.y_space.validate(y)
    _, probs, outputs = _enumerated_joint(belief, c)
    hit = np.all(outputs == np.asarray(y)[None, :], axis=1)
    return float(probs[hit].sum())


def exact_posterior(belief: Belief, c: SymbolicFn, y: Sequence[int]) -> dict[tuple[int, ...], float]:
    """p(w|y,P) over the possible worlds of ``y`` that have nonzero probability."""
    y = c.y_space.validate(y)
    worlds, probs, outputs = _enumerated_joint(belief, c)
    hit = np.all(outputs == np.asarray(y)[None, :], axis=1)
    total = probs[hit].sum()
    if not total > 0.0:
        raise NoPossibleWorlds(f"output {y} has no possible worlds under this belief")
    keep = hit & (probs > 0.0)
    return {tuple(int(v) for v in w): float(p / total) for w, p in zip(worlds[keep], probs[keep])}


def exact_mpe(belief: Belief, c: SymbolicFn, y: Sequence[int]) -> tuple[int, ...]:
    """argmax_w p(w|y,P); the lexicographically smallest maximiser wins ties."""
    y = c.y_space.validate(y)
    worlds, probs, outputs = _enumerated_joint(belief, c)
    hit = np.all(outputs == np.asarray(y)[None, :], axis=1)
    if not probs[hit].sum() > 0.0:
        raise NoPossibleWorlds(f"output {y} has no possible worlds under this belief")
    masked = np.where(hit, probs, -1.0)
    # worlds are enumerated lexicographically, argmax returns the first maximiser
    return tuple(int(v) for v in worlds[int(np.argmax(masked))])
