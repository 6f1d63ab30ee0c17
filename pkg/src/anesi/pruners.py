"""Symbolic pruners for autoregressive generation.

A pruner returns a 0/1 mask over the options of the next variable. Options
with mask 0 cannot be extended into a possible world and get probability zero
after renormalisation. Outputs are generated before worlds, so world masks
always see the complete output.

:class:`MNISTAddPruner` decides each digit of multi-digit addition with O(N)
integer arithmetic. :class:`BruteForcePruner` answers the same questions by
enumerating every world and is only meant as a reference for N <= 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tasks import MAX_INT64_DIGITS, c_sum_batch, digits_to_int, int_to_digits

BRUTE_FORCE_MAX_N = 3


class GuardExceeded(ValueError):
    pass


class Pruner:
    """Interface: masks for the next output / world variable.

    The batched methods take equal-length prefixes stacked as (B, k) arrays.
    The defaults loop over the scalar methods; subclasses may vectorise.
    """

    def output_mask(self, y_prefix: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def world_mask(self, y: Sequence[int], w_prefix: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def output_masks(self, y_prefixes: np.ndarray) -> np.ndarray:
        return np.stack([self.output_mask(p) for p in np.asarray(y_prefixes)])

    def world_masks(self, ys: np.ndarray, w_prefixes: np.ndarray) -> np.ndarray:
        return np.stack([self.world_mask(y, p) for y, p in zip(np.asarray(ys), np.asarray(w_prefixes))])


class SatPruner(Pruner):
    """Placeholder for solver-backed pruning of arbitrary symbolic functions.

    Subclass and implement ``satisfiable(y, w_prefix)`` to plug in a solver;
    no solver ships with this package.
    """

    def __init__(self, w_cards: Sequence[int], y_cards: Sequence[int]):
        self.w_cards = tuple(w_cards)
        self.y_cards = tuple(y_cards)

    def satisfiable(self, y, w_prefix) -> bool:
        raise NotImplementedError("no SAT backend configured")

    def output_mask(self, y_prefix):
        return np.ones(self.y_cards[len(y_prefix)])

    def world_mask(self, y, w_prefix):
        d = self.w_cards[len(w_prefix)]
        return np.array([float(self.satisfiable(y, tuple(w_prefix) + (v,))) for v in range(d)])


@dataclass
class PrunerContext:
    N: int
    y: tuple[int, ...]
    w_prefix: tuple[int, ...] = field(default_factory=tuple)
    kind: str = "world"

    @property
    def k(self) -> int:
        """1-based index of the variable being decided."""
        return (len(self.w_prefix) if self.kind == "world" else len(self.y)) + 1


# -- exact linear-time pruner for addition ------------------------------------

def _trailing_nines(y: Sequence[int]) -> list[bool]:
    """flags[j] is True iff every digit of y from position j on is a 9."""
    flags = [True] * (len(y) + 1)
    for j in range(len(y) - 1, -1, -1):
        flags[j] = flags[j + 1] and y[j] == 9
    return flags


def mnistadd_prune_world(ctx: PrunerContext, nines: list[bool] | None = None, slack: int = 0) -> np.ndarray:
    """Mask for world digit k given the full sum and the first k-1 world digits.

    For a digit of the first number (k <= N), with l the integer formed by the
    first k+1 sum digits and p the first k digits of the first number, the
    digit is kept iff ``0 <= l - p <= 10**k - S``, where S = 1 when k = N or
    the remaining sum digits are all nines. For the second number the digit is
    forced by ``n2 = y - n1``.
    """
    N, y, w = ctx.N, tuple(ctx.y), tuple(ctx.w_prefix)
    k = len(w) + 1
    if len(y) != N + 1 or not 1 <= k <= 2 * N:
        raise ValueError("context does not describe a world decision")
    mask = np.zeros(10)
    if k <= N:
        if nines is None:
            nines = _trailing_nines(y)
        l_k = digits_to_int(y[:k + 1])
        S = 1 if (k == N or nines[k + 1]) else 0
        base = digits_to_int(w) * 10
        upper = 10**k - S + slack
        for d in range(10):
            gap = l_k - (base + d)
            mask[d] = 0 <= gap <= upper
        return mask
    n2 = digits_to_int(y) - digits_to_int(w[:N])
    if n2 < 0 or n2 >= 10**N:
        return mask
    second = int_to_digits(n2, N)
    j = k - N
    if w[N:] != second[:j - 1]:
        return mask
    mask[second[j - 1]] = 1.0
    return mask


def mnistadd_prune_output(ctx: PrunerContext) -> np.ndarray:
    """Mask for the next sum digit: keep d iff some sum of two N-digit numbers starts with prefix+d."""
    N, prefix = ctx.N, tuple(ctx.y)
    j = len(prefix)
    if j > N:
        raise ValueError("output already complete")
    card = 2 if j == 0 else 10
    limit = 2 * (10**N - 1)
    scale = 10 ** (N - j)
    base = digits_to_int(prefix) * 10
    return np.array([float((base + d) * scale <= limit) for d in range(card)])


class MNISTAddPruner(Pruner):
    slack = 0

    def __init__(self, N: int):
        self.N = N

    def output_mask(self, y_prefix):
        return mnistadd_prune_output(PrunerContext(self.N, tuple(int(v) for v in y_prefix), kind="output"))

    def world_mask(self, y, w_prefix):
        return mnistadd_prune_world(PrunerContext(self.N, tuple(int(v) for v in y),
                                                  tuple(int(v) for v in w_prefix)), slack=self.slack)

    def output_masks(self, y_prefixes):
        y_prefixes = np.asarray(y_prefixes, dtype=np.int64)
        if self.N > MAX_INT64_DIGITS:
            return super().output_masks(y_prefixes)
        N, j = self.N, y_prefixes.shape[1]
        card = 2 if j == 0 else 10
        powers = 10 ** np.arange(j - 1, -1, -1, dtype=np.int64)
        base = (y_prefixes @ powers if j else np.zeros(len(y_prefixes), dtype=np.int64)) * 10
        cand = (base[:, None] + np.arange(card)[None, :]) * 10 ** (N - j)
        return (cand <= 2 * (10**N - 1)).astype(np.float64)

    def world_masks(self, ys, w_prefixes):
        ys = np.asarray(ys, dtype=np.int64)
        w = np.asarray(w_prefixes, dtype=np.int64)
        if self.N > MAX_INT64_DIGITS:
            return super().world_masks(ys, w)
        N = self.N
        B, k = len(ys), w.shape[1] + 1
        if k <= N:
            head = ys[:, :k + 1]
            l_k = head @ (10 ** np.arange(k, -1, -1, dtype=np.int64))
            S = np.ones(B, dtype=np.int64) if k == N else np.all(ys[:, k + 1:] == 9, axis=1).astype(np.int64)
            base = (w @ (10 ** np.arange(k - 2, -1, -1, dtype=np.int64)) if k > 1
                    else np.zeros(B, dtype=np.int64)) * 10
            gap = l_k[:, None] - (base[:, None] + np.arange(10)[None, :])
            return ((gap >= 0) & (gap <= (10**k - S + self.slack)[:, None])).astype(np.float64)
        total = ys @ (10 ** np.arange(N, -1, -1, dtype=np.int64))
        n1 = w[:, :N] @ (10 ** np.arange(N - 1, -1, -1, dtype=np.int64))
        n2 = total - n1
        ok = (n2 >= 0) & (n2 < 10**N)
        second = (np.where(ok, n2, 0)[:, None] // (10 ** np.arange(N - 1, -1, -1, dtype=np.int64))[None, :]) % 10
        j = k - N
        ok &= np.all(w[:, N:] == second[:, :j - 1], axis=1)
        mask = np.zeros((B, 10))
        mask[np.arange(B), second[:, j - 1]] = ok
        return mask


class OffByOnePruner(MNISTAddPruner):
    """Deliberately wrong: the first-number bound is loosened by one.

    Exists so the verification harness can show it catches a subtle bug.
    """

    slack = 1


# -- brute-force reference ----------------------------------------------------

def completion_exists(N: int, y: Sequence[int], w_prefix: Sequence[int]) -> bool:
    """True iff some digits appended to ``w_prefix`` make the two numbers sum to ``y``."""
    if N > BRUTE_FORCE_MAX_N:
        raise GuardExceeded(f"exhaustive completion check limited to N <= {BRUTE_FORCE_MAX_N}")
    w_prefix = tuple(int(v) for v in w_prefix)
    rest = 2 * N - len(w_prefix)
    if rest < 0:
        raise ValueError("prefix longer than a world")
    suffixes = np.indices((10,) * rest).reshape(rest, -1).T if rest else np.zeros((1, 0), dtype=np.int64)
    worlds = np.hstack([np.tile(np.asarray(w_prefix, dtype=np.int64), (len(suffixes), 1)), suffixes])
    return bool(np.any(np.all(c_sum_batch(worlds, N) == np.asarray(y)[None, :], axis=1)))


class BruteForcePruner(Pruner):
    """Pruner that looks up the possible worlds of y among all 10^(2N) worlds."""

    def __init__(self, N: int):
        if N > BRUTE_FORCE_MAX_N:
            raise GuardExceeded(f"brute-force pruner limited to N <= {BRUTE_FORCE_MAX_N}")
        self.N = N
        worlds = np.indices((10,) * (2 * N)).reshape(2 * N, -1).T
        codes = digits_to_code(c_sum_batch(worlds, N))
        order = np.argsort(codes, kind="stable")
        self._worlds = worlds[order]
        self._codes = codes[order]
        reachable = np.unique(self._codes)
        self._reachable = set(int(c) for c in reachable)

    def possible_worlds(self, y) -> np.ndarray:
        code = digits_to_int(y)
        lo, hi = np.searchsorted(self._codes, [code, code + 1])
        return self._worlds[lo:hi]

    def world_mask(self, y, w_prefix):
        w_prefix = np.asarray(w_prefix, dtype=np.int64)
        worlds = self.possible_worlds(y)
        k = len(w_prefix)
        hit = worlds[np.all(worlds[:, :k] == w_prefix[None, :], axis=1)]
        mask = np.zeros(10)
        mask[np.unique(hit[:, k])] = 1.0
        return mask

    def output_mask(self, y_prefix):
        j = len(y_prefix)
        card = 2 if j == 0 else 10
        mask = np.zeros(card)
        for d in range(card):
            lo = digits_to_int(tuple(y_prefix) + (d,)) * 10 ** (self.N - j)
            hi = lo + 10 ** (self.N - j)
            mask[d] = any(lo <= c < hi for c in self._reachable)
        return mask


class EnumerationPruner(Pruner):
    """Exact pruner for any symbolic function whose world space can be enumerated."""

    def __init__(self, c):
        self.c = c
        self._worlds = c.w_space.enumerate()
        self._outputs = c.apply(self._worlds)

    def world_mask(self, y, w_prefix):
        k = len(w_prefix)
        hit = np.all(self._outputs == np.asarray(y)[None, :], axis=1)
        hit &= np.all(self._worlds[:, :k] == np.asarray(w_prefix, dtype=np.int64)[None, :], axis=1)
        mask = np.zeros(self.c.w_space.cards[k])
        mask[np.unique(self._worlds[hit, k])] = 1.0
        return mask

    def output_mask(self, y_prefix):
        j = len(y_prefix)
        hit = np.all(self._outputs[:, :j] == np.asarray(y_prefix, dtype=np.int64)[None, :], axis=1)
        mask = np.zeros(self.c.y_space.cards[j])
        mask[np.unique(self._outputs[hit, j])] = 1.0
        return mask


def digits_to_code(ys: np.ndarray) -> np.ndarray:
    ys = np.asarray(ys, dtype=np.int64)
    return ys @ (10 ** np.arange(ys.shape[1] - 1, -1, -1, dtype=np.int64))


# -- verification -------------------------------------------------------------

@dataclass
class PrunerReport:
    N: int
    mode: str
    cases: int
    disagreements: int
    counterexamples: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.disagreements == 0


def _all_outputs(N: int) -> np.ndarray:
    return np.indices((2,) + (10,) * N).reshape(N + 1, -1).T


def verify_exhaustive(N: int, make_pruner: Callable[[int], Pruner] = MNISTAddPruner,
                      max_examples: int = 5) -> PrunerReport:
    """Compare every (y, prefix, digit) world decision and every output decision with enumeration."""
    pruner = make_pruner(N)
    oracle = BruteForcePruner(N)
    report = PrunerReport(N, "exhaustive", 0, 0)
    for y in _all_outputs(N):
        worlds = oracle.possible_worlds(y)
        for k in range(1, 2 * N + 1):
            prefixes = np.indices((10,) * (k - 1)).reshape(k - 1, -1).T if k > 1 else np.zeros((1, 0), np.int64)
            got = pruner.world_masks(np.tile(y, (len(prefixes), 1)), prefixes)
            table = np.zeros(10**k, dtype=bool)
            if len(worlds):
                table[digits_to_code(worlds[:, :k])] = True
            codes = digits_to_code(prefixes) if k > 1 else np.zeros(1, np.int64)
            want = table[codes[:, None] * 10 + np.arange(10)[None, :]]
            _tally(report, got, want, [("world", _ints(y), _ints(p)) for p in prefixes], max_examples)
    for j in range(N + 1):
        prefixes = _all_outputs(N)[:, :j]
        prefixes = np.unique(prefixes, axis=0) if j else np.zeros((1, 0), np.int64)
        got = pruner.output_masks(prefixes)
        want = np.stack([oracle.output_mask(p) for p in prefixes]).astype(bool)
        _tally(report, got, want, [("output", _ints(p)) for p in prefixes], max_examples)
    return report


def verify_random(N: int, cases: int, seed: int, make_pruner: Callable[[int], Pruner] = MNISTAddPruner,
                  max_examples: int = 5) -> PrunerReport:
    """Random world decisions; half of the prefixes are taken from possible worlds."""
    rng = np.random.default_rng(seed)
    pruner = make_pruner(N)
    oracle = BruteForcePruner(N)
    report = PrunerReport(N, "random", 0, 0)
    ys = _all_outputs(N)
    for _ in range(cases):
        y = ys[rng.integers(len(ys))]
        k = int(rng.integers(1, 2 * N + 1))
        worlds = oracle.possible_worlds(y)
        if len(worlds) and rng.random() < 0.5:
            prefix = worlds[rng.integers(len(worlds)), :k - 1]
        else:
            prefix = rng.integers(0, 10, size=k - 1)
        got = pruner.world_mask(y, prefix)[None, :]
        want = oracle.world_mask(y, prefix)[None, :].astype(bool)
        _tally(report, got, want, [("world", _ints(y), _ints(prefix))], max_examples)
    return report


def _ints(values) -> tuple[int, ...]:
    return tuple(int(v) for v in values)


def _tally(report: PrunerReport, got, want, labels, max_examples):
    got = np.asarray(got) > 0
    bad = np.any(got != want, axis=1)
    report.cases += got.size
    report.disagreements += int(np.sum(got != want))
    for i in np.flatnonzero(bad)[:max(0, max_examples - len(report.counterexamples))]:
        report.counterexamples.append({"case": labels[i], "pruner": got[i].astype(int).tolist(),
                                       "oracle": want[i].astype(int).tolist()})
