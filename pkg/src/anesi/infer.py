"""Factorised autoregressive inference models.

The prediction model is a product of one MLP per output variable,
``q(y|P) = prod_i q(y_i | y_<i, P)``; the explanation model does the same
over world variables conditioned on the full output. Every factor sees the
flattened belief followed by one-hot codes of what has been generated so far,
zero padded to a fixed width. Factors share no parameters.

Most functions work on batches: beliefs are flattened to (B, width) arrays,
sequences are (B, length) int arrays.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import ndauto as nd
from .ndauto import ParamStore, Tensor
from .problem import Belief, Space
from .pruners import Pruner

NEG_INF = float("-inf")
LOG_FEATURE_EPS = 1e-6


class DeadBranchError(RuntimeError):
    """Every option of a factor was pruned; a sound pruner never produces this."""

    def __init__(self, prefix):
        super().__init__(f"pruner removed every option after prefix {prefix}")
        self.prefix = prefix


class _FactorModel:
    kind = ""

    def __init__(self, w_space: Space, y_space: Space, hidden: Sequence[int],
                 rng: np.random.Generator | None = None, store: ParamStore | None = None,
                 log_features: bool = False, scale_beliefs: bool = False):
        self.w_space = w_space
        self.y_space = y_space
        self.hidden = tuple(hidden)
        self.log_features = bool(log_features)
        self.scale_beliefs = bool(scale_beliefs)
        self._belief_scale = np.repeat(np.asarray(w_space.cards, dtype=float), w_space.cards)
        if store is None:
            store = ParamStore()
            rng = rng if rng is not None else np.random.default_rng(0)
            for i, d in enumerate(self.cards):
                nd.init_mlp(store, self.prefix(i), self.layer_spec(i), rng)
        self.store = store

    @property
    def cards(self) -> tuple[int, ...]:
        raise NotImplementedError

    def prefix(self, i: int) -> str:
        """Parameter name prefix of factor ``i``, unique across both models."""
        return f"{self.kind}{i}"

    def input_width(self) -> int:
        raise NotImplementedError

    def belief_width(self) -> int:
        return self.w_space.width * (2 if self.log_features else 1)

    def layer_spec(self, i: int) -> list[int]:
        return [self.input_width(), *self.hidden, self.cards[i]]

    def _inputs(self, beliefs, context: list[np.ndarray]):
        """Belief, optionally followed by ``log(P + eps)``, then the context codes.

        The log features make products of belief entries linear in the input,
        which helps where an output probability must approach zero. With
        ``scale_beliefs`` each entry is multiplied by its variable's
        cardinality, so a uniform row enters the network as ones.
        """
        if isinstance(beliefs, Tensor):
            parts = [nd.mul(beliefs, self._belief_scale) if self.scale_beliefs else beliefs]
            if self.log_features:
                parts.append(nd.log(nd.add(beliefs, LOG_FEATURE_EPS)))
            return nd.concat(parts + context, axis=1)
        parts = [beliefs * self._belief_scale if self.scale_beliefs else beliefs]
        if self.log_features:
            parts.append(np.log(beliefs + LOG_FEATURE_EPS))
        return np.concatenate(parts + context, axis=1)

    def factor_log_probs(self, i: int, beliefs, context: list[np.ndarray],
                         mask: np.ndarray | None = None, trainable: bool = True) -> Tensor:
        """Log-probabilities (B, d_i) of factor ``i``; masked options are ``-inf``."""
        x = self._inputs(beliefs, context)
        logits = nd.mlp_logits(self.store, x, self.layer_spec(i), prefix=self.prefix(i), trainable=trainable)
        return nd.log_softmax(logits, mask)

    def decode_log_probs(self, i: int, beliefs: np.ndarray, owners: np.ndarray, active: np.ndarray,
                         mask: np.ndarray | None = None) -> np.ndarray:
        """Tape-free factor log-probabilities for many rows sharing few beliefs.

        ``beliefs`` holds one row per distinct input and ``owners`` maps every
        evaluated row onto one of them. ``active`` (rows, k) lists the context
        columns whose one-hot entry is 1. Agrees with :meth:`factor_log_probs`
        up to rounding, but the belief half of the first layer is computed once
        per input and the one-hot half becomes a row gather, so decoding cost
        no longer scales with beam width times input width.
        """
        params, p = self.store.params, self.prefix(i)
        W0 = params[f"{p}.W0"]
        bw = self.belief_width()
        h = (self._inputs(beliefs, []) @ W0[:bw])[owners] + W0[bw + active].sum(axis=1) + params[f"{p}.b0"]
        for j in range(1, len(self.hidden) + 1):
            h = np.maximum(h, 0.0) @ params[f"{p}.W{j}"] + params[f"{p}.b{j}"]
        return nd.log_softmax(h, mask).data


class PredictionModel(_FactorModel):
    """q(y|P), one factor per output variable."""

    kind = "pred"

    @property
    def cards(self):
        return self.y_space.cards

    def input_width(self):
        return self.belief_width() + self.y_space.width

    def context(self, prefix: np.ndarray) -> list[np.ndarray]:
        return [self.y_space.one_hot(prefix)]

    def masks(self, pruner: Pruner | None, i: int, prefix: np.ndarray, fixed=None):
        return None if pruner is None else pruner.output_masks(prefix)


class ExplanationModel(_FactorModel):
    """q(w|y,P), one factor per world variable."""

    kind = "expl"

    @property
    def cards(self):
        return self.w_space.cards

    def input_width(self):
        return self.belief_width() + self.y_space.width + self.w_space.width

    def context_for(self, ys: np.ndarray, prefix: np.ndarray) -> list[np.ndarray]:
        return [self.y_space.one_hot(ys), self.w_space.one_hot(prefix)]


# -- pruned factor distributions ----------------------------------------------

def factor_distribution(model: _FactorModel, belief: Belief, prefix: Sequence[int],
                        pruner_mask: np.ndarray | None = None, y: Sequence[int] | None = None) -> np.ndarray:
    """Distribution of the next variable after ``prefix`` for a single belief.

    With a mask ``s`` the result is ``q * s / (q . s)``.
    """
    prefix = np.asarray(prefix, dtype=np.int64)[None, :]
    i = prefix.shape[1]
    beliefs = belief.flat()[None, :]
    if isinstance(model, ExplanationModel):
        context = model.context_for(np.asarray(y, dtype=np.int64)[None, :], prefix)
    else:
        context = model.context(prefix)
    mask = None if pruner_mask is None else np.asarray(pruner_mask, dtype=np.float64)[None, :]
    if mask is not None and not np.any(mask > 0):
        raise DeadBranchError(tuple(prefix[0]))
    with nd.no_tape():
        logp = model.factor_log_probs(i, beliefs, context, mask).data[0]
    return np.exp(logp)


# -- teacher-forced log-probabilities -----------------------------------------

def output_log_prob(pred: PredictionModel, beliefs, ys: np.ndarray, pruner: Pruner | None = None,
                    trainable: bool = True) -> Tensor:
    """log q(y|P) per row, shape (B,). Rows crossing a pruned option are ``-inf``."""
    ys = np.asarray(ys, dtype=np.int64)
    total = None
    for i in range(len(pred.cards)):
        prefix = ys[:, :i]
        mask = pred.masks(pruner, i, prefix)
        lp = nd.pick(pred.factor_log_probs(i, beliefs, pred.context(prefix), mask, trainable), ys[:, i])
        total = lp if total is None else total + lp
    return total


def world_log_prob_given_output(expl: ExplanationModel, beliefs, ys: np.ndarray, ws: np.ndarray,
                                pruner: Pruner | None = None, trainable: bool = True) -> Tensor:
    """log q(w|y,P) per row, shape (B,)."""
    ys = np.asarray(ys, dtype=np.int64)
    ws = np.asarray(ws, dtype=np.int64)
    total = None
    for i in range(len(expl.cards)):
        prefix = ws[:, :i]
        mask = None if pruner is None else pruner.world_masks(ys, prefix)
        lp = nd.pick(expl.factor_log_probs(i, beliefs, expl.context_for(ys, prefix), mask, trainable),
                     ws[:, i])
        total = lp if total is None else total + lp
    return total


def joint_log_prob(pred, expl, beliefs, ys, ws, pruner=None, trainable=True) -> Tensor:
    """log q(w, y|P) = log q(y|P) + log q(w|y,P)."""
    return (output_log_prob(pred, beliefs, ys, pruner, trainable)
            + world_log_prob_given_output(expl, beliefs, ys, ws, pruner, trainable))


def log_prob(pred: PredictionModel, expl: ExplanationModel | None, belief: Belief, y: Sequence[int],
             w: Sequence[int] | None = None, pruner: Pruner | None = None) -> float:
    """log q(w, y|P), or log q(y|P) when ``w`` is None. Returns ``NEG_INF`` on pruned paths."""
    ys = np.asarray(pred.y_space.validate(y), dtype=np.int64)[None, :]
    beliefs = belief.flat()[None, :]
    with nd.no_tape(), np.errstate(invalid="ignore"):
        value = output_log_prob(pred, beliefs, ys, pruner).data[0]
        if w is not None:
            ws = np.asarray(pred.w_space.validate(w), dtype=np.int64)[None, :]
            value += world_log_prob_given_output(expl, beliefs, ys, ws, pruner).data[0]
    return NEG_INF if not np.isfinite(value) else float(value)


# -- sampling -----------------------------------------------------------------

def _categorical(logp: np.ndarray, rng: np.random.Generator, prefixes: np.ndarray) -> np.ndarray:
    probs = np.exp(logp)
    cum = np.cumsum(probs, axis=1)
    total = cum[:, -1]
    dead = ~(total > 0)
    if np.any(dead):
        raise DeadBranchError(tuple(prefixes[int(np.flatnonzero(dead)[0])]))
    u = rng.random(len(probs)) * total
    return np.argmax(cum > u[:, None], axis=1)


def sample_outputs(pred: PredictionModel, beliefs: np.ndarray, rng: np.random.Generator,
                   pruner: Pruner | None = None):
    """Ancestral sampling of y; returns (ys, log q(y|P))."""
    B = len(beliefs)
    ys = np.zeros((B, 0), dtype=np.int64)
    total = np.zeros(B)
    with nd.no_tape():
        for i in range(len(pred.cards)):
            lp = pred.factor_log_probs(i, beliefs, pred.context(ys), pred.masks(pruner, i, ys)).data
            choice = _categorical(lp, rng, ys)
            total += lp[np.arange(B), choice]
            ys = np.hstack([ys, choice[:, None]])
    return ys, total


def sample_worlds(expl: ExplanationModel, beliefs: np.ndarray, ys: np.ndarray, rng: np.random.Generator,
                  pruner: Pruner | None = None):
    """Ancestral sampling of w given y; returns (ws, log q(w|y,P))."""
    B = len(beliefs)
    ws = np.zeros((B, 0), dtype=np.int64)
    total = np.zeros(B)
    with nd.no_tape():
        for i in range(len(expl.cards)):
            mask = None if pruner is None else pruner.world_masks(ys, ws)
            lp = expl.factor_log_probs(i, beliefs, expl.context_for(ys, ws), mask).data
            choice = _categorical(lp, rng, ws)
            total += lp[np.arange(B), choice]
            ws = np.hstack([ws, choice[:, None]])
    return ws, total


def sample_joint_batch(pred, expl, beliefs: np.ndarray, rng: np.random.Generator, pruner=None):
    ys, lq_y = sample_outputs(pred, beliefs, rng, pruner)
    ws, lq_w = sample_worlds(expl, beliefs, ys, rng, pruner)
    return ys, ws, lq_y + lq_w


def sample_joint(pred: PredictionModel, expl: ExplanationModel, belief: Belief, pruner: Pruner | None = None,
                 rng_seed=0):
    """Draw (y, w) from the inference model; returns (y, w, log q(w, y|P))."""
    rng = np.random.default_rng(rng_seed)
    ys, ws, lq = sample_joint_batch(pred, expl, belief.flat()[None, :], rng, pruner)
    return tuple(int(v) for v in ys[0]), tuple(int(v) for v in ws[0]), float(lq[0])


# -- decoding -----------------------------------------------------------------

def _beam(step, cards: Sequence[int], B: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched beam search. ``step(owners, prefixes)`` returns log-probs (rows, d_i).

    Candidates are ranked by score, then by the sequence itself, so equal
    scores resolve to the lexicographically smallest sequence.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    seqs = np.zeros((B, 1, 0), dtype=np.int64)
    codes = np.zeros((B, 1), dtype=np.int64)
    scores = np.zeros((B, 1))
    for i, d in enumerate(cards):
        k = seqs.shape[1]
        owners = np.repeat(np.arange(B), k)
        logp = step(owners, seqs.reshape(B * k, i)).reshape(B, k, d)
        with np.errstate(invalid="ignore"):
            cand = (scores[:, :, None] + logp).reshape(B, k * d)
        cand_codes = (codes[:, :, None] * d + np.arange(d)[None, None, :]).reshape(B, k * d)
        rows = np.repeat(np.arange(B), k * d)
        order = np.lexsort((cand_codes.ravel(), -cand.ravel(), rows)).reshape(B, k * d)
        keep = order[:, :min(width, k * d)] - (np.arange(B) * k * d)[:, None]
        parent, digit = np.divmod(keep, d)
        seqs = np.concatenate([np.take_along_axis(seqs, parent[:, :, None], axis=1), digit[:, :, None]], axis=2)
        codes = np.take_along_axis(cand_codes, keep, axis=1)
        scores = np.take_along_axis(cand, keep, axis=1)
    return seqs[:, 0, :], scores[:, 0]


def beam_search_outputs(pred: PredictionModel, beliefs: np.ndarray, beam_width: int,
                        pruner: Pruner | None = None) -> tuple[np.ndarray, np.ndarray]:
    beliefs = np.atleast_2d(beliefs)

    offsets = pred.y_space.offsets

    def step(owners, prefixes):
        i = prefixes.shape[1]
        return pred.decode_log_probs(i, beliefs, owners, offsets[:i] + prefixes, pred.masks(pruner, i, prefixes))

    with nd.no_tape():
        return _beam(step, pred.cards, len(beliefs), beam_width)


def beam_search_worlds(expl: ExplanationModel, beliefs: np.ndarray, ys: np.ndarray, beam_width: int,
                       pruner: Pruner | None = None) -> tuple[np.ndarray, np.ndarray]:
    beliefs = np.atleast_2d(beliefs)
    ys = np.atleast_2d(np.asarray(ys, dtype=np.int64))

    y_codes = expl.y_space.offsets + ys
    w_offsets = expl.y_space.width + expl.w_space.offsets

    def step(owners, prefixes):
        i = prefixes.shape[1]
        mask = None if pruner is None else pruner.world_masks(ys[owners], prefixes)
        active = np.concatenate([y_codes[owners], w_offsets[:i] + prefixes], axis=1)
        return expl.decode_log_probs(i, beliefs, owners, active, mask)

    with nd.no_tape():
        return _beam(step, expl.cards, len(beliefs), beam_width)


def beam_search_output(pred: PredictionModel, belief: Belief, beam_width: int,
                       pruner: Pruner | None = None) -> tuple[int, ...]:
    seqs, _ = beam_search_outputs(pred, belief.flat()[None, :], beam_width, pruner)
    return tuple(int(v) for v in seqs[0])


def beam_search_world(expl: ExplanationModel, belief: Belief, y: Sequence[int], beam_width: int,
                      pruner: Pruner | None = None) -> tuple[int, ...]:
    seqs, _ = beam_search_worlds(expl, belief.flat()[None, :], np.asarray(y)[None, :], beam_width, pruner)
    return tuple(int(v) for v in seqs[0])


def greedy_outputs(pred: PredictionModel, beliefs: np.ndarray, pruner: Pruner | None = None) -> np.ndarray:
    """Pick the most likely option factor by factor (smallest index on ties)."""
    beliefs = np.atleast_2d(beliefs)
    ys = np.zeros((len(beliefs), 0), dtype=np.int64)
    with nd.no_tape():
        for i in range(len(pred.cards)):
            lp = pred.factor_log_probs(i, beliefs, pred.context(ys), pred.masks(pruner, i, ys)).data
            ys = np.hstack([ys, np.argmax(lp, axis=1)[:, None]])
    return ys


def output_table(pred: PredictionModel, belief: Belief, pruner: Pruner | None = None) -> dict:
    """q(y|P) for every y in the output space (enumeration; small spaces only)."""
    ys = pred.y_space.enumerate()
    beliefs = np.repeat(belief.flat()[None, :], len(ys), axis=0)
    with nd.no_tape(), np.errstate(invalid="ignore"):
        lp = output_log_prob(pred, beliefs, ys, pruner).data
    return {tuple(int(v) for v in y): float(np.exp(l)) for y, l in zip(ys, lp)}
