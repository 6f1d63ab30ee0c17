"""Losses and training loops for the inference and perception models.

Training alternates two updates per batch. The inference model learns from
synthetic data: beliefs drawn from the fitted prior, worlds drawn from those
beliefs and outputs computed by the symbolic function. The perception
network then learns by backpropagating the observed outputs through the
frozen prediction model.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import ndauto as nd
from . import prior as prior_mod
from .infer import (ExplanationModel, PredictionModel, beam_search_outputs, output_log_prob,
                    sample_worlds, world_log_prob_given_output)
from .ndauto import ConfigError, ParamStore, Tape, Tensor, TrainingError
from .problem import Belief, Space, SymbolicFn, batch_world_log_prob
from .pruners import Pruner

VARIANTS = ("predict", "explain", "pruning", "no-prior")


@dataclass
class TrainConfig:
    """Hyperparameters. Defaults are the published full-scale values."""

    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 16
    samples: int = 600
    beam_width: int = 600
    hidden: tuple[int, ...] = (800, 800, 800)
    perception_hidden: tuple[int, ...] = ()
    perception_lr: float | None = None
    log_features: bool = False
    scale_beliefs: bool = False
    prior_lr: float = prior_mod.PRIOR_LR
    prior_iters: int = prior_mod.PRIOR_ITERS
    prior_init: float = prior_mod.PRIOR_INIT
    prior_l2: float = prior_mod.PRIOR_L2
    buffer_capacity: int = prior_mod.BUFFER_CAPACITY
    prior_fit_every: int = 1
    variant: str = "predict"
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.perception_hidden = tuple(int(h) for h in self.perception_hidden)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        for name in ("epochs", "batch_size", "samples", "beam_width", "buffer_capacity", "prior_fit_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.prior_iters < 0:
            raise ConfigError("prior_iters must be non-negative")
        if not self.lr > 0 or not self.prior_lr > 0 or not self.prior_init > 0:
            raise ConfigError("learning rates and prior init must be positive")
        if self.prior_l2 < 0:
            raise ConfigError("prior_l2 must be non-negative")
        if any(h < 1 for h in self.hidden + self.perception_hidden):
            raise ConfigError("hidden widths must be positive")

    @property
    def uses_explanation(self) -> bool:
        return self.variant in ("explain", "pruning")

    @property
    def uses_prior(self) -> bool:
        return self.variant != "no-prior"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["perception_hidden"] = list(self.perception_hidden)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)


@dataclass
class MetricsRecord:
    epoch: int
    acc_symbolic: float | None = None
    acc_neural: float | None = None
    acc_digit: float | None = None
    loss_pred: float | None = None
    loss_joint: float | None = None
    loss_perception: float | None = None
    seconds: float = 0.0

    def __post_init__(self):
        for name in ("acc_symbolic", "acc_neural", "acc_digit"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} = {value} is not an accuracy")


# -- perception ---------------------------------------------------------------

class Perception:
    """Maps per-variable feature vectors to a belief row; one network shared by all variables."""

    def __init__(self, feature_dim: int, card: int, hidden: Sequence[int] = (),
                 rng: np.random.Generator | None = None, store: ParamStore | None = None):
        self.feature_dim = feature_dim
        self.card = card
        self.layer_spec = [feature_dim, *hidden, card]
        if store is None:
            store = ParamStore()
            nd.init_mlp(store, "perc", self.layer_spec, rng if rng is not None else np.random.default_rng(0))
        self.store = store

    def beliefs(self, x, trainable: bool = True) -> Tensor:
        """Flattened beliefs (B, n*card) for inputs x of shape (B, n, F)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        B, n, F = x.shape
        logits = nd.mlp_logits(self.store, x.reshape(B * n, F), self.layer_spec, prefix="perc", trainable=trainable)
        return nd.reshape(nd.softmax(logits), (B, n * self.card))

    def predict(self, x) -> np.ndarray:
        with nd.no_tape():
            return self.beliefs(x, trainable=False).data


# -- losses -------------------------------------------------------------------

def _rows(belief) -> np.ndarray:
    if isinstance(belief, Belief):
        return belief.flat()[None, :]
    if isinstance(belief, Tensor):
        return belief
    return np.atleast_2d(np.asarray(belief, dtype=np.float64))


def _seqs(values) -> np.ndarray:
    return np.atleast_2d(np.asarray(values, dtype=np.int64))


def _batch_mean(per_row: Tensor) -> Tensor:
    return nd.mean(per_row)


def loss_pred(pred: PredictionModel, belief, w, c: SymbolicFn, pruner: Pruner | None = None) -> Tensor:
    """Cross entropy ``-log q(c(w)|P)``, averaged over rows when batched."""
    ws = _seqs(w)
    return nd.neg(_batch_mean(output_log_prob(pred, _rows(belief), c.apply(ws), pruner)))


def joint_match_terms(pred, expl, beliefs, ys, ws, pruner=None, trainable: bool = True):
    """(log q(y|P), log q(w|y,P)) per row; their sum is the joint log-probability."""
    lq_y = output_log_prob(pred, beliefs, ys, pruner, trainable)
    lq_w = world_log_prob_given_output(expl, beliefs, ys, ws, pruner, trainable)
    return lq_y, lq_w


def _log_p_world(beliefs, ws, w_space: Space) -> np.ndarray:
    data = beliefs.data if isinstance(beliefs, Tensor) else beliefs
    return batch_world_log_prob(data, ws, w_space)


def loss_joint_match(pred: PredictionModel, expl: ExplanationModel, belief, w, c: SymbolicFn,
                     pruner: Pruner | None = None) -> Tensor:
    """Squared log-ratio ``(log q(w, c(w)|P) - log p(w|P))**2``; the target is a constant."""
    beliefs = _rows(belief)
    ws = _seqs(w)
    lq_y, lq_w = joint_match_terms(pred, expl, beliefs, c.apply(ws), ws, pruner)
    target = _log_p_world(beliefs, ws, c.w_space)
    return _batch_mean(nd.square(lq_y + lq_w - target))


def loss_joint_match_onpolicy(pred: PredictionModel, expl: ExplanationModel, belief, pruner: Pruner | None,
                              rng_seed=0, y: Sequence[int] = (1,)) -> Tensor:
    """Joint matching on worlds drawn from the explanation model for a fixed target output.

    The worlds are sampled without recording; only the log-ratio is
    differentiated.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    beliefs = _rows(belief)
    data = beliefs.data if isinstance(beliefs, Tensor) else beliefs
    ys = np.tile(np.asarray(y, dtype=np.int64), (len(data), 1))
    ws, _ = sample_worlds(expl, data, ys, rng, pruner)
    lq_y, lq_w = joint_match_terms(pred, expl, beliefs, ys, ws, pruner)
    return _batch_mean(nd.square(lq_y + lq_w - _log_p_world(beliefs, ws, expl.w_space)))


def loss_perception(pred: PredictionModel, perception: Perception, x, y, pruner: Pruner | None = None) -> Tensor:
    """``-log q(y | P = f(x))`` with the prediction model frozen."""
    beliefs = perception.beliefs(x)
    return nd.neg(_batch_mean(output_log_prob(pred, beliefs, _seqs(y), pruner, trainable=False)))


def loss_perception_supervised(expl: ExplanationModel, perception: Perception, x, w,
                               pruner: Pruner | None = None) -> Tensor:
    """``-log q(w | y=1, P = f(x))`` for constraint tasks with observed worlds."""
    beliefs = perception.beliefs(x)
    ws = _seqs(w)
    ys = np.ones((len(ws), 1), dtype=np.int64)
    return nd.neg(_batch_mean(world_log_prob_given_output(expl, beliefs, ys, ws, pruner, trainable=False)))


def loss_semantic(pred: PredictionModel, perception: Perception, x, pruner: Pruner | None = None) -> Tensor:
    """``-log q(y=1 | P = f(x))``: push perception toward satisfying the constraint."""
    beliefs = perception.beliefs(x)
    ys = np.ones((beliefs.shape[0], 1), dtype=np.int64)
    return nd.neg(_batch_mean(output_log_prob(pred, beliefs, ys, pruner, trainable=False)))


def gradients(loss_fn: Callable[[], Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` on a fresh tape and return (value, gradients)."""
    with Tape() as tape:
        loss = loss_fn()
    return loss.item(), nd.backward(tape, loss)


# -- forward process ----------------------------------------------------------

def sample_worlds_from_beliefs(beliefs: np.ndarray, space: Space, rng: np.random.Generator) -> np.ndarray:
    """One world per belief row, w_i ~ P_i independently."""
    out = np.empty((len(beliefs), len(space)), dtype=np.int64)
    u = rng.random((len(beliefs), len(space)))
    for i, (o, d) in enumerate(zip(space.offsets, space.cards)):
        cum = np.cumsum(beliefs[:, o:o + d], axis=1)
        out[:, i] = np.minimum((cum < u[:, i:i + 1] * cum[:, -1:]).sum(axis=1), d - 1)
    return out


def forward_samples(prior: prior_mod.DirichletPrior, c: SymbolicFn, n: int, rng: np.random.Generator):
    """(beliefs, worlds, outputs) from the generative process P ~ p(P), w ~ p(w|P), y = c(w)."""
    beliefs = prior_mod.sample_beliefs(prior, n, rng)
    ws = sample_worlds_from_beliefs(beliefs, c.w_space, rng)
    return beliefs, ws, c.apply(ws)


def inference_loss(variant: str, pred, expl, beliefs, ws, ys, c: SymbolicFn, pruner=None):
    """Tensor loss for the inference model plus diagnostic values (loss_pred, loss_joint)."""
    if variant in ("predict", "no-prior"):
        lq_y = output_log_prob(pred, beliefs, ys, pruner)
        loss = nd.neg(nd.mean(lq_y))
        return loss, loss.item(), None
    lq_y, lq_w = joint_match_terms(pred, expl, beliefs, ys, ws, pruner)
    loss = nd.mean(nd.square(lq_y + lq_w - _log_p_world(beliefs, ws, c.w_space)))
    return loss, -float(np.mean(lq_y.data)), loss.item()


def _check_finite(value: float, what: str, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"{what} became {value} at step {step}")


def train_inference(pred: PredictionModel, expl: ExplanationModel | None, prior: prior_mod.DirichletPrior,
                    c: SymbolicFn, iters: int, samples: int, lr: float, rng: np.random.Generator,
                    variant: str = "predict", pruner: Pruner | None = None,
                    log: Callable[[int, float], None] | None = None) -> list[float]:
    """Train the inference model alone on a fixed prior; returns the loss per iteration."""
    history = []
    for t in range(iters):
        beliefs, ws, ys = forward_samples(prior, c, samples, rng)
        with Tape() as tape:
            loss, _, _ = inference_loss(variant, pred, expl, beliefs, ws, ys, c, pruner)
        value = loss.item()
        _check_finite(value, "inference loss", t)
        grads = nd.backward(tape, loss)
        _apply(pred, expl, grads, lr)
        history.append(value)
        if log is not None:
            log(t, value)
    return history


def _apply(pred, expl, grads: dict, lr: float) -> None:
    nd.adam_step(pred.store, grads, lr)
    if expl is not None:
        nd.adam_step(expl.store, grads, lr)


# -- full training loop -------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    c: SymbolicFn
    pred: PredictionModel
    expl: ExplanationModel | None
    perception: Perception
    prior: prior_mod.DirichletPrior
    buffer: prior_mod.BeliefBuffer
    pruner: Pruner | None
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, config: TrainConfig, c: SymbolicFn, feature_dim: int,
               pruner: Pruner | None = None) -> "TrainState":
        """Fresh models; every component draws from its own stream derived from the seed."""
        if config.variant == "pruning" and pruner is None:
            raise ConfigError("the pruning variant needs a pruner")
        if config.variant != "pruning":
            pruner = None
        cards = set(c.w_space.cards)
        if len(cards) != 1:
            raise ConfigError("perception needs world variables of equal cardinality")
        seed = config.seed
        pred = PredictionModel(c.w_space, c.y_space, config.hidden, np.random.default_rng([seed, 11]),
                               log_features=config.log_features, scale_beliefs=config.scale_beliefs)
        expl = (ExplanationModel(c.w_space, c.y_space, config.hidden, np.random.default_rng([seed, 12]),
                                 log_features=config.log_features, scale_beliefs=config.scale_beliefs)
                if config.uses_explanation else None)
        perception = Perception(feature_dim, cards.pop(), config.perception_hidden,
                                np.random.default_rng([seed, 13]))
        return cls(config, c, pred, expl, perception,
                   prior_mod.DirichletPrior(c.w_space, config.prior_init),
                   prior_mod.BeliefBuffer(c.w_space, config.buffer_capacity),
                   pruner, np.random.default_rng([seed, 14]))

    def stores(self) -> dict[str, ParamStore]:
        out = {"pred": self.pred.store, "perception": self.perception.store, "prior": self.prior.store}
        if self.expl is not None:
            out["expl"] = self.expl.store
        return out


def train_step(state: TrainState, x: np.ndarray, y: np.ndarray) -> tuple[TrainState, MetricsRecord]:
    """One iteration on a batch of inputs ``x`` (B, n, F) and observed outputs ``y`` (B, |Y|).

    Order: perceive, buffer the beliefs, refit the prior, train the inference
    model on forward-process samples, then train perception through the
    updated (frozen) prediction model.
    """
    cfg = state.config
    rng = state.rng
    batch_beliefs = state.perception.predict(x)
    state.buffer.extend(batch_beliefs)
    if cfg.uses_prior:
        if state.step % cfg.prior_fit_every == 0:
            prior_mod.fit(state.prior, state.buffer, cfg.prior_iters, cfg.prior_lr, cfg.prior_l2)
        beliefs, ws, ys = forward_samples(state.prior, state.c, cfg.samples, rng)
    else:
        beliefs = batch_beliefs[rng.integers(0, len(batch_beliefs), size=cfg.samples)]
        ws = sample_worlds_from_beliefs(beliefs, state.c.w_space, rng)
        ys = state.c.apply(ws)

    with Tape() as tape:
        loss, l_pred, l_joint = inference_loss(cfg.variant, state.pred, state.expl, beliefs, ws, ys,
                                               state.c, state.pruner)
    _check_finite(loss.item(), f"{cfg.variant} inference loss", state.step)
    _apply(state.pred, state.expl, nd.backward(tape, loss), cfg.lr)

    value, grads = gradients(lambda: loss_perception(state.pred, state.perception, x, y, state.pruner))
    _check_finite(value, "perception loss", state.step)
    nd.adam_step(state.perception.store, grads, cfg.perception_lr or cfg.lr)
    state.step += 1
    return state, MetricsRecord(epoch=-1, loss_pred=l_pred, loss_joint=l_joint, loss_perception=value)


def evaluate(state: TrainState, dataset, mode: str = "symbolic", beam_width: int | None = None,
             chunk: int = 256) -> MetricsRecord:
    """Exact-match accuracy of the full output.

    ``symbolic`` applies c to the per-variable argmax of the beliefs;
    ``neural`` decodes the prediction model by beam search. Digit accuracy is
    reported in both modes.
    """
    if mode not in ("symbolic", "neural"):
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    width = beam_width or state.config.beam_width
    rows = np.arange(len(dataset))
    hits = 0
    digit_hits = 0
    for start in range(0, len(rows), chunk):
        sel = rows[start:start + chunk]
        beliefs = state.perception.predict(dataset.inputs(sel))
        card = state.perception.card
        guess = beliefs.reshape(len(sel), -1, card).argmax(axis=2)
        digit_hits += int(np.sum(guess == dataset.digits[sel]))
        if mode == "symbolic":
            ys = state.c.apply(guess)
        else:
            ys, _ = beam_search_outputs(state.pred, beliefs, width, state.pruner)
        hits += int(np.sum(np.all(ys == dataset.outputs[sel], axis=1)))
    n = max(len(rows), 1)
    acc = hits / n
    record = MetricsRecord(epoch=-1, acc_digit=digit_hits / (n * dataset.digits.shape[1]))
    if mode == "symbolic":
        record.acc_symbolic = acc
    else:
        record.acc_neural = acc
    return record


def run_epoch(state: TrainState, dataset) -> MetricsRecord:
    """One shuffled pass over ``dataset``; returns mean losses."""
    cfg = state.config
    order = state.rng.permutation(len(dataset))
    totals: dict[str, list[float]] = {"loss_pred": [], "loss_joint": [], "loss_perception": []}
    for start in range(0, len(order), cfg.batch_size):
        sel = order[start:start + cfg.batch_size]
        _, rec = train_step(state, dataset.inputs(sel), dataset.outputs[sel])
        for key in totals:
            value = getattr(rec, key)
            if value is not None:
                totals[key].append(value)
    return MetricsRecord(epoch=-1, **{k: (float(np.mean(v)) if v else None) for k, v in totals.items()})


def fit(state: TrainState, train_set, test_set, epochs: int | None = None,
        on_epoch: Callable[[MetricsRecord], None] | None = None, neural: bool = True) -> list[MetricsRecord]:
    """Train for ``epochs`` epochs, evaluating on ``test_set`` after each one."""
    records = []
    for epoch in range(1, (epochs or state.config.epochs) + 1):
        t0 = time.perf_counter()
        rec = run_epoch(state, train_set)
        sym = evaluate(state, test_set, "symbolic")
        rec.acc_symbolic = sym.acc_symbolic
        rec.acc_digit = sym.acc_digit
        if neural:
            rec.acc_neural = evaluate(state, test_set, "neural").acc_neural
        rec.epoch = epoch
        rec.seconds = time.perf_counter() - t0
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return records
