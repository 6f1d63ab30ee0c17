"""Zero-variance gradient estimates for black-box functions of discrete latents.

A Gaussian outcome model ``q(r|P) = Normal(mu(P), sigma(P))`` is fitted to
samples ``P ~ p(P), z ~ p(z|P), r = g(z)``. The gradient of ``mu`` with
respect to the belief then stands in for the gradient of ``E[g(z)]``. It is
biased by the fit error but has no sampling variance. The score-function
estimator is the unbiased, noisy baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import ndauto as nd
from .ndauto import ParamStore, Tape, Tensor
from .prior import DirichletPrior, sample_beliefs
from .problem import Belief, Space
from .train import sample_worlds_from_beliefs

LOG_STD_MIN = -7.0
LOG_STD_MAX = 3.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
DEFAULT_HIDDEN = (128, 128)

BatchFn = Callable[[np.ndarray], np.ndarray]


class OutcomeModel:
    """MLP from a flattened belief to the mean and log-std of a scalar outcome."""

    def __init__(self, space: Space, hidden=DEFAULT_HIDDEN, rng: np.random.Generator | None = None,
                 store: ParamStore | None = None):
        self.space = space
        self.layer_spec = [space.width, *hidden, 2]
        if store is None:
            store = ParamStore()
            nd.init_mlp(store, "out", self.layer_spec, rng if rng is not None else np.random.default_rng(0))
        self.store = store

    def forward(self, beliefs, trainable: bool = True) -> tuple[Tensor, Tensor]:
        mean, log_std = nd.mlp_forward(self.store, beliefs, self.layer_spec, head="gaussian",
                                       prefix="out", trainable=trainable)
        return mean, nd.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, beliefs) -> np.ndarray:
        with nd.no_tape():
            return self.forward(np.atleast_2d(beliefs), trainable=False)[0].data[:, 0]


def outcome_loss(model: OutcomeModel, beliefs, r: np.ndarray) -> Tensor:
    """Mean Gaussian negative log-likelihood ``-log q(r|P)``."""
    mean, log_std = model.forward(beliefs)
    r = np.asarray(r, dtype=np.float64).reshape(-1, 1)
    z = nd.mul(r - mean, nd.exp(nd.neg(log_std)))
    nll = nd.mul(nd.square(z), 0.5) + log_std + HALF_LOG_2PI
    return nd.mean(nll)


def fit_outcome_model(model: OutcomeModel, prior: DirichletPrior, g: BatchFn, iters: int,
                      rng: np.random.Generator, batch: int = 256, lr: float = 3e-4,
                      history: list | None = None) -> OutcomeModel:
    """Minimise the outcome loss on fresh forward samples; updates ``model`` in place.

    ``g`` maps an int array of latents (B, |Z|) to outcomes (B,).
    """
    for _ in range(iters):
        beliefs = sample_beliefs(prior, batch, rng)
        z = sample_worlds_from_beliefs(beliefs, model.space, rng)
        r = np.asarray(g(z), dtype=np.float64)
        with Tape() as tape:
            loss = outcome_loss(model, beliefs, r)
        if history is not None:
            history.append(loss.item())
        nd.adam_step(model.store, nd.backward(tape, loss), lr)
    return model


def _flat(belief) -> np.ndarray:
    return belief.flat() if isinstance(belief, Belief) else np.asarray(belief, dtype=np.float64).ravel()


def surrogate_gradient(model: OutcomeModel, belief) -> np.ndarray:
    """Gradient of the fitted mean with respect to the flattened belief."""
    leaf = Tensor(_flat(belief)[None, :], requires_grad=True, name="belief")
    with Tape() as tape:
        mean, _ = model.forward(leaf, trainable=False)
        total = nd.sum(mean)
    return nd.backward(tape, total)["belief"][0]


def exact_gradient(belief, g: BatchFn, space: Space) -> np.ndarray:
    """Gradient of ``sum_z p(z|P) g(z)`` by enumerating every latent assignment."""
    flat = _flat(belief)
    zs = space.enumerate()
    values = np.asarray(g(zs), dtype=np.float64)
    picked = flat[space.offsets[None, :] + zs]
    grad = np.zeros_like(flat)
    for i, o in enumerate(space.offsets):
        others = np.prod(np.delete(picked, i, axis=1), axis=1)
        np.add.at(grad, o + zs[:, i], others * values)
    return grad


def score_function_samples(belief, g: BatchFn, space: Space, num_samples: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Per-sample estimates ``g(z) * d log p(z|P) / dP``, shape (num_samples, width)."""
    flat = _flat(belief)
    z = sample_worlds_from_beliefs(np.tile(flat, (num_samples, 1)), space, rng)
    values = np.asarray(g(z), dtype=np.float64)
    idx = space.offsets[None, :] + z
    out = np.zeros((num_samples, len(flat)))
    rows = np.arange(num_samples)[:, None]
    out[rows, idx] = values[:, None] / flat[idx]
    return out


def score_function_gradient(belief, g: BatchFn, num_samples: int, rng: np.random.Generator,
                            space: Space | None = None) -> np.ndarray:
    """Unbiased Monte Carlo estimate of the gradient of ``E[g(z)]``."""
    space = space or (belief.space if isinstance(belief, Belief) else None)
    if space is None:
        raise ValueError("a flat belief needs an explicit space")
    return score_function_samples(belief, g, space, num_samples, rng).mean(axis=0)


def tangent(grad: np.ndarray, space: Space) -> np.ndarray:
    """Project a belief gradient onto the simplex tangent space (zero-sum per variable)."""
    out = np.array(grad, dtype=np.float64)
    for o, d in zip(space.offsets, space.cards):
        out[o:o + d] -= out[o:o + d].mean()
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass
class EstimatorReport:
    name: str
    mean: list
    variance: float
    bias: float | None = None
    cosine: float | None = None

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def empirical_variance(samples: np.ndarray) -> float:
    """Total per-coordinate variance, computed on data shifted by the first sample.

    Identical samples give exactly zero instead of rounding noise.
    """
    shifted = samples - samples[0]
    return float(np.sum(np.mean(shifted**2, axis=0) - np.mean(shifted, axis=0) ** 2).clip(min=0.0))


def _report(name: str, samples: np.ndarray, exact: np.ndarray | None, space: Space) -> EstimatorReport:
    mean = samples.mean(axis=0)
    variance = empirical_variance(samples)
    bias = cos = None
    if exact is not None:
        bias = float(np.linalg.norm(tangent(mean - exact, space)))
        cos = cosine(tangent(mean, space), tangent(exact, space))
    return EstimatorReport(name, mean.tolist(), variance, bias, cos)


def exactly_two(z: np.ndarray) -> np.ndarray:
    """Toy black box: 1 when exactly two of the latents are set."""
    return (np.asarray(z).sum(axis=1) == 2).astype(np.float64)


def benchmark(space: Space, g: BatchFn, belief, fit_iters: int = 2000, repeats: int = 20,
              num_samples: int = 100, seed: int = 0, hidden=DEFAULT_HIDDEN) -> list[EstimatorReport]:
    """Compare the surrogate and score-function estimators on one belief.

    Each estimator is evaluated ``repeats`` times; the score function draws
    fresh samples each time, the surrogate reuses its fitted model.
    """
    rng = np.random.default_rng(seed)
    model = OutcomeModel(space, hidden, np.random.default_rng([seed, 1]))
    fit_outcome_model(model, DirichletPrior.from_alphas(space, 1.0), g, fit_iters, rng)
    exact = exact_gradient(belief, g, space) if space.size <= 10**6 else None
    surrogate = np.stack([surrogate_gradient(model, belief) for _ in range(repeats)])
    score = np.stack([score_function_gradient(belief, g, num_samples, rng, space) for _ in range(repeats)])
    return [_report("surrogate", surrogate, exact, space), _report("score_function", score, exact, space)]
