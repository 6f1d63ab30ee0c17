"""Independent Dirichlet belief prior with a bounded observation buffer.

All world variables must share one cardinality ``d``; the concentrations are
then a single (|W|, d) matrix, one row per variable.
"""

from __future__ import annotations


import numpy as np
from scipy import special

from . import ndauto as nd
from .ndauto import ParamStore, Tensor
from .problem import Belief, Space

CLAMP_FLOOR = 1e-6

# training defaults from the published hyperparameter table
BUFFER_CAPACITY = 2500
PRIOR_LR = 0.01
PRIOR_ITERS = 50
PRIOR_INIT = 0.1
PRIOR_L2 = 900_000.0


class EmptyBufferError(ValueError):
    pass


def _uniform_card(space: Space) -> int:
    if len(set(space.cards)) != 1:
        raise ValueError(f"the Dirichlet prior needs equal cardinalities, got {space.cards}")
    return space.cards[0]


class BeliefBuffer:
    """FIFO ring of flattened beliefs; the oldest rows are evicted first.

    Alongside each belief it keeps the log of the clamped, renormalised rows,
    which is all the Dirichlet fit needs.
    """

    def __init__(self, space: Space, capacity: int = BUFFER_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.space = space
        self.d = _uniform_card(space)
        self.capacity = capacity
        self._data = np.zeros((capacity, space.width))
        self._logs = np.zeros((capacity, space.width))
        self._head = 0
        self._size = 0

    def __len__(self):
        return self._size

    def _log_rows(self, beliefs: np.ndarray) -> np.ndarray:
        blocks = np.clip(beliefs, CLAMP_FLOOR, 1.0).reshape(len(beliefs), -1, self.d)
        blocks = blocks / blocks.sum(axis=2, keepdims=True)
        return np.log(blocks).reshape(len(beliefs), -1)

    def extend(self, beliefs: np.ndarray) -> None:
        beliefs = np.atleast_2d(np.asarray(beliefs, dtype=np.float64))[-self.capacity:]
        idx = (self._head + np.arange(len(beliefs))) % self.capacity
        self._data[idx] = beliefs
        self._logs[idx] = self._log_rows(beliefs)
        self._head = int((self._head + len(beliefs)) % self.capacity)
        self._size = min(self.capacity, self._size + len(beliefs))

    def append(self, belief: Belief) -> None:
        self.extend(belief.flat()[None, :])

    def array(self) -> np.ndarray:
        """Stored beliefs, oldest first."""
        if self._size < self.capacity:
            return self._data[:self._size].copy()
        return np.roll(self._data, -self._head, axis=0)

    def mean_log(self) -> np.ndarray:
        """Mean clamped log-belief, shape (|W|, d)."""
        return self._logs[:self._size].mean(axis=0).reshape(-1, self.d)


class DirichletPrior:
    """|W| independent Dirichlets with ``alpha = softplus(u)``, ``u`` of shape (|W|, d)."""

    def __init__(self, space: Space, init: float = PRIOR_INIT, u: np.ndarray | None = None):
        self.space = space
        d = _uniform_card(space)
        value = np.full((len(space), d), nd.inverse_softplus(init)) if u is None else np.array(u, dtype=np.float64)
        if value.shape != (len(space), d):
            raise ValueError(f"parameters have shape {value.shape}, expected {(len(space), d)}")
        self.store = ParamStore()
        self.store.add("u", value)

    @classmethod
    def from_alphas(cls, space: Space, alphas) -> "DirichletPrior":
        alphas = np.broadcast_to(np.asarray(alphas, dtype=np.float64), (len(space), _uniform_card(space)))
        return cls(space, u=nd.inverse_softplus(alphas))

    @property
    def u(self) -> np.ndarray:
        return self.store["u"]

    @property
    def alphas(self) -> np.ndarray:
        return nd.softplus_np(self.u)

    def copy(self) -> "DirichletPrior":
        other = DirichletPrior(self.space, u=self.u)
        other.store = self.store.copy()
        return other


def fit_objective(prior: DirichletPrior, mean_log: np.ndarray, n: int, l2: float):
    """Objective and its gradient with respect to ``u``.

    ``-(n/|W|) * sum_i mean log Dir(P_i | alpha_i) + l2 * mean(alpha**2)``:
    the total negative log-likelihood of ``n`` buffered beliefs averaged over
    variables, plus an L2 pull of the concentrations toward zero.
    """
    u = prior.u
    a = nd.softplus_np(u)
    a0 = a.sum(axis=1)
    ll = special.gammaln(a0) - special.gammaln(a).sum(axis=1) + ((a - 1.0) * mean_log).sum(axis=1)
    value = -n * ll.mean() + l2 * np.mean(a * a)
    dl_da = special.digamma(a0)[:, None] - special.digamma(a) + mean_log
    d_alpha = -n * dl_da / a.shape[0] + 2.0 * l2 * a / a.size
    return float(value), {"u": d_alpha * special.expit(u)}


def fit(prior: DirichletPrior, buffer: BeliefBuffer, iters: int = PRIOR_ITERS, lr: float = PRIOR_LR,
        l2: float = PRIOR_L2, history: list | None = None) -> DirichletPrior:
    """Maximum-likelihood fit by Adam, continuing from the current parameters.

    Updates ``prior`` in place (its Adam state persists across calls) and
    returns it. If ``history`` is a list, the objective before each step is
    appended to it.
    """
    if len(buffer) == 0:
        raise EmptyBufferError("cannot fit a prior on an empty buffer")
    mean_log = buffer.mean_log()
    n = len(buffer)
    for _ in range(iters):
        value, grads = fit_objective(prior, mean_log, n, l2)
        if history is not None:
            history.append(value)
        nd.adam_step(prior.store, grads, lr)
    return prior


def sample_beliefs(prior: DirichletPrior, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` flattened beliefs; each row is a vector of Gamma draws divided by its sum."""
    a = prior.alphas
    g = rng.standard_gamma(np.broadcast_to(a, (n,) + a.shape))
    total = g.sum(axis=2, keepdims=True)
    dead = total[..., 0] <= 0.0
    if np.any(dead):
        # every draw underflowed; the small-concentration limit is a vertex
        rows, cols = np.nonzero(dead)
        g[rows, cols] = 0.0
        g[rows, cols, rng.integers(0, a.shape[1], size=len(rows))] = 1.0
        total = g.sum(axis=2, keepdims=True)
    return (g / total).reshape(n, -1)


def sample_belief(prior: DirichletPrior, rng_seed=0) -> Belief:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return Belief.from_flat(sample_beliefs(prior, 1, rng)[0], prior.space)


def log_pdf_tensor(u: Tensor, belief: Belief) -> Tensor:
    """Differentiable sum over variables of the Dirichlet log-density."""
    a = nd.softplus(u)
    logs = np.log(np.stack(belief.rows))
    per_var = nd.lgamma(nd.sum(a, axis=1)) - nd.sum(nd.lgamma(a), axis=1) + nd.sum(nd.mul(a - 1.0, logs), axis=1)
    return nd.sum(per_var)


def log_pdf(prior: DirichletPrior, belief: Belief) -> float:
    for i, row in enumerate(belief.rows):
        if np.any(row <= 0.0):
            raise ValueError(f"belief row {i} has a zero entry; the density needs the open simplex")
    with nd.no_tape():
        return log_pdf_tensor(prior.store.leaf("u"), belief).item()
