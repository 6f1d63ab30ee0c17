"""Small reverse-mode autodiff over numpy arrays.

Operations on :class:`Tensor` record themselves on the active :class:`Tape`.
Because nodes are appended in creation order, walking the tape backwards is a
valid reverse topological order, so every node is visited exactly once.

Everything is float64.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import special

LOG_FLOOR = 1e-12


class ConfigError(ValueError):
    """Shapes or settings that cannot describe a valid network."""


class TrainingError(RuntimeError):
    """Raised when an optimizer step would consume non-finite values."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")
    # make numpy defer to the reflected operators below in mixed expressions
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records primitive operations while active (``with Tape() as tape``)."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


@contextmanager
def no_tape():
    """Temporarily disable recording (pure forward evaluation)."""
    saved = Tape._stack
    Tape._stack = []
    try:
        yield
    finally:
        Tape._stack = saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = Tape.active()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- primitives ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _record(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T if a.requires_grad else None,
                              a.data.T @ g if b.requires_grad else None))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument clamped to ``floor`` (no gradient below it)."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, floor)
    return _record(np.log(clamped), (a,), lambda g: (g * (a.data >= floor) / clamped,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _record(softplus_np(a.data), (a,), lambda g: (g * special.expit(a.data),))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    return _record(special.gammaln(a.data), (a,), lambda g: (g * special.digamma(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def columns(a, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _record(a.data[..., start:stop], (a,), backward)


def pick(a, index: np.ndarray) -> Tensor:
    """Gather ``a[r, index[r]]`` for each row of a 2-D tensor."""
    a = as_tensor(a)
    rows = np.arange(a.shape[0])
    index = np.asarray(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _record(a.data[rows, index], (a,), backward)


def log_softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log-softmax over the last axis.

    With a 0/1 ``mask`` the result is ``log(q * s / (q . s))``: masked entries
    are ``-inf`` and receive no gradient. Rows whose mask is all zero come out
    entirely ``-inf``; callers decide whether that is an error.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        keep = np.asarray(mask) > 0
        x = np.where(keep, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))
    out = x - lse
    probs = np.exp(out)

    def backward(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), backward)


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    return exp(log_softmax(a, mask))


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns gradients for every named leaf reachable from the tape. Leaves the
    loss does not depend on get zero arrays, so a constant loss gives all zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        return {loss.name: np.ones_like(loss.data)} if loss.requires_grad and loss.name else {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for parent in node._parents:
            if parent.requires_grad and parent._backward is None and parent.name is not None:
                leaves[id(parent)] = parent
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if parent.requires_grad and pg is not None:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    out: dict[str, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        out[leaf.name] = out[leaf.name] + g if leaf.name in out else np.array(g)
    return out


# -- numeric helpers ----------------------------------------------------------

def softplus_np(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    """Inverse of softplus for y > 0: ``x + log(-expm1(-x))`` written stably."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# -- parameters and optimizer -------------------------------------------------

class ParamStore:
    """Named parameter arrays with Adam moment buffers."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.betas = betas
        self.eps = eps

    def add(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def leaf(self, name: str, trainable: bool = True) -> Tensor:
        return Tensor(self.params[name], requires_grad=trainable, name=name)

    def copy(self) -> "ParamStore":
        other = ParamStore(self.betas, self.eps)
        for name, value in self.params.items():
            other.params[name] = value.copy()
            other.m[name] = self.m[name].copy()
            other.v[name] = self.v[name].copy()
        other.step = self.step
        return other

    def num_values(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], lr: float) -> ParamStore:
    """One in-place Adam update. Parameters missing from ``grads`` are left alone."""
    for name, g in grads.items():
        if name not in params.params:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    params.step += 1
    b1, b2 = params.betas
    t = params.step
    for name, g in grads.items():
        if name not in params.params:
            continue
        m = params.m[name]
        v = params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        # m_hat / (sqrt(v_hat) + eps) with the bias corrections folded into scalars
        denom = np.sqrt(v * (1.0 / (1.0 - b2**t)))
        denom += params.eps
        params.params[name] -= (lr / (1.0 - b1**t)) * m / denom
    return params


# -- multilayer perceptrons ---------------------------------------------------

def init_mlp(store: ParamStore, prefix: str, layer_spec: Sequence[int], rng: np.random.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    if len(layer_spec) < 2 or any(w < 1 for w in layer_spec):
        raise ConfigError(f"bad layer spec {list(layer_spec)}")
    for i, (fan_in, fan_out) in enumerate(zip(layer_spec[:-1], layer_spec[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        store.add(f"{prefix}.W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{prefix}.b{i}", rng.uniform(-bound, bound, size=(fan_out,)))


def mlp_logits(params: ParamStore, x, layer_spec: Sequence[int], prefix: str = "",
               trainable: bool = True) -> Tensor:
    """ReLU MLP without an output nonlinearity."""
    h = as_tensor(x)
    if h.data.ndim == 1:
        h = reshape(h, (1, -1))
    if h.shape[-1] != layer_spec[0]:
        raise ConfigError(f"input width {h.shape[-1]} does not match layer spec {list(layer_spec)}")
    depth = len(layer_spec) - 1
    for i in range(depth):
        W = params.leaf(f"{prefix}.W{i}", trainable)
        b = params.leaf(f"{prefix}.b{i}", trainable)
        if W.shape != (layer_spec[i], layer_spec[i + 1]):
            raise ConfigError(f"{prefix}.W{i} has shape {W.shape}, spec wants "
                              f"{(layer_spec[i], layer_spec[i + 1])}")
        h = matmul(h, W) + b
        if i < depth - 1:
            h = relu(h)
    return h


def mlp_forward(params: ParamStore, x, layer_spec: Sequence[int], head: str = "softmax",
                prefix: str = "", trainable: bool = True):
    """Run an MLP and apply its output head.

    ``softmax`` returns row probability vectors. ``gaussian`` expects a final
    width of 2 and returns ``(mean, log_std)`` column tensors.
    """
    z = mlp_logits(params, x, layer_spec, prefix, trainable)
    if head == "softmax":
        return softmax(z)
    if head == "gaussian":
        if layer_spec[-1] != 2:
            raise ConfigError("gaussian head needs an output width of 2")
        return columns(z, 0, 1), columns(z, 1, 2)
    raise ConfigError(f"unknown head {head!r}")


# -- checkpoints --------------------------------------------------------------

MAGIC = b"ANESI1"
VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``tensors`` in the flat little-endian ANESI1 layout."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in tensors.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:6] != MAGIC:
        raise ValueError(f"{path}: not an ANESI1 checkpoint")
    (version,) = struct.unpack_from("<I", buf, 6)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        end = pos + 8 * count
        if end > len(buf):
            raise ValueError(f"{path}: truncated tensor {name!r}")
        out[name] = np.frombuffer(buf[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
        pos = end
    return out


def store_tensors(stores: Mapping[str, ParamStore]) -> dict[str, np.ndarray]:
    """Flatten several stores into ``group/name`` keyed arrays."""
    return {f"{group}/{name}": value for group, store in stores.items()
            for name, value in store.params.items()}


def restore_store(tensors: Mapping[str, np.ndarray], group: str) -> ParamStore:
    store = ParamStore()
    prefix = group + "/"
    for key, value in tensors.items():
        if key.startswith(prefix):
            store.add(key[len(prefix):], value)
    return store


def flatten_grads(grads: Mapping[str, np.ndarray], names: Iterable[str]) -> np.ndarray:
    return np.concatenate([np.ravel(grads[n]) for n in names])
