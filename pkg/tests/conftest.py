import numpy as np
import pytest

from anesi import ndauto as nd


def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error between two gradient vectors."""
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def finite_difference(fn, array: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to selected entries of ``array`` (mutated in place)."""
    out = []
    for idx in coords:
        old = array[idx]
        array[idx] = old + h
        up = fn()
        array[idx] = old - h
        down = fn()
        array[idx] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def sample_coords(array: np.ndarray, count: int, rng) -> list:
    flat = rng.choice(array.size, size=min(count, array.size), replace=False)
    return [np.unravel_index(i, array.shape) for i in flat]


def check_store_gradient(loss_fn, stores, rng, coords_per_param: int = 2) -> float:
    """Compare tape gradients of ``loss_fn`` (returns a Tensor) against finite differences.

    Every parameter of every store contributes ``coords_per_param`` random
    coordinates; returns the norm-wise relative error over all of them.
    """
    with nd.Tape() as tape:
        loss = loss_fn()
    grads = nd.backward(tape, loss)

    def value():
        with nd.no_tape():
            return loss_fn().item()

    analytic, numeric = [], []
    for store in stores:
        for name in store:
            coords = sample_coords(store[name], coords_per_param, rng)
            numeric.extend(finite_difference(value, store.params[name], coords))
            analytic.extend(grads[name][c] for c in coords)
    return relative_error(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
