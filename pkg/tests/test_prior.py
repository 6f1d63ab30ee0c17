import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from anesi import ndauto as nd
from anesi.ndauto import Tape
from anesi.prior import (BUFFER_CAPACITY, PRIOR_INIT, PRIOR_L2, BeliefBuffer, DirichletPrior,
                         EmptyBufferError, fit, fit_objective, log_pdf, log_pdf_tensor,
                         sample_belief, sample_beliefs)
from anesi.problem import Belief, Space

from conftest import finite_difference, relative_error

TRI = Space((3,))


def _buffer(space, rows, capacity=BUFFER_CAPACITY):
    buf = BeliefBuffer(space, capacity)
    buf.extend(rows)
    return buf


class TestDefaults:
    def test_published_hyperparameters(self):
        assert BUFFER_CAPACITY == 2500 and PRIOR_L2 == 900_000
        np.testing.assert_allclose(DirichletPrior(Space((10, 10))).alphas, PRIOR_INIT)

    def test_unequal_cardinalities_rejected(self):
        with pytest.raises(ValueError, match="equal cardinalities"):
            DirichletPrior(Space((2, 3)))


class TestBuffer:
    def test_fifo_eviction(self):
        buf = BeliefBuffer(Space((2,)), capacity=3)
        for p in (0.1, 0.2, 0.3, 0.4, 0.5):
            buf.extend([[p, 1 - p]])
        assert len(buf) == 3
        np.testing.assert_allclose(buf.array()[:, 0], [0.3, 0.4, 0.5])

    def test_oversized_batch_keeps_tail(self):
        buf = BeliefBuffer(Space((2,)), capacity=2)
        buf.extend([[0.1, 0.9], [0.2, 0.8], [0.3, 0.7]])
        np.testing.assert_allclose(buf.array()[:, 0], [0.2, 0.3])

    def test_mean_log_clamps_zeros(self):
        buf = _buffer(Space((2,)), [[1.0, 0.0]])
        expected = np.log(np.array([1.0, 1e-6]) / (1.0 + 1e-6))
        np.testing.assert_allclose(buf.mean_log()[0], expected)

    def test_append_belief(self):
        buf = BeliefBuffer(Space((2, 2)), 5)
        buf.append(Belief([np.array([0.5, 0.5]), np.array([0.25, 0.75])]))
        np.testing.assert_allclose(buf.array(), [[0.5, 0.5, 0.25, 0.75]])

    def test_invalid_capacity(self):
        with pytest.raises(ValueError):
            BeliefBuffer(TRI, 0)


class TestFit:
    def test_round_trip_recovers_alpha(self):
        # [DERIVED] 2500 draws from Dirichlet(2, 5, 3), fitted with l2 = 0
        data = np.random.default_rng(0).dirichlet([2.0, 5.0, 3.0], size=2500)
        prior = fit(DirichletPrior(TRI), _buffer(TRI, data), iters=500, lr=0.1, l2=0.0)
        np.testing.assert_allclose(prior.alphas[0], [2.0, 5.0, 3.0], rtol=0.10)

    def test_loss_mostly_non_increasing(self):
        data = np.random.default_rng(1).dirichlet([2.0, 5.0, 3.0], size=2500)
        history = []
        fit(DirichletPrior(TRI), _buffer(TRI, data), iters=200, lr=0.1, l2=0.0, history=history)
        assert np.mean(np.diff(history) <= 0) >= 0.9

    def test_regularisation_monotone(self):
        data = np.random.default_rng(2).dirichlet([2.0, 5.0, 3.0], size=2500)
        buf = _buffer(TRI, data)
        fitted = [fit(DirichletPrior(TRI), buf, 500, 0.1, l2).alphas[0] for l2 in (0.0, 1e3, 1e5)]
        assert np.all(fitted[0] > fitted[1]) and np.all(fitted[1] > fitted[2])

    def test_uniform_belief_with_large_l2_stays_small(self):
        space = Space((10, 10))
        buf = _buffer(space, np.full((100, 20), 0.1))
        free = fit(DirichletPrior(space), buf, 50, 0.01, 0.0).alphas
        pulled = fit(DirichletPrior(space), buf, 50, 0.01, PRIOR_L2).alphas
        assert np.all(pulled < free) and np.all(pulled < PRIOR_INIT)

    def test_zero_iterations(self):
        prior = DirichletPrior(TRI, init=0.7)
        fit(prior, _buffer(TRI, [[0.2, 0.3, 0.5]]), iters=0)
        np.testing.assert_allclose(prior.alphas, 0.7)

    def test_empty_buffer(self):
        with pytest.raises(EmptyBufferError):
            fit(DirichletPrior(TRI), BeliefBuffer(TRI))

    def test_objective_gradient(self, rng):
        space = Space((4, 4))
        buf = _buffer(space, rng.dirichlet(np.ones(4), size=(50, 2)).reshape(50, -1))
        prior = DirichletPrior(space, u=rng.normal(size=(2, 4)))
        mean_log = buf.mean_log()
        _, grad = fit_objective(prior, mean_log, 50, 3.0)
        coords = list(np.ndindex(2, 4))
        numeric = finite_difference(lambda: fit_objective(prior, mean_log, 50, 3.0)[0], prior.u, coords)
        assert relative_error(grad["u"].ravel(), numeric) < 1e-6

    def test_objective_matches_scipy(self, rng):
        rows = rng.dirichlet([1.5, 2.0, 0.7], size=30)
        prior = DirichletPrior.from_alphas(TRI, [1.2, 3.0, 0.5])
        value, _ = fit_objective(prior, _buffer(TRI, rows).mean_log(), 30, 0.0)
        expected = -sum(stats.dirichlet.logpdf(r, [1.2, 3.0, 0.5]) for r in rows)
        assert value == pytest.approx(expected, rel=1e-9)


class TestSampling:
    def test_flat_prior_mean(self):
        prior = DirichletPrior.from_alphas(Space((10,)), 1.0)
        draws = sample_beliefs(prior, 10_000, np.random.default_rng(0))
        se = math.sqrt(0.1 * 0.9 / 11) / math.sqrt(10_000)
        assert np.all(np.abs(draws.mean(axis=0) - 0.1) < 3 * se)

    def test_concentrated_alpha(self):
        alphas = np.ones(10)
        alphas[3] = 100.0
        prior = DirichletPrior.from_alphas(Space((10,)), alphas)
        draws = sample_beliefs(prior, 2000, np.random.default_rng(0))
        assert draws[:, 3].mean() > 0.9

    def test_seeded(self):
        prior = DirichletPrior(Space((10, 10)), init=0.5)
        a, b = sample_belief(prior, 42), sample_belief(prior, 42)
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_tiny_alpha_gives_valid_beliefs(self):
        prior = DirichletPrior.from_alphas(Space((10, 10)), 1e-4)
        draws = sample_beliefs(prior, 500, np.random.default_rng(0))
        np.testing.assert_allclose(draws.reshape(500, 2, 10).sum(axis=2), 1.0, atol=1e-9)
        assert np.all(np.isfinite(draws))

    @given(st.floats(min_value=0.01, max_value=50.0), st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_samples_are_beliefs(self, alpha, seed):
        prior = DirichletPrior.from_alphas(Space((4, 4, 4)), alpha)
        Belief.from_flat(sample_beliefs(prior, 1, np.random.default_rng(seed))[0], prior.space)


class TestLogPdf:
    def test_flat_binary_is_zero(self, rng):
        prior = DirichletPrior.from_alphas(Space((2,)), 1.0)
        p = rng.random()
        assert log_pdf(prior, Belief([np.array([p, 1 - p])])) == pytest.approx(0.0, abs=1e-12)

    def test_matches_scipy(self, rng):
        prior = DirichletPrior.from_alphas(Space((3, 3)), [[1.2, 3.0, 0.5], [2.0, 2.0, 7.0]])
        b = Belief([rng.dirichlet(np.ones(3)) for _ in range(2)])
        expected = stats.dirichlet.logpdf(b.rows[0], [1.2, 3.0, 0.5]) + stats.dirichlet.logpdf(b.rows[1], [2, 2, 7])
        assert log_pdf(prior, b) == pytest.approx(expected, rel=1e-10)

    def test_integrates_to_one(self):
        # [DERIVED] midpoint quadrature over the 2-simplex
        prior = DirichletPrior.from_alphas(TRI, [2.0, 3.0, 1.5])
        h = 1 / 400
        grid = (np.arange(400) + 0.5) * h
        total = 0.0
        for p1 in grid:
            for p2 in grid[grid < 1 - p1 - 1e-12]:
                p3 = 1 - p1 - p2
                if p3 > 0:
                    total += math.exp(log_pdf(prior, Belief([np.array([p1, p2, p3])])))
        assert total * h * h == pytest.approx(1.0, abs=1e-2)

    def test_zero_entry_rejected(self):
        with pytest.raises(ValueError, match="zero entry"):
            log_pdf(DirichletPrior(TRI), Belief([np.array([0.0, 0.5, 0.5])]))

    def test_gradient_matches_finite_differences(self, rng):
        prior = DirichletPrior(Space((3, 3)), u=rng.normal(size=(2, 3)))
        b = Belief([rng.dirichlet(np.ones(3)) for _ in range(2)])
        with Tape() as tape:
            value = log_pdf_tensor(prior.store.leaf("u"), b)
        grad = nd.backward(tape, value)["u"]
        numeric = finite_difference(lambda: log_pdf(prior, b), prior.u, list(np.ndindex(2, 3)))
        assert relative_error(grad.ravel(), numeric) < 1e-4


def test_copy_is_independent():
    prior = DirichletPrior(TRI, init=1.0)
    other = prior.copy()
    other.store.params["u"][...] = 0.0
    np.testing.assert_allclose(prior.alphas, 1.0)
