import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anesi import ndauto as nd
from anesi.ndauto import ConfigError, ParamStore, Tape, Tensor, TrainingError

from conftest import finite_difference, relative_error


def _grad(fn, *values):
    """Tape gradients of scalar ``fn(*leaves)`` for leaves named a0, a1, ..."""
    leaves = [Tensor(np.array(v, dtype=float), requires_grad=True, name=f"a{i}") for i, v in enumerate(values)]
    with Tape() as tape:
        loss = fn(*leaves)
    grads = nd.backward(tape, loss)
    return [grads[f"a{i}"] for i in range(len(values))]


def _numeric(fn, *values):
    arrays = [np.array(v, dtype=float) for v in values]
    out = []
    for arr in arrays:
        def value():
            with nd.no_tape():
                return fn(*[Tensor(a) for a in arrays]).item()
        coords = list(np.ndindex(arr.shape))
        out.append(finite_difference(value, arr, coords).reshape(arr.shape))
    return out


UNARY = {
    "square": lambda a: nd.sum(nd.square(a)),
    "relu": lambda a: nd.sum(nd.relu(a)),
    "exp": lambda a: nd.sum(nd.exp(a)),
    "log": lambda a: nd.sum(nd.log(nd.exp(a))),
    "softplus": lambda a: nd.sum(nd.softplus(a)),
    "lgamma": lambda a: nd.sum(nd.lgamma(nd.softplus(a))),
    "log_softmax": lambda a: nd.sum(nd.mul(nd.log_softmax(a), np.arange(a.data.size).reshape(a.shape))),
    "softmax": lambda a: nd.sum(nd.mul(nd.softmax(a), np.arange(a.data.size).reshape(a.shape))),
    "mean_axis": lambda a: nd.sum(nd.square(nd.mean(a, axis=0))),
    "reshape": lambda a: nd.sum(nd.mul(nd.reshape(a, (-1,)), np.arange(a.data.size))),
    "columns": lambda a: nd.sum(nd.square(nd.columns(a, 1, 2))),
    "pick": lambda a: nd.sum(nd.square(nd.pick(a, np.array([0, 2])))),
    "clip": lambda a: nd.sum(nd.square(nd.clip(a, -0.5, 0.5))),
}


class TestGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_ops_match_finite_differences(self, name):
        # [DERIVED] central differences at h=1e-5 on random points
        rng = np.random.default_rng(hash(name) % 2**32)
        fn = UNARY[name]
        for _ in range(100 if name in ("square", "exp", "softplus", "log_softmax") else 10):
            x = rng.normal(size=(2, 3))
            if name in ("relu", "clip"):
                x = np.where(np.abs(np.abs(x) - 0.5) < 1e-3, x + 0.01, x)
                x = np.where(np.abs(x) < 1e-3, 0.1, x)
            (g,) = _grad(fn, x)
            (n,) = _numeric(fn, x)
            assert relative_error(g, n) < 1e-4

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "matmul", "concat"])
    def test_binary_ops_match_finite_differences(self, op):
        rng = np.random.default_rng(7)
        fns = {
            "add": lambda a, b: nd.sum(nd.square(nd.add(a, b))),
            "sub": lambda a, b: nd.sum(nd.square(nd.sub(a, b))),
            "mul": lambda a, b: nd.sum(nd.mul(a, b)),
            "matmul": lambda a, b: nd.sum(nd.square(nd.matmul(a, b))),
            "concat": lambda a, b: nd.sum(nd.mul(nd.concat([a, b], axis=1), np.arange(12).reshape(2, 6))),
        }
        for _ in range(20):
            a = rng.normal(size=(2, 3))
            b = rng.normal(size=(3, 3)) if op == "matmul" else rng.normal(size=(2, 3))
            for g, n in zip(_grad(fns[op], a, b), _numeric(fns[op], a, b)):
                assert relative_error(g, n) < 1e-4

    def test_broadcast_bias_gradient_sums_rows(self):
        g = _grad(lambda a, b: nd.sum(nd.add(a, b)), np.zeros((4, 3)), np.zeros(3))
        np.testing.assert_array_equal(g[1], np.full(3, 4.0))

    def test_log_softmax_of_wx_matches_finite_differences(self, rng):
        # [DERIVED] loss = log_softmax(Wx)[k]
        x = rng.normal(size=(1, 5))
        for k in range(4):
            fn = lambda W: nd.sum(nd.columns(nd.log_softmax(nd.matmul(Tensor(x), W)), k, k + 1))
            W = rng.normal(size=(5, 4))
            assert relative_error(_grad(fn, W)[0], _numeric(fn, W)[0]) < 1e-4

    def test_sum_of_params_gives_ones(self):
        (g,) = _grad(lambda a: nd.sum(a), np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_constant_loss_gives_zero_gradient(self):
        leaf = Tensor(np.ones(3), requires_grad=True, name="p")
        with Tape() as tape:
            loss = nd.sum(nd.mul(leaf, 0.0))
        np.testing.assert_array_equal(nd.backward(tape, loss)["p"], np.zeros(3))

    def test_unreached_leaf_gets_zeros(self):
        a = Tensor(np.ones(2), requires_grad=True, name="a")
        b = Tensor(np.ones(2), requires_grad=True, name="b")
        with Tape() as tape:
            unused = nd.add(b, 1.0)
            loss = nd.sum(a)
        grads = nd.backward(tape, loss)
        np.testing.assert_array_equal(grads["b"], np.zeros(2))
        assert unused.shape == (2,)

    def test_non_scalar_loss_rejected(self):
        a = Tensor(np.ones(3), requires_grad=True, name="a")
        with Tape() as tape:
            out = nd.mul(a, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            nd.backward(tape, out)

    def test_masked_log_softmax_is_neg_inf_with_zero_gradient(self):
        mask = np.array([[1.0, 0.0, 1.0]])
        (g,) = _grad(lambda a: nd.sum(nd.pick(nd.log_softmax(a, mask), np.array([2]))), np.zeros((1, 3)))
        assert g[0, 1] == 0.0
        with nd.no_tape():
            out = nd.log_softmax(Tensor(np.zeros((1, 3))), mask).data
        assert out[0, 1] == -np.inf
        np.testing.assert_allclose(np.exp(out[0, [0, 2]]), [0.5, 0.5])

    def test_no_tape_records_nothing(self):
        with Tape() as tape:
            with nd.no_tape():
                nd.add(Tensor(np.ones(2), requires_grad=True, name="a"), 1.0)
        assert tape.nodes == []

    def test_mixed_numpy_left_operand(self):
        a = Tensor(np.ones(2), requires_grad=True, name="a")
        with Tape() as tape:
            loss = nd.sum(np.array([3.0, 4.0]) - a)
        np.testing.assert_array_equal(nd.backward(tape, loss)["a"], [-1.0, -1.0])


class TestSoftplus:
    def test_zero(self):
        assert nd.softplus_np(0.0) == pytest.approx(math.log(2.0))

    def test_large_input_asymptote(self):
        assert nd.softplus_np(50.0) == pytest.approx(50.0)

    def test_inverse_round_trip(self):
        # [DERIVED] round trip at -3.7
        assert float(nd.inverse_softplus(nd.softplus_np(-3.7))) == pytest.approx(-3.7, abs=1e-9)

    @given(st.floats(min_value=-20.0, max_value=30.0))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, x):
        y = nd.softplus_np(x)
        assert y > 0
        assert float(nd.inverse_softplus(y)) == pytest.approx(x, abs=1e-9)


class TestMLP:
    def test_zero_weights_give_uniform_softmax(self):
        store = ParamStore()
        nd.init_mlp(store, "m", [4, 5, 3], np.random.default_rng(0))
        for name in store:
            store.params[name][...] = 0.0
        out = nd.mlp_forward(store, np.ones((2, 4)), [4, 5, 3], prefix="m").data
        np.testing.assert_allclose(out, np.full((2, 3), 1 / 3))

    def test_softmax_of_equal_logits(self):
        with nd.no_tape():
            np.testing.assert_allclose(nd.softmax(Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])

    def test_forward_is_bit_reproducible(self):
        outs = []
        for _ in range(2):
            store = ParamStore()
            nd.init_mlp(store, "m", [6, 8, 4], np.random.default_rng(3))
            x = np.random.default_rng(4).normal(size=(5, 6))
            outs.append(nd.mlp_forward(store, x, [6, 8, 4], prefix="m").data)
        np.testing.assert_array_equal(outs[0], outs[1])

    @given(st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=30, deadline=None)
    def test_softmax_rows_normalised_and_positive(self, seed):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        nd.init_mlp(store, "m", [3, 7, 5], rng)
        out = nd.mlp_forward(store, rng.normal(size=(4, 3)) * 5, [3, 7, 5], prefix="m").data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out > 0)

    def test_gaussian_head_returns_pair(self):
        store = ParamStore()
        nd.init_mlp(store, "g", [3, 4, 2], np.random.default_rng(0))
        mean, log_std = nd.mlp_forward(store, np.ones((5, 3)), [3, 4, 2], head="gaussian", prefix="g")
        assert mean.shape == (5, 1) and log_std.shape == (5, 1)

    def test_shape_mismatch_is_config_error(self):
        store = ParamStore()
        nd.init_mlp(store, "m", [4, 3], np.random.default_rng(0))
        with pytest.raises(ConfigError):
            nd.mlp_forward(store, np.ones((1, 5)), [4, 3], prefix="m")
        with pytest.raises(ConfigError):
            nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_unknown_head(self):
        store = ParamStore()
        nd.init_mlp(store, "m", [2, 2], np.random.default_rng(0))
        with pytest.raises(ConfigError):
            nd.mlp_forward(store, np.ones((1, 2)), [2, 2], head="tanh", prefix="m")


class TestAdam:
    def _store(self, value):
        store = ParamStore()
        store.add("w", np.array(value, dtype=float))
        return store

    def test_zero_gradient_leaves_params_and_counts_step(self):
        store = self._store([1.0, 2.0])
        nd.adam_step(store, {"w": np.zeros(2)}, 0.1)
        np.testing.assert_array_equal(store["w"], [1.0, 2.0])
        assert store.step == 1

    def test_first_step_magnitude_is_lr(self):
        # [DERIVED] m_hat = g, v_hat = g^2, so the first step is lr * g / (|g| + eps)
        store = self._store(0.0)
        nd.adam_step(store, {"w": np.array(1.0)}, 0.01)
        assert float(store["w"]) == pytest.approx(-0.01 / (1.0 + 1e-8), rel=1e-12)
        for _ in range(5):
            nd.adam_step(store, {"w": np.array(1.0)}, 0.01)
        assert float(store["w"]) == pytest.approx(-0.06, rel=1e-6)

    def test_zero_learning_rate(self):
        store = self._store([3.0])
        nd.adam_step(store, {"w": np.array([5.0])}, 0.0)
        np.testing.assert_array_equal(store["w"], [3.0])

    def test_nan_gradient_names_parameter(self):
        store = self._store([1.0])
        with pytest.raises(TrainingError, match="'w'"):
            nd.adam_step(store, {"w": np.array([np.nan])}, 0.1)
        np.testing.assert_array_equal(store["w"], [1.0])
        assert store.step == 0

    def test_moments_match_parameter_shapes(self):
        store = self._store(np.ones((2, 3)))
        nd.adam_step(store, {"w": np.ones((2, 3))}, 0.1)
        assert store.m["w"].shape == store.v["w"].shape == (2, 3)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        tensors = {"pred/a.W0": np.arange(6.0).reshape(2, 3), "prior/u": np.array([0.5]),
                   "x/scalar": np.array(2.5)}
        nd.save_checkpoint(tmp_path / "m.anesi", tensors)
        back = nd.load_checkpoint(tmp_path / "m.anesi")
        assert list(back) == list(tensors)
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])

    def test_layout_is_little_endian_with_header(self, tmp_path):
        nd.save_checkpoint(tmp_path / "m.anesi", {"ab": np.array([1.0, 2.0])})
        raw = (tmp_path / "m.anesi").read_bytes()
        assert raw[:6] == b"ANESI1"
        assert raw[6:10] == (1).to_bytes(4, "little")
        assert raw[10:14] == (2).to_bytes(4, "little") and raw[14:16] == b"ab"
        assert raw[16:20] == (1).to_bytes(4, "little") and raw[20:24] == (2).to_bytes(4, "little")
        np.testing.assert_array_equal(np.frombuffer(raw[24:], "<f8"), [1.0, 2.0])

    def test_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOPE00" + bytes(8))
        with pytest.raises(ValueError, match="ANESI1"):
            nd.load_checkpoint(tmp_path / "bad")
        nd.save_checkpoint(tmp_path / "m", {"w": np.ones(4)})
        (tmp_path / "cut").write_bytes((tmp_path / "m").read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            nd.load_checkpoint(tmp_path / "cut")

    def test_store_grouping(self):
        a, b = ParamStore(), ParamStore()
        a.add("w", np.ones(2))
        b.add("w", np.zeros(3))
        flat = nd.store_tensors({"pred": a, "expl": b})
        assert set(flat) == {"pred/w", "expl/w"}
        np.testing.assert_array_equal(nd.restore_store(flat, "expl")["w"], np.zeros(3))
