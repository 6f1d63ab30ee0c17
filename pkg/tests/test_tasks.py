import numpy as np
import pytest

from anesi.problem import Belief, exact_wmc
from anesi.tasks import (AdditionTask, IdxBadMagic, IdxCountMismatch, IdxTruncated,
                         SyntheticDigitConfig, boolean_constraint_task, c_sum, c_sum_batch,
                         digits_to_int, idx_addition, int_to_digits, load_idx, make_dataset,
                         synth_features, synth_perceive, synthetic_addition, write_idx)


class TestCSum:
    def test_five_plus_eight(self):
        # [PAPER] 5 + 8 = 13
        assert c_sum((5, 8), 1) == (1, 3)

    def test_zero(self):
        assert c_sum((0, 0), 1) == (0, 0)

    def test_two_digit(self):
        assert c_sum((5, 1, 8, 4), 2) == (1, 3, 5)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            c_sum((1, 2, 3), 1)

    @pytest.mark.parametrize("N", [1, 2, 4, 15])
    def test_batch_decodes_to_integer_sum(self, N):
        rng = np.random.default_rng(N)
        ws = rng.integers(0, 10, size=(100_000, 2 * N))
        ys = c_sum_batch(ws, N)
        if N <= 4:
            powers = 10 ** np.arange(N - 1, -1, -1)
            expected = ws[:, :N] @ powers + ws[:, N:] @ powers
            np.testing.assert_array_equal(ys @ (10 ** np.arange(N, -1, -1)), expected)
        for w, y in zip(ws[:200], ys[:200]):
            assert digits_to_int(y) == digits_to_int(w[:N]) + digits_to_int(w[N:])

    def test_long_numbers_use_python_ints(self):
        w = (9,) * 40
        assert c_sum_batch(np.array([w]), 20)[0].tolist() == list(c_sum(w, 20))

    def test_int_to_digits_overflow(self):
        with pytest.raises(ValueError):
            int_to_digits(100, 2)

    def test_task_spaces(self):
        t = AdditionTask(3)
        assert t.w_space.cards == (10,) * 6 and t.y_space.cards == (2, 10, 10, 10)
        assert t.output_value((1, 0, 4, 2)) == 1042


class TestMakeDataset:
    def test_fifteen_digit_size(self):
        # [PAPER] 60000 / 30 = 2000 sums
        assert len(make_dataset(15, 60000, seed=0)) == 2000

    def test_one_digit_size(self):
        # [PAPER] 60000 / 2 = 30000 sums
        assert len(make_dataset(1, 60000, seed=0)) == 30000

    def test_disjoint_and_labelled(self):
        ds = make_dataset(2, 1003, seed=3)
        assert len(ds) == 250
        flat = ds.indices.ravel()
        assert len(np.unique(flat)) == flat.size
        for d, y in ds:
            assert y == c_sum(d, 2)

    def test_pool_too_small(self):
        with pytest.raises(ValueError):
            make_dataset(3, 5)

    def test_seeded(self):
        a, b = make_dataset(1, 100, seed=7), make_dataset(1, 100, seed=7)
        np.testing.assert_array_equal(a.digits, b.digits)

    def test_proportions(self):
        ds = make_dataset(1, 1000, seed=0, proportions=[0] * 9 + [1])
        assert np.all(ds.digits == 9)


class TestSyntheticDigits:
    def test_noiseless_features_are_one_hot(self):
        cfg = SyntheticDigitConfig(feature_dim=12)
        f = synth_perceive(7, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(f, np.eye(12)[7])

    def test_effective_flip_rate(self):
        cfg = SyntheticDigitConfig(flip_rate=0.01)
        assert cfg.reference_digit_accuracy() == pytest.approx(0.991)

    def test_empirical_flip_rate(self):
        cfg = SyntheticDigitConfig(flip_rate=0.2)
        labels = np.random.default_rng(0).integers(0, 10, 200_000)
        feats = synth_features(labels, cfg, np.random.default_rng(1))
        agree = np.mean(feats[:, :10].argmax(axis=1) == labels)
        se = np.sqrt(0.18 * 0.82 / labels.size)
        assert abs(agree - 0.82) < 3 * se

    def test_seeded(self):
        cfg = SyntheticDigitConfig(noise_std=0.3, flip_rate=0.1)
        a = synth_features(np.arange(10), cfg, np.random.default_rng(5))
        b = synth_features(np.arange(10), cfg, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_invalid(self):
        with pytest.raises(ValueError):
            SyntheticDigitConfig(flip_rate=0.5)
        with pytest.raises(ValueError):
            synth_perceive(10, SyntheticDigitConfig(), np.random.default_rng(0))

    def test_dataset_inputs(self):
        ds = synthetic_addition(2, 400, SyntheticDigitConfig(feature_dim=16, seed=2))
        x = ds.inputs(np.arange(5))
        assert x.shape == (5, 4, 16)
        np.testing.assert_array_equal(x[..., :10].argmax(axis=2), ds.digits[:5])


class TestIdx:
    def _fixture(self, tmp_path, n_images=2, n_labels=2):
        images = np.arange(n_images * 28 * 28, dtype=np.uint8).reshape(n_images, 28, 28)
        write_idx(tmp_path / "img", images)
        write_idx(tmp_path / "lab", np.arange(n_labels, dtype=np.uint8) % 10)
        return images

    def test_well_formed(self, tmp_path):
        images = self._fixture(tmp_path)
        data = load_idx(tmp_path / "img", tmp_path / "lab")
        assert len(data) == 2
        np.testing.assert_array_equal(data.images, images)
        np.testing.assert_array_equal(data.labels, [0, 1])

    def test_header_bytes(self, tmp_path):
        self._fixture(tmp_path)
        raw = (tmp_path / "img").read_bytes()
        assert raw[:4] == bytes([0, 0, 8, 3])
        assert raw[4:8] == (2).to_bytes(4, "big")

    def test_bad_magic(self, tmp_path):
        self._fixture(tmp_path)
        raw = bytearray((tmp_path / "img").read_bytes())
        raw[:4] = bytes(4)
        (tmp_path / "img").write_bytes(bytes(raw))
        with pytest.raises(IdxBadMagic, match="bad magic"):
            load_idx(tmp_path / "img", tmp_path / "lab")

    def test_truncated(self, tmp_path):
        self._fixture(tmp_path)
        (tmp_path / "img").write_bytes((tmp_path / "img").read_bytes()[:-10])
        with pytest.raises(IdxTruncated):
            load_idx(tmp_path / "img", tmp_path / "lab")

    def test_count_mismatch(self, tmp_path):
        self._fixture(tmp_path, n_labels=3)
        with pytest.raises(IdxCountMismatch, match="count mismatch"):
            load_idx(tmp_path / "img", tmp_path / "lab")

    def test_addition_from_idx(self, tmp_path):
        self._fixture(tmp_path, n_images=4, n_labels=4)
        ds = idx_addition(1, load_idx(tmp_path / "img", tmp_path / "lab"))
        assert len(ds) == 2 and ds.inputs([0]).shape == (1, 2, 784)
        assert ds.inputs([0]).max() <= 1.0


class TestBooleanTasks:
    def test_disjunction_truth_table(self):
        c = boolean_constraint_task(2)
        assert c((0, 0)) == (0,) and c((1, 0)) == (1,)

    def test_conjunction_uniform(self):
        c = boolean_constraint_task(3, "conjunction")
        assert exact_wmc(Belief.uniform(c.w_space), c, (1,)) == pytest.approx(1 / 8)

    def test_invalid(self):
        with pytest.raises(ValueError):
            boolean_constraint_task(21)
        with pytest.raises(ValueError):
            boolean_constraint_task(2, "xor")
