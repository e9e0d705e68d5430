"""Dataset pipeline: IDX parsing, downscaling, noise variants, containers."""

import struct

import numpy as np
import pytest
from scipy import stats as scipy_stats

from memoscope import data as mdata
from conftest import make_plain_dataset


def _write_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "imgs", tmp_path / "labs"
    mdata.write_idx_images(ip, images)
    mdata.write_idx_labels(lp, labels)
    return ip, lp


class TestIdxLoading:
    def test_two_image_fixture_round_trips(self, tmp_path):
        images = np.zeros((2, 28, 28), dtype=np.uint8)
        images[0, 3, 4] = 255
        images[1, 10, 11] = 51
        ip, lp = _write_pair(tmp_path, images, np.array([7, 2], dtype=np.uint8))
        ds = mdata.load_idx(ip, lp)
        assert len(ds) == 2
        assert ds.num_classes == 10
        assert ds.inputs[0, 3 * 28 + 4] == 1.0
        assert ds.inputs[1, 10 * 28 + 11] == pytest.approx(51 / 255)
        assert list(ds.true_labels) == [7, 2]
        assert list(ds.effective_labels) == [7, 2]

    def test_magic_constants(self, tmp_path):
        ip, lp = _write_pair(tmp_path, np.zeros((1, 4, 4), np.uint8), np.zeros(1, np.uint8))
        assert struct.unpack(">I", ip.read_bytes()[:4])[0] == 0x00000803
        assert struct.unpack(">I", lp.read_bytes()[:4])[0] == 0x00000801
        mdata.load_idx(ip, lp)  # accepted

    def test_bad_magic_rejected(self, tmp_path):
        ip, lp = _write_pair(tmp_path, np.zeros((1, 4, 4), np.uint8), np.zeros(1, np.uint8))
        raw = bytearray(ip.read_bytes())
        raw[3] = 0x99
        ip.write_bytes(bytes(raw))
        with pytest.raises(mdata.FormatError, match="magic"):
            mdata.load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, _ = _write_pair(tmp_path, np.zeros((3, 4, 4), np.uint8), np.zeros(3, np.uint8))
        lp = tmp_path / "labs2"
        mdata.write_idx_labels(lp, np.zeros(2, np.uint8))
        with pytest.raises(mdata.ConsistencyError, match="3 images vs 2 labels"):
            mdata.load_idx(ip, lp)

    def test_label_ten_rejected(self, tmp_path):
        ip, lp = _write_pair(tmp_path, np.zeros((1, 4, 4), np.uint8),
                             np.array([10], dtype=np.uint8))
        with pytest.raises(mdata.ConsistencyError, match="label 10"):
            mdata.load_idx(ip, lp)

    def test_truncated_payload(self, tmp_path):
        ip, lp = _write_pair(tmp_path, np.zeros((2, 4, 4), np.uint8), np.zeros(2, np.uint8))
        ip.write_bytes(ip.read_bytes()[:-5])
        with pytest.raises(IOError, match="truncated"):
            mdata.load_idx(ip, lp)


class TestDownscale:
    def _dataset_from_images(self, tmp_path, images, labels):
        ip, lp = _write_pair(tmp_path, images, labels)
        return mdata.load_idx(ip, lp)

    def test_constant_image_stays_constant(self, tmp_path):
        images = np.full((1, 28, 28), 102, dtype=np.uint8)
        ds = mdata.downscale(self._dataset_from_images(tmp_path, images, np.zeros(1, np.uint8)))
        assert ds.image_shape == (14, 14)
        assert np.allclose(ds.inputs, 102 / 255)

    def test_checkerboard_becomes_half(self, tmp_path):
        img = np.indices((28, 28)).sum(axis=0) % 2 * 255
        ds = mdata.downscale(
            self._dataset_from_images(tmp_path, img[None].astype(np.uint8), np.zeros(1, np.uint8)))
        assert np.allclose(ds.inputs, 0.5)

    def test_global_mean_preserved(self, train28):
        down = mdata.downscale(train28)
        assert down.inputs.mean() == pytest.approx(train28.inputs.mean(), abs=1e-14)

    def test_wrong_shape_rejected(self):
        ds = make_plain_dataset(np.zeros((2, 16)), [0, 1], 2, image_shape=(4, 4))
        with pytest.raises(mdata.ShapeError, match="28x28"):
            mdata.downscale(ds)


def _big_random_dataset(n=10_000, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    inputs = rng.uniform(0.0, 1.0, size=(n, dim)) ** 2  # skewed, non-Gaussian
    labels = rng.integers(0, 10, size=n)
    return make_plain_dataset(inputs, labels, num_classes=10, image_shape=(4, 4))


class TestInputNoise:
    def test_fraction_zero_is_identity(self, tiny_dataset):
        out = mdata.inject_input_noise(tiny_dataset, 0.0, seed=4)
        assert mdata.datasets_equal(out, tiny_dataset)

    def test_does_not_mutate_input(self, tiny_dataset):
        before = tiny_dataset.inputs.copy()
        mdata.inject_input_noise(tiny_dataset, 0.5, seed=4)
        assert np.array_equal(tiny_dataset.inputs, before)
        assert not tiny_dataset.input_noised.any()

    def test_full_noise_matches_source_stats(self):
        ds = _big_random_dataset()
        noised = mdata.inject_input_noise(ds, 1.0, seed=1)
        mean, var = ds.source_stats
        assert noised.inputs.mean() == pytest.approx(mean, rel=0.02)
        assert noised.inputs.var() == pytest.approx(var, rel=0.02)
        # originals are retained for audit and stats keep reporting the clean data
        assert np.array_equal(noised.original_inputs, ds.inputs)
        assert noised.source_stats == pytest.approx(ds.source_stats, rel=1e-12)

    def test_same_seed_same_dataset(self, tiny_dataset):
        a = mdata.inject_input_noise(tiny_dataset, 0.5, seed=123)
        b = mdata.inject_input_noise(tiny_dataset, 0.5, seed=123)
        assert mdata.datasets_equal(a, b)
        c = mdata.inject_input_noise(tiny_dataset, 0.5, seed=124)
        assert not mdata.datasets_equal(a, c)

    @pytest.mark.parametrize("fraction", [0.1, 0.337, 0.5, 0.999])
    def test_flag_count_is_floor(self, fraction):
        ds = _big_random_dataset(n=1000)
        noised = mdata.inject_input_noise(ds, fraction, seed=9)
        assert noised.input_noised.sum() == int(np.floor(fraction * 1000))

    def test_replacement_pixels_independent_of_example_index(self):
        # chi-squared: value-quartile histograms should not depend on index block
        ds = _big_random_dataset(n=10_000)
        noised = mdata.inject_input_noise(ds, 1.0, seed=2)
        values = noised.inputs
        edges = np.quantile(values, [0.25, 0.5, 0.75])
        bins = np.digitize(values, edges)
        blocks = bins.reshape(10, 1000 * values.shape[1])
        table = np.stack([np.bincount(b, minlength=4) for b in blocks])
        _, p, _, _ = scipy_stats.chi2_contingency(table)
        assert p > 0.01

    def test_record_view_exposes_original(self, tiny_dataset):
        noised = mdata.inject_input_noise(tiny_dataset, 1.0, seed=3)
        rec = noised.record(0)
        assert rec.input_noised
        assert np.array_equal(rec.original_input, tiny_dataset.inputs[0])


class TestLabelNoise:
    def test_fraction_zero_is_identity(self, tiny_dataset):
        assert mdata.datasets_equal(mdata.inject_label_noise(tiny_dataset, 0.0, 7), tiny_dataset)

    def test_full_noise_agreement_rate_near_uniform(self):
        ds = _big_random_dataset(n=10_000)
        noised = mdata.inject_label_noise(ds, 1.0, seed=6)
        agree = (noised.effective_labels == noised.true_labels).mean()
        assert abs(agree - 0.1) < 0.02
        assert noised.label_noised.all()
        assert np.array_equal(noised.true_labels, ds.true_labels)

    def test_flag_count_exact(self):
        ds = _big_random_dataset(n=1000)
        noised = mdata.inject_label_noise(ds, 0.337, seed=6)
        assert noised.label_noised.sum() == 337

    def test_unflagged_labels_untouched(self):
        ds = _big_random_dataset(n=500)
        noised = mdata.inject_label_noise(ds, 0.4, seed=8)
        untouched = ~noised.label_noised
        assert np.array_equal(noised.effective_labels[untouched], ds.true_labels[untouched])


class TestUniqueClassLabels:
    def test_definition(self, tiny_dataset):
        three = mdata.subset(tiny_dataset, 3, seed=0)
        out = mdata.unique_class_labels(three)
        assert out.num_classes == 3
        assert list(out.effective_labels) == [0, 1, 2]

    def test_idempotent(self, tiny_dataset):
        once = mdata.unique_class_labels(tiny_dataset)
        twice = mdata.unique_class_labels(once)
        assert mdata.datasets_equal(once, twice)

    def test_composes_with_full_input_noise(self, tiny_dataset):
        out = mdata.inject_input_noise(mdata.unique_class_labels(tiny_dataset), 1.0, seed=2)
        assert out.num_classes == len(out)
        assert out.input_noised.all()
        assert list(out.effective_labels) == list(range(len(out)))


class TestSubset:
    def test_full_subset_is_permutation(self, tiny_dataset):
        out = mdata.subset(tiny_dataset, len(tiny_dataset), seed=1)
        assert sorted(out.indices) == list(range(len(tiny_dataset)))

    def test_thousand_from_clean_corpus_is_stratified(self, train14):
        out = mdata.subset(train14, 1000, seed=5)
        counts = out.class_counts()
        assert counts.min() >= 99 and counts.max() <= 101

    def test_same_seed_same_subset(self, train14):
        a = mdata.subset(train14, 50, seed=3)
        b = mdata.subset(train14, 50, seed=3)
        assert mdata.datasets_equal(a, b)

    def test_oversized_request_rejected(self, tiny_dataset):
        with pytest.raises(ValueError, match="cannot take"):
            mdata.subset(tiny_dataset, 13, seed=0)

    def test_noised_labels_fall_back_to_uniform_sampling(self, tiny_dataset):
        noised = mdata.inject_label_noise(tiny_dataset, 1.0, seed=0)
        out = mdata.subset(noised, 6, seed=1)
        assert len(out) == 6  # no stratification guarantee, but valid


class TestContainer:
    def test_round_trip_clean(self, tiny_dataset, tmp_path):
        path = tmp_path / "snap.msd"
        mdata.save_dataset(path, tiny_dataset)
        assert mdata.datasets_equal(mdata.load_dataset(path), tiny_dataset)

    def test_round_trip_noised(self, tiny_dataset, tmp_path):
        noised = mdata.inject_label_noise(
            mdata.inject_input_noise(tiny_dataset, 0.5, seed=1), 0.25, seed=2)
        path = tmp_path / "snap.msd"
        mdata.save_dataset(path, noised)
        assert mdata.datasets_equal(mdata.load_dataset(path), noised)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(mdata.FormatError):
            mdata.load_dataset(path)

    def test_trailing_garbage(self, tiny_dataset, tmp_path):
        path = tmp_path / "snap.msd"
        mdata.save_dataset(path, tiny_dataset)
        path.write_bytes(path.read_bytes() + b"zz")
        with pytest.raises(mdata.FormatError, match="trailing"):
            mdata.load_dataset(path)


class TestInvariants:
    def test_unflagged_label_mismatch_rejected(self):
        with pytest.raises(mdata.ConsistencyError):
            mdata.Dataset(
                inputs=np.zeros((2, 4)), true_labels=[0, 1], effective_labels=[1, 1],
                input_noised=[False, False], label_noised=[False, False],
                num_classes=2, image_shape=(4,))

    def test_label_range_enforced(self):
        with pytest.raises(mdata.ConsistencyError):
            make_plain_dataset(np.zeros((2, 4)), [0, 5], num_classes=3)

    def test_synth_corpus_loads_cleanly(self, train28, val28):
        assert train28.image_shape == (28, 28)
        assert len(val28) > 0
        assert train28.inputs.min() >= 0.0 and train28.inputs.max() <= 1.0
        counts = train28.class_counts()
        assert counts.min() > 0
