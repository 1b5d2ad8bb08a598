"""Dataset loading, toy generation, splitting, windowing, normalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuselab.data import (
    AlignmentError,
    DataError,
    DatasetSchema,
    InsufficientDataError,
    MultimodalDataset,
    SplitSpec,
    chronological_split,
    default_window_policy,
    fit_normalizer,
    generate_toy_dataset,
    load_dataset,
    make_windows,
    prepare_splits,
    read_embeddings,
    substitute_irrelevant_text,
    write_embeddings,
)


def _dataset(t=30, c=1, d=4, labels=False, name="unit"):
    rng = np.random.default_rng(0)
    return MultimodalDataset(
        name=name,
        frequency="toy",
        series=rng.normal(size=(t, c)),
        text_embeddings=rng.normal(size=(t, d)),
        text_labels=np.array(["matching"] * t) if labels else None,
    )


class TestLoading:
    def test_minimal_csv_roundtrip(self, tmp_path):
        series = tmp_path / "series.csv"
        series.write_text(
            "date,value\n2020-01-01,1.5\n2020-01-02,2.5\n2020-01-03,3.5\n"
        )
        emb = tmp_path / "emb.csv"
        write_embeddings(emb, np.arange(12.0).reshape(3, 4))
        ds = load_dataset(series, DatasetSchema(frequency="monthly", embeddings=emb))
        assert ds.length == 3 and ds.channels == 1 and ds.text_dim == 4
        np.testing.assert_array_equal(ds.series[:, 0], [1.5, 2.5, 3.5])

    def test_row_count_mismatch_is_alignment_error(self, tmp_path):
        series = tmp_path / "series.csv"
        rows = "\n".join(f"2020-01-{i + 1:02d},{i}" for i in range(28))
        series.write_text("date,value\n" + rows + "\n")
        emb = tmp_path / "emb.bin"
        write_embeddings(emb, np.zeros((27, 4)))
        with pytest.raises(AlignmentError):
            load_dataset(series, DatasetSchema(frequency="monthly", embeddings=emb))

    def test_non_finite_value_reports_row(self, tmp_path):
        series = tmp_path / "series.csv"
        series.write_text("date,value\n2020-01-01,1.0\n2020-01-02,nan\n")
        emb = tmp_path / "emb.bin"
        write_embeddings(emb, np.zeros((2, 4)))
        with pytest.raises(DataError, match="row 2"):
            load_dataset(series, DatasetSchema(frequency="monthly", embeddings=emb))

    def test_multichannel_monthly(self, tmp_path):
        series = tmp_path / "climate.csv"
        header = "date," + ",".join(f"c{i}" for i in range(5))
        rows = "\n".join(
            f"1983-{m:02d}-01," + ",".join(str(m * 0.1 + i) for i in range(5))
            for m in range(1, 13)
        )
        series.write_text(header + "\n" + rows + "\n")
        emb = tmp_path / "emb.bin"
        write_embeddings(emb, np.ones((12, 8)))
        ds = load_dataset(series, DatasetSchema(frequency="monthly", embeddings=emb))
        assert ds.channels == 5

    def test_binary_embeddings_bit_exact(self, tmp_path):
        arr = np.random.default_rng(3).normal(size=(17, 9))
        path = tmp_path / "emb.bin"
        write_embeddings(path, arr)
        back = read_embeddings(path)
        assert np.array_equal(arr, back)

    def test_timestamps_must_increase(self):
        with pytest.raises(DataError, match="strictly increasing"):
            MultimodalDataset(
                name="bad",
                frequency="monthly",
                series=np.zeros((2, 1)),
                text_embeddings=np.zeros((2, 2)),
                timestamps=["2020-01-02", "2020-01-01"],
            )


class TestToyGenerator:
    def test_label_counts_in_binomial_interval(self):
        ds = generate_toy_dataset(seed=0, n=1000)
        assert ds.length == 1000
        for label in ("matching", "contradicting", "irrelevant"):
            count = int(np.sum(ds.text_labels == label))
            assert 283 <= count <= 383, f"{label}: {count}"

    def test_same_seed_bit_identical(self):
        a = generate_toy_dataset(seed=5, n=100)
        b = generate_toy_dataset(seed=5, n=100)
        assert np.array_equal(a.series, b.series)
        assert np.array_equal(a.text_embeddings, b.text_embeddings)
        assert np.array_equal(a.text_labels, b.text_labels)

    def test_split_segment_lengths(self):
        ds = generate_toy_dataset(seed=0, n=1000)
        train, val, test = chronological_split(ds, SplitSpec())
        assert (train.length, val.length, test.length) == (700, 100, 200)

    def test_label_proportions_uniform_chi_square(self):
        # pooled over 10 seeds; chi-square df=2 critical value at alpha=0.01
        counts = np.zeros(3)
        for seed in range(10):
            ds = generate_toy_dataset(seed=seed, n=1000)
            for i, label in enumerate(("matching", "contradicting", "irrelevant")):
                counts[i] += np.sum(ds.text_labels == label)
        expected = counts.sum() / 3
        stat = float(np.sum((counts - expected) ** 2 / expected))
        assert stat < 9.21, f"chi-square {stat}"

    def test_minimum_size_enforced(self):
        with pytest.raises(DataError):
            generate_toy_dataset(seed=0, n=10)


class TestSplit:
    def test_exact_arithmetic_small(self):
        ds = _dataset(t=30)
        parts = chronological_split(ds.slice(0, 10), SplitSpec())
        assert [p.length for p in parts] == [7, 1, 2]

    def test_monthly_496_floor_rule(self):
        ds = _dataset(t=496)
        parts = chronological_split(ds, SplitSpec())
        assert [p.length for p in parts] == [347, 49, 100]

    def test_empty_test_segment_raises_when_windows_needed(self):
        ds = _dataset(t=40)
        with pytest.raises(InsufficientDataError):
            chronological_split(ds, SplitSpec(ratios=(0.5, 0.5, 0.0)), min_length=5)

    def test_segments_are_contiguous_and_ordered(self):
        ds = _dataset(t=50)
        train, val, test = chronological_split(ds, SplitSpec())
        joined = np.concatenate([train.series, val.series, test.series])
        assert np.array_equal(joined, ds.series)

    def test_bad_ratios_rejected(self):
        with pytest.raises(DataError):
            SplitSpec(ratios=(0.5, 0.2, 0.2))


class TestWindows:
    def test_window_count(self):
        ds = _dataset(t=10)
        batch = make_windows(ds, lookback=3, horizon=2)
        assert batch.count == 6

    def test_toy_policy_window_span(self):
        lookback, horizons = default_window_policy("toy")
        assert (lookback, horizons) == (8, (8,))
        ds = generate_toy_dataset(seed=1, n=100)
        batch = make_windows(ds, lookback, horizons[0])
        assert batch.x.shape[1] + batch.y.shape[1] == 16

    def test_full_stride_single_window(self):
        ds = _dataset(t=10)
        batch = make_windows(ds, lookback=3, horizon=2, stride=10)
        assert batch.count == 1

    def test_too_short_raises(self):
        ds = _dataset(t=4)
        with pytest.raises(InsufficientDataError):
            make_windows(ds, lookback=3, horizon=2)

    def test_targets_strictly_after_inputs(self):
        ds = _dataset(t=12)
        batch = make_windows(ds, lookback=3, horizon=2)
        for i in range(batch.count):
            np.testing.assert_array_equal(batch.x[i], ds.series[i : i + 3])
            np.testing.assert_array_equal(batch.y[i], ds.series[i + 3 : i + 5])

    def test_window_label_is_last_lookback_step(self):
        ds = generate_toy_dataset(seed=2, n=60)
        batch = make_windows(ds, 8, 8)
        for i in range(batch.count):
            assert batch.labels[i] == ds.text_labels[i + 7]

    def test_no_leakage_across_split_boundaries(self):
        ds = generate_toy_dataset(seed=3, n=200)
        splits = prepare_splits(ds, 8, 8)
        # val/test windows come only from their own segments by construction;
        # verify the values match the raw segments after normalization
        train_d, val_d, test_d = chronological_split(ds, SplitSpec(), min_length=16)
        norm = splits.normalizer
        np.testing.assert_allclose(
            splits.val.x[0], norm.apply(val_d.series[:8]), rtol=0, atol=0
        )
        np.testing.assert_allclose(
            splits.test.x[0], norm.apply(test_d.series[:8]), rtol=0, atol=0
        )


class TestNormalizer:
    def test_two_point_channel(self):
        from fuselab.data import WindowBatch

        batch = WindowBatch(
            x=np.array([[[1.0]]]), y=np.array([[[3.0]]]), z_text_raw=np.zeros((1, 1, 2))
        )
        norm = fit_normalizer(batch)
        np.testing.assert_allclose(norm.mean, [2.0])
        np.testing.assert_allclose(norm.std, [1.0])
        np.testing.assert_allclose(norm.apply(np.array([1.0, 3.0])[:, None])[:, 0], [-1.0, 1.0])

    def test_constant_channel_floored_with_warning(self):
        batch = make_windows(_dataset(t=8), 2, 1)
        batch.x[:] = 5.0
        batch.y[:] = 5.0
        norm = fit_normalizer(batch)
        assert norm.warnings and "constant" in norm.warnings[0]
        np.testing.assert_array_equal(norm.apply(batch.x), np.zeros_like(batch.x))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_roundtrip_property(self, seed):
        rng = np.random.default_rng(seed)
        arr = rng.normal(loc=rng.uniform(-5, 5), scale=rng.uniform(0.1, 10), size=(6, 4, 3))
        batch_x = arr[:, :3, :]
        batch_y = arr[:, 3:, :]
        from fuselab.data import WindowBatch

        norm = fit_normalizer(WindowBatch(x=batch_x, y=batch_y, z_text_raw=np.zeros((6, 3, 2))))
        back = norm.invert(norm.apply(arr))
        assert np.max(np.abs(back - arr)) < 1e-10


class TestSubstitution:
    def test_series_untouched_bit_exact(self):
        target = _dataset(t=40, d=6, name="target")
        donor = _dataset(t=25, d=6, name="donor")
        out = substitute_irrelevant_text(target, [donor], seed=0)
        assert np.array_equal(out.series, target.series)

    def test_rows_come_from_donor_pool(self):
        target = _dataset(t=40, d=6, name="target")
        donors = [_dataset(t=25, d=6, name="a"), _dataset(t=30, d=6, name="b")]
        pool = np.concatenate([d.text_embeddings for d in donors])
        out = substitute_irrelevant_text(target, donors, seed=1)
        for row in out.text_embeddings:
            assert any(np.array_equal(row, p) for p in pool)

    def test_deterministic_given_seed(self):
        target = _dataset(t=40, d=6)
        donor = _dataset(t=25, d=6, name="donor")
        a = substitute_irrelevant_text(target, [donor], seed=7)
        b = substitute_irrelevant_text(target, [donor], seed=7)
        assert np.array_equal(a.text_embeddings, b.text_embeddings)

    def test_dimension_mismatch(self):
        target = _dataset(t=40, d=6)
        donor = _dataset(t=25, d=5, name="donor")
        with pytest.raises(AlignmentError):
            substitute_irrelevant_text(target, [donor], seed=0)

    def test_empty_donor_list(self):
        with pytest.raises(DataError):
            substitute_irrelevant_text(_dataset(), [], seed=0)
