import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actmon.abstraction import (
    ZERO_SIGMA_TOL,
    GaussianAbstraction,
    StatsTable,
    fit,
    outside_fraction,
    outside_fractions,
    percentage_check,
)
from actmon.traces import TraceDataset


def dataset_from(matrix, labels=None):
    matrix = np.asarray(matrix, dtype=np.float32)
    return TraceDataset(
        np.arange(len(matrix), dtype=np.uint64),
        matrix,
        None if labels is None else np.array(labels, dtype=np.int32),
    )


def unit_abstraction(n=4, width=2.0):
    """All means 0, all deviations 1."""
    return GaussianAbstraction(
        mode="class_agnostic",
        width_multiplier=width,
        table=StatsTable(np.zeros(n), np.ones(n)),
        class_tables=None,
        monitored=np.arange(n),
    )


class TestFit:
    def test_three_sample_neuron(self):
        ab = fit(dataset_from([[1.0], [2.0], [3.0]]))
        assert ab.table.mean[0] == pytest.approx(2.0)
        assert ab.table.std[0] == pytest.approx(1.0)  # variance (1+0+1)/2

    def test_constant_neuron(self):
        ab = fit(dataset_from([[5.0], [5.0], [5.0]]))
        assert ab.table.mean[0] == 5.0
        assert ab.table.std[0] == 0.0

    def test_default_width_is_two(self):
        ab = fit(dataset_from([[1.0], [2.0], [3.0]]))
        assert ab.width_multiplier == 2.0

    def test_needs_two_records(self):
        with pytest.raises(ValueError, match="2 records"):
            fit(dataset_from([[1.0]]))

    def test_per_class_requires_labels(self):
        with pytest.raises(ValueError, match="label"):
            fit(dataset_from([[1.0], [2.0]]), mode="per_class")

    def test_per_class_requires_all_labeled(self):
        ds = dataset_from([[1.0], [2.0], [3.0]], labels=[0, -1, 0])
        with pytest.raises(ValueError, match="label"):
            fit(ds, mode="per_class")

    def test_per_class_small_class_rejected(self):
        ds = dataset_from([[1.0], [2.0], [3.0]], labels=[0, 0, 1])
        with pytest.raises(ValueError, match="class 1"):
            fit(ds, mode="per_class")

    def test_per_class_single_class_equals_agnostic(self):
        rng = np.random.default_rng(3)
        ds = dataset_from(rng.normal(size=(20, 5)), labels=[7] * 20)
        per = fit(ds, mode="per_class")
        agn = fit(ds, mode="class_agnostic")
        assert per.class_tables[7] == agn.table

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        data = rng.normal(size=(12, 4)).astype(np.float32)
        ds = dataset_from(data)
        perm = rng.permutation(12)
        shuffled = TraceDataset(ds.sample_ids[perm], data[perm])
        assert fit(ds).table == fit(shuffled).table


class TestOutsideFraction:
    def test_hand_case_half_outside(self):
        # bounds are [-2, 2]; 3.0 and -2.5 fall outside
        ab = unit_abstraction(4, width=2.0)
        x = np.array([0.5, 3.0, -2.5, 1.0])
        assert outside_fraction(ab, x) == 0.5

    def test_all_at_mean(self):
        ab = unit_abstraction(4)
        assert outside_fraction(ab, np.zeros(4)) == 0.0

    def test_closed_boundary_counts_inside(self):
        ab = unit_abstraction(4, width=2.0)
        assert outside_fraction(ab, np.full(4, 2.0)) == 0.0

    def test_just_past_boundary_is_outside(self):
        ab = unit_abstraction(4, width=2.0)
        assert outside_fraction(ab, np.full(4, np.nextafter(2.0, 3.0))) == 1.0

    def test_zero_sigma_tolerance(self):
        ab = GaussianAbstraction(
            "class_agnostic", 2.0, StatsTable(np.array([5.0]), np.array([0.0])), None, np.array([0])
        )
        assert outside_fraction(ab, np.array([5.0])) == 0.0
        assert outside_fraction(ab, np.array([5.0 + ZERO_SIGMA_TOL / 2])) == 0.0
        assert outside_fraction(ab, np.array([5.0 + 1e-6])) == 1.0

    def test_monitored_subset(self):
        ab = GaussianAbstraction(
            "class_agnostic",
            2.0,
            StatsTable(np.zeros(4), np.ones(4)),
            None,
            monitored=np.array([1, 3]),
        )
        # neuron 0 is wildly off but unmonitored
        assert outside_fraction(ab, np.array([99.0, 0.0, 99.0, 0.0])) == 0.0
        assert outside_fraction(ab, np.array([0.0, 99.0, 0.0, 0.0])) == 0.5

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            outside_fraction(unit_abstraction(4), np.zeros(5))

    def test_nonfinite_vector_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            outside_fraction(unit_abstraction(4), np.array([0.0, np.nan, 0.0, 0.0]))

    def test_per_class_label_required(self):
        ds = dataset_from([[1.0], [2.0], [1.5], [2.5]], labels=[0, 0, 1, 1])
        ab = fit(ds, mode="per_class")
        with pytest.raises(ValueError, match="label"):
            outside_fraction(ab, np.array([1.5]))
        with pytest.raises(ValueError, match="unknown class"):
            outside_fraction(ab, np.array([1.5]), class_label=9)
        assert outside_fraction(ab, np.array([1.5]), class_label=0) == 0.0

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 4.0), st.floats(0.1, 4.0))
    @settings(max_examples=40, deadline=None)
    def test_monotone_nonincreasing_in_width(self, seed, w1, w2):
        lo, hi = sorted((w1, w2))
        rng = np.random.default_rng(seed)
        data = rng.normal(size=(10, 6)).astype(np.float32)
        ds = dataset_from(data)
        x = rng.normal(size=6)
        narrow = fit(ds, width_multiplier=lo)
        wide = fit(ds, width_multiplier=hi)
        assert outside_fraction(wide, x) <= outside_fraction(narrow, x)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_fraction_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        ds = dataset_from(rng.normal(size=(8, 3)).astype(np.float32))
        ab = fit(ds)
        frac = outside_fraction(ab, rng.normal(scale=5.0, size=3))
        assert 0.0 <= frac <= 1.0


class TestBatchScoring:
    def test_batch_matches_single(self):
        rng = np.random.default_rng(4)
        ds = dataset_from(rng.normal(size=(30, 5)))
        ab = fit(ds)
        probe = dataset_from(rng.normal(scale=2.0, size=(10, 5)))
        batch = outside_fractions(ab, probe)
        single = [outside_fraction(ab, rec.activations) for rec in probe]
        assert np.array_equal(batch, np.array(single))

    def test_per_class_batch_uses_record_labels(self):
        rng = np.random.default_rng(5)
        lows = rng.normal(0.0, 0.1, size=(10, 3))
        highs = rng.normal(50.0, 0.1, size=(10, 3))
        ds = dataset_from(np.vstack([lows, highs]), labels=[0] * 10 + [1] * 10)
        ab = fit(ds, mode="per_class")
        scores = outside_fractions(ab, ds)
        assert scores.max() <= 0.4  # each record near its own class table


class TestCoverage:
    def test_two_sigma_gaussian_mass(self):
        # k=2 keeps ~95.45% of fresh per-neuron Gaussian samples inside
        rng = np.random.default_rng(2718)
        mu = rng.uniform(-3, 3, size=32)
        sd = rng.uniform(0.5, 2.0, size=32)
        train = dataset_from(rng.normal(mu, sd, size=(4000, 32)))
        ab = fit(train, width_multiplier=2.0)
        fresh = dataset_from(rng.normal(mu, sd, size=(4000, 32)))
        inside_rate = 1.0 - outside_fractions(ab, fresh).mean()
        assert abs(inside_rate - 0.9545) < 0.01


class TestPercentageCheck:
    def test_half_outside_against_lower_bar(self):
        ab = unit_abstraction(4)
        x = np.array([0.5, 3.0, -2.5, 1.0])  # inside fraction 0.5
        assert percentage_check(ab, x, min_inside_fraction=0.4)
        assert not percentage_check(ab, x, min_inside_fraction=0.6)

    def test_threshold_one_recovers_strict_condition(self):
        ab = unit_abstraction(3)
        assert percentage_check(ab, np.array([0.0, 1.0, -1.9]), min_inside_fraction=1.0)
        assert not percentage_check(ab, np.array([0.0, 1.0, 2.1]), min_inside_fraction=1.0)

    def test_threshold_zero_vacuous(self):
        ab = unit_abstraction(3)
        assert percentage_check(ab, np.array([99.0, -99.0, 50.0]), min_inside_fraction=0.0)

    def test_threshold_validated(self):
        with pytest.raises(ValueError, match="min_inside_fraction"):
            percentage_check(unit_abstraction(2), np.zeros(2), min_inside_fraction=1.5)
