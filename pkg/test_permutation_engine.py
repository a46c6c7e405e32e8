#!/usr/bin/env python3
"""
Exact and Monte Carlo Shapley allocation, prefix sampling and indicator moments.
"""
import numpy as np
import pytest

from api.models import EngineConfig
from engines.permutation import (
    ShapleyEngine, chunk_sizes, empirical_indicator_moments, exact_shapley, indicator_moments, mc_shapley,
    random_permutations, sample_prefix_masks, substream_rngs
)
from models.cost_functions import AdditiveCost, AdditiveMaxCost, additive_max_cost, nested_max_cost
from models.errors import EnumerationCapError

TABLE1_EXACT = [180.0, 217.5, 227.5, 560.0 / 3.0, 565.0 / 3.0]


def test_exact_shapley_of_additive_cost_is_identity():
    values = np.array([3.0, -1.0, 7.5, 0.25])
    estimate = exact_shapley(AdditiveCost(values))
    np.testing.assert_allclose(estimate.values, values, atol=1e-12)
    assert estimate.exact
    assert np.all(estimate.stderr == 0.0)


def test_exact_shapley_table1(table1):
    estimate = exact_shapley(additive_max_cost(table1))
    np.testing.assert_allclose(estimate.values, TABLE1_EXACT, rtol=1e-12)
    assert estimate.total == pytest.approx(1000.0, rel=1e-10)


def test_exact_shapley_table1_is_within_one_of_published_column(table1):
    published = np.array([179, 218, 228, 186, 188])
    rounded = np.round(exact_shapley(additive_max_cost(table1)).values)
    assert np.all(np.abs(rounded - published) <= 1)
    assert rounded[4] == published[4]


def test_exact_shapley_respects_cap():
    rng = np.random.default_rng(0)
    cost = AdditiveMaxCost(rng.uniform(size=11), rng.uniform(size=11))
    with pytest.raises(EnumerationCapError, match="--method mc"):
        exact_shapley(cost, cap=10)


def test_exact_shapley_is_efficient_for_nested_cost(two_entity):
    cost = nested_max_cost(two_entity)
    assert exact_shapley(cost).total == pytest.approx(cost.total(), rel=1e-10)


def test_mc_shapley_matches_exact(table1):
    cost = additive_max_cost(table1)
    estimate = mc_shapley(cost, 200_000, seed=42)
    assert estimate.samples == 200_000
    assert not estimate.exact
    assert np.all(np.abs(estimate.values - TABLE1_EXACT) <= 4.0 * estimate.stderr)
    # every permutation telescopes to c(all)
    assert estimate.total == pytest.approx(1000.0, rel=1e-10)


def test_mc_shapley_is_deterministic_across_worker_counts(table1):
    cost = additive_max_cost(table1)
    serial = mc_shapley(cost, 25_000, seed=3, chunk_size=5_000, n_jobs=1)
    threaded = mc_shapley(cost, 25_000, seed=3, chunk_size=5_000, n_jobs=3)
    again = mc_shapley(cost, 25_000, seed=3, chunk_size=5_000, n_jobs=1)
    np.testing.assert_array_equal(serial.values, threaded.values)
    np.testing.assert_array_equal(serial.values, again.values)
    np.testing.assert_array_equal(serial.stderr, threaded.stderr)


def test_mc_shapley_rejects_zero_samples(table1):
    with pytest.raises(ValueError):
        mc_shapley(additive_max_cost(table1), 0, seed=1)


def test_chunk_sizes_and_substreams():
    assert chunk_sizes(25, 10) == [10, 10, 5]
    assert chunk_sizes(20, 10) == [10, 10]
    first = [rng.integers(1 << 30) for rng in substream_rngs(9, 3)]
    second = [rng.integers(1 << 30) for rng in substream_rngs(9, 3)]
    assert first == second
    assert len(set(first)) == 3


def test_random_permutations_are_permutations():
    perms = random_permutations(6, 50, np.random.default_rng(1))
    assert perms.shape == (50, 6)
    assert np.all(np.sort(perms, axis=1) == np.arange(6))


def test_prefix_masks_sizes():
    rng = np.random.default_rng(4)
    masks = sample_prefix_masks(5, 5_000, rng)
    sizes = masks.sum(axis=1)
    assert sizes.min() == 0 and sizes.max() == 5
    nonempty = sample_prefix_masks(5, 5_000, rng, include_empty=False)
    assert nonempty.sum(axis=1).min() == 1


def test_indicator_moments_closed_form():
    assert indicator_moments(7).as_tuple() == (0.5, 1.0 / 3.0, 1.0 / 12.0, 1.0 / 3.0)
    with pytest.raises(ValueError):
        indicator_moments(1)


def test_empirical_indicator_moments_agree():
    moments = empirical_indicator_moments(6, 100_000, seed=1)
    assert abs(moments.mean - 0.5) <= 4.0 * moments.mean_stderr
    assert abs(moments.second_moment - 1.0 / 3.0) <= 4.0 * moments.second_moment_stderr
    assert abs(moments.covariance - 1.0 / 12.0) <= 4.0 * moments.covariance_stderr
    assert moments.samples == 100_000


def test_engine_picks_exact_or_mc():
    engine = ShapleyEngine(EngineConfig(enumeration_cap=4, mc_samples=2_000))
    rng = np.random.default_rng(8)
    small = AdditiveMaxCost(rng.uniform(size=4), rng.uniform(size=4))
    large = AdditiveMaxCost(rng.uniform(size=6), rng.uniform(size=6))
    assert engine.estimate(small).exact
    estimate = engine.estimate(large, seed=2)
    assert not estimate.exact
    assert estimate.samples == 2_000


def test_duplicated_units_get_equal_shares():
    a = np.array([120.0, 120.0, 80.0, 200.0])
    b = np.array([90.0, 90.0, 150.0, 60.0])
    values = exact_shapley(AdditiveMaxCost(a, b)).values
    assert values[0] == pytest.approx(values[1], rel=1e-12)


def test_dummy_unit_gets_nothing(table1):
    a = np.append(table1.rwa, 0.0)
    b = np.append(table1.lbs, 0.0)
    cost = AdditiveMaxCost(a, b)
    assert exact_shapley(cost).values[-1] == pytest.approx(0.0, abs=1e-12)
    assert mc_shapley(cost, 5_000, seed=2).values[-1] == 0.0


def test_single_unit_takes_its_own_cost():
    estimate = exact_shapley(AdditiveMaxCost([4.0], [9.0]))
    np.testing.assert_array_equal(estimate.values, [9.0])


def test_mc_shapley_of_additive_cost_is_exact():
    estimate = mc_shapley(AdditiveCost([1.0, 2.0, 3.0]), 1_000, seed=17)
    np.testing.assert_allclose(estimate.values, [1.0, 2.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(estimate.stderr, 0.0, atol=1e-12)


def test_mc_stderr_shrinks_with_root_samples(table1):
    cost = additive_max_cost(table1)
    coarse = mc_shapley(cost, 10_000, seed=5)
    fine = mc_shapley(cost, 40_000, seed=5)
    ratio = coarse.stderr / fine.stderr
    np.testing.assert_allclose(ratio, 2.0, rtol=0.2)
