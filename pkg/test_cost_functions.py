#!/usr/bin/env python3
"""
Subset cost functions: max, nested max, VaR and the linearized cost.
"""
import itertools

import numpy as np
import pandas as pd
import pytest

from models.cost_functions import (
    AdditiveMaxCost, LinearizedCost, NestedMaxCost, SetCost, VarCost, additive_cost, additive_max_cost,
    linearized_cost, load_pnl_csv, nested_max_cost, quantile_rank, random_pnl, ranks_of, subset_mask, var_cost
)
from models.errors import PortfolioValidationError


def all_masks(n):
    return [np.array(bits, dtype=bool) for bits in itertools.product([False, True], repeat=n)]


def test_additive_max_on_table1(table1):
    cost = additive_max_cost(table1)
    assert cost.total() == 1000.0
    assert cost([0]) == 230.0
    assert cost([]) == 0.0
    assert cost([1, 2]) == 500.0


def test_subset_mask_accepts_indices_and_masks():
    np.testing.assert_array_equal(subset_mask([0, 2], 3), [True, False, True])
    np.testing.assert_array_equal(subset_mask(np.array([False, True, False]), 3), [False, True, False])
    with pytest.raises(ValueError):
        subset_mask(np.array([True, False]), 3)


def test_ranks_invert_permutations():
    perms = np.array([[2, 0, 1], [1, 2, 0]])
    ranks = ranks_of(perms)
    for perm, rank in zip(perms, ranks):
        np.testing.assert_array_equal(rank[perm], [0, 1, 2])


def test_all_subset_costs_indexed_by_bitmask(table1):
    cost = additive_max_cost(table1)
    costs = cost.all_subset_costs()
    for code in range(2 ** cost.n):
        members = [k for k in range(cost.n) if code >> k & 1]
        assert costs[code] == pytest.approx(cost(members))


@pytest.mark.parametrize("make_cost", [
    lambda rng: AdditiveMaxCost(rng.uniform(size=6), rng.uniform(size=6)),
    lambda rng: NestedMaxCost.from_components(rng.uniform(size=(6, 6))),
    lambda rng: VarCost(random_pnl(6, rng, scenarios=60), 0.95),
])
def test_prefix_fast_paths_match_generic_loop(make_cost):
    rng = np.random.default_rng(5)
    cost = make_cost(rng)
    perms = np.array([rng.permutation(cost.n) for _ in range(40)])
    np.testing.assert_allclose(cost.prefix_costs(perms), SetCost.prefix_costs(cost, perms), atol=1e-12)


def test_nested_cost_matches_brute_force():
    consolidated_f = np.array([100.0, 80.0, 60.0, 40.0])
    consolidated_g = np.array([50.0, 120.0, 30.0, 90.0])
    entity_f = np.array([[70.0, 0.0], [40.0, 0.0], [0.0, 90.0], [0.0, 20.0]])
    entity_g = np.array([[30.0, 0.0], [110.0, 0.0], [0.0, 25.0], [0.0, 75.0]])
    cost = NestedMaxCost(consolidated_f, consolidated_g, entity_f, entity_g)
    for mask in all_masks(4):
        top = max(consolidated_f[mask].sum(), consolidated_g[mask].sum())
        bottom = sum(max(entity_f[mask, j].sum(), entity_g[mask, j].sum()) for j in range(2))
        assert cost(mask) == pytest.approx(max(top, bottom))


def test_nested_cost_without_subsidiary_capital_is_plain_max():
    rng = np.random.default_rng(2)
    f, g = rng.uniform(size=5), rng.uniform(size=5)
    nested = NestedMaxCost(f, g, np.zeros((5, 2)), np.zeros((5, 2)))
    plain = AdditiveMaxCost(f, g)
    np.testing.assert_allclose(nested.all_subset_costs(), plain.all_subset_costs())


def test_nested_cost_from_portfolio(two_entity):
    cost = nested_max_cost(two_entity)
    components, _ = two_entity.entity_components()
    top = max(components[:, 0].sum(), components[:, 1].sum())
    bottom = (max(components[:2, 2].sum(), components[:2, 3].sum())
              + max(components[2:, 4].sum(), components[2:, 5].sum()))
    assert cost.total() == pytest.approx(max(top, bottom))


def test_nested_cost_needs_subsidiaries(table1):
    with pytest.raises(PortfolioValidationError):
        nested_max_cost(table1)


def test_quantile_rank():
    assert quantile_rank(0.99, 100) == 1
    assert quantile_rank(0.99, 250) == 3
    assert quantile_rank(0.95, 100) == 5
    assert quantile_rank(0.999, 10) == 1


def test_var_is_empirical_loss_quantile():
    losses = np.arange(100, dtype=float)
    pnl = -losses[:, None]
    assert VarCost(pnl, 0.99)([0]) == 99.0
    assert VarCost(pnl, 0.95)([0]) == 95.0
    assert VarCost(pnl, 0.99)([]) == 0.0


def test_var_of_gains_can_be_negative():
    pnl = np.full((50, 1), 3.0)
    assert VarCost(pnl, 0.99)([0]) == -3.0


def test_var_rejects_bad_level():
    with pytest.raises(ValueError):
        VarCost(np.zeros((10, 2)), 1.0)


def test_linearized_cost(table1):
    cost = linearized_cost(table1.lbs, table1.rwa)
    assert cost.total() == 1000.0
    with pytest.raises(ValueError):
        LinearizedCost([1.0, 2.0], [1.0])


def test_additive_cost():
    cost = additive_cost([1.0, 2.0, 4.0])
    assert cost([0, 2]) == 5.0
    assert cost.total() == 7.0


def test_random_pnl_is_seeded():
    first = random_pnl(4, np.random.default_rng(3))
    second = random_pnl(4, np.random.default_rng(3))
    assert first.values.shape == (250, 4)
    assert first.unit_ids == ["U1", "U2", "U3", "U4"]
    np.testing.assert_array_equal(first.values, second.values)


def test_load_pnl_csv(tmp_path):
    path = tmp_path / "pnl.csv"
    pd.DataFrame({"A": [1.0, -2.0, 0.5], "B": [0.0, 1.0, -3.0]}).to_csv(path, index=False)
    pnl = load_pnl_csv(path)
    assert pnl.unit_ids == ["A", "B"]
    assert VarCost(pnl, 0.9)([0, 1]) == 2.5


def test_var_single_unit_takes_largest_loss():
    cost = var_cost(np.array([[-5.0], [-1.0], [0.0], [2.0], [3.0]]), 0.99)
    assert cost([0]) == 5.0


def test_var_of_perfect_hedge_is_zero():
    q = np.random.default_rng(6).normal(size=250)
    cost = var_cost(np.column_stack([q, -q]), 0.99)
    assert cost([0, 1]) == 0.0
    assert cost([0]) > 0.0


def sorted_loss_quantile(pnl, members, rank):
    losses = sorted((-pnl[:, list(members)].sum(axis=1)).tolist(), reverse=True)
    return losses[rank - 1]


def test_var_matches_sorted_losses_on_every_four_unit_subset():
    pnl = np.random.default_rng(21).normal(size=(250, 10))
    cost = var_cost(pnl, 0.99)
    subsets = list(itertools.combinations(range(10), 4))
    masks = np.array([subset_mask(list(s), 10) for s in subsets])
    batch = cost.evaluate_many(masks)
    for subset, value in zip(subsets, batch):
        expected = sorted_loss_quantile(pnl, subset, rank=3)
        assert value == pytest.approx(expected, rel=1e-12, abs=1e-12)
        assert cost(subset) == pytest.approx(expected, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("unit", range(5))
def test_additive_max_is_monotone_in_each_component(table1, unit):
    before = additive_max_cost(table1).all_subset_costs()
    bumped = table1.rwa.copy()
    bumped[unit] += 40.0
    after = AdditiveMaxCost(bumped, table1.lbs).all_subset_costs()
    assert np.all(after >= before)
    without_unit = ((np.arange(2 ** 5) >> unit) & 1) == 0
    np.testing.assert_array_equal(after[without_unit], before[without_unit])


def test_linearized_cost_of_equal_allocations_is_additive():
    alpha = np.array([1.5, 2.0, 0.5, 4.0])
    cost = linearized_cost(alpha, alpha)
    plain = additive_cost(alpha)
    np.testing.assert_allclose(cost.all_subset_costs(), plain.all_subset_costs(), rtol=1e-12)
