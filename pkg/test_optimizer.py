#!/usr/bin/env python3
"""
Covariance models, the exchange-rate Jacobian and the local capital optimum.
"""
import numpy as np
import pandas as pd
import pytest

from engines.allocation import hierarchy_components
from engines.optimizer import (
    CapitalOptimizer, CovarianceModel, HierarchyRates, OptimizationProblem, OptimizationSolution,
    SingleEntityRates, component_vector, estimate_covariance, exchange_rate_jacobian, kkt_residual,
    load_series_csv, revenue_model, solve_crude, solve_kkt_system, solve_local_optimum, synthetic_covariance,
    unit_allocation_change
)
from models.errors import NumericalError, PortfolioValidationError, SingularScaleError, SingularSystemError
from models.portfolio import BusinessUnit, Portfolio


def random_problem(rng, m=10, epsilon=0.1, with_jacobian=True):
    G = rng.standard_normal((m, m))
    V = G @ G.T / m + np.eye(m)
    B = rng.standard_normal((m, m))
    J = 0.1 * (B @ B.T) / m if with_jacobian else None
    return OptimizationProblem(
        h=rng.uniform(50.0, 250.0, m),
        r=rng.uniform(0.02, 0.1, m),
        V=CovarianceModel(V),
        epsilon=epsilon,
        z=float(rng.normal()),
        w=rng.uniform(0.2, 0.8, m),
        J=J,
    )


def table2_problem(table1, rho=0.0, z=0.0, epsilon=0.1):
    h, _ = component_vector(table1)
    r, _ = revenue_model(table1)
    w = SingleEntityRates().rates(h)
    return h, r, synthetic_covariance(table1.n, rho), w, z, epsilon


# covariance models

def test_synthetic_covariance_blocks():
    np.testing.assert_array_equal(synthetic_covariance(5, 0.0).matrix, np.eye(10))
    rho95 = synthetic_covariance(5, 0.95).matrix
    np.testing.assert_array_equal(rho95[2:4, 2:4], [[1.0, 0.95], [0.95, 1.0]])
    assert rho95[1, 2] == 0.0
    np.testing.assert_array_equal(synthetic_covariance(2, -0.5, 4.0).matrix[:2, :2], [[4.0, -2.0], [-2.0, 4.0]])
    with pytest.raises(ValueError):
        synthetic_covariance(3, 1.0)


def test_covariance_model_validation():
    with pytest.raises(ValueError):
        CovarianceModel(np.array([[1.0, 0.5], [0.2, 1.0]]))
    with pytest.raises(ValueError):
        CovarianceModel(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_constant_series_gives_ridge_model():
    model = estimate_covariance(np.ones((10, 4)))
    assert model.provenance == "historical"
    assert np.all(np.abs(model.matrix) <= 1e-9)
    assert np.all(np.linalg.eigvalsh(model.matrix) > 0.0)


def test_full_shrinkage_keeps_diagonal():
    series = np.random.default_rng(1).normal(size=(40, 4)).cumsum(axis=0)
    sample = np.cov(np.diff(series, axis=0), rowvar=False)
    model = estimate_covariance(series, shrinkage=1.0)
    np.testing.assert_allclose(model.matrix, np.diag(np.diag(sample)), rtol=1e-12)


def test_estimate_improves_with_sample_size():
    truth = synthetic_covariance(3, 0.5).matrix
    rng = np.random.default_rng(7)

    def error(rows):
        changes = rng.multivariate_normal(np.zeros(6), truth, size=rows - 1)
        series = np.vstack([np.zeros(6), changes.cumsum(axis=0)])
        return np.linalg.norm(estimate_covariance(series).matrix - truth)

    assert error(5_000) < error(50)


def test_estimate_rejects_short_or_ragged_series():
    with pytest.raises(ValueError):
        estimate_covariance(np.ones((1, 3)))
    with pytest.raises(ValueError):
        estimate_covariance([[1.0, 2.0], [1.0, 2.0, 3.0]])
    with pytest.raises(ValueError):
        estimate_covariance(np.ones((5, 2)), shrinkage=1.5)


def test_load_series_csv_skips_date_column(tmp_path):
    path = tmp_path / "series.csv"
    pd.DataFrame({"date": ["2024-01-01", "2024-01-02", "2024-01-03"],
                  "A:rwa": [1.0, 2.0, 4.0], "A:lbs": [3.0, 3.5, 3.0]}).to_csv(path, index=False)
    series = load_series_csv(path)
    assert list(series.columns) == ["A:rwa", "A:lbs"]
    assert estimate_covariance(series).dim == 2


# exchange-rate Jacobian

def test_rates_are_degree_zero_homogeneous(table1):
    h, _ = component_vector(table1)
    model = SingleEntityRates()
    w = model.rates(h)
    J = exchange_rate_jacobian(h, model, analytic=True)
    assert np.linalg.norm(J @ h) <= 1e-8 * np.linalg.norm(w)
    J_fd = exchange_rate_jacobian(h, model)
    assert np.linalg.norm(J_fd @ h) <= 1e-6 * np.linalg.norm(w)


def test_analytic_jacobian_matches_finite_differences(table1):
    h, _ = component_vector(table1)
    analytic = exchange_rate_jacobian(h, SingleEntityRates(), analytic=True)
    numeric = exchange_rate_jacobian(h, SingleEntityRates())
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-6 * np.abs(analytic).max())


def test_jacobian_at_parity_is_finite(table1):
    h, _ = component_vector(table1.scaled_rwa(1000.0))
    w = SingleEntityRates().rates(h)
    np.testing.assert_allclose(w, 0.5, atol=1e-12)
    assert np.all(np.isfinite(exchange_rate_jacobian(h)))


def test_analytic_jacobian_needs_spread():
    with pytest.raises(NumericalError):
        SingleEntityRates().analytic_jacobian(np.array([3.0, 3.0, 5.0, 5.0]))


class FailingRates:
    """Rates that become singular once component 2 moves"""

    def __init__(self, h):
        self.h = np.asarray(h, dtype=float)

    def rates(self, h):
        if h[2] != self.h[2]:
            raise SingularScaleError("beta denominator vanishes")
        return np.ones_like(h)


def test_singular_point_reports_component_index():
    h = np.array([1.0, 2.0, 3.0, 4.0])
    with pytest.raises(SingularScaleError) as excinfo:
        exchange_rate_jacobian(h, FailingRates(h))
    assert excinfo.value.index == 2
    assert "perturbed component 2" in str(excinfo.value)


def test_hierarchy_rates_use_finite_differences(two_entity):
    components = hierarchy_components(two_entity)
    model = HierarchyRates(two_entity.n, samples=2_000, seed=4)
    h = components.values.ravel()
    assert model.rates(h).shape == h.shape
    np.testing.assert_array_equal(model.rates(h), model.rates(h))
    J = exchange_rate_jacobian(h, model)
    assert J.shape == (h.size, h.size)
    assert np.all(np.isfinite(J))
    with pytest.raises(NumericalError):
        exchange_rate_jacobian(h, model, analytic=True)


# solvers

def test_current_point_is_stationary_when_rates_are_proportional():
    rng = np.random.default_rng(2)
    r = rng.uniform(0.02, 0.1, 6)
    problem = OptimizationProblem(h=np.ones(6), r=r, V=np.eye(6), epsilon=0.1, z=0.0, w=3.0 * r)
    solution = solve_local_optimum(problem)
    np.testing.assert_allclose(solution.delta, 0.0, atol=1e-12)
    assert solution.lam == pytest.approx(3.0)
    crude = solve_crude(problem.h, r, np.eye(6), 3.0 * r, 0.0, 0.1)
    np.testing.assert_allclose(crude.delta, 0.0, atol=1e-12)


@pytest.mark.parametrize("epsilon", [0.01, 0.1, 1.0])
def test_closed_form_matches_kkt_system(epsilon):
    rng = np.random.default_rng(int(epsilon * 1000))
    for _ in range(100):
        problem = random_problem(rng, epsilon=epsilon)
        solution = solve_local_optimum(problem)
        delta, lam = solve_kkt_system(problem)
        scale = max(1.0, np.abs(delta).max())
        np.testing.assert_allclose(solution.delta, delta, rtol=1e-8, atol=1e-8 * scale)
        assert solution.lam == pytest.approx(lam, rel=1e-8, abs=1e-8)
        assert solution.constraint_residual <= 1e-8 * (1.0 + abs(problem.z))
        assert solution.kkt_stationarity <= 1e-8 * max(1.0, np.linalg.norm(problem.w))


def test_crude_equals_full_without_jacobian():
    rng = np.random.default_rng(50)
    for _ in range(50):
        problem = random_problem(rng, epsilon=float(rng.choice([0.01, 0.1, 1.0])), with_jacobian=False)
        full = solve_local_optimum(problem)
        crude = solve_crude(problem.h, problem.r, problem.V, problem.w, problem.z, problem.epsilon)
        scale = max(1.0, np.abs(full.delta).max())
        np.testing.assert_allclose(crude.delta, full.delta, rtol=1e-10, atol=1e-10 * scale)
        assert abs(problem.r @ crude.delta - problem.z) <= 1e-8 * (1.0 + abs(problem.z))


def test_perturbing_the_optimum_raises_stationarity():
    rng = np.random.default_rng(3)
    problem = random_problem(rng)
    solution = solve_local_optimum(problem)
    noisy = OptimizationSolution(solution.delta + 1e-3 * rng.standard_normal(problem.m), solution.lam)
    assert kkt_residual(problem, noisy)[0] > kkt_residual(problem, solution)[0]


def test_residual_at_zero_move():
    rng = np.random.default_rng(4)
    problem = random_problem(rng)
    problem.z = 0.0
    stationarity, constraint = kkt_residual(problem, OptimizationSolution(np.zeros(problem.m), 2.0))
    assert constraint == 0.0
    expected = np.linalg.norm(problem.w + problem.J @ problem.h - 2.0 * problem.r)
    assert stationarity == pytest.approx(expected)


def test_singular_systems_raise():
    problem = OptimizationProblem(h=np.ones(4), r=np.zeros(4), V=np.eye(4), epsilon=0.1, z=0.0, w=np.ones(4))
    with pytest.raises(SingularSystemError):
        solve_local_optimum(problem)
    with pytest.raises(SingularSystemError):
        solve_crude(np.ones(4), np.zeros(4), np.eye(4), np.ones(4), 0.0, 0.1)
    cancelling = OptimizationProblem(h=np.ones(4), r=np.ones(4), V=np.eye(4), epsilon=0.1, z=0.0,
                                     w=np.ones(4), J=-0.1 * np.eye(4))
    with pytest.raises(SingularSystemError):
        solve_local_optimum(cancelling)


def test_problem_dimensions_checked():
    with pytest.raises(ValueError):
        OptimizationProblem(h=np.ones(4), r=np.ones(3), V=np.eye(4), epsilon=0.1, z=0.0, w=np.ones(4))
    with pytest.raises(ValueError):
        OptimizationProblem(h=np.ones(4), r=np.ones(4), V=np.eye(4), epsilon=0.0, z=0.0, w=np.ones(4))


def test_mahalanobis_shrinks_as_epsilon_grows(table1):
    optimizer = CapitalOptimizer()
    for solver in ("crude", "full"):
        norms = [optimizer.optimize(table1, synthetic_covariance(5, 0.0), eps, 0.0, solver).solution.mahalanobis
                 for eps in (0.01, 0.1, 1.0)]
        assert norms[0] >= norms[1] >= norms[2]


# stylized bank

def test_table2_thresholds(table1):
    h, r, V, w, z, epsilon = table2_problem(table1)
    np.testing.assert_allclose(r[0::2], [0.0605, 0.0676, 0.0625, 0.0625, 0.0571], atol=1e-4)
    solution = solve_crude(h, r, V, w, z, epsilon)
    assert solution.lam == pytest.approx(8.28, abs=0.05)
    np.testing.assert_allclose(w[:2] / solution.lam, [0.0365, 0.0879], atol=5e-4)


@pytest.mark.parametrize("solver", ["crude", "full"])
def test_identity_panel_signs(table1, solver):
    outcome = CapitalOptimizer().optimize(table1, synthetic_covariance(5, 0.0), 0.1, 0.0, solver)
    delta = outcome.solution.delta
    assert np.all(delta[0::2] > 0.0)
    assert np.all(delta[1::2] < 0.0)
    assert outcome.solution.capital_change < 0.0
    assert outcome.unit_change.sum() < 0.0
    np.testing.assert_array_equal(outcome.unit_change > 0.0, [True, False, False, True, False])
    assert outcome.solution.constraint_residual <= 1e-8


@pytest.mark.parametrize("solver", ["crude", "full"])
def test_correlated_panel_reverses_ranking(table1, solver):
    outcome = CapitalOptimizer().optimize(table1, synthetic_covariance(5, 0.95), 0.1, 0.0, solver)
    assert table1.ids[int(np.argmax(outcome.unit_change))] == "B"
    assert table1.ids[int(np.argmin(outcome.unit_change))] == "E"


@pytest.mark.parametrize("solver", ["crude", "full"])
def test_revenue_target_raises_capital(table1, solver):
    outcome = CapitalOptimizer().optimize(table1, synthetic_covariance(5, 0.95), 0.1, 2.0, solver)
    assert outcome.solution.capital_change > 0.0
    assert outcome.unit_change.sum() > 0.0
    assert outcome.problem.r @ outcome.solution.delta == pytest.approx(2.0, abs=1e-8 * 3.0)


def test_unit_change_adds_up_to_capital_change(table1):
    h, _ = component_vector(table1)
    delta = np.random.default_rng(6).normal(scale=2.0, size=h.size)
    moved = h + delta
    capital_change = max(moved[0::2].sum(), moved[1::2].sum()) - 1000.0
    assert unit_allocation_change(h, delta).sum() == pytest.approx(capital_change, abs=1e-9)


def test_component_ids_and_zero_capital_flag():
    portfolio = Portfolio((BusinessUnit("A", "A", 10.0, 20.0, 3.0), BusinessUnit("B", "B", 0.0, 0.0, 1.0)))
    h, ids = component_vector(portfolio)
    assert ids == ["A:rwa", "A:lbs", "B:rwa", "B:lbs"]
    np.testing.assert_array_equal(h, [10.0, 20.0, 0.0, 0.0])
    r, flagged = revenue_model(portfolio)
    np.testing.assert_allclose(r, [0.1, 0.1, 0.0, 0.0])
    assert flagged == ["B"]


def test_unknown_solver_rejected(table1):
    with pytest.raises(ValueError):
        CapitalOptimizer().optimize(table1, synthetic_covariance(5, 0.0), solver="newton")


def test_portfolio_with_subsidiaries_rejected(two_entity):
    with pytest.raises(PortfolioValidationError, match="single legal entity"):
        CapitalOptimizer().optimize(two_entity, synthetic_covariance(two_entity.n, 0.0))
