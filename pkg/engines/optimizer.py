"""
Reduced-form local capital optimization over allocated capital components.

The bank's capital w(h) . h is minimized over small moves delta of the allocated
components h, subject to a revenue change r . delta = z and a Mahalanobis
plausibility penalty (epsilon / 2) delta' V^-1 delta.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
from loguru import logger
from scipy.stats import norm

from engines.allocation import HierarchyComponents, hierarchy_allocation, linear_rates
from models.errors import NumericalError, PortfolioValidationError, SingularScaleError, SingularSystemError
from models.portfolio import Portfolio

CONDITION_LIMIT = 1e12
DENOMINATOR_FLOOR = 1e-14
RIDGE = 1e-10


def _is_positive_definite(matrix: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(matrix)
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass(frozen=True)
class CovarianceModel:
    """Covariance of daily changes in the allocated components"""
    matrix: np.ndarray
    provenance: str = "synthetic"

    def __post_init__(self):
        matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"covariance must be square, got {matrix.shape}")
        scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
        if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12 * scale):
            raise ValueError("covariance must be symmetric")
        if not _is_positive_definite(matrix):
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "matrix", matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def inverse(self) -> np.ndarray:
        factor = scipy.linalg.cho_factor(self.matrix)
        return scipy.linalg.cho_solve(factor, np.eye(self.dim))


def estimate_covariance(series: Union[np.ndarray, pd.DataFrame, Sequence[Sequence[float]]],
                        shrinkage: float = 0.0) -> CovarianceModel:
    """Sample covariance of first differences, shrunk toward its diagonal, ridged if not positive definite"""
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    if isinstance(series, pd.DataFrame):
        values = series.to_numpy(dtype=float)
    else:
        rows = list(series) if not isinstance(series, np.ndarray) else series
        if not isinstance(rows, np.ndarray):
            widths = {len(row) for row in rows}
            if len(widths) > 1:
                raise ValueError(f"series rows have inconsistent dimensions {sorted(widths)}")
        values = np.asarray(rows, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2 or values.shape[0] < 2:
        raise ValueError(f"need at least 2 observations, got shape {values.shape}")

    changes = np.diff(values, axis=0)
    ddof = 1 if changes.shape[0] > 1 else 0
    sample = np.atleast_2d(np.cov(changes, rowvar=False, ddof=ddof))
    shrunk = (1.0 - shrinkage) * sample + shrinkage * np.diag(np.diag(sample))
    shrunk = 0.5 * (shrunk + shrunk.T)

    if not _is_positive_definite(shrunk):
        ridge = RIDGE * max(float(np.trace(shrunk)), 1.0)
        logger.warning(f"⚠️ Sample covariance is not positive definite; adding ridge {ridge:g}")
        shrunk = shrunk + ridge * np.eye(shrunk.shape[0])
    return CovarianceModel(shrunk, "historical")


def synthetic_covariance(n_units: int, rho: float, scale: float = 1.0) -> CovarianceModel:
    """Block diagonal: one [[scale, rho scale], [rho scale, scale]] block per unit"""
    if not -1.0 < rho < 1.0:
        raise ValueError(f"rho must lie strictly inside (-1, 1), got {rho}")
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    block = scale * np.array([[1.0, rho], [rho, 1.0]])
    return CovarianceModel(np.kron(np.eye(n_units), block), "synthetic")


def load_series_csv(path: Union[str, Path]) -> pd.DataFrame:
    """Historical component series: one row per day, one column per component (a leading date column is skipped)"""
    frame = pd.read_csv(path)
    if frame.shape[1] > 1 and not pd.api.types.is_numeric_dtype(frame.iloc[:, 0]):
        frame = frame.set_index(frame.columns[0])
    logger.debug(f"📂 Loaded component series {frame.shape} from {path}")
    return frame


class SingleEntityRates:
    """w(h) of the linear approximation for h = (a_1, b_1, ..., a_n, b_n)"""

    supports_analytic = True

    def rates(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        rates, _ = linear_rates(h[0::2], h[1::2])
        return np.tile(rates.weights, h.size // 2)

    def analytic_jacobian(self, h: np.ndarray) -> np.ndarray:
        """dw/dh by the chain rule through Phi, mu_s, sigma_s and beta"""
        h = np.asarray(h, dtype=float)
        a, b = h[0::2], h[1::2]
        gap = a - b
        total_gap = math.fsum(gap)
        mu = 0.5 * total_gap
        sigma = math.sqrt(math.fsum(gap * gap) / 6.0 + total_gap ** 2 / 12.0)
        if sigma == 0.0:
            raise NumericalError("analytic Jacobian is undefined when sigma_s = 0; use finite differences")
        t = -mu / sigma
        p = float(norm.cdf(t))
        density = float(norm.pdf(t))
        sum_a, sum_b = math.fsum(a), math.fsum(b)
        denominator = sum_a - 2.0 * p * mu
        if abs(denominator) < 1e-9 * max(sum_a, sum_b, 1.0):
            raise SingularScaleError("beta denominator vanishes")
        beta = max(sum_a, sum_b) / denominator

        m = h.size
        sign = np.tile([1.0, -1.0], m // 2)
        own_gap = np.repeat(gap, 2)
        d_mu = 0.5 * sign
        d_sigma = sign * (own_gap / 3.0 + total_gap / 6.0) / (2.0 * sigma)
        d_t = -(d_mu * sigma - mu * d_sigma) / sigma ** 2
        d_p = density * d_t

        is_a = sign > 0
        if sum_a > sum_b:
            d_max = is_a.astype(float)
        elif sum_b > sum_a:
            d_max = (~is_a).astype(float)
        else:
            d_max = np.full(m, 0.5)
        d_denominator = is_a.astype(float) - 2.0 * (d_p * mu + p * d_mu)
        d_beta = (d_max - beta * d_denominator) / denominator

        d_wa = d_beta * (1.0 - p) - beta * d_p
        d_wb = d_beta * p + beta * d_p
        jacobian = np.empty((m, m))
        jacobian[0::2, :] = d_wa[None, :]
        jacobian[1::2, :] = d_wb[None, :]
        return jacobian


class HierarchyRates:
    """w(h) of the hierarchy approximation for h = the row-major (n, 2 + 2E) component matrix"""

    supports_analytic = False

    def __init__(self, n_units: int, samples: int = 20_000, seed: int = 0):
        self.n_units = n_units
        self.samples = samples
        self.seed = seed

    def rates(self, h: np.ndarray) -> np.ndarray:
        values = np.asarray(h, dtype=float).reshape(self.n_units, -1)
        # fixed seed: common random numbers across perturbed points
        _, rates = hierarchy_allocation(HierarchyComponents(values), self.samples, self.seed)
        return np.tile(rates.weights, self.n_units)

    def analytic_jacobian(self, h: np.ndarray) -> np.ndarray:
        raise NumericalError("hierarchy exchange rates only support finite-difference Jacobians")


def exchange_rate_jacobian(h: Sequence[float], model=None, analytic: bool = False) -> np.ndarray:
    """J = dw/dh by central differences (step max(1e-6 |h_i|, 1e-8)) or analytically"""
    model = model or SingleEntityRates()
    h = np.asarray(h, dtype=float)
    if analytic:
        return model.analytic_jacobian(h)

    m = h.size
    jacobian = np.empty((m, m))
    for i in range(m):
        step = max(1e-6 * abs(h[i]), 1e-8)
        up, down = h.copy(), h.copy()
        up[i] += step
        down[i] -= step
        try:
            jacobian[:, i] = (model.rates(up) - model.rates(down)) / (2.0 * step)
        except SingularScaleError as e:
            raise SingularScaleError(str(e), index=i) from e
    return jacobian


@dataclass
class OptimizationProblem:
    h: np.ndarray
    r: np.ndarray
    V: CovarianceModel
    epsilon: float
    z: float
    w: np.ndarray
    J: Optional[np.ndarray] = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if not isinstance(self.V, CovarianceModel):
            self.V = CovarianceModel(self.V)
        m = self.h.size
        self.J = np.zeros((m, m)) if self.J is None else np.asarray(self.J, dtype=float)
        if self.r.size != m or self.w.size != m or self.V.dim != m or self.J.shape != (m, m):
            raise ValueError(f"problem dimensions disagree: h={m}, r={self.r.size}, w={self.w.size}, "
                             f"V={self.V.dim}, J={self.J.shape}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def m(self) -> int:
        return self.h.size


@dataclass
class OptimizationSolution:
    delta: np.ndarray
    lam: float
    kkt_stationarity: float = 0.0
    constraint_residual: float = 0.0
    capital_change: float = 0.0
    mahalanobis: float = 0.0
    solver: str = "full"


def kkt_residual(problem: OptimizationProblem, solution: OptimizationSolution) -> Tuple[float, float]:
    """(||w + J(h + delta) + eps V^-1 delta - lambda r||, |r . delta - z|)"""
    delta = np.asarray(solution.delta, dtype=float)
    if delta.size != problem.m:
        raise ValueError(f"delta has length {delta.size}, problem has {problem.m} components")
    penalty = problem.epsilon * scipy.linalg.cho_solve(scipy.linalg.cho_factor(problem.V.matrix), delta)
    gradient = problem.w + problem.J @ (problem.h + delta) + penalty - solution.lam * problem.r
    return float(np.linalg.norm(gradient)), abs(float(problem.r @ delta) - problem.z)


def _finish(problem: OptimizationProblem, delta: np.ndarray, lam: float, solver: str) -> OptimizationSolution:
    solution = OptimizationSolution(delta, float(lam), solver=solver)
    solution.kkt_stationarity, solution.constraint_residual = kkt_residual(problem, solution)
    solution.capital_change = float(problem.w @ delta)
    solution.mahalanobis = math.sqrt(max(float(delta @ problem.V.inverse() @ delta), 0.0))
    logger.debug(f"🧭 {solver} solve: lambda={solution.lam:.6g}, capital change={solution.capital_change:.6g}, "
                 f"residuals=({solution.kkt_stationarity:.2e}, {solution.constraint_residual:.2e})")
    return solution


def solve_local_optimum(problem: OptimizationProblem) -> OptimizationSolution:
    """delta* = (J + eps V^-1)^-1 (lambda r - w - J h), lambda fixed by r . delta = z"""
    system = problem.J + problem.epsilon * problem.V.inverse()
    condition = np.linalg.cond(system)
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise SingularSystemError(f"J + eps V^-1 is singular (condition number {condition:.3g})")

    factor = scipy.linalg.lu_factor(system)
    solve_r = scipy.linalg.lu_solve(factor, problem.r)
    solve_w = scipy.linalg.lu_solve(factor, problem.w)
    solve_jh = scipy.linalg.lu_solve(factor, problem.J @ problem.h)
    denominator = float(problem.r @ solve_r)
    if abs(denominator) < DENOMINATOR_FLOOR:
        raise SingularSystemError(f"r' A r = {denominator:g} is too small to fix the multiplier")

    lam = (problem.z + float(problem.r @ solve_w) + float(problem.r @ solve_jh)) / denominator
    delta = lam * solve_r - solve_w - solve_jh
    return _finish(problem, delta, lam, "full")


def solve_crude(h: Sequence[float], r: Sequence[float], V, w: Sequence[float], z: float,
                epsilon: float) -> OptimizationSolution:
    """The J = 0 limit: delta* = V (lambda r - w) / eps"""
    problem = OptimizationProblem(h, r, V, epsilon, z, w)
    V_r = problem.V.matrix @ problem.r
    V_w = problem.V.matrix @ problem.w
    denominator = float(problem.r @ V_r)
    if abs(denominator) < DENOMINATOR_FLOOR:
        raise SingularSystemError(f"r' V r = {denominator:g} is too small to fix the multiplier")
    lam = (epsilon * z + float(problem.r @ V_w)) / denominator
    delta = (lam * V_r - V_w) / epsilon
    return _finish(problem, delta, lam, "crude")


def solve_kkt_system(problem: OptimizationProblem) -> Tuple[np.ndarray, float]:
    """Dense (m + 1) x (m + 1) KKT solve of the same stationarity and constraint equations"""
    m = problem.m
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = problem.J + problem.epsilon * problem.V.inverse()
    kkt[:m, m] = -problem.r
    kkt[m, :m] = problem.r
    rhs = np.concatenate([-problem.w - problem.J @ problem.h, [problem.z]])
    try:
        solution = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"KKT system is singular: {e}") from e
    return solution[:m], float(solution[m])


def component_vector(portfolio: Portfolio) -> Tuple[np.ndarray, List[str]]:
    """Interleaved h = (a_1, b_1, ..., a_n, b_n) with ids '<unit>:rwa', '<unit>:lbs'"""
    h = np.empty(2 * portfolio.n)
    h[0::2] = portfolio.rwa
    h[1::2] = portfolio.lbs
    ids = [f"{uid}:{side}" for uid in portfolio.ids for side in ("rwa", "lbs")]
    return h, ids


def revenue_model(portfolio: Portfolio) -> Tuple[np.ndarray, List[str]]:
    """r_i = revenue_i / (a_i + b_i) on both components; zero and flagged when a_i + b_i = 0"""
    capital = portfolio.rwa + portfolio.lbs
    flagged = [uid for uid, c in zip(portfolio.ids, capital) if c == 0.0]
    if flagged:
        logger.warning(f"⚠️ Zero standalone capital for {flagged}; their returns are set to 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        unit_return = np.where(capital == 0.0, 0.0, portfolio.revenue / np.where(capital == 0.0, 1.0, capital))
    return np.repeat(unit_return, 2), flagged


def unit_allocation_change(h: Sequence[float], delta: Sequence[float]) -> np.ndarray:
    """Per-unit change of the linear allocation when h moves to h + delta"""
    h = np.asarray(h, dtype=float)
    moved = h + np.asarray(delta, dtype=float)

    def allocation(vector: np.ndarray) -> np.ndarray:
        rates, _ = linear_rates(vector[0::2], vector[1::2])
        return rates.weights[0] * vector[0::2] + rates.weights[1] * vector[1::2]

    return allocation(moved) - allocation(h)


@dataclass
class OptimizationOutcome:
    problem: OptimizationProblem
    solution: OptimizationSolution
    component_ids: List[str]
    unit_ids: List[str]
    unit_change: np.ndarray
    flagged: List[str] = field(default_factory=list)

    @property
    def thresholds(self) -> np.ndarray:
        """RoC thresholds w / lambda per component"""
        return self.problem.w / self.solution.lam


class CapitalOptimizer:
    """Builds the single-entity optimization problem for a portfolio and solves it"""

    def __init__(self, analytic_jacobian: bool = True):
        self.analytic_jacobian = analytic_jacobian
        self.rates_model = SingleEntityRates()

    def build_problem(self, portfolio: Portfolio, covariance: CovarianceModel, epsilon: float,
                      z: float) -> Tuple[OptimizationProblem, List[str], List[str]]:
        if portfolio.tree.subsidiaries:
            raise PortfolioValidationError(
                f"capital optimization covers a single legal entity; the portfolio lists subsidiaries "
                f"{list(portfolio.tree.subsidiaries)}", field="subsidiaries")
        h, component_ids = component_vector(portfolio)
        r, flagged = revenue_model(portfolio)
        w = self.rates_model.rates(h)
        _, stats = linear_rates(h[0::2], h[1::2])
        analytic = self.analytic_jacobian and stats.sigma_s > 0.0
        if self.analytic_jacobian and not analytic:
            logger.debug("sigma_s = 0, falling back to a finite-difference Jacobian")
        J = exchange_rate_jacobian(h, self.rates_model, analytic=analytic)
        return OptimizationProblem(h, r, covariance, epsilon, z, w, J), component_ids, flagged

    def optimize(self, portfolio: Portfolio, covariance: CovarianceModel, epsilon: float = 0.1,
                 z: float = 0.0, solver: str = "full") -> OptimizationOutcome:
        problem, component_ids, flagged = self.build_problem(portfolio, covariance, epsilon, z)
        if solver == "full":
            solution = solve_local_optimum(problem)
        elif solver == "crude":
            solution = solve_crude(problem.h, problem.r, problem.V, problem.w, z, epsilon)
        else:
            raise ValueError(f"unknown solver '{solver}' (expected full or crude)")
        change = unit_allocation_change(problem.h, solution.delta)
        logger.info(f"🧭 {solver} optimum: lambda={solution.lam:.4f}, capital change={change.sum():+.4f}")
        return OptimizationOutcome(problem, solution, component_ids, portfolio.ids, change, flagged)
