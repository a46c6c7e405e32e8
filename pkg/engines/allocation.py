"""
Capital allocation methods for max-type costs: standalone, Euler, Shapley,
the linear normal approximation and its legal-entity hierarchy extension.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy.special import ndtr

from api.models import AllocationMethod, EngineConfig
from engines.permutation import AllocationEstimate, ShapleyEngine, chunk_sizes, sample_prefix_masks, substream_rngs
from models.cost_functions import NestedMaxCost, SetCost, additive_max_cost, nested_max_cost
from models.errors import PortfolioValidationError, SingularScaleError
from models.portfolio import Portfolio

SCALE_TOLERANCE = 1e-9


class MethodTag(Enum):
    STANDALONE = "standalone"
    EULER = "euler"
    SHAPLEY_EXACT = "shapley-exact"
    SHAPLEY_MC = "shapley-mc"
    LINEAR = "linear"
    HIERARCHY_LINEAR = "hierarchy-linear"


@dataclass(frozen=True)
class DominanceStats:
    """Normal moment match of the running component gap: mu_s, sigma_s and p(a < b)"""
    mu_s: float
    sigma_s: float
    p: float


@dataclass(frozen=True)
class ExchangeRates:
    """beta and the per-component rates converting component allocations into capital"""
    beta: float
    weights: np.ndarray
    labels: Tuple[str, ...] = ()

    def apply(self, components: np.ndarray) -> np.ndarray:
        """Per-unit capital from an (n, len(weights)) component matrix"""
        return np.asarray(components, dtype=float) @ self.weights


@dataclass(frozen=True)
class ComponentAllocation:
    values: np.ndarray
    method: MethodTag
    stderr: Optional[np.ndarray] = None

    @property
    def total(self) -> float:
        return math.fsum(self.values)


@dataclass(frozen=True)
class JointProbabilities:
    """Joint regime/dominance frequencies, aligned with the hierarchy component columns"""
    consolidated: np.ndarray
    subsidiaries: np.ndarray
    samples: int

    @property
    def top_regime(self) -> float:
        return float(self.consolidated.sum())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.consolidated, self.subsidiaries.ravel()])


@dataclass(frozen=True)
class HierarchyComponents:
    """(n, 2 + 2E) component allocations: consolidated (f, g), then (f, g) per subsidiary"""
    values: np.ndarray
    membership: Optional[np.ndarray] = None
    labels: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] < 4 or values.shape[1] % 2:
            raise ValueError(f"hierarchy components must be (n, 2 + 2E) with E >= 1, got {values.shape}")
        object.__setattr__(self, "values", values)
        if self.membership is not None:
            membership = np.asarray(self.membership, dtype=bool)
            if membership.shape != (values.shape[0], self.subsidiary_count):
                raise ValueError("membership must be (n, subsidiaries)")
            entity = values[:, 2:].reshape(values.shape[0], -1, 2)
            stray = np.argwhere((entity != 0.0).any(axis=2) & ~membership)
            if stray.size:
                unit, subsidiary = stray[0]
                raise PortfolioValidationError(
                    f"nonzero component for subsidiary #{subsidiary} on a non-member unit",
                    unit_id=str(unit), field="entity")
            object.__setattr__(self, "membership", membership)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def subsidiary_count(self) -> int:
        return (self.values.shape[1] - 2) // 2

    def cost(self) -> NestedMaxCost:
        return NestedMaxCost.from_components(self.values)


def hierarchy_components(portfolio: Portfolio) -> HierarchyComponents:
    """Component matrix and membership of a portfolio with subsidiaries"""
    nested_max_cost(portfolio)  # validates the tree and stray subsidiary components
    values, labels = portfolio.entity_components()
    subsidiaries = portfolio.tree.subsidiaries
    membership = np.array([[portfolio.tree.membership.get(uid) == s for s in subsidiaries] for uid in portfolio.ids])
    return HierarchyComponents(values, membership, tuple(labels))


def _sums(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    return math.fsum(a), math.fsum(b)


def standalone_allocation(portfolio: Portfolio, cost: Optional[SetCost] = None) -> ComponentAllocation:
    """Total capital split in proportion to each unit's standalone cost c({k})

    Without a cost the plain max(a_k, b_k) and max(sum a, sum b) are used; pass the
    nested cost for a portfolio with subsidiaries.
    """
    if cost is None:
        standalone, total = portfolio.standalone_capital(), portfolio.total_capital()
    else:
        standalone, total = cost.evaluate_many(np.eye(portfolio.n, dtype=bool)), cost.total()
    denominator = math.fsum(standalone)
    if denominator <= 0.0:
        raise SingularScaleError("standalone allocation is undefined for an all-zero portfolio")
    values = standalone * (total / denominator)
    return ComponentAllocation(values, MethodTag.STANDALONE)


def euler_allocation(portfolio: Portfolio) -> ComponentAllocation:
    """Gradient allocation of the max: the binding side's components, the midpoint at a tie"""
    a, b = portfolio.rwa, portfolio.lbs
    sum_a, sum_b = _sums(a, b)
    if sum_b > sum_a:
        values = b.copy()
    elif sum_a > sum_b:
        values = a.copy()
    else:
        values = 0.5 * (a + b)
    return ComponentAllocation(values, MethodTag.EULER)


def dominance_probability(a: Sequence[float], b: Sequence[float]) -> DominanceStats:
    """p(a < b) for a uniform prefix of a uniform permutation, by normal moment matching"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValueError(f"component vectors must be non-empty and of equal length, got {a.shape} and {b.shape}")
    gap = a - b
    total_gap = math.fsum(gap)
    mu_s = 0.5 * total_gap
    sigma_s = math.sqrt(math.fsum(gap * gap) / 6.0 + total_gap * total_gap / 12.0)
    if sigma_s > 0.0:
        p = float(ndtr(-mu_s / sigma_s))
    elif mu_s == 0.0:
        p = 0.5
    else:
        p = 1.0 if mu_s < 0.0 else 0.0
    return DominanceStats(mu_s, sigma_s, p)


def linear_rates(a: Sequence[float], b: Sequence[float]) -> Tuple[ExchangeRates, DominanceStats]:
    """beta and the (a, b) exchange rates of the linear approximation"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    stats = dominance_probability(a, b)
    sum_a, sum_b = _sums(a, b)
    total = max(sum_a, sum_b)
    denominator = sum_a - 2.0 * stats.p * stats.mu_s
    if abs(denominator) < SCALE_TOLERANCE * max(sum_a, sum_b, 1.0):
        raise SingularScaleError(f"beta denominator {denominator:g} vanishes (sum a={sum_a:g}, sum b={sum_b:g})")
    beta = total / denominator
    weights = np.array([beta * (1.0 - stats.p), beta * stats.p])
    return ExchangeRates(beta, weights, ("a", "b")), stats


def _linear_allocation(a: np.ndarray, b: np.ndarray, labels: Tuple[str, str],
                       method: MethodTag) -> Tuple[ComponentAllocation, ExchangeRates, DominanceStats]:
    rates, stats = linear_rates(a, b)
    rates = ExchangeRates(rates.beta, rates.weights, labels)
    values = rates.weights[0] * np.asarray(a, float) + rates.weights[1] * np.asarray(b, float)
    logger.debug(f"📐 Linear allocation: p={stats.p:.6f} beta={rates.beta:.6f} weights={rates.weights}")
    return ComponentAllocation(values, method), rates, stats


def linear_max_allocation(portfolio: Portfolio) -> Tuple[ComponentAllocation, ExchangeRates, DominanceStats]:
    """beta((1 - p) a_k + p b_k) with a = RWA and b = LBS capital"""
    return _linear_allocation(portfolio.rwa, portfolio.lbs, ("rwa", "lbs"), MethodTag.LINEAR)


def two_function_allocation(alpha_f: Sequence[float], alpha_g: Sequence[float]) -> Tuple[ComponentAllocation, ExchangeRates]:
    """Approximate Shapley allocation of max(f, g) from the separate allocations of f and g"""
    alpha_f = np.asarray(alpha_f, dtype=float)
    alpha_g = np.asarray(alpha_g, dtype=float)
    if alpha_f.shape != alpha_g.shape:
        raise ValueError(f"allocation vectors differ in shape: {alpha_f.shape} vs {alpha_g.shape}")
    allocation, rates, _ = _linear_allocation(alpha_f, alpha_g, ("f", "g"), MethodTag.LINEAR)
    return allocation, rates


def _split(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """2 when first dominates, 0 when second does, 1 on a tie (counts in halves)"""
    return np.where(first > second, 2, np.where(first < second, 0, 1)).astype(np.int64)


def _regime_quarters(sums: np.ndarray) -> np.ndarray:
    """Per row of component sums, the binding regime and side in quarter units (rows add up to 4)"""
    top = np.maximum(sums[:, 0], sums[:, 1])
    entity_f, entity_g = sums[:, 2::2], sums[:, 3::2]
    bottom = np.maximum(entity_f, entity_g).sum(axis=1)

    top_halves = _split(top, bottom)
    bottom_halves = 2 - top_halves
    top_f = _split(sums[:, 0], sums[:, 1])
    entity_split = _split(entity_f, entity_g)

    # regime halves times dominance halves
    quarters = np.empty(sums.shape, dtype=np.int64)
    quarters[:, 0] = top_halves * top_f
    quarters[:, 1] = top_halves * (2 - top_f)
    quarters[:, 2::2] = bottom_halves[:, None] * entity_split
    quarters[:, 3::2] = bottom_halves[:, None] * (2 - entity_split)
    return quarters


def _tally_chunk(values: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    masks = sample_prefix_masks(values.shape[0], count, rng).astype(float)
    return _regime_quarters(masks @ values).sum(axis=0)


def hierarchy_euler_allocation(components) -> ComponentAllocation:
    """Gradient allocation of the nested max: each unit keeps its components on the binding regime and side"""
    if not isinstance(components, HierarchyComponents):
        components = HierarchyComponents(components)
    sums = components.values.sum(axis=0)[None, :]
    weights = _regime_quarters(sums)[0] / 4.0
    return ComponentAllocation(components.values @ weights, MethodTag.EULER)


def hierarchy_joint_probabilities(components, samples: int, seed: int,
                                  chunk_size: int = 10_000, n_jobs: int = 1) -> JointProbabilities:
    """Frequencies of (regime, dominant side) over uniform prefixes of uniform permutations"""
    if not isinstance(components, HierarchyComponents):
        components = HierarchyComponents(components)
    if samples < 1:
        raise ValueError(f"need samples >= 1, got {samples}")
    values = components.values
    subsidiaries = components.subsidiary_count

    if not np.any(values[:, 2:]):
        # the subsidiary side is identically zero, so the consolidated regime always binds
        p = dominance_probability(values[:, 0], values[:, 1]).p
        return JointProbabilities(np.array([1.0 - p, p]), np.zeros((subsidiaries, 2)), samples)

    sizes = chunk_sizes(samples, chunk_size)
    rngs = substream_rngs(seed, len(sizes))
    if n_jobs == 1 or len(sizes) == 1:
        tallies = [_tally_chunk(values, size, rng) for size, rng in zip(sizes, rngs)]
    else:
        tallies = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_tally_chunk)(values, size, rng) for size, rng in zip(sizes, rngs)
        )
    tally = np.sum(tallies, axis=0)
    probabilities = tally / (4.0 * samples)
    logger.debug(f"🎲 Hierarchy tally over {samples} prefixes: {probabilities}")
    return JointProbabilities(probabilities[:2], probabilities[2:].reshape(subsidiaries, 2), samples)


def hierarchy_allocation(components, samples: int, seed: int, chunk_size: int = 10_000,
                         n_jobs: int = 1) -> Tuple[ComponentAllocation, ExchangeRates]:
    """Joint-probability rates scaled by beta so the allocation adds up to the nested cost"""
    if not isinstance(components, HierarchyComponents):
        components = HierarchyComponents(components)
    probabilities = hierarchy_joint_probabilities(components, samples, seed, chunk_size, n_jobs).as_vector()
    unscaled = components.values @ probabilities
    unscaled_total = math.fsum(unscaled)
    if abs(unscaled_total) < SCALE_TOLERANCE:
        raise SingularScaleError(f"hierarchy scale denominator {unscaled_total:g} vanishes")
    total = components.cost().total()
    beta = total / unscaled_total
    rates = ExchangeRates(beta, beta * probabilities, components.labels)
    return ComponentAllocation(rates.apply(components.values), MethodTag.HIERARCHY_LINEAR), rates


def roc(revenue: Sequence[float], allocation: Sequence[float]) -> np.ndarray:
    """Return on allocated capital; NaN where nothing is allocated"""
    revenue = np.asarray(revenue, dtype=float)
    allocation = np.asarray(allocation, dtype=float)
    zero = allocation == 0.0
    if np.any(zero):
        logger.warning(f"⚠️ {int(zero.sum())} unit(s) have zero allocated capital; RoC set to NaN")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(zero, np.nan, revenue / np.where(zero, 1.0, allocation))


@dataclass
class AllocationResult:
    allocation: ComponentAllocation
    rates: Optional[ExchangeRates] = None
    stats: Optional[DominanceStats] = None
    estimate: Optional[AllocationEstimate] = None


class AllocationEngine(ShapleyEngine):
    """Runs any allocation method against a portfolio"""

    def __init__(self, config: Optional[EngineConfig] = None):
        super().__init__(config)

    def portfolio_cost(self, portfolio: Portfolio) -> SetCost:
        """Nested cost when the portfolio has subsidiaries, the plain max otherwise"""
        if portfolio.tree.subsidiaries:
            return nested_max_cost(portfolio)
        return additive_max_cost(portfolio)

    def allocate(self, portfolio: Portfolio, method: AllocationMethod, seed: int = 0,
                 samples: Optional[int] = None) -> AllocationResult:
        method = AllocationMethod(method)
        logger.info(f"🏦 Allocating {portfolio.n} units with method '{method.value}'")

        nested = bool(portfolio.tree.subsidiaries)
        if method == AllocationMethod.STANDALONE:
            return AllocationResult(standalone_allocation(portfolio, self.portfolio_cost(portfolio) if nested else None))
        if method == AllocationMethod.EULER:
            if nested:
                return AllocationResult(hierarchy_euler_allocation(hierarchy_components(portfolio)))
            return AllocationResult(euler_allocation(portfolio))
        if method == AllocationMethod.LINEAR and nested:
            logger.info("🏢 Portfolio has subsidiaries: using the hierarchy linear allocation")
            method = AllocationMethod.HIERARCHY
        if method == AllocationMethod.LINEAR:
            allocation, rates, stats = linear_max_allocation(portfolio)
            return AllocationResult(allocation, rates, stats)
        if method == AllocationMethod.SHAPLEY:
            estimate = self.exact(self.portfolio_cost(portfolio))
            return AllocationResult(ComponentAllocation(estimate.values, MethodTag.SHAPLEY_EXACT), estimate=estimate)
        if method == AllocationMethod.MC:
            estimate = self.monte_carlo(self.portfolio_cost(portfolio), seed, samples)
            return AllocationResult(ComponentAllocation(estimate.values, MethodTag.SHAPLEY_MC, estimate.stderr),
                                    estimate=estimate)
        if method == AllocationMethod.HIERARCHY:
            components = hierarchy_components(portfolio)
            allocation, rates = hierarchy_allocation(components, samples or self.config.hierarchy_samples, seed,
                                                     self.config.chunk_size, self.config.n_jobs)
            return AllocationResult(allocation, rates)
        raise ValueError(f"unknown allocation method '{method}'")

    def compare(self, portfolio: Portfolio, methods: List[AllocationMethod], seed: int = 0,
                samples: Optional[int] = None) -> dict:
        """Several methods side by side, keyed by method value"""
        return {AllocationMethod(m).value: self.allocate(portfolio, m, seed, samples) for m in methods}
