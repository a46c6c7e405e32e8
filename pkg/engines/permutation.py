"""
Shapley allocation by exact enumeration and by Monte Carlo permutation sampling.
"""
import math
import time
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from api.models import EngineConfig
from models.cost_functions import SetCost
from models.errors import EnumerationCapError


@dataclass(frozen=True)
class AllocationEstimate:
    """Per-unit Shapley allocation with its Monte Carlo standard error (zero when exact)"""
    values: np.ndarray
    stderr: np.ndarray
    samples: int
    exact: bool

    @property
    def total(self) -> float:
        return math.fsum(self.values)

    @property
    def total_stderr(self) -> float:
        # increments of one permutation telescope to c(Omega), so per-unit errors are not independent;
        # the plain sum is a conservative bound
        return float(np.sum(self.stderr))


@dataclass(frozen=True)
class IndicatorMoments:
    mean: float
    second_moment: float
    covariance: float
    correlation: float
    mean_stderr: float = 0.0
    second_moment_stderr: float = 0.0
    covariance_stderr: float = 0.0
    correlation_stderr: float = 0.0
    samples: int = 0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.mean, self.second_moment, self.covariance, self.correlation


def substream_rngs(seed: int, streams: int) -> List[np.random.Generator]:
    """Independent generators derived from (seed, stream index)"""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(streams)]


def chunk_sizes(samples: int, chunk_size: int) -> List[int]:
    full, rest = divmod(samples, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def random_permutations(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permuted(np.tile(np.arange(n), (count, 1)), axis=1)


def sample_prefix_masks(n: int, count: int, rng: np.random.Generator, include_empty: bool = True) -> np.ndarray:
    """Membership of a uniform prefix of a uniform permutation: cut uniform on {0..n} (or {1..n})"""
    # the rank vector of a uniform permutation is itself a uniform permutation
    ranks = random_permutations(n, count, rng)
    cuts = rng.integers(0 if include_empty else 1, n + 1, size=count)
    return ranks < cuts[:, None]


def indicator_moments(n: int) -> IndicatorMoments:
    """Closed-form moments of the 'unit i is ahead of k' indicators (own indicator included)"""
    if n < 2:
        raise ValueError(f"pair moments need at least two units, got n={n}")
    return IndicatorMoments(mean=0.5, second_moment=1.0 / 3.0, covariance=1.0 / 12.0, correlation=1.0 / 3.0)


def empirical_indicator_moments(n: int, samples: int = 100_000, seed: int = 1) -> IndicatorMoments:
    """Sample estimates of the indicator moments with standard errors"""
    if n < 2:
        raise ValueError(f"pair moments need at least two units, got n={n}")
    if samples < 2:
        raise ValueError("need at least two samples for standard errors")
    rng = np.random.default_rng(seed)
    masks = sample_prefix_masks(n, samples, rng).astype(float)
    first, second = masks[:, 0], masks[:, 1]
    root = math.sqrt(samples)

    mean = first.mean()
    product = first * second
    centered = (first - first.mean()) * (second - second.mean())
    covariance = centered.sum() / (samples - 1)
    correlation = float(np.corrcoef(first, second)[0, 1])
    return IndicatorMoments(
        mean=float(mean),
        second_moment=float(product.mean()),
        covariance=float(covariance),
        correlation=correlation,
        mean_stderr=float(first.std(ddof=1) / root),
        second_moment_stderr=float(product.std(ddof=1) / root),
        covariance_stderr=float(centered.std(ddof=1) / root),
        correlation_stderr=float((1.0 - correlation ** 2) / math.sqrt(samples - 3)),
        samples=samples,
    )


def exact_shapley(cost: SetCost, n: Optional[int] = None, cap: int = 10) -> AllocationEstimate:
    """Exact Shapley allocation, summing weighted marginal contributions over all 2^n subsets"""
    n = cost.n if n is None else n
    if n != cost.n:
        raise ValueError(f"cost is defined on {cost.n} units, not {n}")
    if n > cap:
        raise EnumerationCapError(n, cap)

    costs = cost.all_subset_costs()
    if costs[0] != 0.0:
        logger.warning(f"⚠️ c(empty) = {costs[0]:g} is not zero; allocations sum to c(all) - c(empty)")

    codes = np.arange(2 ** n)
    sizes = ((codes[:, None] >> np.arange(n)[None, :]) & 1).sum(axis=1)
    weights = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])

    values = np.empty(n)
    for k in range(n):
        without = codes[((codes >> k) & 1) == 0]
        values[k] = np.dot(weights[sizes[without]], costs[without | (1 << k)] - costs[without])

    logger.debug(f"🧮 Exact Shapley over {2 ** n} subsets, total={values.sum():.6g}")
    return AllocationEstimate(values, np.zeros(n), math.factorial(n), True)


def _chunk_statistics(cost: SetCost, count: int, rng: np.random.Generator) -> Tuple[int, np.ndarray, np.ndarray]:
    perms = random_permutations(cost.n, count, rng)
    increments = np.diff(cost.prefix_costs(perms), axis=1)
    contributions = np.empty_like(increments)
    contributions[np.arange(count)[:, None], perms] = increments
    mean = contributions.mean(axis=0)
    m2 = ((contributions - mean) ** 2).sum(axis=0)
    return count, mean, m2


def _merge_statistics(parts: List[Tuple[int, np.ndarray, np.ndarray]]) -> Tuple[int, np.ndarray, np.ndarray]:
    count, mean, m2 = parts[0]
    for other_count, other_mean, other_m2 in parts[1:]:
        total = count + other_count
        delta = other_mean - mean
        mean = mean + delta * (other_count / total)
        m2 = m2 + other_m2 + delta ** 2 * (count * other_count / total)
        count = total
    return count, mean, m2


def mc_shapley(cost: SetCost, samples: int, seed: int, n: Optional[int] = None,
               chunk_size: int = 10_000, n_jobs: int = 1) -> AllocationEstimate:
    """Monte Carlo Shapley allocation from random permutations, n increments per permutation"""
    n = cost.n if n is None else n
    if n != cost.n:
        raise ValueError(f"cost is defined on {cost.n} units, not {n}")
    if samples < 1:
        raise ValueError(f"Monte Carlo Shapley needs samples >= 1, got {samples}")

    start_time = time.time()
    sizes = chunk_sizes(samples, chunk_size)
    rngs = substream_rngs(seed, len(sizes))
    if n_jobs == 1 or len(sizes) == 1:
        parts = [_chunk_statistics(cost, size, rng) for size, rng in zip(sizes, rngs)]
    else:
        parts = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_chunk_statistics)(cost, size, rng) for size, rng in zip(sizes, rngs)
        )
    count, mean, m2 = _merge_statistics(parts)

    if count > 1:
        stderr = np.sqrt(np.maximum(m2, 0.0) / (count - 1)) / math.sqrt(count)
    else:
        stderr = np.full(n, np.nan)
    logger.debug(f"🎲 MC Shapley: {count} permutations of {n} units in {time.time() - start_time:.2f}s")
    return AllocationEstimate(mean, stderr, count, False)


class ShapleyEngine:
    """Chooses exact enumeration up to the configured cap and Monte Carlo above it"""

    def __init__(self, config: Optional[EngineConfig] = None):
        self.config = config or EngineConfig()

    def exact(self, cost: SetCost) -> AllocationEstimate:
        return exact_shapley(cost, cap=self.config.enumeration_cap)

    def monte_carlo(self, cost: SetCost, seed: int, samples: Optional[int] = None) -> AllocationEstimate:
        return mc_shapley(cost, samples or self.config.mc_samples, seed,
                          chunk_size=self.config.chunk_size, n_jobs=self.config.n_jobs)

    def estimate(self, cost: SetCost, seed: int = 0, samples: Optional[int] = None) -> AllocationEstimate:
        """Exact when n is within the enumeration cap, Monte Carlo otherwise"""
        if cost.n <= self.config.enumeration_cap:
            return self.exact(cost)
        return self.monte_carlo(cost, seed, samples)
