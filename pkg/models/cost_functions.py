"""
Subset cost functions c(S) evaluated on boolean membership masks.
"""
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger

from models.errors import PortfolioValidationError
from models.portfolio import Portfolio

Members = Union[np.ndarray, Sequence[int], Iterable[int]]

# upper bound on scenario x permutation x unit elements held at once by VaR prefix evaluation
_VAR_BLOCK_ELEMENTS = 4_000_000


def subset_mask(members: Members, n: int) -> np.ndarray:
    """Turn a boolean mask or a collection of unit indices into a boolean mask of length n"""
    array = np.asarray(list(members) if not isinstance(members, np.ndarray) else members)
    if array.dtype == bool:
        if array.shape != (n,):
            raise ValueError(f"membership mask must have length {n}, got shape {array.shape}")
        return array
    mask = np.zeros(n, dtype=bool)
    if array.size:
        mask[array.astype(int)] = True
    return mask


def ranks_of(perms: np.ndarray) -> np.ndarray:
    """Position of every unit inside each permutation (rows are permutations)"""
    ranks = np.empty_like(perms)
    rows = np.arange(perms.shape[0])[:, None]
    ranks[rows, perms] = np.arange(perms.shape[1])[None, :]
    return ranks


class SetCost(ABC):
    """A deterministic cost c(S) over subsets of n units with c(empty) = 0"""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError(f"a set cost needs at least one unit, got n={n}")
        self.n = n

    @abstractmethod
    def evaluate_many(self, masks: np.ndarray) -> np.ndarray:
        """Costs of a (k, n) boolean stack of subsets"""

    def __call__(self, members: Members) -> float:
        mask = subset_mask(members, self.n)
        return float(self.evaluate_many(mask[None, :])[0])

    def total(self) -> float:
        return self(np.ones(self.n, dtype=bool))

    def prefix_costs(self, perms: np.ndarray) -> np.ndarray:
        """Costs of every prefix of each permutation: (s, n + 1), column j holds c(first j units)"""
        perms = np.asarray(perms)
        ranks = ranks_of(perms)
        out = np.empty((perms.shape[0], self.n + 1))
        for j in range(self.n + 1):
            out[:, j] = self.evaluate_many(ranks < j)
        return out

    def all_subset_costs(self) -> np.ndarray:
        """Costs of all 2^n subsets, indexed by the integer bitmask of members"""
        codes = np.arange(2 ** self.n)
        masks = ((codes[:, None] >> np.arange(self.n)[None, :]) & 1).astype(bool)
        return self.evaluate_many(masks)


def _prefix_sums(values: np.ndarray, perms: np.ndarray) -> np.ndarray:
    ordered = values[perms]
    sums = np.zeros((perms.shape[0], perms.shape[1] + 1) + values.shape[1:])
    sums[:, 1:] = np.cumsum(ordered, axis=1)
    return sums


class AdditiveCost(SetCost):
    """c(S) = sum of member values"""

    def __init__(self, values: Sequence[float]):
        self.values = np.asarray(values, dtype=float)
        super().__init__(len(self.values))

    def evaluate_many(self, masks: np.ndarray) -> np.ndarray:
        return masks.astype(float) @ self.values

    def prefix_costs(self, perms: np.ndarray) -> np.ndarray:
        return _prefix_sums(self.values, np.asarray(perms))


class AdditiveMaxCost(SetCost):
    """c(S) = max(sum of a over S, sum of b over S)"""

    def __init__(self, a: Sequence[float], b: Sequence[float]):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise ValueError(f"component vectors must have equal length, got {self.a.shape} and {self.b.shape}")
        super().__init__(len(self.a))

    def evaluate_many(self, masks: np.ndarray) -> np.ndarray:
        weights = masks.astype(float)
        return np.maximum(weights @ self.a, weights @ self.b)

    def prefix_costs(self, perms: np.ndarray) -> np.ndarray:
        perms = np.asarray(perms)
        return np.maximum(_prefix_sums(self.a, perms), _prefix_sums(self.b, perms))


class LinearizedCost(AdditiveMaxCost):
    """l(S) = max(sum of alpha_f over S, sum of alpha_g over S)"""

    def __init__(self, alpha_f: Sequence[float], alpha_g: Sequence[float]):
        if len(alpha_f) != len(alpha_g):
            raise ValueError(f"allocation vectors differ in length: {len(alpha_f)} vs {len(alpha_g)}")
        super().__init__(alpha_f, alpha_g)


class NestedMaxCost(SetCost):
    """Consolidated max versus the sum of per-subsidiary maxima"""

    def __init__(self, consolidated_f: Sequence[float], consolidated_g: Sequence[float],
                 entity_f: np.ndarray, entity_g: np.ndarray):
        self.consolidated = np.column_stack([np.asarray(consolidated_f, float), np.asarray(consolidated_g, float)])
        self.entity_f = np.atleast_2d(np.asarray(entity_f, dtype=float))
        self.entity_g = np.atleast_2d(np.asarray(entity_g, dtype=float))
        n = self.consolidated.shape[0]
        if self.entity_f.shape != self.entity_g.shape or self.entity_f.shape[0] != n:
            raise ValueError("subsidiary component matrices must be (n, subsidiaries) and agree in shape")
        if self.entity_f.shape[1] < 1:
            raise ValueError("a nested cost needs at least one subsidiary")
        super().__init__(n)

    @classmethod
    def from_components(cls, components: np.ndarray) -> "NestedMaxCost":
        """Build from the (n, 2 + 2E) layout: consolidated (f, g) then (f, g) per subsidiary"""
        components = np.asarray(components, dtype=float)
        return cls(components[:, 0], components[:, 1], components[:, 2::2], components[:, 3::2])

    def _combine(self, consolidated: np.ndarray, entity_f: np.ndarray, entity_g: np.ndarray) -> np.ndarray:
        top = np.maximum(consolidated[..., 0], consolidated[..., 1])
        subsidiaries = np.maximum(entity_f, entity_g).sum(axis=-1)
        return np.maximum(top, subsidiaries)

    def evaluate_many(self, masks: np.ndarray) -> np.ndarray:
        weights = masks.astype(float)
        return self._combine(weights @ self.consolidated, weights @ self.entity_f, weights @ self.entity_g)

    def prefix_costs(self, perms: np.ndarray) -> np.ndarray:
        perms = np.asarray(perms)
        return self._combine(_prefix_sums(self.consolidated, perms),
                             _prefix_sums(self.entity_f, perms),
                             _prefix_sums(self.entity_g, perms))


@dataclass(frozen=True)
class PnLMatrix:
    """Scenario-by-unit profit and loss"""
    values: np.ndarray
    unit_ids: Optional[List[str]] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"PnL matrix must be (scenarios >= 1, units >= 1), got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("PnL matrix contains non-finite values")
        if self.unit_ids is not None and len(self.unit_ids) != values.shape[1]:
            raise ValueError("PnL header length differs from the column count")
        object.__setattr__(self, "values", values)

    @property
    def scenarios(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


def quantile_rank(level: float, scenarios: int) -> int:
    """1-based rank, counted from the largest loss, that defines the empirical VaR"""
    # rounding guards against 1 - level carrying representation noise (1 - 0.99 != 0.01)
    return max(1, math.ceil(round((1.0 - level) * scenarios, 9)))


class VarCost(SetCost):
    """Empirical VaR of the subset loss: the ceil((1 - level) m)-th largest of m scenario losses"""

    def __init__(self, pnl: Union[PnLMatrix, np.ndarray], level: float = 0.99):
        if not 0.0 < level < 1.0:
            raise ValueError(f"VaR level must lie in (0, 1), got {level}")
        self.pnl = pnl if isinstance(pnl, PnLMatrix) else PnLMatrix(np.asarray(pnl))
        self.level = level
        self.rank = quantile_rank(level, self.pnl.scenarios)
        super().__init__(self.pnl.n)

    def _quantile(self, losses: np.ndarray) -> np.ndarray:
        # losses carry scenarios on axis 0
        m = losses.shape[0]
        kth = m - self.rank
        return np.partition(losses, kth, axis=0)[kth] + 0.0

    def evaluate_many(self, masks: np.ndarray) -> np.ndarray:
        losses = -(self.pnl.values @ masks.astype(float).T)
        return self._quantile(losses)

    def prefix_costs(self, perms: np.ndarray) -> np.ndarray:
        perms = np.asarray(perms)
        s, n = perms.shape
        m = self.pnl.scenarios
        out = np.zeros((s, n + 1))
        block = max(1, _VAR_BLOCK_ELEMENTS // (m * n))
        for start in range(0, s, block):
            chunk = perms[start:start + block]
            losses = -np.cumsum(self.pnl.values[:, chunk], axis=2)
            out[start:start + block, 1:] = self._quantile(losses)
        return out


def additive_cost(values: Sequence[float]) -> AdditiveCost:
    return AdditiveCost(values)


def additive_max_cost(portfolio: Portfolio) -> AdditiveMaxCost:
    """c(S) = max(RWA capital of S, LBS capital of S)"""
    return AdditiveMaxCost(portfolio.rwa, portfolio.lbs)


def nested_max_cost(portfolio: Portfolio) -> NestedMaxCost:
    """Bank capital as the greater of consolidated capital and the sum of subsidiary capitals"""
    if not portfolio.tree.subsidiaries:
        raise PortfolioValidationError("nested cost needs at least one subsidiary", field="subsidiaries")
    for unit in portfolio.units:
        if unit.has_entity_components and unit.id not in portfolio.tree.membership:
            raise PortfolioValidationError("subsidiary components supplied for a unit outside every subsidiary",
                                           unit_id=unit.id, field="entity")
    components, _ = portfolio.entity_components()
    return NestedMaxCost.from_components(components)


def var_cost(pnl: Union[PnLMatrix, np.ndarray], level: float) -> VarCost:
    return VarCost(pnl, level)


def linearized_cost(alpha_f: Sequence[float], alpha_g: Sequence[float]) -> LinearizedCost:
    return LinearizedCost(alpha_f, alpha_g)


def random_pnl(n: int, rng: np.random.Generator, scenarios: int = 250,
               vol_range=(0.5, 2.0), loading_range=(-0.8, 0.8)) -> PnLMatrix:
    """One-factor normal PnL: unit vols uniform on vol_range, factor loadings uniform on loading_range"""
    vols = rng.uniform(*vol_range, size=n)
    loadings = rng.uniform(*loading_range, size=n)
    factor = rng.standard_normal((scenarios, 1))
    idiosyncratic = rng.standard_normal((scenarios, n))
    values = vols * (loadings * factor + np.sqrt(1.0 - loadings ** 2) * idiosyncratic)
    return PnLMatrix(values, [f"U{i + 1}" for i in range(n)])


def load_pnl_csv(path: Union[str, Path]) -> PnLMatrix:
    """Read a PnL CSV: header row of unit ids, one row per scenario"""
    frame = pd.read_csv(path)
    logger.debug(f"📂 Loaded PnL matrix {frame.shape} from {path}")
    return PnLMatrix(frame.to_numpy(dtype=float), [str(c) for c in frame.columns])
