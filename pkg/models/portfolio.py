"""
Business units, capital components and legal-entity hierarchies.
"""
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import ValidationError

from api.models import PortfolioFile, UnitRecord
from models.errors import PortfolioValidationError

CONSOLIDATED = "consolidated"


@dataclass(frozen=True)
class CapitalRatios:
    cet1: float
    t1: float

    def __post_init__(self):
        for name in ("cet1", "t1"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise PortfolioValidationError(f"capital ratio must lie in (0, 1), got {value}", field=name)


def capital_from_exposures(rwa_exposure: float, lbs_exposure: float,
                           ratios: CapitalRatios) -> Tuple[float, float]:
    """Convert RWA and LBS exposures into (RWA capital, LBS capital)"""
    if rwa_exposure < 0:
        raise PortfolioValidationError(f"exposure must be >= 0, got {rwa_exposure}", field="rwa_exposure")
    if lbs_exposure < 0:
        raise PortfolioValidationError(f"exposure must be >= 0, got {lbs_exposure}", field="lbs_exposure")
    return ratios.cet1 * rwa_exposure, ratios.t1 * lbs_exposure


def binding_capital(rwa_capital: float, lbs_capital: float) -> float:
    """The capital that actually binds: the greater of the two components"""
    return max(rwa_capital, lbs_capital)


@dataclass(frozen=True)
class BusinessUnit:
    id: str
    name: str
    rwa_capital: float
    lbs_capital: float
    revenue: float = 0.0
    entity: Optional[str] = None
    # components under the subsidiary's local ratios; zero when not supplied
    entity_rwa_capital: float = 0.0
    entity_lbs_capital: float = 0.0

    def __post_init__(self):
        for name in ("rwa_capital", "lbs_capital", "entity_rwa_capital", "entity_lbs_capital"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise PortfolioValidationError("value must be finite", unit_id=self.id, field=name)
            if value < 0:
                raise PortfolioValidationError(f"capital must be >= 0, got {value}", unit_id=self.id, field=name)
        if not math.isfinite(self.revenue):
            raise PortfolioValidationError("value must be finite", unit_id=self.id, field="revenue")

    @property
    def standalone_capital(self) -> float:
        return binding_capital(self.rwa_capital, self.lbs_capital)

    @property
    def has_entity_components(self) -> bool:
        return self.entity_rwa_capital != 0.0 or self.entity_lbs_capital != 0.0


@dataclass(frozen=True)
class LegalEntityTree:
    """Consolidated entity plus disjoint subsidiaries"""
    consolidated: str = CONSOLIDATED
    subsidiaries: Tuple[str, ...] = ()
    membership: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.subsidiaries)) != len(self.subsidiaries):
            raise PortfolioValidationError("subsidiary ids must be unique", field="subsidiaries")
        if self.consolidated in self.subsidiaries:
            raise PortfolioValidationError("consolidated entity cannot also be a subsidiary", field="subsidiaries")
        for unit_id, entity in self.membership.items():
            if entity not in self.subsidiaries:
                raise PortfolioValidationError(f"unknown subsidiary '{entity}'", unit_id=unit_id, field="entity")

    def members(self, subsidiary: str) -> List[str]:
        return [unit_id for unit_id, entity in self.membership.items() if entity == subsidiary]


@dataclass(frozen=True)
class Portfolio:
    units: Tuple[BusinessUnit, ...]
    tree: LegalEntityTree = field(default_factory=LegalEntityTree)
    ratios: Optional[CapitalRatios] = None

    def __post_init__(self):
        if len(self.units) == 0:
            raise PortfolioValidationError("portfolio must contain at least one unit", field="units")
        seen = set()
        for unit in self.units:
            if unit.id in seen:
                raise PortfolioValidationError("duplicate unit id", unit_id=unit.id, field="id")
            seen.add(unit.id)
        for unit_id in self.tree.membership:
            if unit_id not in seen:
                raise PortfolioValidationError("membership names a unit outside the portfolio",
                                               unit_id=unit_id, field="entity")
        for unit in self.units:
            if unit.entity is not None and unit.entity not in self.tree.subsidiaries:
                raise PortfolioValidationError(f"unknown subsidiary '{unit.entity}'", unit_id=unit.id, field="entity")
            if self.tree.membership.get(unit.id) != unit.entity:
                raise PortfolioValidationError("unit entity disagrees with the legal-entity tree",
                                               unit_id=unit.id, field="entity")

    @property
    def n(self) -> int:
        return len(self.units)

    @property
    def ids(self) -> List[str]:
        return [unit.id for unit in self.units]

    @property
    def rwa(self) -> np.ndarray:
        return np.array([unit.rwa_capital for unit in self.units], dtype=float)

    @property
    def lbs(self) -> np.ndarray:
        return np.array([unit.lbs_capital for unit in self.units], dtype=float)

    @property
    def revenue(self) -> np.ndarray:
        return np.array([unit.revenue for unit in self.units], dtype=float)

    def totals(self) -> Tuple[float, float]:
        """Portfolio (RWA, LBS) capital totals"""
        return math.fsum(self.rwa), math.fsum(self.lbs)

    def total_capital(self) -> float:
        """max(sum RWA, sum LBS): the single-entity bank capital"""
        return binding_capital(*self.totals())

    def standalone_capital(self) -> np.ndarray:
        return np.maximum(self.rwa, self.lbs)

    def diversification_benefit(self) -> float:
        return math.fsum(self.standalone_capital()) - self.total_capital()

    def subset_by_ids(self, ids: Sequence[str]) -> "Portfolio":
        wanted = set(ids)
        units = tuple(unit for unit in self.units if unit.id in wanted)
        membership = {uid: ent for uid, ent in self.tree.membership.items() if uid in wanted}
        return Portfolio(units, replace(self.tree, membership=membership), self.ratios)

    def scaled_rwa(self, total_rwa: float) -> "Portfolio":
        """Rescale every unit's RWA capital so that the portfolio total equals total_rwa"""
        current = self.totals()[0]
        if current <= 0:
            raise PortfolioValidationError("cannot rescale a portfolio with zero RWA capital", field="rwa_capital")
        factor = total_rwa / current
        units = tuple(replace(unit, rwa_capital=unit.rwa_capital * factor) for unit in self.units)
        return replace(self, units=units)

    def entity_components(self) -> Tuple[np.ndarray, List[str]]:
        """Per-unit hierarchy components: consolidated (LBS, RWA) then (LBS, RWA) per subsidiary"""
        subsidiaries = self.tree.subsidiaries
        components = np.zeros((self.n, 2 + 2 * len(subsidiaries)))
        components[:, 0] = self.lbs
        components[:, 1] = self.rwa
        labels = [f"{self.tree.consolidated}:lbs", f"{self.tree.consolidated}:rwa"]
        for j, subsidiary in enumerate(subsidiaries):
            labels.extend([f"{subsidiary}:lbs", f"{subsidiary}:rwa"])
        for k, unit in enumerate(self.units):
            entity = self.tree.membership.get(unit.id)
            if entity is None:
                continue
            j = subsidiaries.index(entity)
            components[k, 2 + 2 * j] = unit.entity_lbs_capital
            components[k, 3 + 2 * j] = unit.entity_rwa_capital
        return components, labels


def _unit_from_record(record: UnitRecord, subsidiaries: Sequence[str], consolidated: str,
                      ratios: Optional[CapitalRatios]) -> BusinessUnit:
    entity = record.entity
    if isinstance(entity, list):
        named = [e for e in entity if e != consolidated]
        if len(named) > 1:
            raise PortfolioValidationError(f"overlapping subsidiaries {named}", unit_id=record.id, field="entity")
        entity = named[0] if named else None
    if entity == consolidated:
        entity = None
    if entity is not None and entity not in subsidiaries:
        raise PortfolioValidationError(f"unknown subsidiary '{entity}'", unit_id=record.id, field="entity")

    capitals = {"rwa": record.rwa_capital, "lbs": record.lbs_capital}
    missing = [side for side, capital in capitals.items() if capital is None]
    for side in missing:
        if getattr(record, f"{side}_exposure") is None or ratios is None:
            raise PortfolioValidationError(
                f"missing {side}_capital (or {side}_exposure together with file-level ratios)",
                unit_id=record.id, field=f"{side}_capital")
    if missing:
        try:
            exposures = [(getattr(record, f"{side}_exposure") if side in missing else 0.0) for side in ("rwa", "lbs")]
            converted = capital_from_exposures(*exposures, ratios)
        except PortfolioValidationError as e:
            raise PortfolioValidationError(e.detail, unit_id=record.id, field=e.field) from e
        for side, capital in zip(("rwa", "lbs"), converted):
            if capitals[side] is None:
                capitals[side] = capital

    return BusinessUnit(
        id=record.id,
        name=record.name or record.id,
        rwa_capital=capitals["rwa"],
        lbs_capital=capitals["lbs"],
        revenue=record.revenue,
        entity=entity,
        entity_rwa_capital=record.entity_rwa_capital or 0.0,
        entity_lbs_capital=record.entity_lbs_capital or 0.0,
    )


def _translate_pydantic_error(error: ValidationError, raw: dict) -> PortfolioValidationError:
    first = error.errors()[0]
    loc = first.get("loc", ())
    unit_id, field_name = None, None
    if len(loc) >= 2 and loc[0] == "units" and isinstance(loc[1], int):
        units = raw.get("units", []) if isinstance(raw, dict) else []
        if loc[1] < len(units) and isinstance(units[loc[1]], dict):
            unit_id = str(units[loc[1]].get("id", f"#{loc[1]}"))
        else:
            unit_id = f"#{loc[1]}"
        field_name = ".".join(str(part) for part in loc[2:]) or None
    elif loc:
        field_name = ".".join(str(part) for part in loc)
    return PortfolioValidationError(first.get("msg", "invalid value"), unit_id=unit_id, field=field_name)


def portfolio_from_dict(raw: dict) -> Portfolio:
    """Validate a decoded portfolio document and build the domain object"""
    try:
        document = PortfolioFile.model_validate(raw)
    except ValidationError as e:
        raise _translate_pydantic_error(e, raw) from e

    if not document.units:
        raise PortfolioValidationError("portfolio must contain at least one unit", field="units")

    ratios = CapitalRatios(document.ratios.cet1, document.ratios.t1) if document.ratios else None
    units = []
    seen = set()
    for record in document.units:
        if record.id in seen:
            raise PortfolioValidationError("duplicate unit id", unit_id=record.id, field="id")
        seen.add(record.id)
        units.append(_unit_from_record(record, document.subsidiaries, document.consolidated, ratios))

    membership = {unit.id: unit.entity for unit in units if unit.entity is not None}
    tree = LegalEntityTree(document.consolidated, tuple(document.subsidiaries), membership)
    return Portfolio(tuple(units), tree, ratios)


def load_portfolio(path: Union[str, Path]) -> Portfolio:
    """Load and validate a JSON portfolio file; unit order follows the file"""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise PortfolioValidationError(f"portfolio file not found: {path}")
    except json.JSONDecodeError as e:
        raise PortfolioValidationError(f"cannot parse {path}: {e}") from e
    portfolio = portfolio_from_dict(raw)
    rwa_total, lbs_total = portfolio.totals()
    logger.debug(f"📂 Loaded {portfolio.n} units from {path} (RWA={rwa_total:g}, LBS={lbs_total:g})")
    return portfolio


def portfolio_to_dict(portfolio: Portfolio) -> dict:
    units = []
    for unit in portfolio.units:
        record = {
            "id": unit.id,
            "name": unit.name,
            "rwa_capital": unit.rwa_capital,
            "lbs_capital": unit.lbs_capital,
            "revenue": unit.revenue,
            "entity": unit.entity,
        }
        if unit.has_entity_components:
            record["entity_rwa_capital"] = unit.entity_rwa_capital
            record["entity_lbs_capital"] = unit.entity_lbs_capital
        units.append(record)
    document = {
        "units": units,
        "subsidiaries": list(portfolio.tree.subsidiaries),
        "consolidated": portfolio.tree.consolidated,
    }
    if portfolio.ratios is not None:
        document["ratios"] = {"cet1": portfolio.ratios.cet1, "t1": portfolio.ratios.t1}
    return document


def save_portfolio(portfolio: Portfolio, path: Union[str, Path]) -> Path:
    """Write the portfolio in the JSON file format read by load_portfolio"""
    path = Path(path)
    path.write_text(json.dumps(portfolio_to_dict(portfolio), indent=2))
    return path


def table1_portfolio() -> Portfolio:
    """The five-unit stylized bank: RWA 900, LBS 1000, revenue 10% of standalone capital"""
    rows = [
        ("A", 230.0, 150.0, 23.0),
        ("B", 120.0, 250.0, 25.0),
        ("C", 150.0, 250.0, 25.0),
        ("D", 250.0, 150.0, 25.0),
        ("E", 150.0, 200.0, 20.0),
    ]
    units = tuple(BusinessUnit(uid, f"Unit {uid}", rwa, lbs, revenue) for uid, rwa, lbs, revenue in rows)
    return Portfolio(units)


def random_two_entity_portfolio(rng: np.random.Generator, per_entity: int = 2,
                                low: float = 50.0, high: float = 250.0) -> Portfolio:
    """Random hierarchy fixture: subsidiaries X and Y with per_entity units each, all components uniform"""
    units = []
    membership = {}
    for entity in ("X", "Y"):
        for i in range(per_entity):
            uid = f"{entity}{i + 1}"
            rwa, lbs, entity_rwa, entity_lbs = rng.uniform(low, high, size=4)
            units.append(BusinessUnit(uid, uid, float(rwa), float(lbs), 0.0, entity,
                                      float(entity_rwa), float(entity_lbs)))
            membership[uid] = entity
    return Portfolio(tuple(units), LegalEntityTree(CONSOLIDATED, ("X", "Y"), membership))
