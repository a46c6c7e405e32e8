"""
Pydantic models for portfolio files, engine configuration and command requests.
"""
from enum import Enum
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class RatiosRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cet1: float
    t1: float


class UnitRecord(BaseModel):
    """One business unit as written in the portfolio JSON file"""
    model_config = ConfigDict(extra="forbid")

    id: str
    name: str = ""
    rwa_capital: Optional[float] = None
    lbs_capital: Optional[float] = None
    revenue: float = 0.0
    entity: Union[str, List[str], None] = None
    rwa_exposure: Optional[float] = None
    lbs_exposure: Optional[float] = None
    entity_rwa_capital: Optional[float] = None
    entity_lbs_capital: Optional[float] = None

    @field_validator("id")
    @classmethod
    def id_not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("unit id must not be blank")
        return value


class PortfolioFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    units: List[UnitRecord]
    subsidiaries: List[str] = Field(default_factory=list)
    ratios: Optional[RatiosRecord] = None
    consolidated: str = "consolidated"


class EngineConfig(BaseModel):
    """Tuning knobs for the permutation and hierarchy engines"""

    enumeration_cap: int = Field(default=10, ge=1, le=16)
    mc_samples: int = Field(default=100_000, ge=1)
    chunk_size: int = Field(default=10_000, ge=1)
    n_jobs: int = 1
    hierarchy_samples: int = Field(default=20_000, ge=1)
    var_level: float = Field(default=0.99, gt=0.0, lt=1.0)


class ExperimentName(str, Enum):
    TABLE1 = "table1"
    TABLE2 = "table2"
    TABLE3 = "table3"
    FIG1 = "fig1"
    FIG2 = "fig2"
    FIG3 = "fig3"
    ALL = "all"


class ExperimentSpec(BaseModel):
    name: ExperimentName
    seed: int = 7
    samples: Optional[int] = Field(default=None, ge=1)
    out_dir: Path = Path("results")


class AllocationMethod(str, Enum):
    STANDALONE = "standalone"
    EULER = "euler"
    SHAPLEY = "shapley"
    MC = "mc"
    LINEAR = "linear"
    HIERARCHY = "hierarchy"


class SolverKind(str, Enum):
    FULL = "full"
    CRUDE = "crude"


class AllocateRequest(BaseModel):
    portfolio: Path
    method: AllocationMethod = AllocationMethod.LINEAR
    seed: int = 0
    samples: Optional[int] = Field(default=None, ge=1)
    out_dir: Path = Path("results")


class CovarianceSource(BaseModel):
    """Parsed form of the --cov flag: identity, rho=<value> or file:<path>"""

    kind: str
    rho: float = 0.0
    path: Optional[Path] = None

    @classmethod
    def parse(cls, text: str) -> "CovarianceSource":
        text = text.strip()
        if text == "identity":
            return cls(kind="identity")
        if text.startswith("rho="):
            return cls(kind="rho", rho=float(text[len("rho="):]))
        if text.startswith("file:"):
            return cls(kind="file", path=Path(text[len("file:"):]))
        raise ValueError(f"unknown covariance source '{text}' (expected identity, rho=<value> or file:<path>)")

    @model_validator(mode="after")
    def check_rho(self) -> "CovarianceSource":
        if self.kind == "rho" and not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie strictly inside (-1, 1), got {self.rho}")
        return self


class OptimizeRequest(BaseModel):
    portfolio: Path
    cov: CovarianceSource = CovarianceSource(kind="identity")
    epsilon: float = Field(default=0.1, gt=0.0)
    z: float = 0.0
    solver: SolverKind = SolverKind.FULL
    shrinkage: float = Field(default=0.0, ge=0.0, le=1.0)
    out_dir: Path = Path("results")
