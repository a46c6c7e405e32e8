"""
Command handlers for allocate, optimize and experiment requests.
"""
from pathlib import Path
from typing import List, Optional

from loguru import logger

from api.models import (
    AllocateRequest, CovarianceSource, EngineConfig, ExperimentSpec, OptimizeRequest
)
from data.reports import ReportWriter, allocation_frames, optimization_frames
from engines.allocation import AllocationEngine
from engines.optimizer import (
    CapitalOptimizer, CovarianceModel, component_vector, estimate_covariance, load_series_csv,
    synthetic_covariance
)
from models.portfolio import Portfolio, load_portfolio
from session.experiment_session import run_experiment


def build_covariance(source: CovarianceSource, portfolio: Portfolio, shrinkage: float = 0.0) -> CovarianceModel:
    """Covariance model for the interleaved component vector of a portfolio"""
    if source.kind == "identity":
        return synthetic_covariance(portfolio.n, 0.0)
    if source.kind == "rho":
        return synthetic_covariance(portfolio.n, source.rho)
    if source.kind == "file":
        series = load_series_csv(source.path)
        _, ids = component_vector(portfolio)
        if set(series.columns) == set(ids):
            series = series[ids]
        elif series.shape[1] != len(ids):
            raise ValueError(f"series has {series.shape[1]} columns, portfolio has {len(ids)} components")
        return estimate_covariance(series, shrinkage)
    raise ValueError(f"unknown covariance source '{source.kind}'")


def handle_allocate(request: AllocateRequest, config: Optional[EngineConfig] = None) -> List[Path]:
    """Allocate a portfolio file with one method and write the report"""
    portfolio = load_portfolio(request.portfolio)
    result = AllocationEngine(config).allocate(portfolio, request.method, request.seed, request.samples)
    writer = ReportWriter(request.out_dir)
    paths = writer.write_frames(allocation_frames(portfolio, result))
    print(f"🏦 {result.allocation.method.value}: total allocated {result.allocation.total:.6g} "
          f"across {portfolio.n} units")
    return paths


def handle_optimize(request: OptimizeRequest) -> List[Path]:
    """Solve the local capital optimization for a portfolio file and write the report"""
    portfolio = load_portfolio(request.portfolio)
    covariance = build_covariance(request.cov, portfolio, request.shrinkage)
    outcome = CapitalOptimizer().optimize(portfolio, covariance, request.epsilon, request.z, request.solver.value)
    writer = ReportWriter(request.out_dir)
    paths = writer.write_frames(optimization_frames(outcome))
    solution = outcome.solution
    print(f"🧭 lambda={solution.lam:.6g} capital change={solution.capital_change:+.6g} "
          f"residuals: stationarity={solution.kkt_stationarity:.2e} constraint={solution.constraint_residual:.2e}")
    return paths


def handle_experiment(spec: ExperimentSpec, config: Optional[EngineConfig] = None) -> List[Path]:
    paths = run_experiment(spec, config)
    print(f"📊 {spec.name.value}: wrote {len(paths)} file(s) to {spec.out_dir}")
    return paths


def handle_command(command: str, payload: dict, config: Optional[EngineConfig] = None) -> List[Path]:
    """Validate a command payload and route it to its handler"""
    logger.debug(f"Handling '{command}' with {payload}")
    if command == "allocate":
        return handle_allocate(AllocateRequest.model_validate(payload), config)
    if command == "optimize":
        return handle_optimize(OptimizeRequest.model_validate(payload))
    if command == "experiment":
        return handle_experiment(ExperimentSpec.model_validate(payload), config)
    raise ValueError(f"unknown command '{command}'")
