"""
Experiment session: reproduces the allocation and optimization tables and figure data as CSV.
"""
import time
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from api.models import AllocationMethod, EngineConfig, ExperimentName, ExperimentSpec, SolverKind
from data.reports import ReportWriter, summary_frame
from engines.allocation import AllocationEngine, linear_rates, roc
from engines.optimizer import CapitalOptimizer, component_vector, revenue_model, solve_crude, synthetic_covariance
from engines.permutation import ShapleyEngine, sample_prefix_masks
from models.cost_functions import AdditiveMaxCost, linearized_cost, random_pnl, var_cost
from models.portfolio import table1_portfolio

SWEEP_SIZES = tuple(range(5, 51, 5))
SWEEP_DRAWS = 20
VAR_SCENARIOS = 250
VAR_SHAPLEY_SAMPLES = 2_000
VAR_PREFIXES = 2_000
RWA_SWEEP = tuple(range(500, 1501, 50))

# (panel, covariance correlation, revenue target)
OPTIMIZATION_PANELS = (
    ("identity_z0", 0.0, 0.0),
    ("rho95_z0", 0.95, 0.0),
    ("rho95_z2", 0.95, 2.0),
)

TABLE1_METHODS = (AllocationMethod.STANDALONE, AllocationMethod.EULER,
                  AllocationMethod.SHAPLEY, AllocationMethod.LINEAR)


def draw_seed(*keys: int) -> int:
    """Deterministic integer seed derived from a tuple of keys"""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


class ExperimentSession:
    """Holds the configuration and lazily built engines for one experiment run"""

    def __init__(self, spec: ExperimentSpec, config: Optional[EngineConfig] = None):
        self.spec = spec
        self.config = config or EngineConfig()
        self._allocation_engine = None
        self._optimizer = None

    @property
    def allocation_engine(self) -> AllocationEngine:
        """Lazy initialization of the allocation engine"""
        if self._allocation_engine is None:
            self._allocation_engine = AllocationEngine(self.config)
        return self._allocation_engine

    @property
    def optimizer(self) -> CapitalOptimizer:
        if self._optimizer is None:
            self._optimizer = CapitalOptimizer()
        return self._optimizer

    def table1(self) -> Dict[str, pd.DataFrame]:
        """Standalone, Euler, Shapley and linear allocations of the stylized bank, with RoC"""
        portfolio = table1_portfolio()
        results = self.allocation_engine.compare(portfolio, list(TABLE1_METHODS), seed=self.spec.seed)
        table = pd.DataFrame({
            "unit_id": portfolio.ids,
            "rwa_capital": portfolio.rwa,
            "lbs_capital": portfolio.lbs,
            "revenue": portfolio.revenue,
        })
        for method in TABLE1_METHODS:
            table[method.value] = results[method.value].allocation.values
        for method in TABLE1_METHODS:
            table[f"roc_{method.value}"] = roc(portfolio.revenue, results[method.value].allocation.values)

        linear = results[AllocationMethod.LINEAR.value]
        summary = summary_frame({
            "total_rwa": portfolio.totals()[0],
            "total_lbs": portfolio.totals()[1],
            "total_capital": portfolio.total_capital(),
            "diversification_benefit": portfolio.diversification_benefit(),
            "mu_s": linear.stats.mu_s,
            "sigma_s": linear.stats.sigma_s,
            "p": linear.stats.p,
            "beta": linear.rates.beta,
            "w_rwa": linear.rates.weights[0],
            "w_lbs": linear.rates.weights[1],
        })
        return {"table1": table, "table1_summary": summary}

    def table2(self) -> Dict[str, pd.DataFrame]:
        """Unit returns and the RoC thresholds w / lambda of the crude optimum"""
        portfolio = table1_portfolio()
        h, _ = component_vector(portfolio)
        r, _ = revenue_model(portfolio)
        w = self.optimizer.rates_model.rates(h)
        crude = solve_crude(h, r, synthetic_covariance(portfolio.n, 0.0), w, 0.0, 0.1)
        outcome = self.optimizer.optimize(portfolio, synthetic_covariance(portfolio.n, 0.0), 0.1, 0.0, "full")

        table = pd.DataFrame({
            "unit_id": portfolio.ids,
            "revenue": portfolio.revenue,
            "standalone_capital": portfolio.rwa + portfolio.lbs,
            "return": r[0::2],
        })
        summary = summary_frame({
            "lambda": crude.lam,
            "threshold_rwa": w[0] / crude.lam,
            "threshold_lbs": w[1] / crude.lam,
            "lambda_full": outcome.solution.lam,
            "threshold_rwa_full": w[0] / outcome.solution.lam,
            "threshold_lbs_full": w[1] / outcome.solution.lam,
        })
        logger.info(f"📊 RoC thresholds: RWA {w[0] / crude.lam:.4f}, LBS {w[1] / crude.lam:.4f} (lambda={crude.lam:.3f})")
        return {"table2": table, "table2_summary": summary}

    def table3(self, epsilon: float = 0.1) -> Dict[str, pd.DataFrame]:
        """Local optima for three (covariance, target) panels under both solvers"""
        portfolio = table1_portfolio()
        rows, summaries = [], []
        for panel, rho, z in OPTIMIZATION_PANELS:
            covariance = synthetic_covariance(portfolio.n, rho)
            for solver in SolverKind:
                outcome = self.optimizer.optimize(portfolio, covariance, epsilon, z, solver.value)
                delta = outcome.solution.delta
                for k, unit_id in enumerate(portfolio.ids):
                    rows.append({
                        "panel": panel,
                        "solver": solver.value,
                        "unit_id": unit_id,
                        "delta_rwa": delta[2 * k],
                        "delta_lbs": delta[2 * k + 1],
                        "total_change": outcome.unit_change[k],
                    })
                summaries.append({
                    "panel": panel,
                    "solver": solver.value,
                    "rho": rho,
                    "z": z,
                    "epsilon": epsilon,
                    "lambda": outcome.solution.lam,
                    "capital_change": outcome.solution.capital_change,
                    "allocation_change": float(outcome.unit_change.sum()),
                    "mahalanobis": outcome.solution.mahalanobis,
                    "kkt_stationarity": outcome.solution.kkt_stationarity,
                    "constraint_residual": outcome.solution.constraint_residual,
                })
                logger.info(f"📊 {panel}/{solver.value}: total allocation change {outcome.unit_change.sum():+.3f}")
        return {"table3": pd.DataFrame(rows), "table3_summary": pd.DataFrame(summaries)}

    def fig1(self, sizes: Sequence[int] = SWEEP_SIZES, draws: int = SWEEP_DRAWS,
             samples: Optional[int] = None) -> Dict[str, pd.DataFrame]:
        """Correlation between the linear approximation and Shapley on uniform random portfolios"""
        engine = ShapleyEngine(self.config)
        samples = samples or self.spec.samples or self.config.mc_samples
        rows = []
        for n in sizes:
            correlations = []
            for draw in range(draws):
                rng = np.random.default_rng(draw_seed(self.spec.seed, 1, n, draw))
                a, b = rng.uniform(size=n), rng.uniform(size=n)
                rates, _ = linear_rates(a, b)
                linear = rates.weights[0] * a + rates.weights[1] * b
                shapley = engine.estimate(AdditiveMaxCost(a, b), draw_seed(self.spec.seed, 2, n, draw), samples)
                correlations.append(np.corrcoef(linear, shapley.values)[0, 1])
            rows.append(self._correlation_row(n, correlations, n <= self.config.enumeration_cap))
            logger.info(f"📈 n={n}: mean correlation {rows[-1]['mean_correlation']:.5f}")
        return {"fig1": pd.DataFrame(rows)}

    def fig2(self, sizes: Sequence[int] = SWEEP_SIZES, draws: int = SWEEP_DRAWS,
             samples: Optional[int] = None, prefixes: int = VAR_PREFIXES) -> Dict[str, pd.DataFrame]:
        """Correlation between VaR and its additive Shapley linearization over random prefixes"""
        engine = ShapleyEngine(self.config)
        samples = samples or self.spec.samples or VAR_SHAPLEY_SAMPLES
        rows = []
        for n in sizes:
            correlations = []
            for draw in range(draws):
                rng = np.random.default_rng(draw_seed(self.spec.seed, 3, n, draw))
                cost = var_cost(random_pnl(n, rng, VAR_SCENARIOS), self.config.var_level)
                alpha = engine.estimate(cost, draw_seed(self.spec.seed, 4, n, draw), samples).values
                linearized = linearized_cost(alpha, alpha)
                masks = sample_prefix_masks(n, prefixes, rng, include_empty=False)
                correlations.append(np.corrcoef(cost.evaluate_many(masks), linearized.evaluate_many(masks))[0, 1])
            rows.append(self._correlation_row(n, correlations, n <= self.config.enumeration_cap))
            logger.info(f"📈 VaR n={n}: mean correlation {rows[-1]['mean_correlation']:.5f}")
        return {"fig2": pd.DataFrame(rows)}

    @staticmethod
    def _correlation_row(n: int, correlations: List[float], exact: bool) -> dict:
        values = np.asarray(correlations, dtype=float)
        return {
            "n": n,
            "draws": values.size,
            "mean_correlation": float(values.mean()),
            "std_correlation": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "shapley": "exact" if exact else "mc",
        }

    def fig3(self, totals: Sequence[float] = RWA_SWEEP) -> Dict[str, pd.DataFrame]:
        """Exchange rates as total RWA capital is swept with LBS capital held at 1000"""
        portfolio = table1_portfolio()
        rows = []
        for total in totals:
            scaled = portfolio.scaled_rwa(float(total))
            rates, stats = linear_rates(scaled.rwa, scaled.lbs)
            rows.append({
                "total_rwa": float(total),
                "total_lbs": scaled.totals()[1],
                "p": stats.p,
                "beta": rates.beta,
                "w_rwa": rates.weights[0],
                "w_lbs": rates.weights[1],
            })
        return {"fig3": pd.DataFrame(rows)}

    def frames(self, name: ExperimentName) -> Dict[str, pd.DataFrame]:
        runners = {
            ExperimentName.TABLE1: self.table1,
            ExperimentName.TABLE2: self.table2,
            ExperimentName.TABLE3: self.table3,
            ExperimentName.FIG1: self.fig1,
            ExperimentName.FIG2: self.fig2,
            ExperimentName.FIG3: self.fig3,
        }
        if name not in runners:
            raise ValueError(f"unknown experiment '{name}'")
        return runners[name]()

    def run(self) -> List:
        """Run the named experiment (or all of them) and write CSVs plus manifest.json"""
        name = ExperimentName(self.spec.name)
        names = [n for n in ExperimentName if n != ExperimentName.ALL] if name == ExperimentName.ALL else [name]
        writer = ReportWriter(self.spec.out_dir)
        for experiment in names:
            start_time = time.time()
            writer.write_frames(self.frames(experiment))
            logger.info(f"✅ {experiment.value} finished in {time.time() - start_time:.1f}s")
        writer.write_manifest([n.value for n in names], self.spec.seed, self.spec.samples)
        return list(writer.written)


def run_experiment(spec: ExperimentSpec, config: Optional[EngineConfig] = None) -> List:
    """Run one experiment spec and return the files it wrote"""
    return ExperimentSession(spec, config).run()
