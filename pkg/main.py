"""
capalloc command line: capital allocation, local capital optimization and the
reproduction experiments. Each command writes CSV reports into --out.
"""
import argparse
import os
import sys
from typing import List, Optional

from loguru import logger

from api.handlers import handle_command
from api.models import AllocationMethod, CovarianceSource, EngineConfig, ExperimentName, SolverKind
from models.errors import NumericalError, OutputError

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERIC = 2


def configure_logging(verbose: bool = False):
    """Single stderr sink; CAPALLOC_LOG_LEVEL sets the level, --verbose forces DEBUG"""
    level = "DEBUG" if verbose else os.environ.get("CAPALLOC_LOG_LEVEL", "INFO").upper()
    logger.remove()
    logger.add(sys.stderr, level=level, format="<level>{level: <8}</level> | {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capalloc", description="Capital allocation for max-type bank capital")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--n-jobs", type=int, default=1, help="worker threads for Monte Carlo engines")
    commands = parser.add_subparsers(dest="command", required=True)

    allocate = commands.add_parser("allocate", help="allocate capital to business units")
    allocate.add_argument("--portfolio", required=True)
    allocate.add_argument("--method", choices=[m.value for m in AllocationMethod], default=AllocationMethod.LINEAR.value)
    allocate.add_argument("--seed", type=int, default=0)
    allocate.add_argument("--samples", type=int)
    allocate.add_argument("--out", default="results")

    optimize = commands.add_parser("optimize", help="local capital optimization")
    optimize.add_argument("--portfolio", required=True)
    optimize.add_argument("--cov", default="identity", help="identity | rho=<value> | file:<path>")
    optimize.add_argument("--shrinkage", type=float, default=0.0)
    optimize.add_argument("--epsilon", type=float, default=0.1)
    optimize.add_argument("--z", type=float, default=0.0)
    optimize.add_argument("--solver", choices=[s.value for s in SolverKind], default=SolverKind.FULL.value)
    optimize.add_argument("--out", default="results")

    experiment = commands.add_parser("experiment", help="reproduce a table or figure as CSV")
    experiment.add_argument("--name", required=True, help=" | ".join(n.value for n in ExperimentName))
    experiment.add_argument("--seed", type=int, default=7)
    experiment.add_argument("--samples", type=int)
    experiment.add_argument("--out", default="results")
    return parser


def payload_from_args(args: argparse.Namespace) -> dict:
    if args.command == "allocate":
        return {"portfolio": args.portfolio, "method": args.method, "seed": args.seed,
                "samples": args.samples, "out_dir": args.out}
    if args.command == "optimize":
        return {"portfolio": args.portfolio, "cov": CovarianceSource.parse(args.cov), "epsilon": args.epsilon,
                "z": args.z, "solver": args.solver, "shrinkage": args.shrinkage, "out_dir": args.out}
    return {"name": args.name, "seed": args.seed, "samples": args.samples, "out_dir": args.out}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    try:
        config = EngineConfig(n_jobs=args.n_jobs)
        handle_command(args.command, payload_from_args(args), config)
    except NumericalError as e:
        logger.error(f"❌ Numerical failure: {e}")
        return EXIT_NUMERIC
    except (ValueError, OutputError) as e:
        logger.error(f"❌ {e}")
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
