"""Portfolio optimisation under Basel capital constraints via an alternating direction method."""
from .adm import (AdmParams, AdmState, SolveReport, kkt_residual, solve_max_return,
                  solve_mean_rho, solve_mean_rho_basel)
from .estimators import BaselPortfolio
from .market_sim import KouParams, build_panel, preset, simulate_returns
from .risk_measures import RiskParams, basel2, basel3, basel25, cvar_at, var_at, variance
from .scenario_data import LossVector, PortfolioWeights, ScenarioPanel, dedup_rows, loss_vector

__version__ = "0.1.0"

__all__ = [
    "AdmParams", "AdmState", "SolveReport", "kkt_residual", "solve_max_return", "solve_mean_rho",
    "solve_mean_rho_basel", "BaselPortfolio", "KouParams", "build_panel", "preset", "simulate_returns", "RiskParams",
    "basel2", "basel3", "basel25", "cvar_at", "var_at", "variance", "LossVector", "PortfolioWeights",
    "ScenarioPanel", "dedup_rows", "loss_vector",
]
