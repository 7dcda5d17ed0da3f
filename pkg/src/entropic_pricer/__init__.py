"""Minimum relative entropy price measures.

Scenario measures and funded returns, mean-variance hedging, exponential
kernel calibration and tree pricing, Lévy-Khintchine moment rates,
stochastic-volatility fair-price equations and hedge backtests.
"""

__version__ = "0.1.0"

from .calibration import (FundingArrangement, FundingKind, KernelKind, TiltKernel, calibrate,
                          exponential_kernel, fair_price_one_period, linear_calibration,
                          linear_kernel, max_entropy_certificate, settlement_increment)
from .errors import (CompletenessError, ConfigurationError, ConvergenceError,
                     DegenerateReplicationError, DomainError, InputError, MagnitudeError,
                     PreconditionError, PricerError, RankError, SectorRedundancyError,
                     SolverError)
from .portfolio import (ReturnMoments, check_no_arbitrage, frontier_slope, hedge_weights,
                        incremental_sharpe, moments_from_measure, optimal_portfolio,
                        two_sector_hedge)
from .scenario import (MarketSlice, ScenarioMeasure, kl_divergence, load_scenario_json,
                       load_slice_json, normalized_return, price_functional_checks)
from .tree import ScenarioTree, load_tree_json, price_on_tree
