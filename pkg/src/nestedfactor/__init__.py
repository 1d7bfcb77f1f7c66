"""Nested factor models for return panels: linear factors with a factor
structure on log-volatilities, plus simulation, dependence diagnostics
and correlation-cleaning backtests."""

from . import backtest, data, diagnostics, errors, linfactor, nlcorr, simengine, volcal

__all__ = [
    "backtest",
    "data",
    "diagnostics",
    "errors",
    "linfactor",
    "nlcorr",
    "simengine",
    "volcal",
]

__version__ = "0.1.0"
