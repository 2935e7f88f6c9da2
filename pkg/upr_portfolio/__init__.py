"""UPR portfolio toolkit: uniform pessimistic risk, LIRS quantile fitting, benchmarks and backtests."""

__all__ = [
    "FitConfig",
    "ReturnPanel",
    "SplineQuantile",
    "build_portfolio",
    "fit_upr_portfolio",
    "run_backtest",
]

_EXPORTS = {
    "FitConfig": "upr_portfolio.optimizer",
    "fit_upr_portfolio": "upr_portfolio.optimizer",
    "ReturnPanel": "upr_portfolio.ingest",
    "SplineQuantile": "upr_portfolio.risk_core",
    "build_portfolio": "upr_portfolio.portfolios",
    "run_backtest": "upr_portfolio.backtest",
}


def __getattr__(name: str):
    if name in _EXPORTS:
        from importlib import import_module

        return getattr(import_module(_EXPORTS[name]), name)
    raise AttributeError(name)
