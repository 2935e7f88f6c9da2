"""
Rolling-window backtests, out-of-sample performance metrics, the pairwise Sharpe-ratio
Z test and quantile-curve matching of a fitted LIRS model.

Wealth conventions follow the additive definition: W_t = 1 + Σ_{s≤t} r_s with W_0 = 1.
``compounding=True`` switches CW and MDD to W_t = Π_{s≤t} (1 + r_s) for cross-checks.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd

from upr_portfolio.errors import DegenerateSeriesError, NumericalError, ValidationError
from upr_portfolio.ingest import DEFAULT_HORIZON, DEFAULT_WINDOW, ReturnPanel, RollingWindow, rolling_windows
from upr_portfolio.optimizer import FitConfig, PortfolioWeights
from upr_portfolio.portfolios import MODEL_NAMES, build_portfolio
from upr_portfolio.random_streams import substream
from upr_portfolio.risk_core import (
    DEFAULT_ETA,
    SplineQuantile,
    empirical_alpha_risk,
    empirical_quantile,
    upr_score,
)
from upr_portfolio.settings import thread_cap

try:
    from tqdm import tqdm
except ImportError:  # progress bars are optional
    tqdm = None

logger = logging.getLogger(__name__)

METRIC_NAMES = ("cw", "max_loss", "mdd", "cvar01", "sr")
DEFAULT_QUANTILE_GRID = tuple(np.round(np.arange(1, 100) / 100.0, 2).tolist())


def _series(r) -> np.ndarray:
    arr = np.asarray(r, dtype=float).ravel()
    if arr.size == 0:
        raise ValidationError("return series must be non-empty")
    return arr


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def wealth_path(r, compounding: bool = False) -> np.ndarray:
    """W_0 = 1 followed by the wealth after each return."""
    arr = _series(r)
    tail = np.cumprod(1.0 + arr) if compounding else 1.0 + np.cumsum(arr)
    return np.concatenate(([1.0], tail))


def cumulative_wealth(r, compounding: bool = False) -> float:
    return float(wealth_path(r, compounding)[-1])


def max_drawdown(r, compounding: bool = False) -> float:
    """Largest relative fall from a running peak of the wealth path (≤ 0)."""
    path = wealth_path(r, compounding)
    peak = np.maximum.accumulate(path)
    return float(min(((path - peak) / peak).min(), 0.0))


def max_loss(r) -> float:
    """Worst single-period loss −min(r), floored at zero when every return is positive."""
    return float(max(-_series(r).min(), 0.0))


def cvar_01(r) -> float:
    return empirical_alpha_risk(_series(r), 0.1)


def sharpe(r) -> float:
    arr = _series(r)
    if arr.size < 2:
        raise DegenerateSeriesError("Sharpe ratio needs at least two returns")
    sd = float(np.std(arr, ddof=1))
    if not sd > 0:
        raise DegenerateSeriesError("Sharpe ratio is undefined for a zero-variance series")
    return float(arr.mean() / sd)


@dataclass(frozen=True)
class MetricTable:
    cw: float
    max_loss: float
    mdd: float
    cvar01: float
    sr: float

    @classmethod
    def from_returns(cls, r, compounding: bool = False) -> "MetricTable":
        arr = _series(r)
        return cls(
            cw=cumulative_wealth(arr, compounding),
            max_loss=max_loss(arr),
            mdd=max_drawdown(arr, compounding),
            cvar01=cvar_01(arr),
            sr=sharpe(arr),
        )

    def to_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in METRIC_NAMES}

    @classmethod
    def from_dict(cls, payload: dict[str, float]) -> "MetricTable":
        return cls(**{name: float(payload[name]) for name in METRIC_NAMES})


# ---------------------------------------------------------------------------
# Sharpe-ratio significance test
# ---------------------------------------------------------------------------


def sr_test(r_i, r_j) -> float:
    """Z statistic for H0: SR_i = SR_j from joint sample moments (asymptotically N(0, 1))."""
    a = _series(r_i)
    b = _series(r_j)
    if a.size != b.size:
        raise ValidationError(f"series lengths differ: {a.size} vs {b.size}")
    L = a.size
    if L < 3:
        raise ValidationError(f"need at least 3 paired returns, got {L}")
    mu_i, mu_j = a.mean(), b.mean()
    cov = np.cov(a, b, ddof=1)
    sd_i, sd_j, cov_ij = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1]), cov[0, 1]
    numerator = mu_i * sd_j - mu_j * sd_i
    if sd_i == 0 or sd_j == 0:
        raise DegenerateSeriesError("Sharpe-ratio test needs two series with positive variance")
    theta = (
        2 * sd_i**2 * sd_j**2
        - 2 * sd_i * sd_j * cov_ij
        + 0.5 * (mu_i**2 * sd_j**2 + mu_j**2 * sd_i**2)
        - (mu_i * mu_j) / (sd_i * sd_j) * cov_ij**2
    ) / L
    if numerator == 0:
        return 0.0
    if not theta > 0:
        raise DegenerateSeriesError(f"Sharpe-ratio test variance is non-positive ({theta:g})")
    return float(numerator / math.sqrt(theta))


def sr_test_matrix(series: dict[str, Sequence[float]]) -> pd.DataFrame:
    """Pairwise Z statistics, entry (i, j) testing row model i against column model j."""
    names = list(series)
    table = pd.DataFrame(0.0, index=names, columns=names)
    for a_idx, a in enumerate(names):
        for b in names[a_idx + 1 :]:
            z = sr_test(series[a], series[b])
            table.loc[a, b] = z
            table.loc[b, a] = -z
    return table


# ---------------------------------------------------------------------------
# Quantile matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantileDiscrepancy:
    table: pd.DataFrame
    lower_gap: float
    upper_gap: float
    mean_gap: float
    oos_score: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "lower_gap": self.lower_gap,
            "upper_gap": self.upper_gap,
            "mean_gap": self.mean_gap,
            "oos_score": self.oos_score,
            "curve": self.table.to_dict(orient="list"),
        }


def _mean_or_nan(values: np.ndarray) -> float:
    return float(values.mean()) if values.size else float("nan")


def quantile_discrepancy(
    model: SplineQuantile,
    oos_returns,
    grid: Sequence[float] = DEFAULT_QUANTILE_GRID,
    eta: float = DEFAULT_ETA,
) -> QuantileDiscrepancy:
    """Fitted g(α) against the empirical α-quantile of out-of-sample returns on ``grid``."""
    y = _series(oos_returns)
    alphas = np.asarray(grid, dtype=float).ravel()
    if alphas.size == 0:
        raise ValidationError("quantile grid must be non-empty")
    if np.any(alphas <= 0) or np.any(alphas > 1):
        raise ValidationError("quantile grid levels must lie in (0, 1]")
    fitted = np.asarray(model.evaluate(alphas), dtype=float)
    empirical = np.array([empirical_quantile(y, float(a)) for a in alphas])
    gap = np.abs(fitted - empirical)
    table = pd.DataFrame({"alpha": alphas, "fitted": fitted, "empirical": empirical, "gap": gap})
    return QuantileDiscrepancy(
        table=table,
        lower_gap=_mean_or_nan(gap[alphas <= 0.2]),
        upper_gap=_mean_or_nan(gap[alphas >= 0.8]),
        mean_gap=float(gap.mean()),
        oos_score=float(np.mean(upr_score(model, y, eta))),
    )


# ---------------------------------------------------------------------------
# Rolling backtest
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WindowResult:
    window: RollingWindow
    weights: PortfolioWeights
    dates: tuple[str, ...]
    returns: np.ndarray
    spline: SplineQuantile | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "window": self.window.to_dict(),
            "weights": self.weights.to_dict(),
            "dates": list(self.dates),
            "returns": [float(v) for v in self.returns],
            "spline": self.spline.to_dict() if self.spline is not None else None,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "WindowResult":
        spline = payload.get("spline")
        return cls(
            window=RollingWindow(**payload["window"]),
            weights=PortfolioWeights.from_dict(payload["weights"]),
            dates=tuple(payload["dates"]),
            returns=np.array(payload["returns"], dtype=float),
            spline=SplineQuantile.from_dict(spline) if spline else None,
        )


@dataclass(frozen=True, eq=False)
class BacktestReport:
    """Out-of-sample record of one model over all rolling windows."""

    model_name: str
    per_window: tuple[WindowResult, ...]
    metrics: MetricTable
    sr_tests: dict[str, float] = field(default_factory=dict)
    failed_windows: tuple[int, ...] = ()
    compounding: bool = False

    @property
    def concatenated_returns(self) -> np.ndarray:
        if not self.per_window:
            return np.empty(0)
        return np.concatenate([w.returns for w in self.per_window])

    @property
    def dates(self) -> tuple[str, ...]:
        return tuple(d for w in self.per_window for d in w.dates)

    def returns_frame(self) -> pd.DataFrame:
        rows = [
            {"model": self.model_name, "window": idx, "date": d, "return": float(r)}
            for idx, w in enumerate(self.per_window)
            for d, r in zip(w.dates, w.returns)
        ]
        return pd.DataFrame(rows, columns=["model", "window", "date", "return"])

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"model": self.model_name, "metric": k, "value": v} for k, v in self.metrics.to_dict().items()],
            columns=["model", "metric", "value"],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model_name,
            "metrics": self.metrics.to_dict(),
            "sr_tests": {k: float(v) for k, v in self.sr_tests.items()},
            "failed_windows": list(self.failed_windows),
            "compounding": self.compounding,
            "windows": [w.to_dict() for w in self.per_window],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "BacktestReport":
        return cls(
            model_name=payload["model"],
            per_window=tuple(WindowResult.from_dict(w) for w in payload["windows"]),
            metrics=MetricTable.from_dict(payload["metrics"]),
            sr_tests={k: float(v) for k, v in payload.get("sr_tests", {}).items()},
            failed_windows=tuple(payload.get("failed_windows", ())),
            compounding=bool(payload.get("compounding", False)),
        )


def window_seed(seed: int, index: int) -> int:
    """Per-window optimizer seed, independent of the model list."""
    return int(substream(seed, "backtest", "window", index).integers(0, 2**63 - 1))


def _fit_window(
    panel: ReturnPanel,
    index: int,
    window: RollingWindow,
    models: Sequence[str],
    config: FitConfig,
    mu0: float | None,
    cqr_weighting: str,
) -> dict[str, WindowResult | None]:
    fit_panel = panel.rows(window.fit_start, window.fit_end)
    eval_x = panel.returns[window.eval_start : window.eval_end + 1]
    eval_dates = tuple(pd.Timestamp(d).strftime("%Y-%m-%d") for d in panel.dates[window.eval_start : window.eval_end + 1])
    window_config = FitConfig(**{**config.to_dict(), "seed": window_seed(config.seed, index)})
    out: dict[str, WindowResult | None] = {}
    for name in models:
        try:
            fit = build_portfolio(name, fit_panel, mu0, window_config, cqr_weighting)
        except (NumericalError, ValidationError) as e:
            logger.warning("window %d: %s fit failed and is skipped: %s", index, name, e)
            out[name] = None
            continue
        out[name] = WindowResult(window, fit.weights, eval_dates, eval_x @ fit.weights.beta, fit.model)
    return out


def run_backtest(
    panel: ReturnPanel,
    models: Sequence[str],
    window: int = DEFAULT_WINDOW,
    horizon: int = DEFAULT_HORIZON,
    config: FitConfig | None = None,
    mu0: float | None = None,
    compounding: bool = False,
    keep_partial: bool = True,
    cqr_weighting: str = "objective",
    threads: int | None = None,
    progress: bool = False,
    sr_tests: bool = True,
) -> list[BacktestReport]:
    """Fit every model on each rolling window and evaluate it on the following horizon.

    ``mu0=None`` targets the equal-weight expected return of each fit window; a number fixes
    the target for every window. Windows run on up to ``threads`` workers (default
    UPR_OPT_THREADS) and are merged in window order.
    """
    config = config or FitConfig()
    names = [m.strip().lower() for m in models]
    if not names:
        raise ValidationError("at least one model is required")
    unknown = [m for m in names if m not in MODEL_NAMES]
    if unknown:
        raise ValidationError(f"unknown model(s) {', '.join(unknown)}; choose from {', '.join(MODEL_NAMES)}")
    if len(set(names)) != len(names):
        raise ValidationError("model names must be unique")
    windows = rolling_windows(panel.n, window, horizon, keep_partial)
    workers = max(1, min(threads or thread_cap(), len(windows)))
    logger.info("backtest: %d windows, %d models, %d worker(s)", len(windows), len(names), workers)

    def task(item: tuple[int, RollingWindow]) -> dict[str, WindowResult | None]:
        return _fit_window(panel, item[0], item[1], names, config, mu0, cqr_weighting)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = executor.map(task, enumerate(windows))
        if progress and tqdm is not None:
            results = tqdm(results, total=len(windows), desc="Windows")
        per_window = list(results)

    reports: list[BacktestReport] = []
    for name in names:
        done = tuple(r[name] for r in per_window if r[name] is not None)
        failed = tuple(i for i, r in enumerate(per_window) if r[name] is None)
        if not done:
            raise NumericalError(f"model {name} failed on every window")
        series = np.concatenate([w.returns for w in done])
        reports.append(BacktestReport(name, done, MetricTable.from_returns(series, compounding), {}, failed, compounding))

    if sr_tests and len(reports) > 1:
        reports = attach_sr_tests(reports)
    return reports


def attach_sr_tests(reports: Sequence[BacktestReport]) -> list[BacktestReport]:
    """Fill each report's ``sr_tests`` with Z statistics against every other model."""
    series = {r.model_name: r.concatenated_returns for r in reports}
    lengths = {v.size for v in series.values()}
    if len(lengths) != 1:
        logger.warning("skipping Sharpe-ratio tests: models have different numbers of evaluated returns")
        return list(reports)
    try:
        matrix = sr_test_matrix(series)
    except DegenerateSeriesError as e:
        logger.warning("skipping Sharpe-ratio tests: %s", e)
        return list(reports)
    return [
        BacktestReport(
            r.model_name,
            r.per_window,
            r.metrics,
            {other: float(matrix.loc[r.model_name, other]) for other in matrix.columns if other != r.model_name},
            r.failed_windows,
            r.compounding,
        )
        for r in reports
    ]
