"""Price loading, log-return conversion and rolling estimation/evaluation windows."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from upr_portfolio.errors import IngestError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 240
DEFAULT_HORIZON = 60


@dataclass(frozen=True)
class PricePanel:
    """Cleaned adjusted closing prices, one row per date and one column per ticker."""

    dates: tuple[pd.Timestamp, ...]
    tickers: tuple[str, ...]
    prices: np.ndarray
    dropped: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.prices.shape != (len(self.dates), len(self.tickers)):
            raise IngestError(
                f"Price matrix shape {self.prices.shape} does not match "
                f"{len(self.dates)} dates x {len(self.tickers)} tickers"
            )

    @property
    def n(self) -> int:
        return len(self.dates)

    @property
    def p(self) -> int:
        return len(self.tickers)

    def to_frame(self) -> pd.DataFrame:
        return _frame(self.dates, self.tickers, self.prices)


@dataclass(frozen=True)
class ReturnPanel:
    """Daily log returns; ``dates[t]`` is the date the return ``returns[t]`` is realised on."""

    dates: tuple[pd.Timestamp, ...]
    tickers: tuple[str, ...]
    returns: np.ndarray

    def __post_init__(self) -> None:
        if self.returns.ndim != 2 or self.returns.shape != (len(self.dates), len(self.tickers)):
            raise ValidationError(
                f"Return matrix shape {self.returns.shape} does not match "
                f"{len(self.dates)} dates x {len(self.tickers)} tickers"
            )
        if not np.all(np.isfinite(self.returns)):
            raise ValidationError("Return panel contains non-finite entries")

    @property
    def n(self) -> int:
        return self.returns.shape[0]

    @property
    def p(self) -> int:
        return self.returns.shape[1]

    def rows(self, start: int, stop: int) -> "ReturnPanel":
        """Rows ``start`` .. ``stop`` inclusive."""
        return ReturnPanel(self.dates[start : stop + 1], self.tickers, self.returns[start : stop + 1])

    def to_frame(self) -> pd.DataFrame:
        return _frame(self.dates, self.tickers, self.returns)

    @classmethod
    def from_array(cls, returns: np.ndarray, tickers: list[str] | None = None) -> "ReturnPanel":
        """Wrap a bare matrix with consecutive daily dates starting 1900-01-01."""
        arr = np.asarray(returns, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        names = tickers or [f"X{j + 1}" for j in range(arr.shape[1])]
        dates = pd.date_range("1900-01-01", periods=arr.shape[0], freq="D")
        return cls(tuple(dates), tuple(names), arr)


@dataclass(frozen=True)
class RollingWindow:
    """Inclusive row ranges of one fit / evaluate step of the rolling protocol."""

    fit_start: int
    fit_end: int
    eval_start: int
    eval_end: int

    @property
    def eval_rows(self) -> int:
        return self.eval_end - self.eval_start + 1

    def to_dict(self) -> dict[str, int]:
        return {
            "fit_start": self.fit_start,
            "fit_end": self.fit_end,
            "eval_start": self.eval_start,
            "eval_end": self.eval_end,
        }


def _frame(dates, tickers, values: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame(values, columns=list(tickers))
    frame.insert(0, "date", [pd.Timestamp(d).strftime("%Y-%m-%d") for d in dates])
    return frame


def _read_table(path: Path | str) -> pd.DataFrame:
    p = Path(path)
    if not p.is_file():
        raise IngestError(f"File not found: {p}")
    try:
        frame = pd.read_csv(p)
    except Exception as e:
        raise IngestError(f"Unable to parse {p} as CSV: {e}") from e
    if frame.shape[1] < 2:
        raise IngestError(f"{p}: expected a date column followed by at least one asset column")
    date_col = frame.columns[0]
    try:
        dates = pd.to_datetime(frame[date_col], format="ISO8601")
    except Exception as e:
        raise IngestError(f"{p}: first column '{date_col}' is not parseable as dates: {e}") from e
    values = frame.drop(columns=[date_col])
    bad_cols = [c for c in values.columns if not pd.api.types.is_numeric_dtype(values[c])]
    for col in bad_cols:
        coerced = pd.to_numeric(values[col], errors="coerce")
        if coerced.notna().sum() != values[col].notna().sum():
            raise IngestError(f"{p}: column '{col}' contains non-numeric values")
        values[col] = coerced
    values.index = pd.DatetimeIndex(dates)
    values.columns = [str(c) for c in values.columns]
    return values


def load_prices(
    path: Path | str,
    start: str | None = None,
    end: str | None = None,
) -> PricePanel:
    """Load a price CSV (ISO date column + one column per ticker) into a clean panel.

    Tickers with any missing value inside the requested date range are dropped and
    reported in ``PricePanel.dropped``; remaining prices must be strictly positive.
    """
    values = _read_table(path)
    if not values.index.is_monotonic_increasing or values.index.has_duplicates:
        raise IngestError(f"{path}: dates must be strictly increasing")
    if start is not None:
        values = values.loc[values.index >= pd.Timestamp(start)]
    if end is not None:
        values = values.loc[values.index <= pd.Timestamp(end)]
    if len(values) < 2:
        raise IngestError(f"{path}: need at least 2 price rows, got {len(values)}")

    missing = [c for c in values.columns if values[c].isna().any()]
    if missing:
        logger.warning("Dropping %d ticker(s) with missing prices: %s", len(missing), ", ".join(missing))
        values = values.drop(columns=missing)
    if values.shape[1] == 0:
        raise IngestError(f"{path}: no assets remain after dropping tickers with missing prices")

    arr = values.to_numpy(dtype=float)
    bad = np.argwhere(~(arr > 0))
    if bad.size:
        row, col = bad[0]
        raise IngestError(
            f"non-positive price {arr[row, col]!r} for ticker '{values.columns[col]}' "
            f"on {values.index[row].strftime('%Y-%m-%d')}"
        )
    return PricePanel(tuple(values.index), tuple(values.columns), arr, tuple(missing))


def to_log_returns(panel: PricePanel) -> ReturnPanel:
    if panel.n < 2:
        raise ValidationError(f"need at least 2 price rows, got {panel.n}")
    returns = np.diff(np.log(panel.prices), axis=0)
    return ReturnPanel(panel.dates[1:], panel.tickers, returns)


def load_returns(path: Path | str) -> ReturnPanel:
    """Read a return CSV written by :func:`write_panel_csv`."""
    values = _read_table(path)
    if values.isna().any().any():
        raise IngestError(f"{path}: return file contains missing values")
    return ReturnPanel(tuple(values.index), tuple(values.columns), values.to_numpy(dtype=float))


def write_panel_csv(panel: PricePanel | ReturnPanel, path: Path | str) -> Path:
    """Write a panel back out in the ingest schema."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    panel.to_frame().to_csv(out, index=False, float_format="%.17g")
    return out


def rolling_windows(
    n_rows: int,
    window: int = DEFAULT_WINDOW,
    horizon: int = DEFAULT_HORIZON,
    keep_partial: bool = True,
) -> list[RollingWindow]:
    """Fit on ``window`` rows, evaluate on the next ``horizon`` rows, advance by ``horizon``."""
    if window < 1 or horizon < 1:
        raise ValidationError(f"window and horizon must be positive, got {window} and {horizon}")
    if n_rows <= window:
        raise ValidationError(f"need more than {window} rows for a {window}-row window, got {n_rows}")
    windows: list[RollingWindow] = []
    fit_start = 0
    while fit_start + window < n_rows:
        eval_start = fit_start + window
        eval_end = min(eval_start + horizon, n_rows) - 1
        if eval_end - eval_start + 1 < horizon and not keep_partial:
            break
        windows.append(RollingWindow(fit_start, eval_start - 1, eval_start, eval_end))
        fit_start += horizon
    if not windows:
        raise ValidationError(
            f"{n_rows} rows leave no complete {horizon}-row evaluation range after a {window}-row window"
        )
    return windows
