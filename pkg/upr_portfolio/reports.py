"""Artifact writers for fits, backtests and simulations (JSON, CSV and XLSX)."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Sequence

import pandas as pd

from upr_portfolio.backtest import BacktestReport, quantile_discrepancy
from upr_portfolio.errors import ValidationError

logger = logging.getLogger(__name__)


def dumps(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_json(payload: Any, path: Path | str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps(payload), encoding="utf-8")
    return out


def read_json(path: Path | str) -> Any:
    p = Path(path)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ValidationError(f"File not found: {p}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"{p} is not valid JSON: {e}") from e


def write_csv(frame: pd.DataFrame, path: Path | str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.17g")
    return out


def write_xlsx(sheets: dict[str, pd.DataFrame], path: Path | str) -> Path:
    """One worksheet per table; sheet names are cut to Excel's 31-character limit."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with pd.ExcelWriter(out, engine="openpyxl") as writer:
        for name, frame in sheets.items():
            frame.to_excel(writer, sheet_name=name[:31], index=False)
    return out


def metric_table(reports: Sequence[BacktestReport]) -> pd.DataFrame:
    """Wide table: one row per model, one column per metric."""
    return pd.DataFrame(
        [{"model": r.model_name, **r.metrics.to_dict()} for r in reports],
        columns=["model", "cw", "max_loss", "mdd", "cvar01", "sr"],
    )


def sr_table(reports: Sequence[BacktestReport]) -> pd.DataFrame:
    rows = [
        {"model": r.model_name, "versus": other, "z": z}
        for r in reports
        for other, z in r.sr_tests.items()
    ]
    return pd.DataFrame(rows, columns=["model", "versus", "z"])


def quantile_curves(report: BacktestReport) -> pd.DataFrame:
    """Per-window (alpha, fitted, empirical) curves of a model that carries a fitted spline."""
    frames = []
    for idx, w in enumerate(report.per_window):
        if w.spline is None:
            continue
        curve = quantile_discrepancy(w.spline, w.returns).table
        curve.insert(0, "window", idx)
        curve.insert(0, "model", report.model_name)
        frames.append(curve)
    if not frames:
        return pd.DataFrame(columns=["model", "window", "alpha", "fitted", "empirical", "gap"])
    return pd.concat(frames, ignore_index=True)


def write_backtest(
    reports: Sequence[BacktestReport],
    out_dir: Path | str,
    sr_tests: bool = False,
    xlsx: bool = False,
) -> list[Path]:
    """Write one JSON per model plus flat returns, metrics and curve CSVs."""
    out = Path(out_dir)
    written = [write_json(r.to_dict(), out / f"backtest_{r.model_name}.json") for r in reports]
    returns = pd.concat([r.returns_frame() for r in reports], ignore_index=True)
    metrics = pd.concat([r.metrics_frame() for r in reports], ignore_index=True)
    written.append(write_csv(returns, out / "returns.csv"))
    written.append(write_csv(metrics, out / "metrics.csv"))
    curves = [quantile_curves(r) for r in reports]
    curves = [c for c in curves if not c.empty]
    if curves:
        written.append(write_csv(pd.concat(curves, ignore_index=True), out / "quantile_curves.csv"))
    if sr_tests:
        written.append(write_csv(sr_table(reports), out / "sr_tests.csv"))
    if xlsx:
        sheets = {"metrics": metric_table(reports), "returns": returns}
        if sr_tests:
            sheets["sr_tests"] = sr_table(reports)
        written.append(write_xlsx(sheets, out / "backtest.xlsx"))
    logger.info("wrote %d backtest artifact(s) to %s", len(written), out)
    return written


def load_backtest(path: Path | str) -> BacktestReport:
    payload = read_json(path)
    try:
        return BacktestReport.from_dict(payload)
    except (KeyError, TypeError) as e:
        raise ValidationError(f"{path} is not a backtest report: {e}") from e
