"""
Command-line entry point.

Usage:
  python -m upr_portfolio ingest prices.csv returns.csv [--start 2015-01-01] [--end 2020-12-31]
  python -m upr_portfolio fit returns.csv --model upr [--lr 0.01 --max-iters 10000 ...]
  python -m upr_portfolio backtest returns.csv --models upr,ew,mv --sr-tests
  python -m upr_portfolio simulate --tau-fit 0.6667 --tau-oos 0.75 --replications 50

Settings resolve as: explicit flag > --config YAML file > built-in default. Status lines go to
stderr; result tables go to stdout; artifacts are written under --out-dir (default
UPR_OUT_DIR or ./out). Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import pandas as pd

from upr_portfolio.backtest import run_backtest
from upr_portfolio.errors import EXIT_OK, ConfigError, UprError, exit_code_for
from upr_portfolio.ingest import load_prices, load_returns, to_log_returns, write_panel_csv
from upr_portfolio.optimizer import STEP_RULES, DELTA_INITS, FitConfig
from upr_portfolio.portfolios import CQR_WEIGHTINGS, MODEL_NAMES, build_portfolio
from upr_portfolio.reports import metric_table, write_backtest, write_csv, write_json
from upr_portfolio.risk_core import uniform_knots
from upr_portfolio.settings import default_out_dir, load_config_file, load_env, log_level
from upr_portfolio.simulate import TAIL_MODELS, CopulaSpec, tail_experiment


@dataclass
class RunConfig:
    window: int = 240
    horizon: int = 60
    eta: float = 1e-5
    knots: int = 19
    lr: float = 0.01
    max_iters: int = 10_000
    tol: float = 1e-8
    mu0: str | float = "ew"
    seed: int = 0
    models: tuple[str, ...] | None = None
    sr_tests: bool = False
    out_dir: str | None = None
    step_rule: str = "fixed"
    delta_init: str = "empirical"
    tau_fit: float = 2.0 / 3.0
    tau_oos: float = 2.0 / 3.0
    n: int = 300
    replications: int = 1
    cqr_weighting: str = "objective"
    compounding: bool = False
    keep_partial: bool = True
    xlsx: bool = False

    @classmethod
    def resolve(cls, file_values: dict[str, Any], flag_values: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        merged = {**file_values, **{k: v for k, v in flag_values.items() if k in known and v is not None}}
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def positive_int(name: str, low: int = 1) -> None:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < low:
                raise ConfigError(f"{name} must be an integer >= {low}, got {value!r}")

        def positive_real(name: str) -> None:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0 or not math.isfinite(value):
                raise ConfigError(f"{name} must be a positive number, got {value!r}")

        for name in ("eta", "lr", "tol", "tau_fit", "tau_oos"):
            value = getattr(self, name)
            if isinstance(value, str):
                try:
                    setattr(self, name, float(value))
                except ValueError as e:
                    raise ConfigError(f"{name} must be a number, got {value!r}") from e
        positive_int("window", 2)
        positive_int("horizon")
        positive_int("knots")
        positive_int("max_iters")
        positive_int("n")
        positive_int("replications")
        positive_real("lr")
        positive_real("tol")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        for name in ("eta", "tau_fit", "tau_oos"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value!r}")
        self.mu0 = _parse_mu0(self.mu0)
        if self.models is not None:
            self.models = _parse_models(self.models)
        if self.step_rule not in STEP_RULES:
            raise ConfigError(f"step_rule must be one of {', '.join(STEP_RULES)}, got {self.step_rule!r}")
        if self.delta_init not in DELTA_INITS:
            raise ConfigError(f"delta_init must be one of {', '.join(DELTA_INITS)}, got {self.delta_init!r}")
        if self.cqr_weighting not in CQR_WEIGHTINGS:
            raise ConfigError(f"cqr_weighting must be one of {', '.join(CQR_WEIGHTINGS)}, got {self.cqr_weighting!r}")

    @property
    def target(self) -> float | None:
        return None if self.mu0 == "ew" else float(self.mu0)

    def fit_config(self) -> FitConfig:
        return FitConfig(
            eta=float(self.eta),
            M=int(self.knots),
            mu0=self.target,
            learning_rate=float(self.lr),
            max_iters=int(self.max_iters),
            rel_tol=float(self.tol),
            seed=int(self.seed),
            step_rule=self.step_rule,
            delta_init=self.delta_init,
        )

    def output_dir(self) -> Path:
        return Path(self.out_dir) if self.out_dir else default_out_dir()


def _parse_mu0(value: Any) -> str | float:
    if isinstance(value, str):
        text = value.strip().lower()
        if text == "ew":
            return "ew"
        try:
            value = float(text)
        except ValueError as e:
            raise ConfigError(f"mu0 must be 'ew' or a number, got {value!r}") from e
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"mu0 must be 'ew' or a finite number, got {value!r}")
    return float(value)


def _parse_models(value: Any) -> tuple[str, ...]:
    items = value.split(",") if isinstance(value, str) else list(value)
    names = tuple(str(m).strip().lower() for m in items if str(m).strip())
    if not names:
        raise ConfigError("models must name at least one model")
    unknown = [m for m in names if m not in MODEL_NAMES]
    if unknown:
        raise ConfigError(f"unknown model(s) {', '.join(unknown)}; choose from {', '.join(MODEL_NAMES)}")
    return names


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _status(message: str) -> None:
    print(message, file=sys.stderr)


def cmd_ingest(cfg: RunConfig, prices_csv: str, out_csv: str, start: str | None = None, end: str | None = None) -> int:
    panel = load_prices(prices_csv, start, end)
    if panel.dropped:
        _status(f"Dropped {len(panel.dropped)} ticker(s) with missing prices: {', '.join(panel.dropped)}")
    returns = to_log_returns(panel)
    out = write_panel_csv(returns, out_csv)
    print(f"{returns.n} return rows x {returns.p} assets -> {out}")
    return EXIT_OK


def cmd_fit(cfg: RunConfig, returns_csv: str, model: str) -> int:
    name = _parse_models(model)[0]
    panel = load_returns(returns_csv)
    fit_config = cfg.fit_config()
    _status(f"Fitting {name} on {panel.n} rows x {panel.p} assets...")
    fit = build_portfolio(name, panel, cfg.target, fit_config, cfg.cqr_weighting)
    budget, target = fit.weights.residuals()
    payload: dict[str, Any] = {
        "model": name,
        "weights": fit.weights.to_dict(),
        "spline": fit.model.to_dict() if fit.model is not None else None,
        "config": fit_config.to_dict(),
        "diagnostics": None,
    }
    if fit.result is not None:
        trace = fit.result.objective_trace
        payload["diagnostics"] = {
            "objective": fit.result.objective,
            "initial_objective": trace[0],
            "iterations": fit.result.iterations,
            "converged": fit.result.converged,
            "trace_length": len(trace),
        }
        _status(
            f"  objective {trace[0]:.6g} -> {trace[-1]:.6g} in {len(trace)} iterations "
            f"(converged={fit.result.converged})"
        )
    _status(f"  constraint residuals: budget {budget:.2e}, target return {target:.2e}")
    out_dir = cfg.output_dir()
    path = write_json(payload, out_dir / f"fit_{name}.json")
    if fit.model is not None:
        alphas = uniform_knots(100)
        write_csv(fit.model.curve(alphas), out_dir / f"quantile_curve_{name}.csv")
    print(pd.DataFrame({"ticker": fit.weights.labels(), "weight": fit.weights.beta}).to_string(index=False))
    _status(f"Wrote {path}")
    return EXIT_OK


def cmd_backtest(cfg: RunConfig, returns_csv: str, progress: bool = False) -> int:
    panel = load_returns(returns_csv)
    models = cfg.models or MODEL_NAMES
    _status(f"Backtesting {', '.join(models)} on {panel.n} rows (window {cfg.window}, horizon {cfg.horizon})...")
    reports = run_backtest(
        panel,
        models,
        window=cfg.window,
        horizon=cfg.horizon,
        config=cfg.fit_config(),
        mu0=cfg.target,
        compounding=cfg.compounding,
        keep_partial=cfg.keep_partial,
        cqr_weighting=cfg.cqr_weighting,
        progress=progress,
        sr_tests=cfg.sr_tests,
    )
    for r in reports:
        if r.failed_windows:
            _status(f"  {r.model_name}: {len(r.failed_windows)} window(s) failed and were skipped")
    written = write_backtest(reports, cfg.output_dir(), sr_tests=cfg.sr_tests, xlsx=cfg.xlsx)
    print(metric_table(reports).to_string(index=False))
    if cfg.sr_tests and len(reports) > 1:
        names = [r.model_name for r in reports]
        z = pd.DataFrame(
            [[0.0 if a.model_name == b else a.sr_tests.get(b, float("nan")) for b in names] for a in reports],
            index=names,
            columns=names,
        )
        print()
        print("Sharpe-ratio Z statistics (row vs column):")
        print(z.to_string())
    _status(f"Wrote {len(written)} file(s) to {cfg.output_dir()}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, progress: bool = False) -> int:
    models = cfg.models or TAIL_MODELS
    _status(
        f"Tail experiment: tau_fit={cfg.tau_fit:.4g}, tau_oos={cfg.tau_oos:.4g}, n={cfg.n}, "
        f"{cfg.replications} replication(s)..."
    )
    fit_config = cfg.fit_config()
    experiment = tail_experiment(
        cfg.tau_fit,
        cfg.tau_oos,
        cfg.n,
        models,
        fit_config,
        seed=cfg.seed,
        replications=cfg.replications,
        progress=progress,
    )
    out_dir = cfg.output_dir()
    payload = {
        **experiment.to_dict(),
        "copula_fit": CopulaSpec(cfg.tau_fit, cfg.seed).to_dict(),
        "copula_oos": CopulaSpec(cfg.tau_oos, cfg.seed).to_dict(),
        "config": fit_config.to_dict(),
    }
    write_json(payload, out_dir / "tail_experiment.json")
    write_csv(experiment.table, out_dir / "tail_table.csv")
    for name, curve in experiment.curves.groupby("model", sort=False):
        write_csv(curve.drop(columns=["model"]), out_dir / f"tail_curve_{name}.csv")
    print(experiment.summary().to_string(index=False))
    _status(f"Wrote experiment artifacts to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML file of settings (keys mirror the long flags)")
    common.add_argument("--out-dir", dest="out_dir", default=None, help="Artifact directory (default UPR_OUT_DIR or ./out)")
    common.add_argument("--seed", type=int, default=None, help="Random seed (default 0)")
    common.add_argument("--eta", type=float, default=None, help="Truncation level in (0, 1) (default 1e-5)")
    common.add_argument("--knots", type=int, default=None, help="Number of spline segments M (default 19)")
    common.add_argument("--lr", type=float, default=None, help="Learning rate (default 0.01)")
    common.add_argument("--max-iters", dest="max_iters", type=int, default=None, help="Iteration cap (default 10000)")
    common.add_argument("--tol", type=float, default=None, help="Relative objective change stop (default 1e-8)")
    common.add_argument("--mu0", default=None, help="Target return: 'ew' (equal-weight mean) or a number")
    common.add_argument("--step-rule", dest="step_rule", default=None, help=f"One of {', '.join(STEP_RULES)}")
    common.add_argument("--delta-init", dest="delta_init", default=None, help=f"One of {', '.join(DELTA_INITS)}")
    common.add_argument("--cqr-weighting", dest="cqr_weighting", default=None, help=f"One of {', '.join(CQR_WEIGHTINGS)}")
    common.add_argument("--progress", action="store_true", help="Show a progress bar on stderr")
    common.add_argument("-v", "--verbose", action="store_true", help="Log at INFO level")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="upr_portfolio", description="UPR portfolio toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", parents=[common], help="Convert a price CSV to log returns")
    ingest.add_argument("prices_csv")
    ingest.add_argument("out_csv")
    ingest.add_argument("--start", default=None, help="First date to keep (ISO)")
    ingest.add_argument("--end", default=None, help="Last date to keep (ISO)")

    fit = sub.add_parser("fit", parents=[common], help="Fit one portfolio model on a return CSV")
    fit.add_argument("returns_csv")
    fit.add_argument("--model", default="upr", help=f"One of {', '.join(MODEL_NAMES)} (default upr)")

    bt = sub.add_parser("backtest", parents=[common], help="Rolling-window backtest")
    bt.add_argument("returns_csv")
    bt.add_argument("--models", default=None, help="Comma-separated model list (default all)")
    bt.add_argument("--window", type=int, default=None, help="Fit window rows (default 240)")
    bt.add_argument("--horizon", type=int, default=None, help="Evaluation rows per window (default 60)")
    bt.add_argument("--sr-tests", dest="sr_tests", action="store_true", default=None, help="Emit pairwise Sharpe-ratio Z tests")
    bt.add_argument("--compounding", action="store_true", default=None, help="Compound wealth for CW and MDD")
    bt.add_argument("--drop-partial", dest="keep_partial", action="store_false", default=None, help="Skip a short final window")
    bt.add_argument("--xlsx", action="store_true", default=None, help="Also write backtest.xlsx")

    sim = sub.add_parser("simulate", parents=[common], help="Clayton-copula tail experiment")
    sim.add_argument("--tau-fit", dest="tau_fit", type=float, default=None, help="Kendall's tau of the fit sample (default 2/3)")
    sim.add_argument("--tau-oos", dest="tau_oos", type=float, default=None, help="Kendall's tau of the evaluation sample (default 2/3)")
    sim.add_argument("--n", type=int, default=None, help="Draws per sample (default 300)")
    sim.add_argument("--models", default=None, help="Comma-separated model list (default upr,qr,mv)")
    sim.add_argument("--replications", type=int, default=None, help="Number of seeded replications (default 1)")
    return parser


def _configure_logging(verbose: bool) -> None:
    level = "INFO" if verbose else log_level()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Sequence[str] | None = None) -> int:
    load_env()
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = RunConfig.resolve(file_values, vars(args))
        if args.command == "ingest":
            return cmd_ingest(cfg, args.prices_csv, args.out_csv, args.start, args.end)
        if args.command == "fit":
            return cmd_fit(cfg, args.returns_csv, args.model)
        if args.command == "backtest":
            return cmd_backtest(cfg, args.returns_csv, args.progress)
        return cmd_simulate(cfg, args.progress)
    except UprError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
