#!/usr/bin/env python3
"""
Run the UPR portfolio CLI from a source checkout (env is filled from .env).
Usage: python scripts/run_upr.py <command> [args...]

Example:
  UPR_OPT_THREADS=4 python scripts/run_upr.py backtest data/returns.csv --models upr,ew,mv --sr-tests
"""
import sys
from pathlib import Path

_root = Path(__file__).resolve().parent.parent
if str(_root) not in sys.path:
    sys.path.insert(0, str(_root))

from upr_portfolio.cli import main

sys.exit(main(sys.argv[1:]))
