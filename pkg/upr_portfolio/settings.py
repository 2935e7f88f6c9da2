"""
Environment and run-configuration loading.

Env vars come from the process environment first, then from a ``.env`` file in the current
directory or the repository root via python-dotenv.
Existing values are never overwritten, so shell exports and CLI overrides win.

Recognised variables:
- UPR_OPT_THREADS: cap on concurrently fitted backtest windows (default 1)
- UPR_LOG_LEVEL: logging level name for the CLI (default WARNING)
- UPR_OUT_DIR: default output directory for CLI artifacts (default ./out)
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from upr_portfolio.errors import ConfigError

try:
    import yaml  # type: ignore
except Exception:
    yaml = None

_REPO_ROOT = Path(__file__).resolve().parent.parent

ENV_VARS = (
    "UPR_OPT_THREADS",
    "UPR_LOG_LEVEL",
    "UPR_OUT_DIR",
)


def _env_candidates() -> list[Path]:
    return [base / ".env" for base in (Path.cwd(), _REPO_ROOT)]


def load_env() -> Path | None:
    """Fill missing env vars from the first ``.env`` found; never overwrites. Returns that file."""
    for env_path in _env_candidates():
        if env_path.is_file():
            load_dotenv(env_path, override=False)
            return env_path
    return None


def thread_cap() -> int:
    raw = os.environ.get("UPR_OPT_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(f"UPR_OPT_THREADS must be a positive integer, got {raw!r}") from e
    if value < 1:
        raise ConfigError(f"UPR_OPT_THREADS must be a positive integer, got {raw!r}")
    return value


def log_level() -> str:
    return os.environ.get("UPR_LOG_LEVEL", "WARNING").strip().upper() or "WARNING"


def default_out_dir() -> Path:
    return Path(os.environ.get("UPR_OUT_DIR", "out").strip() or "out")


def load_config_file(path: Path | str) -> dict[str, Any]:
    """Read a flat YAML run-config mapping (keys mirror the CLI long flags)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"Config file not found: {p}")
    if yaml is None:
        raise ConfigError("PyYAML is required to read config files (pip install PyYAML)")
    try:
        with open(p, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {p} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {p} must contain a mapping at the top level")
    return {str(k).replace("-", "_"): v for k, v in data.items()}
