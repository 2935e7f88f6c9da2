"""
Benchmark portfolio constructors: equal weight, mean-variance, single-quantile (mean-CVaR)
and composite-quantile regression portfolios, plus a name-based dispatcher that also covers
the UPR fit.

All constructors except equal weight return weights satisfying 1ᵀβ = 1 and μ̂ᵀβ = μ₀.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from upr_portfolio.errors import NumericalError, ValidationError
from upr_portfolio.optimizer import (
    FitConfig,
    FitResult,
    PortfolioWeights,
    asset_means,
    budget_only,
    fit_upr_portfolio,
    return_matrix,
    weight_projector,
)
from upr_portfolio.risk_core import RiskLevelGrid, SplineQuantile, tail_count

logger = logging.getLogger(__name__)

MODEL_NAMES = ("upr", "ew", "mv", "qr", "cqr1", "cqr2")
CQR_WEIGHTINGS = ("objective", "mixture")
_RIDGE = 1e-8


def _target(mu_hat: np.ndarray, mu0: float | None) -> float:
    return float(mu_hat.mean()) if mu0 is None else float(mu0)


def equal_weight(p: int, mu_hat=None, tickers: tuple[str, ...] | None = None) -> PortfolioWeights:
    """β = (1/p, …, 1/p); μ₀ records the realised μ̂ᵀβ."""
    if p < 1:
        raise ValidationError(f"need at least one asset, got p={p}")
    beta = np.full(p, 1.0 / p)
    mu = np.zeros(p) if mu_hat is None else np.asarray(mu_hat, dtype=float)
    return PortfolioWeights(beta, float(mu @ beta), mu, tickers, name="ew")


# ---------------------------------------------------------------------------
# Mean-variance
# ---------------------------------------------------------------------------


def _kkt_weights(sigma: np.ndarray, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    factor = linalg.cho_factor(sigma)
    sinv_at = linalg.cho_solve(factor, A.T)
    return sinv_at @ linalg.solve(A @ sinv_at, b, assume_a="sym")


def mean_variance(returns, mu0: float | None = None, mu_hat=None) -> PortfolioWeights:
    """Minimum-variance weights under the budget and target-return constraints (closed form)."""
    x, tickers = return_matrix(returns)
    p = x.shape[1]
    means_given = mu_hat is not None
    mu_hat = asset_means(x, mu_hat)
    mu0 = _target(mu_hat, mu0)
    if p == 1:
        return PortfolioWeights(np.ones(1), mu0, mu_hat, tickers, name="mv")
    sigma = np.atleast_2d(np.cov(x, rowvar=False))
    if budget_only(mu_hat, mu0, means_given):
        A, b = np.ones((1, p)), np.ones(1)
    else:
        A, b = np.vstack([np.ones(p), mu_hat]), np.array([1.0, mu0])
    try:
        beta = _kkt_weights(sigma, A, b)
    except (linalg.LinAlgError, ValueError):
        ridge = _RIDGE * max(np.trace(sigma) / p, np.finfo(float).tiny)
        logger.warning("sample covariance is singular; adding a ridge of %g", ridge)
        try:
            beta = _kkt_weights(sigma + ridge * np.eye(p), A, b)
        except (linalg.LinAlgError, ValueError) as e:
            raise NumericalError(f"mean-variance system is singular even after a ridge of {ridge:g}") from e
    if not np.all(np.isfinite(beta)):
        raise NumericalError("mean-variance weights are not finite")
    return PortfolioWeights(beta, mu0, mu_hat, tickers, name="mv")


# ---------------------------------------------------------------------------
# Quantile-regression portfolios
# ---------------------------------------------------------------------------


def _level_quantiles(y: np.ndarray, levels: np.ndarray) -> np.ndarray:
    ordered = np.sort(y)
    return ordered[[tail_count(y.size, float(a)) - 1 for a in levels]]


def composite_check_loss(y, levels, weights) -> tuple[float, np.ndarray]:
    """min over intercepts of Σ_k w_k·mean ℓ_{α_k}(y − β_k0), and the minimising intercepts."""
    y = np.asarray(y, dtype=float).ravel()
    levels = np.asarray(levels, dtype=float)
    weights = np.asarray(weights, dtype=float)
    q = _level_quantiles(y, levels)
    z = y[:, None] - q[None, :]
    losses = ((levels[None, :] - (z < 0)) * z).mean(axis=0)
    return float(losses @ weights), q


def _quantile_descent(
    x: np.ndarray,
    levels: np.ndarray,
    weights: np.ndarray,
    mu_hat: np.ndarray,
    mu0: float,
    config: FitConfig,
    means_given: bool = False,
) -> tuple[np.ndarray, np.ndarray, int]:
    # The intercepts are solved exactly by order statistics at every β; β takes normalised
    # projected subgradient steps lr/√t and the best iterate is returned.
    n, p = x.shape
    project = weight_projector(mu_hat, mu0, means_given)
    beta = project(np.full(p, 1.0 / p))
    best_value, best_q = composite_check_loss(x @ beta, levels, weights)
    best_beta = beta
    iterations = 0
    for t in range(1, int(config.max_iters) + 1):
        iterations = t
        y = x @ beta
        q = _level_quantiles(y, levels)
        coeff = ((levels[None, :] - (y[:, None] < q[None, :])) * weights[None, :]).sum(axis=1)
        grad = x.T @ coeff / n
        direction = beta - project(beta - grad)
        norm = float(np.linalg.norm(direction))
        if norm <= 1e-14 * (1.0 + float(np.linalg.norm(grad))):
            break
        beta = project(beta - config.learning_rate / math.sqrt(t) * direction / norm)
        value, q = composite_check_loss(x @ beta, levels, weights)
        if value < best_value:
            best_value, best_beta, best_q = value, beta, q
    logger.debug("quantile descent: %d iterations, objective %.6g", iterations, best_value)
    return best_beta, best_q, iterations


def qr_portfolio(
    returns,
    alpha: float = 0.1,
    mu0: float | None = None,
    config: FitConfig | None = None,
    mu_hat=None,
) -> PortfolioWeights:
    """Mean-CVaR portfolio: minimise the α check loss of the portfolio return over (β, β₀)."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha!r}")
    x, tickers = return_matrix(returns)
    means_given = mu_hat is not None
    mu_hat = asset_means(x, mu_hat)
    mu0 = _target(mu_hat, mu0)
    beta, q, _ = _quantile_descent(
        x, np.array([alpha]), np.ones(1), mu_hat, mu0, config or FitConfig(), means_given
    )
    return PortfolioWeights(beta, mu0, mu_hat, tickers, tuple(q.tolist()), name="qr")


def cqr_portfolio(
    returns,
    grid: RiskLevelGrid,
    mu0: float | None = None,
    config: FitConfig | None = None,
    weighting: str = "objective",
    name: str = "cqr",
    mu_hat=None,
) -> PortfolioWeights:
    """Composite-quantile portfolio over ``grid``.

    ``weighting="objective"`` uses the grid weights directly as the per-level loss weights;
    ``"mixture"`` treats them as risk-mixture weights and divides each by its level.
    """
    if weighting not in CQR_WEIGHTINGS:
        raise ValidationError(f"weighting must be one of {CQR_WEIGHTINGS}, got {weighting!r}")
    x, tickers = return_matrix(returns)
    means_given = mu_hat is not None
    mu_hat = asset_means(x, mu_hat)
    mu0 = _target(mu_hat, mu0)
    levels, weights = grid.levels, grid.weights
    if np.any(levels >= 1.0):
        raise ValidationError("quantile levels must lie strictly below 1")
    if weighting == "mixture":
        weights = weights / levels
    beta, q, _ = _quantile_descent(x, levels, weights, mu_hat, mu0, config or FitConfig(), means_given)
    return PortfolioWeights(beta, mu0, mu_hat, tickers, tuple(q.tolist()), name=name)


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelFit:
    """Weights of one fitted model; the UPR fit also carries its quantile curve."""

    weights: PortfolioWeights
    model: SplineQuantile | None = None
    result: FitResult | None = None


def build_portfolio(
    name: str,
    returns,
    mu0: float | None = None,
    config: FitConfig | None = None,
    cqr_weighting: str = "objective",
    alpha: float = 0.1,
    mu_hat=None,
) -> ModelFit:
    """Fit the model called ``name`` (one of MODEL_NAMES) on ``returns``."""
    config = config or FitConfig()
    key = name.strip().lower()
    if key == "upr":
        result = fit_upr_portfolio(returns, config.with_mu0(mu0), mu_hat)
        return ModelFit(result.weights, result.model, result)
    if key == "ew":
        x, tickers = return_matrix(returns)
        return ModelFit(equal_weight(x.shape[1], asset_means(x, mu_hat), tickers))
    if key == "mv":
        return ModelFit(mean_variance(returns, mu0, mu_hat))
    if key == "qr":
        return ModelFit(qr_portfolio(returns, alpha, mu0, config, mu_hat))
    if key in ("cqr1", "cqr2"):
        grid = RiskLevelGrid.cqr1() if key == "cqr1" else RiskLevelGrid.cqr2()
        return ModelFit(cqr_portfolio(returns, grid, mu0, config, cqr_weighting, key, mu_hat))
    raise ValidationError(f"unknown model '{name}'; choose from {', '.join(MODEL_NAMES)}")
