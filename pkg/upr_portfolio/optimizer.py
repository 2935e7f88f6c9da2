"""
Projected gradient descent for the UPR portfolio and for a bare LIRS quantile fit.

The descent minimises the empirical truncated UPR objective over the portfolio weights β,
the spline intercept γ and the cumulative slopes δ, subject to μ̂ᵀβ = μ₀, 1ᵀβ = 1 and δ ≥ 0.
Each iteration takes one gradient step on all three blocks, projects β back onto the two
equality constraints with the closed-form Lagrange multipliers and clips δ at zero.

Returns are divided by the standard deviation of the equal-weight portfolio before descent
and the spline is scaled back afterwards, so step sizes mean the same thing for daily
returns and for standardised simulations.

With β frozen the objective is a smooth convex function of (γ, δ) on δ ≥ 0, so the bare
quantile fit hands that block to L-BFGS-B instead of taking fixed steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import optimize

from upr_portfolio.errors import DegenerateMeanError, DivergenceError, ValidationError
from upr_portfolio.random_streams import substream
from upr_portfolio.risk_core import (
    DEFAULT_ETA,
    DEFAULT_KNOTS,
    SplineQuantile,
    empirical_quantile,
    objective_and_gradients,
    truncation_eta,
    uniform_knots,
)

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-10
STEP_RULES = ("fixed", "sqrt_decay", "adam")
DELTA_INITS = ("uniform", "empirical")
_DEGENERATE_REL_TOL = 1e-12
_REJITTER_HIGH = 1e-3
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Weights and projections
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PortfolioWeights:
    """Portfolio weight vector with the constraint data it was built against."""

    beta: np.ndarray
    mu0: float
    mu_hat: np.ndarray
    tickers: tuple[str, ...] | None = None
    intercepts: tuple[float, ...] = ()
    name: str = ""

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=float).ravel()
        mu_hat = np.asarray(self.mu_hat, dtype=float).ravel()
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "mu_hat", mu_hat)
        object.__setattr__(self, "mu0", float(self.mu0))
        if beta.size != mu_hat.size:
            raise ValidationError(f"{beta.size} weights but {mu_hat.size} asset means")
        if self.tickers is not None and len(self.tickers) != beta.size:
            raise ValidationError(f"{beta.size} weights but {len(self.tickers)} tickers")

    @property
    def p(self) -> int:
        return self.beta.size

    def residuals(self) -> tuple[float, float]:
        """(|1ᵀβ − 1|, |μ̂ᵀβ − μ₀|)."""
        return abs(self.beta.sum() - 1.0), abs(float(self.mu_hat @ self.beta) - self.mu0)

    def is_feasible(self, tol: float = FEASIBILITY_TOL) -> bool:
        budget, target = self.residuals()
        return budget <= tol and target <= tol

    def labels(self) -> list[str]:
        return list(self.tickers) if self.tickers is not None else [f"X{j + 1}" for j in range(self.p)]

    def to_dict(self) -> dict[str, Any]:
        names = self.labels()
        return {
            "name": self.name,
            "tickers": names,
            "weights": {t: float(w) for t, w in zip(names, self.beta)},
            "mu0": self.mu0,
            "mu_hat": {t: float(m) for t, m in zip(names, self.mu_hat)},
            "intercepts": [float(v) for v in self.intercepts],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "PortfolioWeights":
        tickers = tuple(payload.get("tickers") or payload["weights"].keys())
        return cls(
            beta=np.array([payload["weights"][t] for t in tickers]),
            mu0=payload["mu0"],
            mu_hat=np.array([payload["mu_hat"][t] for t in tickers]),
            tickers=tickers,
            intercepts=tuple(payload.get("intercepts", ())),
            name=payload.get("name", ""),
        )


def _constraint_denominator(mu_hat: np.ndarray) -> float:
    p = mu_hat.size
    ones_mu = mu_hat.sum()
    mu_mu = float(mu_hat @ mu_hat)
    den = p * mu_mu - ones_mu**2
    if mu_mu == 0.0 or den <= _DEGENERATE_REL_TOL * p * mu_mu:
        raise DegenerateMeanError(
            "asset means are all equal; the target-return constraint is redundant with the budget constraint"
        )
    return den


def project_weights(beta_tilde, mu_hat, mu0: float) -> np.ndarray:
    """Euclidean projection onto {β : 1ᵀβ = 1, μ̂ᵀβ = μ₀} via the two Lagrange multipliers."""
    bt = np.asarray(beta_tilde, dtype=float).ravel()
    mu = np.asarray(mu_hat, dtype=float).ravel()
    if bt.size != mu.size:
        raise ValidationError(f"{bt.size} weights but {mu.size} asset means")
    den = _constraint_denominator(mu)
    p = mu.size
    ones_mu = mu.sum()
    mu_mu = float(mu @ mu)
    budget_gap = bt.sum() - 1.0
    target_gap = float(mu @ bt) - mu0
    eta1 = (mu_mu * budget_gap - ones_mu * target_gap) / den
    eta2 = (p * target_gap - ones_mu * budget_gap) / den
    return bt - eta1 - eta2 * mu


def project_budget(beta_tilde) -> np.ndarray:
    """Euclidean projection onto {β : 1ᵀβ = 1}."""
    bt = np.asarray(beta_tilde, dtype=float).ravel()
    return bt - (bt.sum() - 1.0) / bt.size


def project_deltas(deltas) -> np.ndarray:
    return np.maximum(np.asarray(deltas, dtype=float), 0.0)


def budget_only(mu_hat, mu0: float, means_given: bool = False) -> bool:
    """True when the target-return constraint is implied by the budget constraint.

    That happens only when every asset mean equals μ₀; equal means with any other μ₀
    leave the constraint set empty and raise DegenerateMeanError. ``means_given`` marks
    caller-supplied means, for which equal means are expected and only logged at INFO.
    """
    mu = np.asarray(mu_hat, dtype=float).ravel()
    try:
        _constraint_denominator(mu)
    except DegenerateMeanError:
        if math.isclose(mu0, float(mu.mean()), rel_tol=1e-9, abs_tol=1e-15):
            log = logger.info if means_given else logger.warning
            log("asset means are all equal to mu0=%g; using the budget constraint only", mu0)
            return True
        raise
    if mu0 < mu.min() or mu0 > mu.max():
        logger.warning(
            "target return mu0=%g lies outside the asset mean range [%g, %g]; expect leveraged weights",
            mu0, mu.min(), mu.max(),
        )
    return False


def weight_projector(mu_hat, mu0: float, means_given: bool = False) -> Callable[[np.ndarray], np.ndarray]:
    """Projection onto the constraint set, or onto the budget constraint when that suffices."""
    mu = np.asarray(mu_hat, dtype=float).ravel()
    if budget_only(mu, mu0, means_given):
        return project_budget
    return lambda beta_tilde: project_weights(beta_tilde, mu, mu0)


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Descent hyperparameters; ``mu0=None`` targets the equal-weight expected return."""

    eta: float = DEFAULT_ETA
    M: int = DEFAULT_KNOTS
    mu0: float | None = None
    learning_rate: float = 0.01
    max_iters: int = 10_000
    rel_tol: float = 1e-8
    seed: int = 0
    gamma0: float | str = "auto"
    step_rule: str = "fixed"
    delta_init: str = "empirical"
    check_feasibility: bool = False

    def __post_init__(self) -> None:
        truncation_eta(self.eta)
        if int(self.M) < 1:
            raise ValidationError(f"knot count M must be >= 1, got {self.M}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if int(self.max_iters) < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.rel_tol > 0:
            raise ValidationError(f"rel_tol must be positive, got {self.rel_tol}")
        if self.step_rule not in STEP_RULES:
            raise ValidationError(f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}")
        if self.delta_init not in DELTA_INITS:
            raise ValidationError(f"delta_init must be one of {DELTA_INITS}, got {self.delta_init!r}")
        if isinstance(self.gamma0, str) and self.gamma0 != "auto":
            raise ValidationError(f"gamma0 must be 'auto' or a number, got {self.gamma0!r}")
        if self.mu0 is not None and not math.isfinite(self.mu0):
            raise ValidationError(f"mu0 must be finite, got {self.mu0}")

    def with_mu0(self, mu0: float | None) -> "FitConfig":
        return FitConfig(**{**asdict(self), "mu0": mu0})

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class FitResult:
    weights: PortfolioWeights
    model: SplineQuantile
    objective_trace: tuple[float, ...]
    iterations: int
    converged: bool
    config: FitConfig = field(default_factory=FitConfig)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "weights": self.weights.to_dict(),
            "spline": self.model.to_dict(),
            "objective": self.objective,
            "trace_length": len(self.objective_trace),
            "iterations": self.iterations,
            "converged": self.converged,
            "config": self.config.to_dict(),
        }


# ---------------------------------------------------------------------------
# Descent
# ---------------------------------------------------------------------------


def data_scale(y: np.ndarray) -> float:
    """Standard deviation used to standardise a return series (1 if degenerate)."""
    sd = float(np.std(y))
    return sd if sd > 0 and math.isfinite(sd) else 1.0


def _initial_deltas(config: FitConfig, y_ew: np.ndarray, knots: np.ndarray, gamma: float) -> np.ndarray:
    rng = substream(config.seed, "fit", "delta_init")
    if config.delta_init == "uniform":
        return rng.uniform(0.0, 1.0, size=knots.size)
    # Chord slopes through the empirical quantiles at the interior knots, anchored at gamma.
    q = np.quantile(y_ew, knots[1:], method="inverted_cdf")
    slopes = np.maximum(np.diff(np.concatenate(([gamma], q))) / np.diff(knots), _REJITTER_HIGH)
    return np.append(slopes, slopes[-1])


class _AdamState:
    def __init__(self, size: int) -> None:
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = _ADAM_BETA1 * self.m + (1 - _ADAM_BETA1) * grad
        self.v = _ADAM_BETA2 * self.v + (1 - _ADAM_BETA2) * grad**2
        m_hat = self.m / (1 - _ADAM_BETA1**self.t)
        v_hat = self.v / (1 - _ADAM_BETA2**self.t)
        return lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)


def _initial_curve(config: FitConfig, y_ew: np.ndarray, scale: float, knots: np.ndarray) -> tuple[float, np.ndarray]:
    if config.gamma0 == "auto":
        gamma = empirical_quantile(y_ew, 0.01)
    else:
        gamma = float(config.gamma0) / scale
    return gamma, _initial_deltas(config, y_ew, knots, gamma)


def _assert_feasible(beta: np.ndarray, deltas: np.ndarray, mu_hat: np.ndarray, mu0: float, it: int) -> None:
    budget = abs(beta.sum() - 1.0)
    target = abs(float(mu_hat @ beta) - mu0)
    assert budget <= FEASIBILITY_TOL, f"budget constraint violated by {budget:g} at iteration {it}"
    assert target <= FEASIBILITY_TOL, f"target-return constraint violated by {target:g} at iteration {it}"
    assert np.all(deltas >= 0), f"negative cumulative slope at iteration {it}"


def _descend(
    x: np.ndarray,
    project: Callable[[np.ndarray], np.ndarray],
    config: FitConfig,
    mu_hat: np.ndarray,
    mu0: float,
) -> tuple[np.ndarray, SplineQuantile, list[float], bool]:
    """Run the projected descent on standardised data."""
    p = x.shape[1]
    eta = config.eta
    ew = np.full(p, 1.0 / p)
    scale = data_scale(x @ ew)
    z = x / scale

    beta = project(ew)
    knots = uniform_knots(int(config.M))
    gamma, deltas = _initial_curve(config, z @ ew, scale, knots)
    rejitters = 0
    jitter = substream(config.seed, "fit", "rejitter")
    adam = _AdamState(deltas.size + 1) if config.step_rule == "adam" else None

    trace: list[float] = []
    converged = False
    for it in range(int(config.max_iters)):
        model = SplineQuantile(gamma, deltas, knots)
        value, grads = objective_and_gradients(z, beta, model, eta)
        theta_grad = np.concatenate(([grads.gamma], grads.delta))
        if not (math.isfinite(value) and np.all(np.isfinite(grads.beta)) and np.all(np.isfinite(theta_grad))):
            raise DivergenceError(
                f"non-finite objective or gradient at iteration {it}; lower the learning rate "
                f"(currently {config.learning_rate})"
            )
        trace.append(value * scale)
        if it > 0:
            prev = trace[-2]
            if abs(prev - trace[-1]) <= config.rel_tol * max(abs(prev), 1e-12):
                converged = True
                break
        if it == int(config.max_iters) - 1:
            break

        step = config.learning_rate
        if config.step_rule == "sqrt_decay":
            step = config.learning_rate / math.sqrt(it + 1)
        beta = project(beta - step * grads.beta)
        theta_step = adam.step(theta_grad, step) if adam is not None else step * theta_grad
        gamma = gamma - theta_step[0]
        deltas = project_deltas(deltas - theta_step[1:])
        if not np.any(deltas[:-1] > 0):
            log = logger.warning if rejitters == 0 else logger.debug
            log("all spline slopes hit zero at iteration %d; re-jittering", it)
            rejitters += 1
            deltas = jitter.uniform(0.0, _REJITTER_HIGH, size=deltas.size)
        if config.check_feasibility:
            _assert_feasible(beta, deltas, mu_hat, mu0, it)
        logger.debug("iteration %d objective %.12g", it, trace[-1])

    model = SplineQuantile(gamma * scale, deltas * scale, knots)
    return beta, model, trace, converged


def _solve_curve(y: np.ndarray, config: FitConfig) -> tuple[SplineQuantile, list[float], bool]:
    """Minimise the objective of one standardised series over (γ, δ ≥ 0) with L-BFGS-B."""
    scale = data_scale(y)
    z = (y / scale)[:, None]
    one = np.ones(1)
    knots = uniform_knots(int(config.M))
    gamma, deltas = _initial_curve(config, z[:, 0], scale, knots)
    values: dict[bytes, float] = {}

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        model = SplineQuantile(theta[0], np.maximum(theta[1:], 0.0), knots)
        value, grads = objective_and_gradients(z, one, model, config.eta)
        grad = np.concatenate(([grads.gamma], grads.delta))
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            raise DivergenceError("non-finite objective or gradient in the quantile fit")
        values[theta.tobytes()] = value
        return value, grad

    theta0 = np.concatenate(([gamma], deltas))
    trace = [objective(theta0)[0] * scale]

    def record(theta: np.ndarray) -> None:
        value = values.get(np.asarray(theta, dtype=float).tobytes())
        trace.append((value if value is not None else objective(theta)[0]) * scale)
        logger.debug("iteration %d objective %.12g", len(trace) - 1, trace[-1])

    result = optimize.minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(None, None)] + [(0.0, None)] * deltas.size,
        callback=record,
        options={"maxiter": int(config.max_iters), "ftol": config.rel_tol, "gtol": 1e-10},
    )
    if not result.success:
        logger.info("quantile fit stopped early: %s", result.message)
    theta = result.x
    model = SplineQuantile(theta[0] * scale, np.maximum(theta[1:], 0.0) * scale, knots)
    return model, trace, bool(result.success)


def return_matrix(returns) -> tuple[np.ndarray, tuple[str, ...] | None]:
    """(n x p matrix, tickers or None) from a ReturnPanel or a bare array."""
    x = np.asarray(getattr(returns, "returns", returns), dtype=float)
    tickers = getattr(returns, "tickers", None)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError(f"expected an n x p return matrix with n >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("returns contain non-finite values")
    return x, (tuple(tickers) if tickers is not None else None)


def asset_means(x: np.ndarray, mu_hat=None) -> np.ndarray:
    """Sample column means, or the caller's known means when given."""
    if mu_hat is None:
        return x.mean(axis=0)
    mu = np.asarray(mu_hat, dtype=float).ravel()
    if mu.size != x.shape[1]:
        raise ValidationError(f"{mu.size} asset means for {x.shape[1]} assets")
    return mu


def fit_upr_portfolio(returns, config: FitConfig | None = None, mu_hat=None) -> FitResult:
    """Jointly fit UPR-optimal weights and the LIRS quantile curve of the portfolio return.

    ``mu_hat`` replaces the sample means in the target-return constraint when the asset
    means are known.
    """
    config = config or FitConfig()
    x, tickers = return_matrix(returns)
    p = x.shape[1]
    if p < 2:
        raise ValidationError(f"need at least 2 assets, got p={p}")
    mu = asset_means(x, mu_hat)
    mu0 = float(mu.mean()) if config.mu0 is None else float(config.mu0)

    project = weight_projector(mu, mu0, means_given=mu_hat is not None)
    beta, model, trace, converged = _descend(x, project, config, mu, mu0)
    weights = PortfolioWeights(beta, mu0, mu, tickers, name="upr")
    logger.info("UPR fit: %d iterations, objective %.6g, converged=%s", len(trace), trace[-1], converged)
    return FitResult(weights, model, tuple(trace), len(trace), converged, config.with_mu0(mu0))


def fit_quantile_model(samples, config: FitConfig | None = None) -> SplineQuantile:
    """Fit a LIRS quantile curve to one return series (the UPR objective with β frozen).

    Samples without spread return the flat curve at their value, which scores zero.
    """
    config = config or FitConfig()
    y = np.asarray(samples, dtype=float).ravel()
    if y.size < 2:
        raise ValidationError(f"need at least 2 samples, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise ValidationError("samples contain non-finite values")
    if np.ptp(y) == 0.0:
        logger.info("samples are constant at %g; returning the flat curve", y[0])
        return SplineQuantile(y[0], np.zeros(int(config.M) + 1), uniform_knots(int(config.M)))
    model, trace, converged = _solve_curve(y, config)
    logger.info("quantile fit: %d iterations, objective %.6g, converged=%s", len(trace), trace[-1], converged)
    return model
