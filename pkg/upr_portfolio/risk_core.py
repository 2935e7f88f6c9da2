"""
Pessimistic risk measures and the LIRS quantile model.

Conventions used throughout:
- Returns are gains; a risk is the negative of a (weighted) lower-tail average, so larger
  risk means worse returns.
- The empirical α-risk is minus the mean of the ⌈n·α⌉ smallest samples.
- A LIRS spline is g(α) = γ + Σ_m b_m (α − d_m)_+ on knots 0 = d_0 < … < d_M = 1. The
  cumulative slopes δ_m = b_0 + … + b_m are the slopes of the segments [d_m, d_{m+1}].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple

import numpy as np
import pandas as pd
from scipy import integrate, special, stats

from upr_portfolio.errors import ValidationError

DEFAULT_ETA = 1e-5
DEFAULT_KNOTS = 19
_GRID_SUM_TOL = 1e-12


def truncation_eta(value: float) -> float:
    """Validate a truncation level η in (0, 1)."""
    eta = float(value)
    if not 0.0 < eta < 1.0:
        raise ValidationError(f"eta must lie in (0, 1), got {value!r}")
    return eta


def _as_samples(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size == 0:
        raise ValidationError("samples must be non-empty")
    return arr


def _portfolio_inputs(returns) -> np.ndarray:
    x = np.asarray(getattr(returns, "returns", returns), dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError(f"expected an n x p return matrix, got shape {x.shape}")
    return x


def _weight_vector(beta) -> np.ndarray:
    return np.asarray(getattr(beta, "beta", beta), dtype=float).ravel()


# ---------------------------------------------------------------------------
# Quantile loss and α-risks
# ---------------------------------------------------------------------------


def quantile_loss(alpha: float, z):
    """Check loss (α − 1[z < 0])·z; scalar in, scalar out, arrays broadcast."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha!r}")
    z_arr = np.asarray(z, dtype=float)
    loss = (alpha - (z_arr < 0)) * z_arr
    return float(loss) if loss.ndim == 0 else loss


def tail_count(n: int, alpha: float) -> int:
    """k = ⌈n·α⌉ in [1, n], robust to floating-point noise on exact multiples."""
    return int(min(max(math.ceil(round(n * alpha, 10)), 1), n))


def _alpha_risks_sorted(sorted_samples: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    n = sorted_samples.size
    partial = np.cumsum(sorted_samples)
    k = np.array([tail_count(n, float(a)) for a in np.atleast_1d(alphas)])
    return -partial[k - 1] / k


def empirical_alpha_risk(samples, alpha: float) -> float:
    """Minus the mean of the ⌈n·α⌉ smallest samples (expected shortfall of gains)."""
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha!r}")
    arr = np.sort(_as_samples(samples))
    return float(_alpha_risks_sorted(arr, np.array([alpha]))[0])


def empirical_quantile(samples, alpha: float) -> float:
    """Lower empirical α-quantile: the k-th order statistic with k = ⌈n·α⌉."""
    arr = np.sort(_as_samples(samples))
    return float(arr[tail_count(arr.size, alpha) - 1])


@dataclass(frozen=True, eq=False)
class RiskLevelGrid:
    """Discrete risk-level measure: levels α_k in (0, 1] with weights summing to one."""

    levels: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        levels = np.asarray(self.levels, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "weights", weights)
        if levels.size == 0 or levels.size != weights.size:
            raise ValidationError("levels and weights must be non-empty and of equal length")
        if np.any(levels <= 0.0) or np.any(levels > 1.0):
            raise ValidationError("risk levels must lie in (0, 1]")
        if np.any(np.diff(levels) <= 0.0):
            raise ValidationError("risk levels must be strictly increasing")
        if np.any(weights < 0.0):
            raise ValidationError("risk-level weights must be non-negative")
        if abs(weights.sum() - 1.0) > _GRID_SUM_TOL:
            raise ValidationError(f"risk-level weights must sum to 1, got {weights.sum()!r}")

    @property
    def size(self) -> int:
        return self.levels.size

    @classmethod
    def uniform(cls, K: int) -> "RiskLevelGrid":
        """Right-endpoint grid {1/K, …, 1} with equal weights."""
        if K < 1:
            raise ValidationError(f"K must be >= 1, got {K}")
        return cls(np.arange(1, K + 1) / K, np.full(K, 1.0 / K))

    @classmethod
    def cqr1(cls) -> "RiskLevelGrid":
        return cls(np.array([0.1, 0.5, 0.9]), np.full(3, 1.0 / 3.0))

    @classmethod
    def cqr2(cls) -> "RiskLevelGrid":
        return cls(np.array([0.01, 0.1, 0.5, 0.9]), np.array([0.4, 0.3, 0.2, 0.1]))

    def to_dict(self) -> dict[str, list[float]]:
        return {"levels": self.levels.tolist(), "weights": self.weights.tolist()}


def discrete_pessimistic_risk(samples, grid: RiskLevelGrid) -> float:
    arr = np.sort(_as_samples(samples))
    return float(np.dot(grid.weights, _alpha_risks_sorted(arr, grid.levels)))


def upr_via_grid(samples, K: int) -> float:
    """Uniform pessimistic risk approximated on the equal-weight grid {1/K, …, K/K}."""
    return discrete_pessimistic_risk(samples, RiskLevelGrid.uniform(K))


def distortion_phi(t: float) -> float:
    """UPR distortion φ(t) = −t·log t + t on (0, 1]."""
    if not 0.0 < t <= 1.0:
        raise ValidationError(f"t must lie in (0, 1], got {t!r}")
    return float(-special.xlogy(t, t) + t)


@dataclass(frozen=True)
class BetaDistortion:
    """Beta(s, h) weighting of α-risks; s, h >= 1 keeps the risk pessimistic."""

    s: float
    h: float = 1.0

    def __post_init__(self) -> None:
        if not (self.s >= 1.0 and self.h >= 1.0):
            raise ValidationError(f"beta distortion requires s >= 1 and h >= 1, got s={self.s}, h={self.h}")

    def density(self, alpha):
        return stats.beta.pdf(alpha, self.s, self.h)


def beta_distortion_risk(samples, beta: BetaDistortion, K: int) -> float:
    """Midpoint-rule approximation of ∫ ϱ_α b(α; s, h) dα over K levels."""
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    arr = np.sort(_as_samples(samples))
    levels = (np.arange(1, K + 1) - 0.5) / K
    return float(np.dot(_alpha_risks_sorted(arr, levels), beta.density(levels)) / K)


def gev_beta_risk_analytic(xi: float, zeta: float, kappa: float, s: float) -> float:
    """Closed-form Beta(s, 1) risk of a GEV(ξ, ζ, κ) return.

    Uses F(y) = exp(−{1 − κ(y − ξ)/ζ}^{1/κ}); κ = 0 is the Gumbel limit and s = 1 the
    right limit s ↓ 1.
    """
    if zeta <= 0:
        raise ValidationError(f"zeta must be positive, got {zeta!r}")
    if kappa <= -1:
        raise ValidationError(f"kappa must exceed -1 for a finite mean, got {kappa!r}")
    if s < 1:
        raise ValidationError(f"s must be >= 1, got {s!r}")
    if kappa == 0:
        factor = 1.0 if s == 1 else math.log(s) / (s - 1.0)
        return zeta * (factor - np.euler_gamma) - xi
    if s == 1:
        return zeta * math.gamma(2.0 + kappa) / kappa - xi - zeta / kappa
    ratio = (s - s ** (-kappa)) / (s - 1.0)
    return zeta * math.gamma(1.0 + kappa) / kappa * ratio - xi - zeta / kappa


def alpha_risk_from_quantile(G: Callable[[float], float], alpha: float) -> float:
    """Population α-risk −α⁻¹ ∫₀^α G(t) dt by adaptive quadrature."""
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha!r}")
    value, _ = integrate.quad(G, 0.0, alpha, limit=200)
    return -value / alpha


def upr_from_quantile(G: Callable[[float], float]) -> float:
    """Population UPR −∫₀¹ G(t)(−log t) dt by adaptive quadrature."""
    value, _ = integrate.quad(lambda t: G(t) * -math.log(t), 0.0, 1.0, limit=200)
    return -value


# ---------------------------------------------------------------------------
# LIRS spline quantile model
# ---------------------------------------------------------------------------


def uniform_knots(M: int = DEFAULT_KNOTS) -> np.ndarray:
    if M < 1:
        raise ValidationError(f"knot count M must be >= 1, got {M}")
    return np.linspace(0.0, 1.0, M + 1)


@dataclass(frozen=True, eq=False)
class SplineQuantile:
    """Monotone piecewise-linear quantile curve g(α) = γ + Σ b_m (α − d_m)_+."""

    gamma: float
    deltas: np.ndarray
    knots_d: np.ndarray

    def __post_init__(self) -> None:
        deltas = np.asarray(self.deltas, dtype=float).ravel()
        knots = np.asarray(self.knots_d, dtype=float).ravel()
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "knots_d", knots)
        object.__setattr__(self, "gamma", float(self.gamma))
        if knots.size < 2 or deltas.size != knots.size:
            raise ValidationError(
                f"need M+1 >= 2 knots and as many cumulative slopes, got {knots.size} and {deltas.size}"
            )
        if knots[0] != 0.0 or knots[-1] != 1.0 or np.any(np.diff(knots) <= 0):
            raise ValidationError("knots must increase strictly from 0 to 1")
        if not np.all(np.isfinite(deltas)) or not math.isfinite(self.gamma):
            raise ValidationError("spline parameters must be finite")
        if np.any(deltas < 0):
            raise ValidationError("cumulative slopes must be non-negative (monotone spline)")

    @classmethod
    def from_slopes(cls, gamma: float, slopes_b, knots_d) -> "SplineQuantile":
        return cls(gamma, np.cumsum(np.asarray(slopes_b, dtype=float)), knots_d)

    @classmethod
    def identity(cls, M: int = 1) -> "SplineQuantile":
        return cls(0.0, np.ones(M + 1), uniform_knots(M))

    @property
    def M(self) -> int:
        return self.knots_d.size - 1

    @property
    def slopes_b(self) -> np.ndarray:
        return np.diff(self.deltas, prepend=0.0)

    @property
    def strictly_increasing(self) -> bool:
        return bool(np.all(self.deltas[:-1] > 0))

    def knot_values(self) -> np.ndarray:
        """g(d_0), …, g(d_M)."""
        rises = self.deltas[:-1] * np.diff(self.knots_d)
        return self.gamma + np.concatenate(([0.0], np.cumsum(rises)))

    def evaluate(self, alpha):
        a = np.asarray(alpha, dtype=float)
        if np.any(a < 0.0) or np.any(a > 1.0):
            raise ValidationError("alpha must lie in [0, 1]")
        out = np.interp(a, self.knots_d, self.knot_values())
        return float(out) if out.ndim == 0 else out

    def invert(self, y, eta: float = DEFAULT_ETA):
        """Quantile level α̃ with g(α̃) = y, clamped to [η, 1]."""
        eta = truncation_eta(eta)
        y_arr = np.asarray(y, dtype=float)
        kv = self.knot_values()
        seg = np.clip(np.searchsorted(kv, y_arr, side="right") - 1, 0, self.M - 1)
        slope = self.deltas[seg]
        safe = np.where(slope > 0, slope, 1.0)
        alpha = np.where(slope > 0, self.knots_d[seg] + (y_arr - kv[seg]) / safe, 1.0)
        alpha = np.where(y_arr >= kv[-1], 1.0, alpha)
        alpha = np.where(y_arr < kv[0], eta, alpha)
        out = np.clip(alpha, eta, 1.0)
        return float(out) if out.ndim == 0 else out

    def scaled(self, factor: float, shift: float = 0.0) -> "SplineQuantile":
        """Curve of factor·Y + shift."""
        return SplineQuantile(self.gamma * factor + shift, self.deltas * factor, self.knots_d)

    def curve(self, alphas) -> pd.DataFrame:
        a = np.asarray(alphas, dtype=float)
        return pd.DataFrame({"alpha": a, "value": self.evaluate(a)})

    def to_dict(self) -> dict[str, Any]:
        return {
            "gamma": self.gamma,
            "knots": self.knots_d.tolist(),
            "slopes": self.slopes_b.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "SplineQuantile":
        try:
            return cls.from_slopes(payload["gamma"], payload["slopes"], payload["knots"])
        except KeyError as e:
            raise ValidationError(f"spline document is missing '{e.args[0]}'") from e


def spline_eval(model: SplineQuantile, alpha):
    return model.evaluate(alpha)


def spline_invert(model: SplineQuantile, y, eta: float = DEFAULT_ETA):
    return model.invert(y, eta)


# ---------------------------------------------------------------------------
# Truncated UPR score, empirical objective and gradients
# ---------------------------------------------------------------------------


class UprGradients(NamedTuple):
    beta: np.ndarray
    gamma: float
    b: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        """Gradient with respect to the cumulative slopes (b_0 = δ_0, b_m = δ_m − δ_{m−1})."""
        return self.b - np.append(self.b[1:], 0.0)


def _slope_basis(model: SplineQuantile, alpha_tilde: np.ndarray, eta: float) -> np.ndarray:
    # n x (M+1); column m multiplies b_m in the closed form
    d = model.knots_d[None, :]
    a = np.maximum(alpha_tilde[:, None], d)
    truncated = 0.5 * (1.0 - d) ** 2 - 0.5 * (np.maximum(d, eta) - d) ** 2
    return 1.0 - a + d * np.log(a) - truncated


def _score_parts(model: SplineQuantile, y: np.ndarray, eta: float):
    alpha_tilde = np.asarray(model.invert(y, eta), dtype=float).reshape(y.shape)
    level_term = 1.0 - eta + np.log(alpha_tilde)
    basis = _slope_basis(model, alpha_tilde, eta)
    scores = level_term * (y - model.gamma) + basis @ model.slopes_b
    return scores, level_term, basis


def upr_score(model: SplineQuantile, y, eta: float = DEFAULT_ETA):
    """Per-return truncated score ∫_η¹ α⁻¹ ℓ_α(y − g(α)) dα in closed form."""
    eta = truncation_eta(eta)
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    scores, _, _ = _score_parts(model, y_arr, eta)
    return float(scores[0]) if np.ndim(y) == 0 else scores


def objective_and_gradients(
    returns,
    beta,
    model: SplineQuantile,
    eta: float = DEFAULT_ETA,
) -> tuple[float, UprGradients]:
    """Empirical truncated UPR objective and its gradients in one pass."""
    eta = truncation_eta(eta)
    x = _portfolio_inputs(returns)
    w = _weight_vector(beta)
    if w.size != x.shape[1]:
        raise ValidationError(f"weight vector has {w.size} entries for {x.shape[1]} assets")
    y = x @ w
    scores, level_term, basis = _score_parts(model, y, eta)
    n = y.size
    grads = UprGradients(
        beta=x.T @ level_term / n,
        gamma=float(-level_term.mean()),
        b=basis.mean(axis=0),
    )
    return float(scores.mean()), grads


def empirical_upr_objective(returns, beta, model: SplineQuantile, eta: float = DEFAULT_ETA) -> float:
    value, _ = objective_and_gradients(returns, beta, model, eta)
    return value


def analytic_gradients(returns, beta, model: SplineQuantile, eta: float = DEFAULT_ETA) -> UprGradients:
    _, grads = objective_and_gradients(returns, beta, model, eta)
    return grads
