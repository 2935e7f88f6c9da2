import math
import os
import sys
import unittest
from pathlib import Path

import numpy as np
from scipy import integrate, stats

REPO_ROOT = Path(__file__).resolve().parents[1]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from upr_portfolio.errors import ValidationError  # noqa: E402
from upr_portfolio.risk_core import (  # noqa: E402
    BetaDistortion,
    RiskLevelGrid,
    SplineQuantile,
    analytic_gradients,
    beta_distortion_risk,
    discrete_pessimistic_risk,
    distortion_phi,
    empirical_alpha_risk,
    empirical_quantile,
    empirical_upr_objective,
    gev_beta_risk_analytic,
    objective_and_gradients,
    quantile_loss,
    tail_count,
    uniform_knots,
    upr_from_quantile,
    upr_score,
    upr_via_grid,
)

SLOW = os.getenv("UPR_SLOW_TESTS") == "1"
ETA = 1e-5


def _random_spline(rng, M=4, gamma=None, low=0.1, high=2.0):
    knots = uniform_knots(M)
    deltas = rng.uniform(low, high, size=M + 1)
    return SplineQuantile(rng.normal() if gamma is None else gamma, deltas, knots)


def _probit_spline(M=9):
    # chords of the normal quantile function between the 1% and 99% levels
    knots = uniform_knots(M)
    values = stats.norm.ppf(np.clip(knots, 0.01, 0.99))
    slopes = np.diff(values) / np.diff(knots)
    return SplineQuantile(values[0], np.append(slopes, slopes[-1]), knots)


def _score_by_quadrature(model, y, eta=ETA):
    # substitute α = e^u so the integrand stays bounded near η
    def integrand(u):
        a = math.exp(u)
        return quantile_loss(a, y - model.evaluate(a))

    lo = math.log(eta)
    kinks = [math.log(d) for d in model.knots_d[1:-1] if d > eta]
    a_tilde = model.invert(y, eta)
    if eta < a_tilde < 1.0:
        kinks.append(math.log(a_tilde))
    value, _ = integrate.quad(integrand, lo, 0.0, points=sorted(kinks) or None, limit=400, epsabs=1e-12, epsrel=1e-12)
    return value


class QuantileLossTests(unittest.TestCase):
    def test_check_loss_examples(self):
        self.assertAlmostEqual(quantile_loss(0.1, 2.0), 0.2)
        self.assertAlmostEqual(quantile_loss(0.1, -2.0), 1.8)
        self.assertEqual(quantile_loss(0.5, 0.0), 0.0)
        np.testing.assert_allclose(quantile_loss(0.25, np.array([-1.0, 1.0])), [0.75, 0.25])

    def test_level_outside_open_interval_raises(self):
        for alpha in (0.0, 1.0, -0.2):
            with self.assertRaises(ValidationError):
                quantile_loss(alpha, 1.0)


class AlphaRiskTests(unittest.TestCase):
    def test_tail_count_rounds_up_robustly(self):
        self.assertEqual(tail_count(10, 0.3), 3)
        self.assertEqual(tail_count(10, 0.31), 4)
        self.assertEqual(tail_count(10, 1e-9), 1)
        self.assertEqual(tail_count(10, 1.0), 10)

    def test_alpha_risk_examples(self):
        samples = [-1.0, 0.0, 1.0, 2.0]
        self.assertEqual(empirical_alpha_risk(samples, 0.25), 1.0)
        self.assertEqual(empirical_alpha_risk(samples, 0.5), 0.5)
        self.assertEqual(empirical_alpha_risk(samples, 1.0), -0.5)
        self.assertEqual(empirical_quantile(samples, 0.5), 0.0)

    def test_alpha_risk_rejects_bad_inputs(self):
        with self.assertRaises(ValidationError):
            empirical_alpha_risk([1.0], 0.0)
        with self.assertRaises(ValidationError):
            empirical_alpha_risk([], 0.5)

    def test_uniform_alpha_risk(self):
        draws = np.random.default_rng(0).uniform(size=100_000)
        self.assertAlmostEqual(empirical_alpha_risk(draws, 0.5), -0.25, delta=0.01)

    def test_quantile_loss_minimum_matches_alpha_risk(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=200)
        for alpha in (0.05, 0.1, 0.25, 0.5):
            q = empirical_quantile(y, alpha)
            best = float(np.mean(quantile_loss(alpha, y - q)))
            expected = alpha * (y.mean() + empirical_alpha_risk(y, alpha))
            self.assertAlmostEqual(best, expected, delta=1e-9)
            for shift in (-0.3, -0.01, 0.01, 0.3):
                self.assertGreaterEqual(float(np.mean(quantile_loss(alpha, y - q - shift))), best - 1e-12)


class RiskGridTests(unittest.TestCase):
    def test_discrete_risk_example(self):
        grid = RiskLevelGrid([0.25, 1.0], [0.5, 0.5])
        self.assertAlmostEqual(discrete_pessimistic_risk([-1.0, 0.0, 1.0, 2.0], grid), 0.25)

    def test_single_level_grid_is_alpha_risk(self):
        y = np.random.default_rng(2).normal(size=50)
        grid = RiskLevelGrid([0.2], [1.0])
        self.assertEqual(discrete_pessimistic_risk(y, grid), empirical_alpha_risk(y, 0.2))

    def test_grid_validation(self):
        with self.assertRaises(ValidationError):
            RiskLevelGrid([0.5, 0.25], [0.5, 0.5])
        with self.assertRaises(ValidationError):
            RiskLevelGrid([0.25, 0.5], [0.5, 0.6])
        with self.assertRaises(ValidationError):
            RiskLevelGrid([0.0, 0.5], [0.5, 0.5])
        with self.assertRaises(ValidationError):
            RiskLevelGrid.uniform(0)

    def test_benchmark_grids(self):
        self.assertEqual(RiskLevelGrid.cqr1().levels.tolist(), [0.1, 0.5, 0.9])
        self.assertEqual(RiskLevelGrid.cqr2().to_dict(), {"levels": [0.01, 0.1, 0.5, 0.9], "weights": [0.4, 0.3, 0.2, 0.1]})

    def test_mixture_identity_with_quantile_losses(self):
        rng = np.random.default_rng(4)
        y = rng.standard_t(4, size=400)
        grid = RiskLevelGrid([0.05, 0.25, 0.5, 1.0], [0.1, 0.2, 0.3, 0.4])
        lhs = discrete_pessimistic_risk(y, grid) + y.mean()
        rhs = 0.0
        for alpha, w in zip(grid.levels, grid.weights):
            if alpha == 1.0:
                continue
            q = empirical_quantile(y, alpha)
            rhs += w / alpha * float(np.mean(quantile_loss(alpha, y - q)))
        self.assertAlmostEqual(lhs, rhs, delta=1e-9)

    def test_coherence_properties(self):
        rng = np.random.default_rng(5)
        for _ in range(1_000):
            y = rng.normal(size=200)
            z = rng.standard_t(3, size=200)
            c = float(rng.normal())
            lam = float(rng.uniform(0.1, 10.0))
            base = upr_via_grid(y, 100)
            other = upr_via_grid(z, 100)
            self.assertAlmostEqual(upr_via_grid(y + c, 100), base - c, delta=1e-10)
            self.assertAlmostEqual(upr_via_grid(lam * y, 100), lam * base, delta=1e-10 * (1.0 + lam * abs(base)))
            self.assertLessEqual(upr_via_grid(y + z, 100), base + other + 1e-9)
            self.assertLessEqual(upr_via_grid(y + np.abs(z), 100), base + 1e-12)
            self.assertLessEqual(upr_via_grid(np.maximum(y, z), 100), min(base, other) + 1e-12)

    def test_uniform_upr_on_grid(self):
        n, K = (1_000_000, 10_000) if SLOW else (200_000, 1_000)
        draws = np.random.default_rng(6).uniform(size=n)
        self.assertAlmostEqual(upr_via_grid(draws, K), -0.25, delta=0.005)

    def test_gumbel_grid_matches_quadrature(self):
        draws = np.random.default_rng(7).gumbel(size=1_000_000)
        exact = upr_from_quantile(lambda t: -math.log(-math.log(t)))
        self.assertAlmostEqual(upr_via_grid(draws, 2_000), exact, delta=0.01)


class DistortionTests(unittest.TestCase):
    def test_phi_values(self):
        self.assertAlmostEqual(distortion_phi(1.0), 1.0)
        self.assertAlmostEqual(distortion_phi(math.exp(-1.0)), 2.0 / math.e)
        with self.assertRaises(ValidationError):
            distortion_phi(0.0)

    def test_uniform_beta_matches_grid(self):
        draws = np.random.default_rng(8).uniform(size=100_000)
        self.assertAlmostEqual(
            beta_distortion_risk(draws, BetaDistortion(1.0, 1.0), 1_000), upr_via_grid(draws, 1_000), delta=0.01
        )

    def test_beta_distortion_rejects_optimistic_shapes(self):
        with self.assertRaises(ValidationError):
            BetaDistortion(0.5)

    def test_gev_closed_form_values(self):
        self.assertAlmostEqual(gev_beta_risk_analytic(0.0, 1.0, 0.5, 2.0), 0.291597, delta=1e-5)
        self.assertAlmostEqual(gev_beta_risk_analytic(0.0, 1.0, 0.5, 1.0), 0.65868, places=5)

    def test_gev_at_unit_shape_is_upr(self):
        for kappa in (-0.3, 0.2, 0.5):
            G = lambda t, k=kappa: (1.0 - (-math.log(t)) ** k) / k
            self.assertAlmostEqual(gev_beta_risk_analytic(0.0, 1.0, kappa, 1.0), upr_from_quantile(G), delta=1e-6)
        gumbel = upr_from_quantile(lambda t: -math.log(-math.log(t)))
        self.assertAlmostEqual(gev_beta_risk_analytic(0.0, 1.0, 0.0, 1.0), gumbel, delta=1e-6)
        self.assertAlmostEqual(gev_beta_risk_analytic(0.0, 1.0, 0.0, 1.0), 1.0 - np.euler_gamma, places=12)

    def test_gumbel_is_small_shape_limit(self):
        self.assertAlmostEqual(
            gev_beta_risk_analytic(0.0, 1.0, 1e-7, 2.0), gev_beta_risk_analytic(0.0, 1.0, 0.0, 2.0), delta=1e-5
        )

    def test_gev_risk_decreases_in_shape(self):
        for kappa in (-0.3, 0.0, 0.2, 0.5):
            values = [gev_beta_risk_analytic(0.3, 1.5, kappa, s) for s in (1.0, 1.5, 2.0, 4.0, 8.0)]
            self.assertTrue(all(b < a for a, b in zip(values, values[1:])), (kappa, values))

    def test_gev_matches_monte_carlo(self):
        n = 1_000_000 if SLOW else 200_000
        e = np.random.default_rng(9).exponential(size=n)
        draws = 2.0 * (1.0 - np.sqrt(e))
        mc = beta_distortion_risk(draws, BetaDistortion(2.0), 2_000)
        self.assertAlmostEqual(mc, gev_beta_risk_analytic(0.0, 1.0, 0.5, 2.0), delta=0.02)

    def test_gev_rejects_bad_parameters(self):
        with self.assertRaises(ValidationError):
            gev_beta_risk_analytic(0.0, 1.0, -1.0, 2.0)
        with self.assertRaises(ValidationError):
            gev_beta_risk_analytic(0.0, 0.0, 0.5, 2.0)
        with self.assertRaises(ValidationError):
            gev_beta_risk_analytic(0.0, 1.0, 0.5, 0.5)


class SplineQuantileTests(unittest.TestCase):
    def setUp(self):
        self.model = SplineQuantile.from_slopes(-1.0, [1.0, 2.0, 0.0], [0.0, 0.5, 1.0])

    def test_evaluate_and_invert_example(self):
        np.testing.assert_allclose(self.model.deltas, [1.0, 3.0, 3.0])
        self.assertAlmostEqual(self.model.evaluate(0.75), 0.25)
        self.assertAlmostEqual(self.model.invert(0.25), 0.75)
        np.testing.assert_allclose(self.model.knot_values(), [-1.0, -0.5, 1.0])

    def test_identity_inverse(self):
        identity = SplineQuantile.identity()
        self.assertAlmostEqual(identity.invert(0.3), 0.3)
        self.assertEqual(identity.invert(-5.0, ETA), ETA)
        self.assertEqual(identity.invert(5.0, ETA), 1.0)

    def test_invert_is_inverse_of_evaluate(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            model = _random_spline(rng, M=int(rng.integers(1, 20)))
            alphas = rng.uniform(ETA, 1.0, size=200)
            np.testing.assert_allclose(model.invert(model.evaluate(alphas), ETA), alphas, atol=1e-10)

    def test_curve_is_monotone(self):
        model = _random_spline(np.random.default_rng(11), M=19)
        values = model.curve(np.linspace(0.0, 1.0, 501))["value"].to_numpy()
        self.assertTrue(np.all(np.diff(values) >= -1e-12))

    def test_rejects_invalid_parameters(self):
        with self.assertRaises(ValidationError):
            SplineQuantile(0.0, [1.0, -0.5], [0.0, 1.0])
        with self.assertRaises(ValidationError):
            SplineQuantile(0.0, [1.0, 1.0], [0.0, 0.5])
        with self.assertRaises(ValidationError):
            self.model.evaluate(1.5)

    def test_dict_round_trip(self):
        again = SplineQuantile.from_dict(self.model.to_dict())
        self.assertEqual(again.gamma, self.model.gamma)
        np.testing.assert_allclose(again.deltas, self.model.deltas)
        np.testing.assert_array_equal(again.knots_d, self.model.knots_d)
        with self.assertRaises(ValidationError):
            SplineQuantile.from_dict({"gamma": 0.0})

    def test_scaled_curve(self):
        scaled = self.model.scaled(2.0, 1.0)
        self.assertAlmostEqual(scaled.evaluate(0.75), 2.0 * 0.25 + 1.0)


class UprObjectiveTests(unittest.TestCase):
    def test_single_sample_identity_example(self):
        value = empirical_upr_objective(np.array([[0.5]]), [1.0], SplineQuantile.identity(), ETA)
        self.assertAlmostEqual(value, 0.15342, delta=5e-6)
        self.assertAlmostEqual(value, _score_by_quadrature(SplineQuantile.identity(), 0.5), delta=1e-8)

    def test_closed_form_matches_quadrature(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            model = _random_spline(rng, M=int(rng.integers(1, 8)))
            lo, hi = model.evaluate(0.0), model.evaluate(1.0)
            for y in rng.uniform(lo - 0.5, hi + 0.5, size=5):
                self.assertAlmostEqual(upr_score(model, float(y), ETA), _score_by_quadrature(model, float(y)), delta=1e-6)

    def test_score_is_nonnegative(self):
        model = _random_spline(np.random.default_rng(13), M=6)
        scores = upr_score(model, np.linspace(-3, 3, 41), ETA)
        self.assertTrue(np.all(scores >= -1e-12))

    def test_population_risk_of_uniform_identity(self):
        draws = np.random.default_rng(14).uniform(size=100_000)
        value = empirical_upr_objective(draws[:, None], [1.0], SplineQuantile.identity(), ETA)
        self.assertAlmostEqual(value, (1.0 - ETA) ** 2 / 4.0, delta=0.01)

    def test_empirical_objective_converges_to_population_value(self):
        model = _probit_spline()
        kv = model.knot_values()

        def weighted_score(y):
            return upr_score(model, y, ETA) * stats.norm.pdf(y)

        pieces = [(-12.0, kv[0]), (kv[0], kv[-1]), (kv[-1], 12.0)]
        population = sum(
            integrate.quad(weighted_score, lo, hi, points=kv[1:-1] if lo == kv[0] else None, limit=200)[0]
            for lo, hi in pieces
        )
        errors = []
        for n in (1_000, 10_000, 100_000):
            gaps = [
                abs(empirical_upr_objective(np.random.default_rng(seed).normal(size=n), [1.0], model, ETA) - population)
                for seed in range(10)
            ]
            errors.append(float(np.mean(gaps)))
        self.assertGreater(errors[0], errors[1])
        self.assertGreater(errors[1], errors[2])
        self.assertLess(errors[2], 0.01)

    def test_own_law_samples_make_the_model_optimal(self):
        model = _probit_spline()
        draws = model.evaluate(np.random.default_rng(17).uniform(ETA, 1.0, size=200_000))
        own = empirical_upr_objective(draws, [1.0], model, ETA)

        def score_at_level(u):
            return upr_score(model, model.evaluate(u), ETA)

        minimal = integrate.quad(score_at_level, ETA, 1.0, points=model.knots_d[1:-1], limit=200)[0] / (1.0 - ETA)
        self.assertGreaterEqual(minimal, 0.0)
        self.assertAlmostEqual(own, minimal, delta=0.01)
        rng = np.random.default_rng(18)
        for _ in range(20):
            other = SplineQuantile(
                model.gamma + rng.choice([-0.1, 0.1]),
                model.deltas * rng.uniform(0.8, 1.25, size=model.deltas.size),
                model.knots_d,
            )
            self.assertLess(own, empirical_upr_objective(draws, [1.0], other, ETA))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(15)
        h = 1e-6
        for _ in range(50):
            p = int(rng.integers(1, 5))
            x = rng.normal(size=(40, p))
            beta = rng.normal(size=p)
            y = x @ beta
            model = _random_spline(rng, M=int(rng.integers(1, 8)), gamma=float(y.min()) - 0.5, low=0.5)
            # keep every α̃ strictly inside (η, 1)
            stretch = (y.max() + 0.5 - model.gamma) / (model.evaluate(1.0) - model.gamma)
            model = SplineQuantile(model.gamma, model.deltas * stretch, model.knots_d)
            value, grads = objective_and_gradients(x, beta, model, ETA)

            fd_beta = np.array(
                [
                    (empirical_upr_objective(x, beta + h * e, model, ETA) - empirical_upr_objective(x, beta - h * e, model, ETA)) / (2 * h)
                    for e in np.eye(p)
                ]
            )
            up = SplineQuantile(model.gamma + h, model.deltas, model.knots_d)
            down = SplineQuantile(model.gamma - h, model.deltas, model.knots_d)
            fd_gamma = (empirical_upr_objective(x, beta, up, ETA) - empirical_upr_objective(x, beta, down, ETA)) / (2 * h)
            fd_delta = []
            for e in np.eye(model.deltas.size):
                up = SplineQuantile(model.gamma, model.deltas + h * e, model.knots_d)
                down = SplineQuantile(model.gamma, model.deltas - h * e, model.knots_d)
                fd_delta.append((empirical_upr_objective(x, beta, up, ETA) - empirical_upr_objective(x, beta, down, ETA)) / (2 * h))

            np.testing.assert_allclose(grads.beta, fd_beta, rtol=1e-4, atol=1e-6)
            self.assertAlmostEqual(grads.gamma, fd_gamma, delta=1e-6 + 1e-4 * abs(fd_gamma))
            np.testing.assert_allclose(grads.delta, fd_delta, rtol=1e-4, atol=1e-6)
            self.assertEqual(grads.delta[-1], 0.0)
            self.assertTrue(math.isfinite(value))

    def test_gradient_invariant_to_common_shift(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(60, 3))
        beta = np.array([0.2, 0.5, 0.3])
        model = _random_spline(rng, M=5)
        shifted = SplineQuantile(model.gamma + 0.8, model.deltas, model.knots_d)
        base = analytic_gradients(x, beta, model, ETA)
        moved = analytic_gradients(x + 0.8, beta, shifted, ETA)
        np.testing.assert_allclose(moved.b, base.b, atol=1e-12)
        self.assertAlmostEqual(moved.gamma, base.gamma, delta=1e-12)

    def test_weight_length_mismatch_raises(self):
        with self.assertRaises(ValidationError):
            empirical_upr_objective(np.zeros((3, 2)), [1.0], SplineQuantile.identity(), ETA)
        with self.assertRaises(ValidationError):
            upr_score(SplineQuantile.identity(), 0.5, eta=0.0)


if __name__ == "__main__":
    unittest.main()
