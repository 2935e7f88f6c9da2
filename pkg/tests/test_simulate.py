import logging
import os
import sys
import unittest
from pathlib import Path

import numpy as np
from scipy import stats

REPO_ROOT = Path(__file__).resolve().parents[1]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from upr_portfolio.errors import ValidationError  # noqa: E402
from upr_portfolio.optimizer import FitConfig  # noqa: E402
from upr_portfolio.simulate import (  # noqa: E402
    X3_SD,
    CopulaSpec,
    clayton_sample,
    kendall_tau,
    lower_tail_coefficient,
    simulate_assets,
    tail_experiment,
)

SLOW = os.getenv("UPR_SLOW_TESTS") == "1"


class CopulaSpecTests(unittest.TestCase):
    def test_tail_coefficients(self):
        self.assertAlmostEqual(CopulaSpec(2 / 3).theta, 4.0)
        self.assertAlmostEqual(CopulaSpec(2 / 3).lambda_L, 2 ** -0.25, places=12)
        self.assertAlmostEqual(CopulaSpec(1 / 3).lambda_L, 0.5, places=12)
        self.assertAlmostEqual(CopulaSpec(0.5).lambda_L, 2 ** -0.5, places=12)
        self.assertAlmostEqual(CopulaSpec(2 / 3).lambda_L, 0.8409, places=4)
        self.assertAlmostEqual(CopulaSpec(0.75).lambda_L, 0.8909, places=4)
        taus = np.linspace(0.05, 0.95, 19)
        self.assertTrue(np.all(np.diff([CopulaSpec(t).lambda_L for t in taus]) > 0))

    def test_theta_round_trip(self):
        spec = CopulaSpec.from_theta(4.0, seed=3)
        self.assertAlmostEqual(spec.tau, 2 / 3, places=12)
        self.assertEqual(spec.seed, 3)
        self.assertEqual(CopulaSpec.from_tau(0.5).with_seed(9).seed, 9)

    def test_rejects_tau_outside_unit_interval(self):
        for tau in (0.0, 1.0, -0.2, 1.5):
            with self.assertRaises(ValidationError):
                CopulaSpec(tau)
        with self.assertRaises(ValidationError):
            CopulaSpec.from_theta(0.0)


class ClaytonSamplingTests(unittest.TestCase):
    def test_kendall_tau_matches_parameter(self):
        n = 100_000 if SLOW else 20_000
        for tau in (0.5, 2 / 3, 0.8):
            uv = clayton_sample(CopulaSpec(tau, seed=1), n)
            self.assertAlmostEqual(kendall_tau(uv), tau, delta=0.01 if SLOW else 0.02)

    def test_margins_are_uniform(self):
        uv = clayton_sample(CopulaSpec(2 / 3, seed=2), 20_000)
        self.assertTrue(np.all((uv > 0) & (uv < 1)))
        for column in uv.T:
            self.assertGreater(stats.kstest(column, "uniform").pvalue, 1e-3)

    def test_lower_tail_dependence_is_strong(self):
        uv = clayton_sample(CopulaSpec(0.8, seed=3), 100_000)
        self.assertGreater(lower_tail_coefficient(uv, 0.01), 0.7)
        self.assertTrue(np.isnan(lower_tail_coefficient(np.full((5, 2), 0.5), 0.01)))

    def test_lower_tail_coefficient_matches_clayton_limit(self):
        n = 10_000_000 if SLOW else 200_000
        for tau in (1 / 3, 0.5, 2 / 3, 0.8):
            with self.subTest(tau=tau):
                spec = CopulaSpec(tau, seed=7)
                uv = clayton_sample(spec, n)
                self.assertAlmostEqual(lower_tail_coefficient(uv, 0.01), spec.lambda_L, delta=0.05)

    def test_same_seed_same_draws(self):
        a = clayton_sample(CopulaSpec(0.5, seed=4), 500)
        b = clayton_sample(CopulaSpec(0.5, seed=4), 500)
        c = clayton_sample(CopulaSpec(0.5, seed=5), 500)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))

    def test_asset_panel(self):
        panel = simulate_assets(CopulaSpec(2 / 3, seed=6), 50_000)
        self.assertEqual(panel.tickers, ("X1", "X2", "X3"))
        self.assertEqual(panel.n, 50_000)
        sd = panel.returns.std(axis=0)
        self.assertAlmostEqual(sd[0], 1.0, delta=0.02)
        self.assertAlmostEqual(sd[1], 1.0, delta=0.02)
        self.assertAlmostEqual(sd[2], X3_SD, delta=0.03)
        self.assertLess(abs(np.corrcoef(panel.returns[:, 0], panel.returns[:, 2])[0, 1]), 0.02)
        self.assertGreater(np.corrcoef(panel.returns[:, 0], panel.returns[:, 1])[0, 1], 0.6)

    def test_rejects_empty_sample(self):
        with self.assertRaises(ValidationError):
            clayton_sample(CopulaSpec(0.5), 0)


class TailExperimentTests(unittest.TestCase):
    def test_small_experiment_shape(self):
        config = FitConfig(max_iters=100)
        result = tail_experiment(n=200, models=("upr", "qr", "mv"), config=config, seed=1, replications=2)
        self.assertEqual(len(result.table), 6)
        self.assertEqual(set(result.table["model"]), {"upr", "qr", "mv"})
        self.assertEqual(sorted(result.curves["model"].unique()), ["mv", "qr", "upr"])
        self.assertEqual(len(result.curves), 3 * 100)
        betas = result.table[["beta_X1", "beta_X2", "beta_X3"]].to_numpy()
        np.testing.assert_allclose(betas.sum(axis=1), 1.0, atol=1e-10)
        self.assertTrue(np.all(result.table["max_loss"] > 0))
        summary = result.summary()
        self.assertEqual(list(summary.columns), ["model", "median_max_loss", "mean_max_loss"])
        payload = result.to_dict()
        self.assertEqual(payload["replications"], 2)

    def test_experiment_is_reproducible(self):
        config = FitConfig(max_iters=50)
        a = tail_experiment(n=150, models=("mv", "upr"), config=config, seed=3)
        b = tail_experiment(n=150, models=("mv", "upr"), config=config, seed=3)
        self.assertTrue(a.table.equals(b.table))

    def test_known_zero_means_log_no_warnings(self):
        with self.assertLogs("upr_portfolio", level="INFO") as logs:
            tail_experiment(n=100, models=("upr", "qr", "mv"), config=FitConfig(max_iters=20), seed=2, replications=2)
        self.assertEqual([r.getMessage() for r in logs.records if r.levelno >= logging.WARNING], [])

    @unittest.skipUnless(SLOW, "set UPR_SLOW_TESTS=1 for the full tail experiment")
    def test_upr_worst_loss_does_not_exceed_mean_variance(self):
        for tau_oos in (2 / 3, 0.75):
            with self.subTest(tau_oos=tau_oos):
                result = tail_experiment(
                    tau_fit=2 / 3, tau_oos=tau_oos, n=300, models=("upr", "mv"), seed=0, replications=50
                )
                medians = result.summary().set_index("model")["median_max_loss"]
                self.assertLessEqual(medians["upr"], medians["mv"])

    def test_rejects_bad_arguments(self):
        with self.assertRaises(ValidationError):
            tail_experiment(tau_fit=1.0, n=50)
        with self.assertRaises(ValidationError):
            tail_experiment(n=50, models=("ro",))
        with self.assertRaises(ValidationError):
            tail_experiment(n=50, replications=0)


if __name__ == "__main__":
    unittest.main()
