"""
Unit tests for the experiment drivers, their pass criteria and the output writers.
"""
import json
import math
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from data.models import ConfigurationError, RunConfig, UnsupportedConfigurationError
from services.experiments import (
    COMMANDS, balanced_momenta, convergence_passed, exact_cutoffs, factorization_passed, ordered_map,
    pair_closer_geometry, run_bound_sweep, run_convergence_experiment, run_factorization_experiment,
    run_selftest, spectator_bound_spec, three_point_geometry, write_report, write_table,
)


class TestGeometry(unittest.TestCase):
    def test_three_point_geometry(self):
        """Test the separations of the ratio configuration"""
        x1, x2, x3 = three_point_geometry(0.5, 0.25, 2.0)
        self.assertTrue(np.array_equal(x3, np.zeros(4)))
        self.assertAlmostEqual(np.linalg.norm(x2 - x3), 0.25, places=15)
        self.assertAlmostEqual(np.linalg.norm(x1 - x2) / np.linalg.norm(x2 - x3), 0.25, places=15)

    def test_pair_closer_geometry(self):
        """Test that the first pair approaches quadratically"""
        for eps in (0.16, 0.08, 0.04):
            x1, x2, x3 = pair_closer_geometry(eps, 1.0)
            self.assertAlmostEqual(np.linalg.norm(x2 - x3), eps, places=15)
            self.assertAlmostEqual(np.linalg.norm(x1 - x2), eps ** 2, places=15)

    def test_balanced_momenta(self):
        """Test that the sweep momenta conserve momentum"""
        momenta = balanced_momenta(6, 0.5, 2.0)
        self.assertEqual(momenta.shape, (6, 4))
        np.testing.assert_allclose(momenta.sum(axis=0), 0.0, atol=1e-15)
        self.assertAlmostEqual(float(np.abs(momenta).max()), 1.0)

    def test_exact_cutoffs(self):
        """Test that the exact propagator has no regulators"""
        c = exact_cutoffs(1.5)
        self.assertEqual((c.lam, c.mass), (0.0, 1.5))
        self.assertTrue(math.isinf(c.lam0))


class TestOrderedMap(unittest.TestCase):
    def test_order_is_kept(self):
        """Test that threaded results come back in submission order"""
        items = list(range(20))
        self.assertEqual(ordered_map(lambda k: k * k, items, threads=3), [k * k for k in items])
        self.assertEqual(ordered_map(lambda k: k + 1, [4], threads=3), [5])


class TestConvergenceExperiment(unittest.TestCase):
    def test_operator_count(self):
        """Test that the convergence run needs three operators"""
        cfg = RunConfig(operators=["phi^2:[0000|0000]"] * 2, points=[(0.3, 0, 0, 0), (0, 0, 0, 0)])
        with self.assertRaises(ConfigurationError):
            run_convergence_experiment(cfg)

    def test_free_sector_only(self):
        """Test that a nonzero coupling is refused"""
        with self.assertRaises(UnsupportedConfigurationError):
            run_convergence_experiment(RunConfig(coupling=0.5))

    def test_spectator_spec(self):
        """Test the bound data of the smeared remainder"""
        cfg = RunConfig(spectators=[(0.3, 0.4, 0.0, 0.0)], spectator_width=0.5)
        spec = spectator_bound_spec(cfg, three_point_geometry(0.5, 0.5, 1.0), 1)
        self.assertEqual((spec.identifier, spec.legs, spec.delta), ('ope3conv', 1, 1))
        self.assertAlmostEqual(spec.p_norm, 1.5, places=14)
        self.assertAlmostEqual(spec.f_sup, (math.pi * 0.25) ** -2, places=12)

    def test_small_run(self):
        """Test a short run: the flowed remainder tracks the exact Wick reference"""
        cfg = RunConfig(delta_max=0, flow_check_delta=0, lambda0_ladder=(25.0, 50.0))
        table = run_convergence_experiment(cfg)
        self.assertEqual(list(table['scan']), ['none'] + ['pair_closer'] * 3)
        self.assertIn('oracle_lhs', table.columns)
        self.assertTrue(np.isfinite(table['lhs_spread']).all())
        for _, row in table.iterrows():
            self.assertGreater(row['oracle_lhs'], 0.0)
            self.assertLessEqual(row['oracle_deviation'], 1e-3 * row['oracle_lhs'] + 1e-12,
                                 f"{row['scan']} eps={row['epsilon']}")
        self.assertFalse(math.isnan(table['flow_residual'].iloc[0]), "Delta = 0 is cross-checked")

    def test_pass_criterion(self):
        """Test the convergence pass criterion on a synthetic table"""
        cfg = RunConfig(tolerance=1e-6)
        table = pd.DataFrame({
            'scan': ['none', 'none', 'none', 'pair_closer'],
            'holds': [True] * 4, 'converged': [True] * 4, 'decreasing': [True] * 4,
            'flow_residual': [0.0, 1e-9, math.nan, math.nan], 'spread': [0.0] * 4,
        })
        self.assertTrue(convergence_passed(table, cfg))
        self.assertFalse(convergence_passed(table.assign(holds=[True, False, True, True]), cfg))
        self.assertFalse(convergence_passed(table.assign(decreasing=[True, True, False, True]), cfg))
        self.assertFalse(convergence_passed(table.assign(flow_residual=[0.0, 1.0, math.nan, math.nan]), cfg))


class TestFactorizationExperiment(unittest.TestCase):
    def test_ratio_range(self):
        """Test that the ratio must lie strictly between 0 and 1"""
        with self.assertRaises(ConfigurationError):
            run_factorization_experiment(RunConfig(ratio=1.0))

    def test_pass_criterion(self):
        """Test the factorization pass criterion on a synthetic table"""
        table = pd.DataFrame({
            'sector': ['free'] * 3 + ['tree'] * 2,
            'target': ['1'] * 3 + ['1'] * 2,
            'lhs': [1.0] * 5,
            'residual': [0.5, 0.1, 1e-6, 0.3, 0.01],
            'decreasing': [True, True, True, True, True],
            'wick_support': [math.nan] * 5,
            'beyond_support': [False] * 5,
        })
        self.assertTrue(factorization_passed(table))
        stalled = table.assign(residual=[0.5, 0.6, 0.5, 0.3, 0.01])
        self.assertFalse(factorization_passed(stalled))
        self.assertFalse(factorization_passed(table.assign(decreasing=[True, True, True, True, False])))
        vanishing = pd.DataFrame({'sector': ['free'] * 2, 'target': ['phi^2:[0000|1000]'] * 2, 'lhs': [0.0] * 2,
                                  'residual': [0.0, 1e-3], 'decreasing': [True, False],
                                  'wick_support': [math.nan] * 2, 'beyond_support': [False] * 2})
        self.assertFalse(factorization_passed(vanishing), "a vanishing coefficient must stay exactly zero")

    def test_residual_beyond_wick_support(self):
        """Test that free rows beyond the Wick support must reproduce the coefficient"""
        table = pd.DataFrame({
            'sector': ['free'] * 3,
            'target': ['phi^6:[0000|0000|0000|0000|0000|0000]'] * 3,
            'lhs': [1.0] * 3,
            'residual': [1.0, 1.0, 0.0],
            'decreasing': [True] * 3,
            'wick_support': [2.0] * 3,
            'beyond_support': [False, False, True],
        })
        self.assertTrue(factorization_passed(table))
        self.assertFalse(factorization_passed(table.assign(residual=[1.0, 1.0, 1e-6])))

    def test_free_run_reaches_wick_support(self):
        """Test a free run whose target phi^6 factorizes exactly through phi^4"""
        phi6 = "phi^6:[0000|0000|0000|0000|0000|0000]"
        cfg = RunConfig(experiment='factorization', targets=[phi6], d1_max=5)
        table = run_factorization_experiment(cfg)
        self.assertEqual(list(table['D1']), list(range(6)))
        self.assertEqual(set(table['sector']), {'free'})
        self.assertTrue((table['wick_support'] == 4.0).all())
        self.assertEqual(list(table['beyond_support']), [False] * 4 + [True] * 2)
        self.assertAlmostEqual(table['residual'].iloc[0], 1.0, places=12)
        self.assertLess(table['residual'].iloc[-1], 1e-8)
        self.assertTrue(factorization_passed(table))

    def test_unbounded_support_is_not_flagged(self):
        """Test that a target with terms at every D1 has no Wick support in range"""
        table = run_factorization_experiment(RunConfig(experiment='factorization', targets=["1"], d1_max=2))
        self.assertTrue(table['wick_support'].isna().all())
        self.assertFalse(table['beyond_support'].any())


class TestSelftest(unittest.TestCase):
    def test_tadpole_checks_inside_the_grid(self):
        """Test that the tadpole checks run at Lambda = m and 2m against the closed-form values"""
        table = run_selftest(RunConfig(coupling=1.0, mass=1.0, lambda0_ladder=(25.0, 50.0))).set_index('check')
        expected = {1: -2.3508969550e-04, 2: -3.2785643136e-03}
        for lam, value in expected.items():
            row = table.loc[f"tadpole quadrature vs closed form at Lambda={lam}m"]
            self.assertAlmostEqual(row['expected'] / value, 1.0, places=8)
            self.assertTrue(row['passed'])
            flowed = table[table.index.str.startswith("L_2,1") & table.index.str.endswith(f"Lambda={lam}m")]
            self.assertGreater(len(flowed), 0)
            self.assertTrue(flowed['passed'].all(), f"Lambda={lam}m")
            np.testing.assert_allclose(flowed['value'], value, rtol=2e-6)


class TestBoundSweep(unittest.TestCase):
    def test_empty_grid(self):
        """Test that an empty grid trivially holds"""
        self.assertEqual(run_bound_sweep(RunConfig(), grid={}), {'families': {}, 'all_hold': True})


class TestOutput(unittest.TestCase):
    def test_write_table(self):
        """Test the CSV writer"""
        with tempfile.TemporaryDirectory() as tmp:
            out = os.path.join(tmp, 'nested')
            path = write_table(pd.DataFrame({'delta': [0, 1], 'lhs': [0.5, 0.25]}), out, 'table.csv')
            self.assertTrue(os.path.isfile(path))
            read = pd.read_csv(path)
            self.assertEqual(list(read.columns), ['delta', 'lhs'])
            self.assertAlmostEqual(read['lhs'].iloc[1], 0.25)

    def test_write_report(self):
        """Test that numpy values and complex numbers serialize"""
        with tempfile.TemporaryDirectory() as tmp:
            report = {'K': np.float64(2.5), 'points': np.zeros(2), 'value': 1 + 2j, 'passed': True}
            path = write_report(report, tmp, 'report.json')
            with open(path, 'r', encoding='utf-8') as handle:
                loaded = json.load(handle)
            self.assertEqual(loaded['K'], 2.5)
            self.assertEqual(loaded['points'], [0.0, 0.0])
            self.assertEqual(loaded['value'], {'re': 1.0, 'im': 2.0})

    def test_commands(self):
        """Test the registered experiments"""
        self.assertEqual(sorted(COMMANDS), ['bounds', 'convergence', 'factorization', 'selftest'])


if __name__ == '__main__':
    unittest.main()
