"""
Unit tests for the flow-equation engine.
"""
import math
import unittest

import numpy as np
from scipy import integrate, special

from data.models import (
    BudgetExceededError, CagKey, CoincidentPointsError, CompositeOp, ConfigurationError, CutoffPair, Insertion,
    MultiIndex, RegTuple, UnsupportedConfigurationError,
)
from services.flow_engine import (
    FlowEngine, clear_engines, extrapolate_lambda0, extrapolate_lambda_floor, get_engine,
)
from utils.propagators import free_propagator_position
from utils.wick_oracle import tree_diagram_cag

PHI2 = CompositeOp.power(2)
SIX_POINT_MOMENTA = np.array([
    [0.3, 0.1, 0.0, 0.0],
    [-0.2, 0.4, 0.1, 0.0],
    [0.0, -0.3, 0.2, 0.1],
    [0.5, 0.0, -0.1, 0.2],
    [-0.1, 0.2, 0.0, -0.3],
])


class TestEngineCache(unittest.TestCase):
    def tearDown(self):
        clear_engines()

    def test_shared_engine(self):
        """Test that engines are shared per (Lambda0, m, g)"""
        a = get_engine(30.0, 1.0, 0.5)
        self.assertIs(get_engine(30.0, 1.0, 0.5), a)
        self.assertIsNot(get_engine(30.0, 1.0, 0.0), a)
        clear_engines()
        self.assertIsNot(get_engine(30.0, 1.0, 0.5), a, "clearing drops the cached engines")


class TestExtrapolation(unittest.TestCase):
    def test_lambda0_ladder(self):
        """Test that a quadratic in 1/Lambda0^2 extrapolates exactly"""
        value, spread = extrapolate_lambda0(lambda l0: 2.0 + 3.0 / l0 ** 2 - 5.0 / l0 ** 4, (10.0, 20.0, 40.0))
        self.assertAlmostEqual(complex(value).real, 2.0, places=10)
        self.assertGreater(spread, 0.0)
        single, no_spread = extrapolate_lambda0(lambda l0: 1.5, (10.0,))
        self.assertEqual((complex(single), no_spread), (1.5, 0.0))

    def test_lambda_floor(self):
        """Test that the floor extrapolation removes a Lambda^2 term"""
        value = extrapolate_lambda_floor(lambda lam: 0.7 + 4.0 * lam ** 2, 1.0)
        self.assertAlmostEqual(complex(value).real, 0.7, places=12)


class TestTreeCags(unittest.TestCase):
    def setUp(self):
        self.engine = FlowEngine(30.0, 1.0, 0.8)
        self.cutoffs = self.engine.cutoffs(1.0)

    def test_four_point_datum(self):
        """Test that L_4,0 is g/4! at any momenta"""
        key = CagKey(4, 0, cutoffs=self.cutoffs)
        value = self.engine.cag_no_insertion(key, SIX_POINT_MOMENTA[:3])
        self.assertAlmostEqual(complex(value), 0.8 / 24, places=14)

    def test_momentum_count(self):
        """Test that a wrong number of momenta raises"""
        with self.assertRaises(ConfigurationError):
            self.engine.cag_no_insertion(CagKey(4, 0, cutoffs=self.cutoffs), SIX_POINT_MOMENTA[:2])
        insertion = Insertion.of(PHI2)
        with self.assertRaises(ConfigurationError):
            self.engine.cag_one_insertion(CagKey(2, 0, (insertion,), cutoffs=self.cutoffs), SIX_POINT_MOMENTA[:1])

    def test_mismatched_cutoffs(self):
        """Test that keys built for another Lambda0 are rejected"""
        with self.assertRaises(ConfigurationError):
            self.engine.evaluate(CagKey(4, 0, cutoffs=CutoffPair(1.0, 60.0, 1.0)), SIX_POINT_MOMENTA[:3])

    def test_insertion_phase(self):
        """Test that the phi^2 two-point tree is the plane-wave phase"""
        x = np.array([0.3, -0.2, 0.0, 0.1])
        key = CagKey(2, 0, (Insertion.of(PHI2, x),), cutoffs=self.cutoffs)
        p = SIX_POINT_MOMENTA[:2]
        expected = np.exp(1j * p.sum(axis=0) @ x)
        self.assertAlmostEqual(complex(self.engine.cag_one_insertion(key, p)), complex(expected), places=13)

    def test_tree_derivative(self):
        """Test the exact momentum derivative of the phi^2 tree"""
        x = np.array([0.3, -0.2, 0.0, 0.1])
        key = CagKey(2, 0, (Insertion.of(PHI2, x),), cutoffs=self.cutoffs)
        w = MultiIndex((1, 0, 0, 0, 0, 0, 0, 0))
        value = self.engine.cag_one_insertion(key, np.zeros((2, 4)), w)
        self.assertAlmostEqual(complex(value), 0.3j, places=12)

    def test_flowed_six_point_tree(self):
        """Test that integrating the flow reproduces the closed-form six-point tree"""
        engine = FlowEngine(30.0, 1.0, 0.8, closed_form_tree=False)
        key = CagKey(6, 0, cutoffs=engine.cutoffs(1.0))
        flowed = complex(engine.cag_no_insertion(key, SIX_POINT_MOMENTA))
        exact = complex(tree_diagram_cag(6, 0.8, CutoffPair(1.0, 30.0, 1.0))(
            np.vstack([SIX_POINT_MOMENTA, -SIX_POINT_MOMENTA.sum(axis=0)])))
        self.assertLess(exact.real, 0.0, "two vertices joined by one propagator")
        self.assertAlmostEqual(flowed.real / exact.real, 1.0, places=8)

    def test_flow_equation_residual(self):
        """Test that the flowed six-point CAG solves its flow equation"""
        engine = FlowEngine(30.0, 1.0, 0.8, closed_form_tree=False)
        key = CagKey(6, 0, cutoffs=engine.cutoffs(2.0))
        self.assertLess(engine.fe_residual(key, SIX_POINT_MOMENTA, 2.0), 1e-8)
        with self.assertRaises(ConfigurationError):
            engine.fe_residual(key, SIX_POINT_MOMENTA, 30.0)

    def test_lowenstein_rule_one(self):
        """Test that the position derivative equals the derivative insertion"""
        x = np.array([0.3, -0.2, 0.0, 0.1])
        key = CagKey(2, 0, (Insertion.of(PHI2, x),), cutoffs=self.cutoffs)
        residual = self.engine.lowenstein_check(1, key, SIX_POINT_MOMENTA[:2], (1, 0, 0, 0))
        self.assertLess(residual, 1e-8)
        self.assertEqual(self.engine.lowenstein_check(1, key, SIX_POINT_MOMENTA[:2], (0, 0, 0, 0)), 0.0)
        with self.assertRaises(ConfigurationError):
            self.engine.lowenstein_check(4, key, SIX_POINT_MOMENTA[:2], (1, 0, 0, 0))


class TestMultiInsertion(unittest.TestCase):
    def setUp(self):
        self.free = FlowEngine(20.0, 1.0, 0.0)
        self.cutoffs = self.free.cutoffs(0.5)
        self.pair = (Insertion.of(PHI2, (0.5, 0.0, 0.0, 0.0)), Insertion.of(PHI2))

    def test_vertex_free_counting(self):
        """Test which multi-insertion CAG's have no phi^4 vertex"""
        triple = self.pair + (Insertion.of(PHI2, (0.0, 0.5, 0.0, 0.0)),)
        self.assertTrue(FlowEngine.vertex_free(2, 0, self.pair))
        self.assertTrue(FlowEngine.vertex_free(0, 1, self.pair))
        self.assertFalse(FlowEngine.vertex_free(4, 0, self.pair))
        self.assertFalse(FlowEngine.vertex_free(2, 1, self.pair))
        self.assertTrue(FlowEngine.vertex_free(2, 0, triple))
        self.assertFalse(FlowEngine.vertex_free(4, 0, triple))

    def test_vertex_free_sector_ignores_coupling(self):
        """Test that at g != 0 a vertex-free two-insertion CAG equals the free one"""
        engine = FlowEngine(20.0, 1.0, 0.5)
        p = SIX_POINT_MOMENTA[:2]
        free = complex(self.free.cag_two_insertion(CagKey(2, 0, self.pair, cutoffs=self.cutoffs), p))
        interacting = complex(engine.cag_two_insertion(CagKey(2, 0, self.pair, cutoffs=engine.cutoffs(0.5)), p))
        self.assertAlmostEqual(abs(interacting - free), 0.0, places=12)

    def test_interacting_four_point_tree(self):
        """Test L_4,0 of phi^2(x) phi^2(0) at p = 0, Lambda = 0 against the two one-vertex diagrams"""
        lam0, g, x = 5.0, 0.5, np.array([0.5, 0.0, 0.0, 0.0])
        engine = FlowEngine(lam0, 1.0, g)
        pair = (Insertion.of(PHI2, x), Insertion.of(PHI2))
        key = CagKey(4, 0, pair, RegTuple.two(-1), engine.cutoffs(0.0))
        value = complex(engine.cag_two_insertion(key, np.zeros((4, 4))))

        def cutoff_propagator(k):
            return np.exp(-(k ** 2 + 1.0) / lam0 ** 2) / (k ** 2 + 1.0)

        r = float(np.linalg.norm(x))
        radial, _ = integrate.quad(lambda k: k ** 2 * special.j1(k * r) * cutoff_propagator(k) ** 2, 0.0, 60.0,
                                   limit=400)
        bubble = radial / (4.0 * math.pi ** 2 * r)
        line = free_propagator_position(x, 1.0, CutoffPair(0.0, lam0, 1.0))
        expected = 2.0 * g * bubble + 4.0 / 3.0 * g * line * math.exp(-1.0 / lam0 ** 2)
        self.assertAlmostEqual(value.real / expected, 1.0, places=3)
        self.assertAlmostEqual(value.imag, 0.0, places=8)

    def test_interacting_budget(self):
        """Test that loops and large n with interaction vertices exceed the budget"""
        engine = FlowEngine(20.0, 1.0, 0.5)
        with self.assertRaises(BudgetExceededError):
            engine.cag_two_insertion(CagKey(2, 1, self.pair, cutoffs=engine.cutoffs(0.5)), np.zeros((2, 4)))
        with self.assertRaises(BudgetExceededError):
            engine.cag_two_insertion(CagKey(6, 0, self.pair, cutoffs=engine.cutoffs(0.5)), np.zeros((6, 4)))

    def test_interacting_flow_residual(self):
        """Test that the interacting two-insertion four-point CAG solves its flow equation"""
        engine = FlowEngine(5.0, 1.0, 0.5)
        key = CagKey(4, 0, self.pair, RegTuple.two(-1), engine.cutoffs(1.0))
        residual = engine.fe_residual(key, SIX_POINT_MOMENTA[:4], 1.0)
        scale = abs(complex(engine.cag_two_insertion(key, SIX_POINT_MOMENTA[:4])))
        self.assertLess(residual, 1e-5 * max(scale, 1.0))

    def test_insertion_count_checked(self):
        """Test that the per-arity entry points check the insertion count"""
        key = CagKey(2, 0, self.pair, cutoffs=self.cutoffs)
        with self.assertRaises(ConfigurationError):
            self.free.cag_three_insertion(key, np.zeros((2, 4)))

    def test_unsupported_collection(self):
        """Test that three insertions need a supported regularization collection"""
        triple = self.pair + (Insertion.of(PHI2, (0.0, 0.5, 0.0, 0.0)),)
        key = CagKey(0, 1, triple, RegTuple.build(3, {(0, 1, 2): 4}), self.cutoffs)
        with self.assertRaises(UnsupportedConfigurationError):
            self.free.cag_three_insertion(key, np.zeros((0, 4)))

    def test_pair_regularizations_add_up(self):
        """Test that regularizing all three pairs equals the sum over single-pair regularizations"""
        triple = self.pair + (Insertion.of(PHI2, (0.0, 0.5, 0.0, 0.0)),)
        pairs = [(0, 1), (1, 2), (0, 2)]
        for n, l in ((2, 0), (0, 1)):
            p = SIX_POINT_MOMENTA[:n]
            full = CagKey(n, l, triple, RegTuple.build(3, {(0, 1, 2): 6, **{s: 4 for s in pairs}}), self.cutoffs)
            total = complex(self.free.cag_three_insertion(full, p))
            parts = sum(complex(self.free.cag_three_insertion(
                CagKey(n, l, triple, RegTuple.build(3, {(0, 1, 2): 6, s: 4}), self.cutoffs), p)) for s in pairs)
            self.assertGreater(abs(total), 0.0, f"n={n}, l={l}")
            self.assertAlmostEqual(abs(total - parts) / abs(total), 0.0, places=9, msg=f"n={n}, l={l}")

    def test_coincident_points_need_regularization(self):
        """Test that coinciding insertions require D at least the summed dimension"""
        coincident = (Insertion.of(PHI2), Insertion.of(PHI2))
        with self.assertRaises(CoincidentPointsError):
            self.free.evaluate(CagKey(2, 0, coincident, RegTuple.two(-1), self.cutoffs), np.zeros((2, 4)))
        value = self.free.cag_two_insertion(CagKey(2, 0, coincident, RegTuple.two(4), self.cutoffs), np.zeros((2, 4)))
        self.assertTrue(np.isfinite(complex(value).real))

    def test_subtracted_two_point_vanishes_at_zero(self):
        """Test that L_D(p = 0) vanishes at Lambda = 0 when D covers the leg count"""
        key = CagKey(2, 0, self.pair, RegTuple.two(2), self.free.cutoffs(0.0))
        self.assertAlmostEqual(complex(self.free.cag_two_insertion(key, np.zeros((2, 4)))), 0.0, places=12)
        unsubtracted = CagKey(2, 0, self.pair, RegTuple.two(-1), self.free.cutoffs(0.0))
        self.assertNotAlmostEqual(abs(complex(self.free.cag_two_insertion(unsubtracted, np.zeros((2, 4))))), 0.0,
                                  places=6)

    def test_lowenstein_rule_two(self):
        """Test that moving one insertion equals inserting its derivative"""
        key = CagKey(2, 0, self.pair, RegTuple.two(-1), self.cutoffs)
        self.assertLess(self.free.lowenstein_check(2, key, SIX_POINT_MOMENTA[:2], (1, 0, 0, 0), index=0), 1e-6)
        self.assertLess(self.free.lowenstein_check(2, key, SIX_POINT_MOMENTA[:2], (0, 1, 0, 0), index=1), 1e-6)

    def test_lowenstein_rule_three(self):
        """Test that a joint translation equals the Leibniz sum with raised regularization"""
        key = CagKey(2, 0, self.pair, RegTuple.two(2), self.cutoffs)
        residual = self.free.lowenstein_check(3, key, SIX_POINT_MOMENTA[:2], (1, 0, 0, 0), subset=(0, 1))
        self.assertLess(residual, 1e-6)


if __name__ == '__main__':
    unittest.main()
