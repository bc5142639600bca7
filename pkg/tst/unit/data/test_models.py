"""
Unit tests for the data models.
"""
import math
import unittest

import numpy as np

from data.models import (
    BoundSpec, CagKey, CoincidentPointsError, CompositeOp, ConfigurationError, CutoffPair, Insertion,
    MomentumConfig, MultiIndex, OpeTable, RegTuple, RunConfig, SpacetimeConfig, TaylorSpec,
    enumerate_ops_up_to, momentum_norm, multi_indices_of_order,
)


class TestMultiIndex(unittest.TestCase):
    def setUp(self):
        self.w = MultiIndex((2, 0, 1, 0, 0, 3, 0, 0))

    def test_order_and_factorial(self):
        """Test that |w| and w! are computed over all entries"""
        self.assertEqual(self.w.order, 6, "order should be the entry sum")
        self.assertEqual(self.w.factorial, 2 * 6, "factorial should be 2! * 3!")
        self.assertEqual(self.w.n_blocks, 2, "eight entries make two blocks")
        self.assertEqual(self.w.block(1), (0, 3, 0, 0), "second block should be the last four entries")

    def test_invalid_length_rejected(self):
        """Test that a length that is not a multiple of four raises"""
        with self.assertRaises(ConfigurationError):
            MultiIndex((1, 2, 3))

    def test_factorial_overflow(self):
        """Test that factorials beyond the float range raise OverflowError"""
        with self.assertRaises(OverflowError):
            MultiIndex((200, 0, 0, 0)).factorial_float()

    def test_arithmetic(self):
        """Test addition and domination"""
        u = MultiIndex.unit(0, 2, 2)
        self.assertEqual((self.w + u).entries, (2, 0, 2, 0, 0, 3, 0, 0), "unit should add one to entry 2")
        self.assertTrue((self.w + u).dominates(self.w), "sum should dominate its summand")
        self.assertFalse(u.dominates(self.w), "unit should not dominate w")

    def test_multi_indices_of_order(self):
        """Test the lexicographic enumeration of compositions"""
        self.assertEqual(multi_indices_of_order(2, 2), [(0, 2), (1, 1), (2, 0)])
        self.assertEqual(len(multi_indices_of_order(3, 4)), math.comb(6, 3), "stars and bars count")
        self.assertEqual(multi_indices_of_order(0, 0), [()], "empty composition of zero")


class TestCompositeOp(unittest.TestCase):
    def test_label_round_trip(self):
        """Test that labels parse to operators with the same label"""
        for label in ("1", "phi^2:[0000|0000]", "phi^2:[0000|1000]", "phi^4:[0000|0000|0000|0010]"):
            self.assertEqual(CompositeOp.from_label(label).label, label, f"round trip of {label}")

    def test_blocks_sorted(self):
        """Test that block order does not distinguish operators"""
        a = CompositeOp(((1, 0, 0, 0), (0, 0, 0, 0)))
        b = CompositeOp(((0, 0, 0, 0), (1, 0, 0, 0)))
        self.assertEqual(a, b, "operators should be equal after sorting their blocks")
        self.assertEqual(a.dimension, 3, "phi d phi has dimension 3")

    def test_multi_digit_derivative_orders(self):
        """Test that derivative orders above 9 parse and print in the comma form"""
        op = CompositeOp.from_label("phi^2:[0000|0,12,0,0]")
        self.assertEqual(op.blocks, ((0, 0, 0, 0), (0, 12, 0, 0)))
        self.assertEqual(op.derivative_order, 12)
        self.assertEqual(op.label, "phi^2:[0000|0,12,0,0]")
        self.assertEqual(CompositeOp.from_label(op.label), op)
        self.assertEqual(CompositeOp.from_label("phi^2:[0,0,0,0|1,0,0,0]").label, "phi^2:[0000|1000]",
                         "small orders print as digit strings")
        wide = CompositeOp(((10, 0, 0, 3), (0, 0, 0, 0)))
        self.assertEqual(CompositeOp.from_label(wide.label), wide)

    def test_bad_label(self):
        """Test that malformed labels raise ConfigurationError"""
        for label in ("phi^2:[0000]", "psi", "phi^x:[0000]", "phi^2:[0000|00000]", "phi^2:[0000|1,2,3]"):
            with self.assertRaises(ConfigurationError, msg=label):
                CompositeOp.from_label(label)

    def test_stabilizer(self):
        """Test the order of the block stabilizer"""
        self.assertEqual(CompositeOp.power(4).stabilizer_order, 24, "phi^4 has 4! equal blocks")
        self.assertEqual(CompositeOp.from_label("phi^2:[0000|1000]").stabilizer_order, 1)

    def test_enumerate_ops(self):
        """Test the operator basis up to dimension 3"""
        ops = enumerate_ops_up_to(3)
        self.assertEqual(len(ops), 6, "identity, phi^2 and four phi d_mu phi")
        self.assertTrue(ops[0].is_identity, "identity comes first")
        self.assertEqual(ops[1], CompositeOp.power(2))
        self.assertEqual([op.dimension for op in ops], sorted(op.dimension for op in ops))
        self.assertEqual(enumerate_ops_up_to(4, n_values=[4]), [CompositeOp.power(4)])

    def test_enumerate_negative(self):
        """Test that a negative dimension raises"""
        with self.assertRaises(ConfigurationError):
            enumerate_ops_up_to(-1)


class TestInsertionAndKeys(unittest.TestCase):
    def test_mixed_dimensions_rejected(self):
        """Test that operator combinations must share one dimension"""
        with self.assertRaises(ConfigurationError):
            Insertion(((CompositeOp.power(2), 1.0), (CompositeOp.power(4), 1.0)))

    def test_moved(self):
        """Test that moving keeps the terms and changes the position"""
        ins = Insertion.of(CompositeOp.power(2)).moved((1, 2, 3, 4))
        self.assertEqual(ins.position, (1.0, 2.0, 3.0, 4.0))
        self.assertEqual(ins.label, "phi^2:[0000|0000]")

    def test_cag_key_validation(self):
        """Test that odd leg counts and lone regularizations are rejected"""
        with self.assertRaises(ConfigurationError):
            CagKey(3, 0)
        with self.assertRaises(ConfigurationError):
            CagKey(2, 0, (Insertion.of(CompositeOp.power(2)),), RegTuple.two(0))

    def test_spacetime_distinct(self):
        """Test that coincident points raise CoincidentPointsError"""
        cfg = SpacetimeConfig([[0, 0, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0]])
        self.assertAlmostEqual(cfg.max_separation, 1.0)
        with self.assertRaises(CoincidentPointsError):
            cfg.require_distinct()


class TestCutoffsAndRegularization(unittest.TestCase):
    def test_cutoff_validation(self):
        """Test the admissibility checks of the cutoff pair"""
        with self.assertRaises(ConfigurationError):
            CutoffPair(0.1, 10.0, 0.0)
        with self.assertRaises(ConfigurationError):
            CutoffPair(5.0, 1.0, 1.0)
        c = CutoffPair(0.5, 100.0, 1.0)
        self.assertEqual(c.kappa, 1.0, "kappa is sup(Lambda, m)")
        self.assertTrue(c.is_admissible)
        self.assertEqual(c.with_lambda(2.0).kappa, 2.0)

    def test_reg_tuple(self):
        """Test construction and shifting of regularization tuples"""
        with self.assertRaises(ConfigurationError):
            RegTuple.build(3, {(0, 1): 2})
        none = RegTuple.none(3)
        self.assertEqual(len(none.table), 4, "three pairs and the full set")
        self.assertEqual(none.total, -1)
        reg = RegTuple.build(3, {(0, 1, 2): 2, (0, 1): 1}).shifted((0, 1), 3)
        self.assertEqual(reg.get((0, 1)), 4, "the pair itself is raised")
        self.assertEqual(reg.total, 5, "the full set contains the pair")
        self.assertTrue(reg.admits((2,)), "singletons are always admitted")
        self.assertFalse(reg.admits((1, 2)), "pairs outside the collection are not")

    def test_taylor_spec(self):
        """Test the displacement of a Taylor spec"""
        spec = TaylorSpec(1, [[1, 0, 0, 0]], [[0.5, 0, 0, 0]])
        np.testing.assert_allclose(spec.displacement, [[0.5, 0, 0, 0]])
        with self.assertRaises(ConfigurationError):
            TaylorSpec(-1, [[0, 0, 0, 0]], [[0, 0, 0, 0]])


class TestMomentumAndBounds(unittest.TestCase):
    def test_momentum_norm(self):
        """Test that the norm is the largest partial sum"""
        cfg = MomentumConfig([[1, 0, 0, 0], [-1, 0, 0, 0], [0, 2, 0, 0]])
        self.assertAlmostEqual(momentum_norm(cfg), math.sqrt(5.0), msg="|p_1 + p_3| is the largest subset sum")
        self.assertEqual(momentum_norm(MomentumConfig(np.zeros((0, 4)))), 0.0)

    def test_bound_spec(self):
        """Test the derived quantities of a bound spec"""
        spec = BoundSpec('boundCAG2', legs=4, dims=(2, 3), lam=0.5, mass=1.0)
        self.assertEqual(spec.n, 2)
        self.assertEqual(spec.Dprime, 5)
        self.assertEqual(spec.kappa, 1.0)
        self.assertEqual(spec.with_K(7.0).K, 7.0)
        self.assertEqual(spec.K, 1.0, "with_K should not modify the original")
        with self.assertRaises(ConfigurationError):
            BoundSpec('prop40', legs=3)


class TestRunConfig(unittest.TestCase):
    def test_defaults(self):
        """Test the default configuration"""
        cfg = RunConfig()
        self.assertEqual(len(cfg.ops), 3)
        self.assertEqual(cfg.target_ops[0], CompositeOp.identity())
        self.assertEqual(cfg.flow_check_delta, 1)

    def test_from_text(self):
        """Test parsing of the flat key-value format"""
        text = """
        # convergence run
        experiment = factorization
        mass = 2.0
        delta_max = 3
        lambda0_ladder = 30, 60
        operators = phi^2:[0000|0000], phi^2:[0000|0000], phi^4:[0000|0000|0000|0000]
        points = 0.1 0 0 0; 0 0.2 0 0 ; 0 0 0 0
        """
        cfg = RunConfig.from_text(text)
        self.assertEqual(cfg.experiment, "factorization")
        self.assertEqual(cfg.mass, 2.0)
        self.assertEqual(cfg.delta_max, 3)
        self.assertEqual(cfg.lambda0_ladder, (30.0, 60.0))
        self.assertEqual(cfg.ops[2], CompositeOp.power(4))
        self.assertEqual(cfg.points[1], (0.0, 0.2, 0.0, 0.0))

    def test_unknown_key(self):
        """Test that unknown keys are rejected"""
        with self.assertRaises(ConfigurationError):
            RunConfig.from_text("colour = blue")

    def test_bad_values(self):
        """Test that invalid values are rejected"""
        for text in ("mass = -1", "tolerance = 0", "threads = 0", "lambda0_ladder = 0.5",
                     "operators = phi^2:[0000]", "delta_max = three", "mass"):
            with self.assertRaises(ConfigurationError, msg=text):
                RunConfig.from_text(text)


class TestOpeTable(unittest.TestCase):
    def test_lookup_and_serialization(self):
        """Test lookups below and above the table dimension"""
        phi2 = CompositeOp.power(2)
        table = OpeTable([phi2, phi2], np.zeros((2, 4)), 2, {CompositeOp.identity(): 2.0, phi2: 4.0})
        self.assertEqual(table[phi2], 4.0)
        self.assertEqual(table[CompositeOp.from_label("phi^2:[0000|0000]")], 4.0)
        with self.assertRaises(KeyError):
            table[CompositeOp.power(4)]
        entries = table.to_dict()['entries']
        self.assertEqual([e['op_label'] for e in entries], ["1", "phi^2:[0000|0000]"], "sorted by dimension")


if __name__ == '__main__':
    unittest.main()
