"""
Unit tests for the Gaussian-sector plane-wave backend.
"""
import math
import unittest

import numpy as np
from scipy import integrate

from config.constants import LAMBDA_GRID_FLOOR
from data.models import (
    CompositeOp, ConfigurationError, CutoffPair, Insertion, MultiIndex, RegTuple,
    UnsupportedConfigurationError,
)
from services.wave_series import WaveSeries

PHI2 = CompositeOp.power(2)
X = (0.3, 0.0, -0.1, 0.0)


class TestSingleInsertion(unittest.TestCase):
    def setUp(self):
        self.series = WaveSeries([Insertion.of(PHI2, X)], CutoffPair(0.0, 20.0, 1.0))
        self.cag = self.series.connected({0})

    def test_tree_two_point(self):
        """Test that L_2,0(phi^2) is the plane-wave phase"""
        p = np.array([[0.2, 0.1, 0.0, 0.0], [0.0, 0.3, 0.1, 0.0]])
        expected = np.exp(1j * p.sum(axis=0) @ np.asarray(X))
        self.assertAlmostEqual(complex(self.cag.value(p, 0.5, l=0)), complex(expected), places=13)

    def test_momentum_derivative(self):
        """Test d/dp_1,0 of the phase at p = 0"""
        w = MultiIndex((1, 0, 0, 0, 0, 0, 0, 0))
        self.assertAlmostEqual(complex(self.cag.derivative(w, 0.5, l=0)), 0.3j, places=14)

    def test_vacuum_loop(self):
        """Test the one-loop vacuum term against the Lambda integral of Cdot(0)"""
        lam = 1.0
        expected, _ = integrate.quad(lambda t: -t / (8 * math.pi ** 2) * math.exp(-1.0 / t ** 2),
                                     LAMBDA_GRID_FLOOR, lam, epsabs=0.0, epsrel=1e-13)
        value = complex(self.cag.value(np.zeros((0, 4)), lam, l=1))
        self.assertAlmostEqual(value.real / expected, 1.0, places=8)
        self.assertAlmostEqual(complex(self.cag.value(np.zeros((0, 4)), 0.0, l=1)), 0.0, places=14,
                               msg="subtracted at Lambda = 0")

    def test_amputated_is_connected(self):
        """Test that one insertion has G = L"""
        self.assertIs(self.series.amputated(), self.cag)
        with self.assertRaises(ConfigurationError):
            self.series.f_functional()


class TestTwoInsertions(unittest.TestCase):
    def setUp(self):
        self.insertions = [Insertion.of(PHI2, (0.5, 0.0, 0.0, 0.0)), Insertion.of(PHI2)]
        self.cutoffs = CutoffPair(0.0, 20.0, 1.0)

    def test_f_matches_connected(self):
        """Test that F from its own flow equals L_12"""
        series = WaveSeries(self.insertions, self.cutoffs, RegTuple.two(2))
        p = np.array([[0.2, 0.0, 0.1, 0.0], [-0.1, 0.3, 0.0, 0.0]])
        for lam in (0.0, 0.5, 2.0):
            f = complex(series.f_functional().value(p, lam, l=0))
            connected = complex(series.assembled_f().value(p, lam, l=0))
            self.assertAlmostEqual(f, connected, places=12, msg=f"Lambda={lam}")

    def test_amputated_decomposition(self):
        """Test G = F - prod L_i for two insertions"""
        series = WaveSeries(self.insertions, self.cutoffs, RegTuple.two(-1))
        p = np.array([[0.2, 0.0, 0.1, 0.0], [-0.1, 0.3, 0.0, 0.0], [0.0, 0.0, 0.2, 0.0], [0.1, 0.1, 0.0, 0.0]])
        g = complex(series.amputated().value(p, 0.5))
        f = complex(series.f_functional().value(p, 0.5))
        product = complex(series.product_of_singles().value(p, 0.5))
        self.assertAlmostEqual(g, f - product, places=12)
        self.assertGreater(abs(product), 0.0, "four legs split over the two phi^2 factors")

    def test_subtraction_at_zero(self):
        """Test that the D = 2 two-point CAG vanishes at p = 0, Lambda = 0"""
        series = WaveSeries(self.insertions, self.cutoffs, RegTuple.two(2))
        self.assertAlmostEqual(complex(series.connected({0, 1}).value(np.zeros((2, 4)), 0.0, l=0)), 0.0, places=14)

    def test_validation(self):
        """Test the insertion count, tuple arity and subset checks"""
        with self.assertRaises(UnsupportedConfigurationError):
            WaveSeries(self.insertions * 2, self.cutoffs)
        with self.assertRaises(ConfigurationError):
            WaveSeries(self.insertions, self.cutoffs, RegTuple.none(3))
        series = WaveSeries(self.insertions, self.cutoffs)
        with self.assertRaises(ConfigurationError):
            series.connected({0, 2})


if __name__ == '__main__':
    unittest.main()
