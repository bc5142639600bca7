"""
Unit tests for propagators, Gaussian moments, loop quadrature and the Lambda grid.
"""
import math
import unittest

import numpy as np

from data.models import CoincidentPointsError, CutoffPair
from utils.multiindex_taylor import richardson_derivative
from utils.propagators import (
    LambdaGrid, free_propagator_derivative, free_propagator_position, gaussian_moment, loop_integrate,
    phased_loop_integrate, propagator, propagator_dot, propagator_dot_position, propagator_from_complex_square,
    propagator_from_square,
)


class TestMomentumPropagator(unittest.TestCase):
    def setUp(self):
        self.p = np.array([[0.3, 0.1, 0.0, 0.2], [1.0, 0.0, 0.0, 0.0]])

    def test_unregularized_limit(self):
        """Test that Lambda = 0, Lambda0 = inf gives 1/(p^2 + m^2)"""
        c = CutoffPair(0.0, math.inf, 1.5)
        expected = 1.0 / (np.sum(self.p ** 2, axis=1) + 1.5 ** 2)
        np.testing.assert_allclose(propagator(self.p, c), expected, rtol=1e-14)

    def test_equal_cutoffs_vanish(self):
        """Test that the propagator vanishes when Lambda = Lambda0"""
        np.testing.assert_allclose(propagator(self.p, CutoffPair(3.0, 3.0, 1.0)), 0.0, atol=1e-16)

    def test_lambda_derivative(self):
        """Test dC/dLambda against a finite difference in Lambda"""
        lam, h = 2.0, 1e-5
        upper = propagator(self.p, CutoffPair(lam + h, 50.0, 1.0))
        lower = propagator(self.p, CutoffPair(lam - h, 50.0, 1.0))
        np.testing.assert_allclose(propagator_dot(self.p, lam, 1.0), (upper - lower) / (2 * h), rtol=1e-7)

    def test_complex_continuation(self):
        """Test that the continued propagator agrees on real squares and is finite at the mass shell"""
        c = CutoffPair(0.7, 30.0, 1.0)
        s = np.array([0.0, 0.25, 1.3, 9.0])
        np.testing.assert_allclose(propagator_from_complex_square(s, c).real, propagator_from_square(s, c),
                                   rtol=1e-12)
        np.testing.assert_allclose(propagator_from_complex_square(s, c).imag, 0.0, atol=1e-16)
        self.assertAlmostEqual(complex(propagator_from_complex_square(np.array([-1.0]), c)[0]),
                               1.0 / 0.7 ** 2 - 1.0 / 30.0 ** 2, places=10)


class TestPositionPropagator(unittest.TestCase):
    def test_exact_matches_schwinger_integral(self):
        """Test the Bessel form against the proper-time integral with wide cutoffs"""
        x = np.array([0.6, 0.3, 0.0, 0.4])
        exact = free_propagator_position(x, 1.0)
        integral = free_propagator_position(x, 1.0, CutoffPair(0.0, 400.0, 1.0))
        self.assertAlmostEqual(integral / exact, 1.0, places=6)

    def test_coincident_points(self):
        """Test that the exact propagator refuses x = 0"""
        with self.assertRaises(CoincidentPointsError):
            free_propagator_position(np.zeros(4), 1.0)

    def test_first_derivative(self):
        """Test the Bessel recursion against finite differences"""
        x = np.array([0.7, 0.2, 0.0, 0.0])
        func = lambda pts: np.array([free_propagator_position(pt, 1.0) for pt in pts])
        for v in ((1, 0, 0, 0), (0, 1, 0, 0), (1, 1, 0, 0), (2, 0, 0, 0)):
            numeric = richardson_derivative(func, x, v).real
            exact = free_propagator_derivative(v, x, 1.0)
            self.assertAlmostEqual(exact / numeric, 1.0, places=5, msg=f"derivative {v}")


class TestGaussianMoments(unittest.TestCase):
    def test_zeroth_moment(self):
        """Test that beta = 0 gives the position-space Cdot"""
        d = np.array([0.2, -0.1, 0.3, 0.0])
        value = gaussian_moment((0, 0, 0, 0), 1.7, 1.0, d)
        self.assertAlmostEqual(complex(value).real, float(propagator_dot_position(d, 1.7, 1.0)), places=14)

    def test_first_moment(self):
        """Test that beta = e_0 gives -i d/dd_0 of Cdot"""
        d = np.array([0.2, -0.1, 0.3, 0.0])
        func = lambda pts: np.array([propagator_dot_position(pt, 1.7, 1.0) for pt in pts])
        expected = -1j * richardson_derivative(func, d, (1, 0, 0, 0))
        self.assertAlmostEqual(complex(gaussian_moment((1, 0, 0, 0), 1.7, 1.0, d)), expected, places=8)

    def test_loop_integral_of_one(self):
        """Test that the loop grid integrates Cdot exactly"""
        value, error = loop_integrate(lambda k: np.ones(k.shape[0]), 1.3, 1.0)
        self.assertAlmostEqual(complex(value).real, float(propagator_dot_position(np.zeros(4), 1.3, 1.0)), places=12)

    def test_loop_integral_of_plane_wave(self):
        """Test the loop grid against the closed-form Gaussian moment"""
        d = np.array([0.3, 0.0, 0.1, 0.0])
        value, _ = loop_integrate(lambda k: np.exp(1j * k @ d) * k[:, 0] ** 2, 1.3, 1.0)
        expected = gaussian_moment((2, 0, 0, 0), 1.3, 1.0, d)
        self.assertAlmostEqual(complex(value), complex(expected), places=7)

    def test_shifted_contour(self):
        """Test that the contour-shifted phase integral matches the Gaussian moments"""
        d = np.array([0.8, 0.0, 0.3, 0.0])
        for beta, f in (((0, 0, 0, 0), lambda k: np.ones(k.shape[0], dtype=complex)),
                        ((1, 0, 0, 0), lambda k: k[:, 0]),
                        ((0, 0, 2, 0), lambda k: k[:, 2] ** 2)):
            value, _ = phased_loop_integrate(f, d, 1.3, 1.0)
            expected = complex(gaussian_moment(beta, 1.3, 1.0, d))
            self.assertAlmostEqual(abs(complex(value) - expected) / abs(expected), 0.0, places=6, msg=str(beta))


class TestLambdaGrid(unittest.TestCase):
    def setUp(self):
        self.grid = LambdaGrid(20.0, 1.0)

    def test_total(self):
        """Test the integral of 2 Lambda over the grid"""
        total = self.grid.total(2.0 * self.grid.lam)
        self.assertAlmostEqual(total / (20.0 ** 2 - self.grid.lam_lo ** 2), 1.0, places=10)

    def test_cumulative(self):
        """Test the upper integrals of a constant at every node"""
        np.testing.assert_allclose(self.grid.cumulative(np.ones(self.grid.size)), 20.0 - self.grid.lam, rtol=1e-10)

    def test_tail_and_interpolation(self):
        """Test the tail integral and the node interpolant at an arbitrary Lambda"""
        self.assertAlmostEqual(float(self.grid.tail(np.ones(self.grid.size), 3.3)), 20.0 - 3.3, places=9)
        self.assertAlmostEqual(float(self.grid.interpolate(self.grid.lam ** 2, 3.3)), 3.3 ** 2, places=8)


if __name__ == '__main__':
    unittest.main()
