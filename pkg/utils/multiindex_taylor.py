"""
Multi-index calculus: Leibniz distributions, Taylor operators, integral remainders,
Richardson finite differences and truncated power series in momenta.
"""
import itertools
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from config.constants import FD_BASE_STEP, FD_RICHARDSON_LEVELS, TAU_MAX_SUBDIVISIONS, TAU_TOLERANCE
from data.models import (
    Block, CompositeOp, ConfigurationError, MultiIndex, OperatorTerms, QuadratureError, TaylorSpec,
    multi_indices_of_order,
)

logger = logging.getLogger(__name__)

# oracle(w, points) -> d^w f(points); points has shape (N, 4)
DerivativeOracle = Callable[[MultiIndex, np.ndarray], complex]


def _compositions(total: int, parts: int) -> List[Tuple[int, ...]]:
    return multi_indices_of_order(total, parts)


def leibniz_weights(w: MultiIndex, r: int) -> List[Tuple[Tuple[MultiIndex, ...], int]]:
    """
    Enumerate all splittings w = v_1 + ... + v_r with weights (v_1+...+v_r)!/(v_1!...v_r!).

    Args:
        w: multi-index to distribute
        r: number of factors

    Returns:
        List of (splitting, integer weight); the weights sum to r^|w|
    """
    if r < 1:
        raise ConfigurationError(f"leibniz_weights needs r >= 1, got {r}")
    per_entry = [_compositions(e, r) for e in w.entries]
    result = []
    for choice in itertools.product(*per_entry):
        weight = 1
        for e, parts in zip(w.entries, choice):
            weight *= math.factorial(e) // math.prod(math.factorial(p) for p in parts)
        split = tuple(MultiIndex(tuple(parts[k] for parts in choice)) for k in range(r))
        result.append((split, weight))
    return result


def operator_derivative(op: CompositeOp, v: Block) -> OperatorTerms:
    """
    Apply d^v to a monomial operator with the Leibniz rule.

    Returns:
        Terms (operator, weight) with equal monomials merged
    """
    if op.is_identity:
        return ((op, 1.0),) if sum(v) == 0 else ()
    merged: Dict[CompositeOp, float] = {}
    for split, weight in leibniz_weights(MultiIndex(tuple(v)), op.n):
        blocks = tuple(tuple(a + b for a, b in zip(blk, s.entries)) for blk, s in zip(op.blocks, split))
        target = CompositeOp(blocks)
        merged[target] = merged.get(target, 0.0) + weight
    return tuple(merged.items())


def directional_operator(terms: OperatorTerms, direction: Sequence[float], k: int) -> OperatorTerms:
    """(a . d)^k applied to an operator combination: sum_{|v|=k} k!/v! a^v d^v."""
    a = np.asarray(direction, dtype=float)
    merged: Dict[CompositeOp, complex] = {}
    for v in multi_indices_of_order(k, 4):
        coeff = math.factorial(k) / math.prod(math.factorial(e) for e in v) * float(np.prod(a ** np.asarray(v)))
        if coeff == 0.0:
            continue
        for op, c in terms:
            for target, weight in operator_derivative(op, v):
                merged[target] = merged.get(target, 0.0) + c * coeff * weight
    return tuple((op, c) for op, c in merged.items() if c != 0.0)


def taylor_apply(spec: TaylorSpec, oracle: DerivativeOracle) -> complex:
    """
    Evaluate T^j_{x->y} f = sum_{|w|=j} (x-y)^w/w! d^w f(y).

    Args:
        spec: degree j with source points x and target points y
        oracle: supplies d^w f at the target points

    Returns:
        The degree-j Taylor term
    """
    disp = spec.displacement.reshape(-1)
    total = 0.0 + 0.0j
    for flat in multi_indices_of_order(spec.degree, disp.size):
        w = MultiIndex(flat)
        mono = float(np.prod(disp ** np.asarray(flat)))
        if mono == 0.0:
            continue
        total += mono / w.factorial * oracle(w, spec.targets)
    return total


def taylor_polynomial(spec: TaylorSpec, oracle: DerivativeOracle) -> complex:
    """sum_{j <= degree} T^j f"""
    return sum(taylor_apply(TaylorSpec(j, spec.sources, spec.targets), oracle)
               for j in range(spec.degree + 1))


def integrate_unit_interval(func: Callable[[float], complex], tolerance: float = TAU_TOLERANCE,
                            label: str = "tau integral") -> complex:
    """
    Adaptive Gauss-Kronrod integral of a complex function over [0, 1].

    Raises:
        QuadratureError: if the subdivision budget is exhausted
    """
    def stacked(t):
        value = complex(func(t))
        return np.array([value.real, value.imag])

    result, error, info = integrate.quad_vec(stacked, 0.0, 1.0, epsabs=tolerance, epsrel=0.0,
                                             limit=TAU_MAX_SUBDIVISIONS, full_output=True)
    if info.status != 0 and error > tolerance:
        raise QuadratureError(f"{label} did not converge", complex(result[0], result[1]), float(error))
    return complex(result[0], result[1])


def taylor_remainder(spec: TaylorSpec, oracle: DerivativeOracle,
                     tolerance: float = TAU_TOLERANCE) -> complex:
    """
    (1 - sum_{j<=D} T^j) f through the integral form of the remainder, D = spec.degree.

    Uses sum_{|v|=D+1} (D+1)/v! (x-y)^v int_0^1 (1-tau)^D d^v f(y + tau(x-y)) dtau.
    """
    degree = spec.degree
    disp = spec.displacement
    flat_disp = disp.reshape(-1)
    terms = []
    for flat in multi_indices_of_order(degree + 1, flat_disp.size):
        mono = float(np.prod(flat_disp ** np.asarray(flat)))
        if mono != 0.0:
            v = MultiIndex(flat)
            terms.append((v, (degree + 1) * mono / v.factorial))
    if not terms:
        return 0.0 + 0.0j

    def integrand(tau: float) -> complex:
        points = spec.targets + tau * disp
        return (1.0 - tau) ** degree * sum(c * oracle(v, points) for v, c in terms)

    return integrate_unit_interval(integrand, tolerance, label=f"Taylor remainder of degree {degree}")


def ray_remainder(directional: Callable[[int, float], complex], degree: int,
                  tolerance: float = TAU_TOLERANCE) -> complex:
    """
    Remainder along a ray, g(1) - sum_{j<=D} g^(j)(0)/j!, as (1/D!) int (1-tau)^D g^(D+1)(tau).

    Args:
        directional: (k, tau) -> g^(k)(tau)
        degree: D
    """
    scale = 1.0 / math.factorial(degree)
    return integrate_unit_interval(
        lambda tau: scale * (1.0 - tau) ** degree * directional(degree + 1, tau), tolerance,
        label=f"ray remainder of degree {degree}")


def exp_remainder(z, order: int):
    """e^z - sum_{j<=order} z^j/j!, stable for small |z|; order < 0 returns e^z."""
    z = np.asarray(z, dtype=complex)
    if order < 0:
        return np.exp(z)
    partial = np.zeros_like(z)
    term = np.ones_like(z)
    for j in range(order + 1):
        if j:
            term = term * z / j
        partial = partial + term
    small = np.abs(z) < 4.0
    # tail series for small arguments avoids cancellation
    tail = np.zeros_like(z)
    term = np.ones_like(z)
    for j in range(1, order + 1):
        term = term * z / j
    for j in range(order + 1, order + 60):
        term = term * z / j
        tail = tail + term
    return np.where(small, tail, np.exp(z) - partial)


def central_difference(func: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                       w: Sequence[int], h: float) -> complex:
    """Central finite-difference estimate of d^w f(x0) with step h in every direction."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    axes = [(i, n) for i, n in enumerate(w) if n]
    if not axes:
        return complex(func(x0[None, :])[0])
    stencils = []
    for _, n in axes:
        stencils.append([((n / 2.0 - k) * h, (-1) ** k * math.comb(n, k)) for k in range(n + 1)])
    points, coeffs = [], []
    for combo in itertools.product(*stencils):
        x = x0.copy()
        c = 1.0
        for (axis, _), (offset, weight) in zip(axes, combo):
            x[axis] += offset
            c *= weight
        points.append(x)
        coeffs.append(c)
    values = np.asarray(func(np.array(points)))
    return complex(np.dot(coeffs, values) / h ** sum(w))


def richardson_derivative(func: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                          w: Sequence[int], h: float = FD_BASE_STEP,
                          levels: int = FD_RICHARDSON_LEVELS) -> complex:
    """
    Finite-difference derivative with Richardson extrapolation in h^2.

    Args:
        func: vectorized function of shape (M, dim) -> (M,)
        x0: expansion point
        w: derivative orders per coordinate
        h: base step
        levels: number of extrapolation levels
    """
    table = [central_difference(func, x0, w, h / 2 ** k) for k in range(levels + 1)]
    for level in range(1, levels + 1):
        factor = 4.0 ** level
        table = [(factor * table[k + 1] - table[k]) / (factor - 1.0) for k in range(len(table) - 1)]
    return table[0]


class TaylorJet:
    """
    Truncated multivariate power series sum_e c_e t^e of total degree <= degree.

    Used to take exact momentum derivatives at p = 0 of closed-form tree expressions.
    """

    def __init__(self, n_vars: int, degree: int, coeffs: Optional[Dict[Tuple[int, ...], complex]] = None):
        self.n_vars = n_vars
        self.degree = degree
        self.coeffs: Dict[Tuple[int, ...], complex] = {}
        for e, c in (coeffs or {}).items():
            if sum(e) <= degree and c != 0:
                self.coeffs[e] = self.coeffs.get(e, 0.0) + c

    @classmethod
    def constant(cls, value: complex, n_vars: int, degree: int) -> 'TaylorJet':
        return cls(n_vars, degree, {(0,) * n_vars: value})

    @classmethod
    def linear(cls, gradient: Sequence[complex], n_vars: int, degree: int,
               value: complex = 0.0) -> 'TaylorJet':
        coeffs = {(0,) * n_vars: value}
        for i, g in enumerate(gradient):
            e = [0] * n_vars
            e[i] = 1
            coeffs[tuple(e)] = g
        return cls(n_vars, degree, coeffs)

    def _like(self, coeffs) -> 'TaylorJet':
        return TaylorJet(self.n_vars, self.degree, coeffs)

    @property
    def constant_term(self) -> complex:
        return self.coeffs.get((0,) * self.n_vars, 0.0)

    def __add__(self, other) -> 'TaylorJet':
        if not isinstance(other, TaylorJet):
            other = TaylorJet.constant(other, self.n_vars, self.degree)
        coeffs = dict(self.coeffs)
        for e, c in other.coeffs.items():
            coeffs[e] = coeffs.get(e, 0.0) + c
        return self._like(coeffs)

    __radd__ = __add__

    def __neg__(self) -> 'TaylorJet':
        return self * -1.0

    def __sub__(self, other) -> 'TaylorJet':
        return self + (-other if isinstance(other, TaylorJet) else -other)

    def __mul__(self, other) -> 'TaylorJet':
        if not isinstance(other, TaylorJet):
            return self._like({e: c * other for e, c in self.coeffs.items()})
        coeffs: Dict[Tuple[int, ...], complex] = {}
        for e1, c1 in self.coeffs.items():
            d1 = sum(e1)
            for e2, c2 in other.coeffs.items():
                if d1 + sum(e2) > self.degree:
                    continue
                e = tuple(a + b for a, b in zip(e1, e2))
                coeffs[e] = coeffs.get(e, 0.0) + c1 * c2
        return self._like(coeffs)

    __rmul__ = __mul__

    def compose(self, series: Sequence[complex]) -> 'TaylorJet':
        """f(J) for f(s) = sum_k series[k] (s - s0)^k with s0 the constant term of J."""
        shifted = self - self.constant_term
        result = TaylorJet.constant(0.0, self.n_vars, self.degree)
        power = TaylorJet.constant(1.0, self.n_vars, self.degree)
        for k, a in enumerate(series):
            if k > self.degree:
                break
            if k:
                power = power * shifted
            result = result + power * a
        return result

    def exp(self) -> 'TaylorJet':
        c0 = self.constant_term
        series = [np.exp(c0) / math.factorial(k) for k in range(self.degree + 1)]
        return self.compose(series)

    def derivative(self, w: Sequence[int]) -> complex:
        """d^w at t = 0."""
        return self.coeffs.get(tuple(w), 0.0) * math.prod(math.factorial(e) for e in w)
