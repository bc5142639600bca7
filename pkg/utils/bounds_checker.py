"""
Right-hand sides of the CAG, AG and OPE remainder bounds, evaluated in log space.

Every bound is a product of powers, factorials and finite log sums, so each formula is
assembled as a sum of logarithms and exponentiated at the end. Leg counts follow the
convention of the bounds: a CAG with `legs` = 2n external legs.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import optimize, special

from config.constants import BOUND_FAMILIES, K_BISECTION_STEPS, K_SEARCH_BRACKET
from data.models import BoundSpec, ConfigurationError

logger = logging.getLogger(__name__)

NEG_INF = -math.inf


def log_factorial(x: float) -> float:
    return float(special.gammaln(x + 1.0))


def log_plus(x: float) -> float:
    """log_+(x) = log(sup(1, x))."""
    return math.log(max(1.0, x))


def d_exponent(N: int, n: int, l: int, w: int, Dprime: int) -> int:
    """d(N, n, l, w, D') = 2 D' (n + l + 2(N - 1)) + sup(D' + 1 - 2n - |w|, 0)."""
    return 2 * Dprime * (n + l + 2 * (N - 1)) + max(Dprime + 1 - 2 * n - w, 0)


def ell(n: int, l: int) -> int:
    return l if n >= 2 else l - 1


def _log(x: float) -> float:
    return math.log(x) if x > 0 else NEG_INF


def log_log_sum(top: int, L: float) -> float:
    """log sum_{lambda=0}^{top} L^lambda / (2^lambda lambda!); an empty sum gives -inf."""
    if top < 0:
        return NEG_INF
    if L <= 0:
        return 0.0
    lams = np.arange(top + 1)
    return float(special.logsumexp(lams * math.log(L) - lams * math.log(2.0) - special.gammaln(lams + 1)))


def log_mu_sum(top: int, ratio: float, sqrt_factorial: bool = True) -> float:
    """log sum_{mu=0}^{top} ratio^mu (/ sqrt(mu!) when requested)."""
    if top < 0:
        return NEG_INF
    if ratio <= 0:
        return 0.0
    mus = np.arange(top + 1)
    terms = mus * math.log(ratio)
    if sqrt_factorial:
        terms = terms - 0.5 * special.gammaln(mus + 1)
    return float(special.logsumexp(terms))


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(f"bound hypothesis violated: {message}")


def _distances(spec: BoundSpec, count: int) -> np.ndarray:
    _require(spec.points is not None and spec.points.shape[0] >= count,
             f"{spec.identifier} needs {count} insertion points")
    return spec.points[:count]


def _sep(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def _log_inverse_power(exponent: int, distance: float, name: str) -> float:
    """log of distance^{-exponent}; zero exponents allow coincident points."""
    if exponent == 0:
        return 0.0
    _require(distance > 0, f"{name} > 0")
    return -exponent * math.log(distance)


def _log_cutoff_ratio(spec: BoundSpec) -> float:
    """log sup(|p|/kappa, kappa/m)"""
    kappa = spec.kappa
    return math.log(max(spec.p_norm / kappa, kappa / spec.mass))


def _log_v_factorials(spec: BoundSpec) -> float:
    return 0.5 * sum(log_factorial(v) for v in spec.v_orders)


def _log_rhs_propout(s: BoundSpec) -> float:
    n, l, w = s.n, s.loops, s.w_order
    _require(2 * n + w >= 5, "2n + |w| >= 5")
    _require(n + l >= 2, "n + l >= 2")
    return (0.5 * log_factorial(w) + (4 - 2 * n - w) * math.log(s.lam)
            + (2 * n + 4 * l - 4) * (w + 1) * math.log(s.K) + log_factorial(n + l - 2)
            + log_log_sum(ell(n, l), _log_cutoff_ratio(s)))


def _log_rhs_prop40(s: BoundSpec) -> float:
    _require(s.legs == 4 and s.w_order == 0, "four legs without momentum derivatives")
    l = s.loops
    return (2 * l * math.log(s.K) - 2 * math.log(l + 1) - 4 * math.log(2.0) + log_factorial(1 + l)
            + log_log_sum(l, _log_cutoff_ratio(s)))


def _log_rhs_prop20(s: BoundSpec) -> float:
    _require(s.legs == 2 and s.w_order <= 2, "two legs with |w| <= 2")
    l, w = s.loops, s.w_order
    return ((2 - w) * math.log(max(s.p_norm, s.kappa)) + (2 * l - 1) * math.log(s.K)
            - 2 * math.log(l + 1) + log_factorial(l) + log_log_sum(l - 1, _log_cutoff_ratio(s)))


def _log_rhs_cag1(s: BoundSpec, below_mass: bool) -> float:
    _require(len(s.dims) == 1, "one insertion dimension")
    n, l, w, A = s.n, s.loops, s.w_order, s.dims[0]
    scale = s.mass if below_mass else s.lam
    if below_mass:
        _require(s.lam <= s.mass, "Lambda <= m")
    value = ((A - 2 * n - w) * math.log(scale) + (4 * n + 8 * l - 4) * w * math.log(s.K)
             + A * (n + 2 * l) ** 3 * math.log(s.K) + 0.5 * log_factorial(w) + _log_v_factorials(s))
    top = d_exponent(1, n, l, w, A)
    if below_mass:
        value += 0.5 * log_factorial(max(2 * n + w - A, 0))
        value += log_mu_sum(top, s.p_norm / s.mass, sqrt_factorial=False)
        value += log_log_sum(2 * l + n - 1, log_plus(s.p_norm / s.mass))
    else:
        value += log_mu_sum(top, s.p_norm / s.lam)
        value += log_log_sum(2 * l + n - 1, _log_cutoff_ratio(s))
    return value


def _log_rhs_cag0m(s: BoundSpec) -> float:
    n, l, w = s.n, s.loops, s.w_order
    _require(s.lam <= s.mass, "Lambda <= m")
    _require(2 * n + w >= 5, "2n + |w| >= 5")
    return ((4 - 2 * n - w) * math.log(s.mass) + (2 * n + 4 * l - 4) * (w + 1) * math.log(s.K)
            - log_factorial(n) + log_factorial(n + l - 1)
            + 0.5 * (log_factorial(w) + log_factorial(w + 2 * n - 4))
            + log_log_sum(l, log_plus(s.p_norm / s.mass)))


def _log_rhs_cag2(s: BoundSpec, below_mass: bool) -> float:
    _require(len(s.dims) == 2, "two insertion dimensions")
    n, l, w, D, Dp = s.n, s.loops, s.w_order, s.D, s.Dprime
    _require(D <= Dp, "D <= D' = [A1] + [A2]")
    x1, x2 = _distances(s, 2)
    gap = w + Dp - D
    value = ((4 * n + 8 * l - 3) * gap * math.log(s.K) + Dp * (n + 2 * l) ** 3 * math.log(s.K)
             + _log_v_factorials(s) + 0.5 * log_factorial(gap)
             + _log_inverse_power(Dp - D, _sep(x1, x2), "|x|"))
    top = d_exponent(2, n, l, w, Dp)
    if below_mass:
        _require(s.lam <= s.mass, "Lambda <= m")
        value += (D - 2 * n - w) * math.log(s.mass) + 0.5 * log_factorial(max(2 * n + w - D, 0))
        value += top * log_plus(s.p_norm / s.mass)
        value += log_log_sum(2 * l + n, log_plus(s.p_norm / s.mass))
    else:
        value += (D - 2 * n - w) * math.log(s.lam)
        value += log_mu_sum(top, s.p_norm / s.lam)
        value += log_log_sum(2 * l + n, _log_cutoff_ratio(s))
    return value


def _log_rhs_cag3(s: BoundSpec, below_mass: bool) -> float:
    _require(len(s.dims) == 3, "three insertion dimensions")
    n, l, w, D, D12, Dp = s.n, s.loops, s.w_order, s.D, s.D12, s.Dprime
    delta1 = s.dims[0] + s.dims[1] - D12
    delta2 = D12 + s.dims[2] - D
    _require(delta1 >= 0, "delta_1 = [A1] + [A2] - D_12 >= 0")
    _require(delta2 >= 0, "delta_2 = D_12 + [A3] - D_123 >= 0")
    _require(D <= Dp, "D_123 <= D'")
    x1, x2, x3 = _distances(s, 3)
    gap = w + Dp - D
    value = ((4 * n + 8 * l - 3) * gap * math.log(s.K) + Dp * (n + 2 * l) ** 3 * math.log(s.K)
             + _log_inverse_power(delta1, _sep(x1, x2), "|x1 - x2|")
             + _log_inverse_power(delta2, max(_sep(x1, x3), _sep(x2, x3)), "max(|x1 - x3|, |x2 - x3|)")
             + _log_v_factorials(s) + 0.5 * log_factorial(gap))
    top = d_exponent(3, n, l, w, Dp)
    if below_mass:
        _require(s.lam <= s.mass, "Lambda <= m")
        value += (D - 2 * n - w) * math.log(s.mass) + 0.5 * log_factorial(max(2 * n + w - D, 0))
        value += log_mu_sum(top, s.p_norm / s.mass, sqrt_factorial=False)
        value += log_log_sum(2 * l + n + 1, log_plus(s.p_norm / s.mass))
    else:
        value += (D - 2 * n - w) * math.log(s.lam)
        value += log_mu_sum(top, s.p_norm / s.lam)
        value += log_log_sum(2 * l + n + 1, _log_cutoff_ratio(s))
    return value


def _three_point_geometry(s: BoundSpec):
    x1, x2, x3 = _distances(s, 3)
    seps = [_sep(x1, x2), _sep(x2, x3), _sep(x1, x3)]
    _require(min(seps) > 0, "distinct insertion points")
    return x1, x2, x3, max(seps), min(seps)


def _log_rhs_gd(s: BoundSpec) -> float:
    _require(len(s.dims) == 3, "three insertion dimensions")
    _require(s.delta >= 0, "Delta >= 0")
    _require(s.lam <= s.mass, "Lambda <= m")
    n, l, Dp, delta = s.n, s.loops, s.Dprime, s.delta
    _, _, _, big, small = _three_point_geometry(s)
    D = Dp + delta
    return ((-2 * n - 1) * math.log(s.mass)
            + (Dp + 1 + delta) * math.log(s.K * s.mass * big) - (Dp + 1) * math.log(small)
            + d_exponent(3, n, l, 0, D + Dp) * log_plus(s.p_norm / s.mass)
            + sum(log_factorial(a) for a in s.dims) - 0.5 * log_factorial(delta)
            + log_log_sum(2 * l + n + 1, log_plus(s.p_norm / s.mass)))


def _log_rhs_ope3conv(s: BoundSpec) -> float:
    """Here `legs` counts the smeared spectator fields."""
    _require(len(s.dims) == 3, "three insertion dimensions")
    _require(s.delta >= 0, "Delta >= 0")
    n, l, Dp, delta = s.legs, s.loops, s.Dprime, s.delta
    _, _, _, big, small = _three_point_geometry(s)
    lp = log_plus(s.p_norm / s.mass)
    return ((n - 1) * math.log(s.mass) + sum(log_factorial(a) for a in s.dims) + n * _log(s.f_sup)
            + ((4 * Dp + 2 * delta) * (n + l + 4.5) + 3 * n) * lp
            + log_log_sum(2 * l + n // 2 + 1, lp)
            - 0.5 * log_factorial(delta)
            + (Dp + 1 + delta) * math.log(s.K * s.mass * big) - (Dp + 1) * math.log(small))


def _log_rhs_partial(s: BoundSpec) -> float:
    _require(len(s.dims) == 3, "three insertion dimensions")
    _require(s.delta >= 0, "Delta = D - [A1] - [A2] >= 0")
    _require(s.lam <= s.mass, "Lambda <= m")
    x1, x2, x3, _, _ = _three_point_geometry(s)
    r12, r23, r13 = _sep(x1, x2), _sep(x2, x3), _sep(x1, x3)
    _require(r12 <= r23, "|x1 - x2| <= |x2 - x3|")
    n, l, w, Dp, delta, m = s.n, s.loops, s.w_order, s.Dprime, s.delta, s.mass
    log_growth = (2 * n + 2 * l + 5) * math.log(max(s.p_norm / m, 1.0))
    x_norm = float(np.max(np.linalg.norm(s.points[:3], axis=1)))
    denominator = min((delta - 1) * _log(r23) + _log(min(r23, r13)),
                      0.5 * log_factorial(delta) - delta * math.log(m))
    return ((-2 * n - w - 1) * math.log(m) + w * math.log(s.K) + log_factorial(w)
            + sum(log_factorial(a) for a in s.dims) + log_log_sum(2 * l + n + 1, log_plus(s.p_norm / m))
            + w * log_plus(m * x_norm)
            + (Dp + 1) * (math.log(s.K) + log_growth - math.log(min(r23, r13, 1.0 / m)))
            + delta * (math.log(s.K) + log_growth + _log(r12)) - denominator)


_FORMULAS: Dict[str, Callable[[BoundSpec], float]] = {
    'propout': _log_rhs_propout,
    'prop40': _log_rhs_prop40,
    'prop20': _log_rhs_prop20,
    'boundCAG1': lambda s: _log_rhs_cag1(s, below_mass=False),
    'boundCAG0m': _log_rhs_cag0m,
    'boundCAG1m': lambda s: _log_rhs_cag1(s, below_mass=True),
    'boundCAG2': lambda s: _log_rhs_cag2(s, below_mass=False),
    'CAG2cor': lambda s: _log_rhs_cag2(s, below_mass=True),
    'boundCAG3': lambda s: _log_rhs_cag3(s, below_mass=False),
    'corCAG3': lambda s: _log_rhs_cag3(s, below_mass=True),
    'GDbound': _log_rhs_gd,
    'ope3conv': _log_rhs_ope3conv,
    'partOPEbound': _log_rhs_partial,
}


def log_bound_rhs(spec: BoundSpec) -> float:
    if spec.identifier not in _FORMULAS:
        raise ConfigurationError(f"unknown bound {spec.identifier}, expected one of {sorted(BOUND_FAMILIES)}")
    if spec.K <= 0:
        raise ConfigurationError(f"K must be positive, got {spec.K}")
    return _FORMULAS[spec.identifier](spec)


def bound_rhs(spec: BoundSpec) -> float:
    """
    Numeric right-hand side of the bound named by `spec.identifier`.

    Raises:
        ConfigurationError: the parameters violate the hypotheses of the bound
    """
    value = log_bound_rhs(spec)
    return 0.0 if value == NEG_INF else float(np.exp(value))


@dataclass
class BoundReport:
    spec: BoundSpec
    lhs: float
    rhs: float
    holds: bool
    ratio: float
    fitted_K: float
    converged: bool = True

    def to_dict(self) -> Dict:
        return {**self.spec.to_dict(), 'lhs': self.lhs, 'rhs': self.rhs, 'holds': self.holds,
                'ratio': self.ratio, 'fitted_K': self.fitted_K, 'converged': self.converged}


def fit_minimal_K(spec: BoundSpec, lhs: float, bracket=K_SEARCH_BRACKET) -> Tuple[float, bool]:
    """Smallest K in the bracket with RHS(K) >= lhs; (upper end, False) when none is found."""
    lo, hi = bracket
    if lhs <= 0:
        return lo, True
    target = math.log(lhs)

    def excess(log_k: float) -> float:
        return log_bound_rhs(spec.with_K(math.exp(log_k))) - target

    if excess(math.log(lo)) >= 0:
        return lo, True
    if excess(math.log(hi)) < 0:
        logger.warning(f"{spec.identifier}: no K up to {hi:g} covers lhs={lhs:.3e}")
        return hi, False
    root = optimize.brentq(excess, math.log(lo), math.log(hi), maxiter=K_BISECTION_STEPS, xtol=1e-12)
    return math.exp(root), True


def assert_bound(spec: BoundSpec, lhs: float) -> BoundReport:
    """Compare |lhs| with the RHS at spec.K and fit the smallest admissible K."""
    lhs = abs(complex(lhs))
    rhs = bound_rhs(spec)
    holds = lhs <= rhs
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    fitted, converged = fit_minimal_K(spec, lhs)
    logger.debug(f"{spec.identifier}: lhs={lhs:.4e} rhs={rhs:.4e} ratio={ratio:.3g} K_min={fitted:.4g}")
    return BoundReport(spec, lhs, rhs, holds, ratio, fitted, converged)


# ---- constant-selection conditions of the two-insertion induction ------------------------

def _amult_exponent(Dprime: int, D: int, n: int, l: int, w: int) -> int:
    return -3 * (w + Dprime - D) - 2 * Dprime * (n + 2 * l) * (n + 2 * l - 1) - Dprime


def amult(Dprime: int, D: int, n: int, l: int, w: int, K: float) -> float:
    """The damping factor K^{-3(|w|+D'-D)} K^{-2D'(n+2l)(n+2l-1)-D'}."""
    return math.exp(_amult_exponent(Dprime, D, n, l, w) * math.log(K))


def log_kcond1_lhs(n: int, l: int, w: int, D: int, Dprime: int, log_K: float) -> float:
    d = d_exponent(2, n, l, w, Dprime)
    exponent = -Dprime * (n + 2 * l) * (n + 2 * l - 1) - (w + Dprime - D)
    return math.log(10 * (n + 1) * (2 * n + 1)) + d * math.log(2.0) + exponent * log_K


def kcond1_lhs(n: int, l: int, w: int, D: int, Dprime: int, K: float) -> float:
    return math.exp(log_kcond1_lhs(n, l, w, D, Dprime, math.log(K)))


def log_aappl_lhs(n: int, l: int, w: int, D: int, Dprime: int, log_K: float) -> float:
    """log of the sum over 1 <= j <= D + 1 - 2n - |w|; -inf for an empty sum."""
    if n == 0:
        return NEG_INF
    d = d_exponent(2, n, l, w, Dprime)
    terms = [j * math.log(8 * n) + math.log(j) + (d / 2) * math.log(2.0)
             + ((j + w + Dprime - D) / 2) * math.log(2.0)
             + ((4 * n + 8 * l - 3) * j + _amult_exponent(Dprime, D, n, l, w + j)) * log_K
             for j in range(1, D + 2 - 2 * n - w)]
    return float(special.logsumexp(terms)) if terms else NEG_INF


def _minimal_K(log_excess: Callable[[float], float], bracket=K_SEARCH_BRACKET,
               samples: int = 400) -> Optional[float]:
    """
    Smallest K from which log_excess(log K) <= 0 holds up to the bracket end.

    The last sign change on a log grid is refined with Brent's method; None when the
    condition fails at the upper end.
    """
    grid = np.linspace(math.log(bracket[0]), math.log(bracket[1]), samples)
    values = [log_excess(t) for t in grid]
    if values[-1] > 0:
        return None
    first = len(grid) - 1
    while first > 0 and values[first - 1] <= 0:
        first -= 1
    if first == 0:
        return float(bracket[0])
    root = optimize.brentq(log_excess, grid[first - 1], grid[first], maxiter=K_BISECTION_STEPS, xtol=1e-12)
    return math.exp(root)


def k_condition_audit(n: int, l: int, w: int, D: int, Dprime: int) -> Dict:
    """
    Minimal K satisfying each K-selection inequality of the two-insertion induction.

    The first-term condition only applies for l >= 1 (the loop term vanishes otherwise).
    """
    if l >= 1:
        kcond = _minimal_K(lambda t: log_kcond1_lhs(n, l, w, D, Dprime, t) - math.log(0.125))
    else:
        kcond = float(K_SEARCH_BRACKET[0])

    aappl = _minimal_K(lambda t: max(log_aappl_lhs(n, l, w, D, Dprime, t), -1.0))
    feasible = kcond is not None and aappl is not None
    report = {
        'n': n, 'l': l, 'w': w, 'D': D, 'Dprime': Dprime,
        'kcond1_min_K': kcond, 'aappl_min_K': aappl,
        'min_K': max(kcond, aappl) if feasible else None,
        'feasible': feasible,
    }
    logger.debug(f"K audit {report}")
    return report


def k_condition_grid(n_max: int = 3, l_max: int = 2, w_max: int = 4, Dprime: int = 4,
                     D_values: Optional[Iterable[int]] = None) -> pd.DataFrame:
    """k_condition_audit over n <= n_max, l <= l_max, |w| <= w_max and D <= D'."""
    D_values = list(D_values) if D_values is not None else list(range(-1, Dprime + 1))
    rows = [k_condition_audit(n, l, w, D, Dprime)
            for n, l, w, D in itertools.product(range(1, n_max + 1), range(l_max + 1),
                                                range(w_max + 1), D_values)]
    return pd.DataFrame(rows)


def gd_summability(spec: BoundSpec, delta_max: int = 60) -> pd.DataFrame:
    """Partial sums over Delta of the GDbound right-hand side with their increments."""
    rows = []
    partial = 0.0
    for delta in range(delta_max + 1):
        term = bound_rhs(BoundSpec(**{**spec.__dict__, 'identifier': 'GDbound', 'delta': delta}))
        partial += term
        rows.append({'delta': delta, 'term': term, 'partial_sum': partial})
    return pd.DataFrame(rows)
