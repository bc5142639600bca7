"""
OPE coefficients and remainders from amputated Green functions with composite operator insertions.

Coefficients are read off from momentum derivatives at p = 0 of the regularized amputated
functional G_D with D = [C] - 1, after subtracting the Taylor terms of the displacement of the
inserted operators towards the last insertion point. Remainders are evaluated in the three
equivalent ways (Taylor subtraction, ray integral, explicit truncated expansion).
"""
import itertools
import logging
import math
from functools import lru_cache
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import hermite

from config.constants import (
    DEFAULT_COUPLING, DEFAULT_L_MAX, DEFAULT_LAMBDA0, DEFAULT_MASS, LAMBDA0_LADDER, SPECTATOR_HERMITE_NODES,
    SPECTATOR_WIDTH,
)
from data.models import (
    CagKey, CompositeOp, ConfigurationError, CutoffPair, Insertion, MultiIndex, OpeTable, RegTuple,
    SpacetimeConfig, enumerate_ops_up_to, multi_indices_of_order,
)
from services.flow_engine import extrapolate_lambda0, get_engine
from services.wave_series import SeriesCag, cached_wave_series
from utils.multiindex_taylor import directional_operator, ray_remainder, richardson_derivative
from utils.propagators import propagator
from utils.wick_oracle import amputated_from_moment, free_ope_coefficient

logger = logging.getLogger(__name__)

OperatorLike = Union[CompositeOp, Insertion]
Oracle = Callable[[MultiIndex], complex]
VARIANTS = ('G', 'F', 'G_D', 'F_D')
ORIGIN = np.zeros(4)


def physical_sign(n_insertions: int) -> int:
    """(-1)^{N+1}: relates the moment-unit functionals to physical amputated correlators."""
    return (-1) ** (n_insertions + 1)


def as_insertions(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]]) -> Tuple[Insertion, ...]:
    if len(ops) != len(positions):
        raise ConfigurationError(f"{len(ops)} operators but {len(positions)} positions")
    return tuple(op.moved(x) if isinstance(op, Insertion) else Insertion.of(op, x)
                 for op, x in zip(ops, positions))


def _positions(insertions: Sequence[Insertion]) -> List[np.ndarray]:
    return [np.asarray(ins.position, dtype=float) for ins in insertions]


def _translated(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]]) -> Tuple[Insertion, ...]:
    """Insertions shifted so that the last point sits at the origin; points must be distinct."""
    insertions = as_insertions(ops, positions)
    points = np.asarray(_positions(insertions))
    SpacetimeConfig(points).require_distinct()
    anchor = points[-1]
    return tuple(ins.moved(x - anchor) for ins, x in zip(insertions, points))


class AgFunction:
    """
    One of G, F, G_D, F_D for a fixed set of insertions, evaluated in moment units.

    G and F are unregularized (D = -1). The regularized variants carry the single
    parameter D on the full insertion set. At vanishing coupling the plane-wave backend
    supplies every loop order exactly; otherwise the flow engine integrates F_D and the
    single-insertion CAG's, and G_D = F_D - (-1)^N Sym prod_i L_i.

    Args:
        coupling: g; the Gaussian sector when 0
        loops: loop order used when none is passed per call (all orders up to l_max when None)
    """

    def __init__(self, ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]],
                 variant: str = 'G', D: int = -1, lam0: float = DEFAULT_LAMBDA0,
                 mass: float = DEFAULT_MASS, coupling: float = 0.0, loops: Optional[int] = None):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown functional {variant}, expected one of {VARIANTS}")
        self.insertions = as_insertions(ops, positions)
        self.n_insertions = len(self.insertions)
        self.variant = variant
        self.D = D if variant.endswith('_D') else -1
        self.coupling = float(coupling)
        self.loops = loops
        if self.n_insertions == 1 and variant.startswith('F'):
            raise ConfigurationError("the F functional needs at least two insertions")
        self.reg = RegTuple.build(self.n_insertions, {tuple(range(self.n_insertions)): self.D}) \
            if self.n_insertions >= 2 else None
        self.backend = cached_wave_series(self.insertions, self.reg, float(lam0), float(mass))
        self.engine = get_engine(float(lam0), float(mass), self.coupling) if self.coupling != 0.0 else None

    @property
    def series(self) -> SeriesCag:
        if self.variant.startswith('G'):
            return self.backend.amputated()
        return self.backend.f_functional()

    def _orders(self, l: Optional[int]) -> List[int]:
        l = self.loops if l is None else l
        return list(range(DEFAULT_L_MAX + 1)) if l is None else [l]

    def moment(self, momenta: np.ndarray, lam: float = 0.0, l: Optional[int] = None) -> complex:
        if self.engine is None:
            return self.series.value(momenta, lam, self.loops if l is None else l)
        momenta = np.asarray(momenta, dtype=float).reshape(-1, 4) if np.size(momenta) else np.zeros((0, 4))
        return sum((self._engine_moment(momenta, lam, order) for order in self._orders(l)), 0.0 + 0.0j)

    def _engine_moment(self, momenta: np.ndarray, lam: float, l: int) -> complex:
        engine = self.engine
        n = momenta.shape[0]
        if self.n_insertions == 1:
            key = CagKey(n, l, self.insertions, None, engine.cutoffs(lam))
            return engine.evaluate(key, momenta)[0]
        value = engine.f_value(self.insertions, self.reg, momenta, lam, l) if n % 2 == 0 else 0.0 + 0.0j
        if self.variant.startswith('G'):
            value -= physical_sign(self.n_insertions + 1) * self._product(momenta, lam, l)
        return complex(value)

    def _product(self, momenta: np.ndarray, lam: float, l: int) -> complex:
        """Sym prod_i L_i at loop order l: the mean over assignments of the legs to the insertions."""
        engine = self.engine
        n, count = momenta.shape[0], len(self.insertions)
        cache: Dict[Tuple, complex] = {}

        def factor(i: int, legs: Tuple[int, ...], order: int) -> complex:
            if (i, legs, order) not in cache:
                key = CagKey(len(legs), order, (self.insertions[i],), None, engine.cutoffs(lam))
                cache[(i, legs, order)] = engine.evaluate(key, momenta[list(legs)])[0]
            return cache[(i, legs, order)]

        total = 0.0 + 0.0j
        for assignment in itertools.product(range(count), repeat=n):
            groups = [tuple(j for j in range(n) if assignment[j] == i) for i in range(count)]
            if any(len(g) % 2 for g in groups):
                continue
            weight = math.prod(math.factorial(len(g)) for g in groups) / math.factorial(n)
            for orders in multi_indices_of_order(l, count):
                if max(orders) > DEFAULT_L_MAX:
                    continue
                term = weight
                for i, (legs, order) in enumerate(zip(groups, orders)):
                    term *= factor(i, legs, order)
                    if term == 0:
                        break
                total += term
        return total

    def derivative(self, w: MultiIndex, lam: float = 0.0, l: Optional[int] = None) -> complex:
        if self.engine is None:
            return self.series.derivative(w, lam, self.loops if l is None else l)

        def func(points: np.ndarray) -> np.ndarray:
            return np.array([self.moment(pt.reshape(-1, 4), lam, l) for pt in points])

        return complex(richardson_derivative(func, np.zeros(len(w.entries)), w.entries))

    def amputated(self, momenta: np.ndarray, lam: float = 0.0, l: Optional[int] = None) -> complex:
        """Physical amputated value (-1)^{N+1} n! times the moment."""
        momenta = np.asarray(momenta, dtype=float).reshape(-1, 4)
        return amputated_from_moment(self.moment(momenta, lam, l), momenta.shape[0], self.n_insertions)


def dc_extract(target: CompositeOp, functional: Union[Oracle, AgFunction]) -> complex:
    """
    D^C of a functional: its d^{w_C} derivative at p = 0, normalized so that the
    free CAG of O_C itself extracts to 1 (and the identity extracts the n = 0 value).
    """
    w = target.multi_index
    oracle = functional.derivative if isinstance(functional, AgFunction) else functional
    value = oracle(w)
    norm = math.factorial(target.n) / (1j ** w.order * w.factorial * target.stabilizer_order)
    return complex(value * norm)


# ---- Taylor terms of displaced insertions -----------------------------------

def _shifted(insertion: Insertion, direction: np.ndarray, order: int,
             target: np.ndarray) -> Optional[Insertion]:
    """(a . d)^k / k! applied to the insertion, placed at `target`."""
    terms = directional_operator(insertion.terms, direction, order)
    if not terms:
        return None
    scale = 1.0 / math.factorial(order)
    return Insertion(tuple((op, c * scale) for op, c in terms), target)


def taylor_terms(insertions: Sequence[Insertion], moved: Sequence[int], targets: Sequence[np.ndarray],
                 degree: int) -> Iterable[Tuple[Insertion, ...]]:
    """Insertion sets whose sum is the degree-j Taylor term of moving the insertions `moved` to `targets`."""
    if degree < 0:
        return
    for parts in multi_indices_of_order(degree, len(moved)):
        out = list(insertions)
        for k, i, target in zip(parts, moved, targets):
            a = np.asarray(insertions[i].position) - np.asarray(target)
            shifted = _shifted(insertions[i], np.asarray(a, dtype=float), k, np.asarray(target, dtype=float))
            if shifted is None:
                break
            out[i] = shifted
        else:
            yield tuple(out)


def _subtracted(evaluate: Callable[[Tuple[Insertion, ...]], complex], insertions: Tuple[Insertion, ...],
                moved: Sequence[int], targets: Sequence[np.ndarray], max_degree: int) -> complex:
    """(1 - sum_{j <= max_degree} T^j) applied to `evaluate`."""
    value = evaluate(insertions)
    for j in range(max_degree + 1):
        for shifted in taylor_terms(insertions, moved, targets, j):
            value -= evaluate(shifted)
    return value


# ---- OPE coefficients -------------------------------------------------------

def _ope_dc(insertions: Tuple[Insertion, ...], target: CompositeOp, lam0: float, mass: float,
            coupling: float = 0.0, loops: Optional[int] = None) -> complex:
    """Unsigned coefficient in moment units; the last insertion must sit at the origin."""
    if target.n % 2:
        return 0.0 + 0.0j
    n = len(insertions)
    delta = target.dimension - sum(ins.dimension for ins in insertions)
    D = target.dimension - 1

    def evaluate(ins: Tuple[Insertion, ...]) -> complex:
        return dc_extract(target, AgFunction(ins, _positions(ins), 'G_D', D, lam0, mass, coupling, loops))

    moved = list(range(n - 1))
    return _subtracted(evaluate, insertions, moved, [ORIGIN] * len(moved), delta - 1)


def ope_coeff_with_spread(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]],
                          target: CompositeOp, lam0: Optional[float] = None, mass: float = DEFAULT_MASS,
                          ladder: Sequence[float] = LAMBDA0_LADDER, coupling: float = 0.0,
                          loops: Optional[int] = None) -> Tuple[complex, float]:
    """Physical OPE coefficient and the spread of its Lambda0 extrapolation (0 at fixed lam0)."""
    insertions = _translated(ops, positions)
    sign = physical_sign(len(insertions))
    if lam0 is not None:
        return sign * _ope_dc(insertions, target, lam0, mass, coupling, loops), 0.0
    value, spread = extrapolate_lambda0(lambda l0: _ope_dc(insertions, target, l0, mass, coupling, loops),
                                        [rung * mass for rung in ladder])
    return sign * value, spread


def ope_coeff(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]], target: CompositeOp,
              lam0: Optional[float] = None, mass: float = DEFAULT_MASS,
              ladder: Sequence[float] = LAMBDA0_LADDER, coupling: float = 0.0,
              loops: Optional[int] = None) -> complex:
    """
    OPE coefficient C^C_{A_1...A_N}(x_1, ..., x_N), in the physical sign convention.

    Args:
        ops: inserted operators (or operator combinations)
        positions: distinct insertion points
        target: the operator O_C, placed at x_N
        lam0: UV cutoff; extrapolated to infinity over `ladder` when omitted
        mass: m
        ladder: Lambda0 values in mass units for the extrapolation
        coupling: g; with g != 0 the flow engine supplies G_D (tree level for two or more insertions)
        loops: loop order of the coefficient (all available orders when None)

    Returns:
        Complex coefficient (real up to rounding for real operator data)
    """
    return ope_coeff_with_spread(ops, positions, target, lam0, mass, ladder, coupling, loops)[0]


def build_ope_table(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]], D: int,
                    mass: float = DEFAULT_MASS, lam0: Optional[float] = None,
                    method: str = 'flow', n_values: Optional[Sequence[int]] = None,
                    coupling: float = 0.0, loops: Optional[int] = None) -> OpeTable:
    """All coefficients with [C] <= D, from the flow or (free theory) from Wick contractions."""
    if method not in ('flow', 'wick'):
        raise ConfigurationError(f"unknown coefficient method {method}")
    if method == 'wick' and coupling != 0.0:
        raise ConfigurationError("Wick coefficients exist for the free theory only")
    insertions = _translated(ops, positions)
    points = np.asarray(positions, dtype=float)
    operators = [ins.terms[0][0] for ins in insertions]
    entries: Dict[CompositeOp, complex] = {}
    spreads: Dict[CompositeOp, float] = {}
    for target in enumerate_ops_up_to(D, n_values):
        if method == 'wick':
            entries[target] = free_ope_coefficient(operators, points, target, mass)
            continue
        value, spread = ope_coeff_with_spread(insertions, points, target, lam0, mass, coupling=coupling,
                                              loops=loops)
        entries[target] = value
        spreads[target] = spread
    logger.info(f"OPE table for {[ins.label for ins in insertions]} up to [C] = {D}: {len(entries)} entries")
    diagnostics = {'max_spread': max(spreads.values(), default=0.0)}
    return OpeTable(operators, points, D, entries, diagnostics)


# ---- remainders -------------------------------------------------------------

def remainder_kernel(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]], D: int,
                     lam0: float = DEFAULT_LAMBDA0, mass: float = DEFAULT_MASS, l: Optional[int] = None,
                     lam: float = 0.0) -> Callable[[np.ndarray], complex]:
    """The Taylor-subtracted remainder as a function of the momenta, its functionals built once."""
    insertions = as_insertions(ops, positions)
    moved = list(range(len(insertions) - 1))
    x_n = np.asarray(insertions[-1].position, dtype=float)
    delta = D - sum(ins.dimension for ins in insertions)
    terms = [(1.0, AgFunction(insertions, _positions(insertions), 'G_D', D, lam0, mass))]
    for j in range(delta + 1):
        for shifted in taylor_terms(insertions, moved, [x_n] * len(moved), j):
            terms.append((-1.0, AgFunction(shifted, _positions(shifted), 'G_D', D, lam0, mass)))

    def kernel(momenta: np.ndarray) -> complex:
        momenta = np.asarray(momenta, dtype=float).reshape(-1, 4)
        return sum((sign * f.moment(momenta, lam, l) for sign, f in terms), 0.0 + 0.0j)

    return kernel


def remainder_functional(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]], D: int,
                         momenta: np.ndarray, lam0: float = DEFAULT_LAMBDA0, mass: float = DEFAULT_MASS,
                         l: Optional[int] = None, lam: float = 0.0, method: str = 'taylor') -> complex:
    """
    Remainder of the OPE truncated at dimension D, in moment units.

    'taylor' subtracts the Taylor polynomial of G_D in the displacements towards x_N,
    'integral' uses the integral form of that Taylor remainder along the ray, and
    'direct' subtracts the truncated expansion sum_C C^C(x) L(O_C(x_N)) from G.
    """
    insertions = as_insertions(ops, positions)
    n = len(insertions)
    momenta = np.asarray(momenta, dtype=float).reshape(-1, 4)
    delta = D - sum(ins.dimension for ins in insertions)
    x_n = np.asarray(insertions[-1].position, dtype=float)
    moved = list(range(n - 1))

    def regularized(ins: Tuple[Insertion, ...], variant: str = 'G_D') -> complex:
        return AgFunction(ins, _positions(ins), variant, D, lam0, mass).moment(momenta, lam, l)

    if method == 'taylor':
        return remainder_kernel(insertions, _positions(insertions), D, lam0, mass, l, lam)(momenta)
    if method == 'integral':
        if delta < 0:
            return regularized(insertions)
        directions = [np.asarray(insertions[i].position) - x_n for i in moved]

        def directional(k: int, tau: float) -> complex:
            total = 0.0 + 0.0j
            for parts in multi_indices_of_order(k, len(moved)):
                weight = math.factorial(k) / math.prod(math.factorial(e) for e in parts)
                out = list(insertions)
                for i, e in zip(moved, parts):
                    terms = directional_operator(insertions[i].terms, directions[i], e)
                    if not terms:
                        break
                    out[i] = Insertion(terms, x_n + tau * directions[i])
                else:
                    total += weight * regularized(tuple(out))
            return total

        return ray_remainder(directional, delta)
    if method == 'direct':
        value = AgFunction(insertions, _positions(insertions), 'G', -1, lam0, mass).moment(momenta, lam, l)
        shifted = tuple(ins.moved(np.asarray(ins.position) - x_n) for ins in insertions)
        # no operator has negative dimension: below 0 the truncated expansion is empty
        for target in (enumerate_ops_up_to(D) if D >= 0 else []):
            if target.n < momenta.shape[0]:
                continue
            coefficient = _ope_dc(shifted, target, lam0, mass)
            if coefficient == 0:
                continue
            single = AgFunction((Insertion.of(target, x_n),), [x_n], 'G', lam0=lam0, mass=mass)
            value -= coefficient * single.moment(momenta, lam, l)
        return value
    raise ConfigurationError(f"unknown remainder method {method}")


def partial_remainder(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]], D: int,
                      momenta: np.ndarray, lam0: float = DEFAULT_LAMBDA0, mass: float = DEFAULT_MASS,
                      l: Optional[int] = None, lam: float = 0.0, method: str = 'taylor') -> complex:
    """
    Three-insertion function minus the OPE of its first two operators truncated at D, in moment units.

    'taylor' Taylor-subtracts the x_1 -> x_2 displacement from the CAG combination regularized
    on the pair {1, 2}; 'direct' subtracts sum_C C^C_{12}(x_1 - x_2) G(O_C(x_2) O_3).
    """
    insertions = as_insertions(ops, positions)
    if len(insertions) != 3:
        raise ConfigurationError("the partial remainder needs exactly three insertions")
    momenta = np.asarray(momenta, dtype=float).reshape(-1, 4)
    x_2 = np.asarray(insertions[1].position, dtype=float)
    if method == 'taylor':
        reg = RegTuple.build(3, {(0, 1, 2): -1, (0, 1): D, (1, 2): -1, (0, 2): -1})

        def bracket(ins: Tuple[Insertion, ...]) -> complex:
            ws = cached_wave_series(ins, reg, float(lam0), float(mass))
            return (ws.assembled_f() + ws.product_of_singles()).value(momenta, lam, l)

        degree = D - insertions[0].dimension - insertions[1].dimension
        return _subtracted(bracket, insertions, [0], [x_2], degree)
    if method == 'direct':
        value = AgFunction(insertions, _positions(insertions), 'G', -1, lam0, mass).moment(momenta, lam, l)
        pair = (insertions[0].moved(np.asarray(insertions[0].position) - x_2), insertions[1].moved(ORIGIN))
        for target in (enumerate_ops_up_to(D) if D >= 0 else []):
            coefficient = _ope_dc(pair, target, lam0, mass)
            if coefficient == 0:
                continue
            reduced = (Insertion.of(target, x_2), insertions[2])
            value -= coefficient * AgFunction(reduced, _positions(reduced), 'G', -1, lam0, mass).moment(momenta, lam, l)
        return value
    raise ConfigurationError(f"unknown partial remainder method {method}")


def _pair_shifted(insertions: Tuple[Insertion, ...], shift: np.ndarray, degree: int) -> Iterable[Tuple[Insertion, ...]]:
    """Degree-j terms of translating insertions 0 and 1 together by -shift, i.e. of moving their midpoint to 0."""
    for k0, k1 in multi_indices_of_order(degree, 2):
        a = _shifted(insertions[0], shift, k0, np.asarray(insertions[0].position) - shift)
        b = _shifted(insertions[1], shift, k1, np.asarray(insertions[1].position) - shift)
        if a is not None and b is not None:
            yield (a, b, insertions[2])


def decomposition_identity_check(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]], D: int,
                                 momenta: np.ndarray, lam0: float = DEFAULT_LAMBDA0,
                                 mass: float = DEFAULT_MASS, l: Optional[int] = None,
                                 lam: float = 0.0) -> float:
    """
    Residual |LHS - (F_1 + F_2 + F_3)| of the decomposition of the doubly Taylor-subtracted
    three-insertion F functional into pieces each regularized on one insertion pair.

    The third insertion is moved to the origin first.
    """
    insertions = as_insertions(ops, positions)
    if len(insertions) != 3:
        raise ConfigurationError("the decomposition identity needs exactly three insertions")
    anchor = np.asarray(insertions[2].position, dtype=float)
    insertions = tuple(ins.moved(np.asarray(ins.position) - anchor) for ins in insertions)
    momenta = np.asarray(momenta, dtype=float).reshape(-1, 4)
    dims = [ins.dimension for ins in insertions]
    d_total = sum(dims)

    def f_regularized(ins: Tuple[Insertion, ...]) -> complex:
        return AgFunction(ins, _positions(ins), 'F_D', D, lam0, mass).moment(momenta, lam, l)

    lhs = _subtracted(f_regularized, insertions, [0, 1], [ORIGIN, ORIGIN], D - d_total)

    def bracket(pair: Tuple[int, int], single: int, d_pair: int) -> Callable[[Tuple[Insertion, ...]], complex]:
        reg = RegTuple.build(3, {(0, 1, 2): D, pair: d_pair})

        def evaluate(ins: Tuple[Insertion, ...]) -> complex:
            ws = cached_wave_series(ins, reg, float(lam0), float(mass))
            combined = ws.connected({0, 1, 2}) + ws.product([pair, {single}]).scaled(-1.0)
            return combined.value(momenta, lam, l)

        return evaluate

    pieces = 0.0 + 0.0j
    # F_1, F_2: the single insertion a is Taylor-moved to 0, the other one b afterwards
    for a in (0, 1):
        b = 1 - a
        pair = tuple(sorted((b, 2)))
        outer = D - dims[a]
        pieces += _subtracted(bracket(pair, a, -1), insertions, [a], [ORIGIN], outer)
        for j1 in range(outer + 1):
            inner = bracket(pair, a, D - dims[a] - j1)
            for moved_a in taylor_terms(insertions, [a], [ORIGIN], j1):
                pieces += _subtracted(inner, moved_a, [b], [ORIGIN], D - d_total - j1)
    # F_3: the pair {1, 2} moves as a whole (midpoint -> 0), then its relative coordinate
    midpoint = 0.5 * (np.asarray(insertions[0].position) + np.asarray(insertions[1].position))
    outer = D - dims[2]
    first = bracket((0, 1), 2, -1)
    pieces += first(insertions)
    for j in range(outer + 1):
        for moved in _pair_shifted(insertions, midpoint, j):
            pieces -= bracket((0, 1), 2, -1 + j)(moved)
    for j1 in range(outer + 1):
        d_pair = D - dims[2] - j1
        raised = bracket((0, 1), 2, d_pair + j1)
        for moved in _pair_shifted(insertions, midpoint, j1):
            pieces += _subtracted(raised, moved, [0, 1], [ORIGIN, ORIGIN], D - d_total - j1)
    residual = abs(lhs - pieces)
    logger.debug(f"decomposition identity at D={D}: lhs={lhs:.6e}, residual={residual:.3e}")
    return float(residual)


# ---- smeared correlators with spectator fields ------------------------------

@lru_cache(maxsize=8)
def _hermite_grid(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite nodes in four dimensions, weights normalized to sum 1."""
    t, w = hermite.hermgauss(nodes)
    grid = np.array(list(itertools.product(t, repeat=4)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=4))), axis=1) / math.pi ** 2
    return grid, weights


def _matchings(items: Tuple[int, ...]) -> Iterable[List[Tuple[int, int]]]:
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for k, partner in enumerate(rest):
        for tail in _matchings(rest[:k] + rest[k + 1:]):
            yield [(first, partner)] + tail


def _smearing(center: np.ndarray, width: float, q: np.ndarray) -> float:
    """Normalized Gaussian test function in momentum space."""
    return float((math.pi * width ** 2) ** -2 * np.exp(-np.sum((q - center) ** 2) / width ** 2))


def smeared_correlator(amputated: Callable[[np.ndarray], complex], spectators: Sequence[Sequence[float]],
                       cutoffs: CutoffPair, width: float = SPECTATOR_WIDTH,
                       nodes: int = SPECTATOR_HERMITE_NODES) -> complex:
    """
    Attach smeared spectator fields phi(f_1) ... phi(f_n) to an amputated function.

    Each spectator either attaches to the amputated function through C(q) or pairs with
    another spectator; each f_j is a Gaussian of the given width centred at the spectator
    momentum, integrated by tensor Gauss-Hermite quadrature.

    Args:
        amputated: momenta (k, 4) -> physical amputated value with k legs
        spectators: centre momenta of the test functions
        cutoffs: cutoffs of the external propagators
    """
    centers = [np.asarray(p, dtype=float) for p in spectators]
    grid, weights = _hermite_grid(nodes)
    n_spec = len(centers)
    total = 0.0 + 0.0j
    for size in range(n_spec + 1):
        for attached in itertools.combinations(range(n_spec), size):
            rest = tuple(j for j in range(n_spec) if j not in attached)
            if len(rest) % 2:
                continue
            paired = 0.0 + 0.0j
            for matching in _matchings(rest):
                term = 1.0 + 0.0j
                for a, b in matching:
                    qs = centers[a] + width * grid
                    term *= sum(w * _smearing(centers[b], width, -q) * float(propagator(q, cutoffs))
                                for q, w in zip(qs, weights))
                paired += term
            if paired == 0:
                continue
            legs = 0.0 + 0.0j
            for choice in itertools.product(range(len(weights)), repeat=size):
                q = np.array([centers[j] + width * grid[c] for j, c in zip(attached, choice)]).reshape(-1, 4)
                weight = math.prod(weights[c] for c in choice)
                props = math.prod(float(propagator(p, cutoffs)) for p in q)
                legs += weight * props * amputated(q)
            total += legs * paired
    return total


def spectator_correlator(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]],
                         spectators: Sequence[Sequence[float]], lam0: float = DEFAULT_LAMBDA0,
                         mass: float = DEFAULT_MASS, width: float = SPECTATOR_WIDTH,
                         nodes: int = SPECTATOR_HERMITE_NODES, l: Optional[int] = None,
                         lam: float = 0.0) -> complex:
    """Correlator of the insertions with smeared spectator fields, from the flowed amputated function G."""
    insertions = as_insertions(ops, positions)
    g = AgFunction(insertions, _positions(insertions), 'G', -1, lam0, mass)
    return smeared_correlator(lambda q: g.amputated(q, lam, l), spectators,
                              CutoffPair(lam, lam0, mass), width, nodes)


def smeared_remainder(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]], D: int,
                      spectators: Sequence[Sequence[float]], lam0: float = DEFAULT_LAMBDA0,
                      mass: float = DEFAULT_MASS, width: float = SPECTATOR_WIDTH,
                      nodes: int = SPECTATOR_HERMITE_NODES, l: Optional[int] = None, lam: float = 0.0) -> complex:
    """The flowed OPE remainder at dimension D with smeared spectator fields, in physical units."""
    kernel = remainder_kernel(ops, positions, D, lam0, mass, l, lam)
    n_insertions = len(ops)
    return smeared_correlator(lambda q: amputated_from_moment(kernel(q), q.shape[0], n_insertions), spectators,
                              CutoffPair(lam, lam0, mass), width, nodes)


# ---- tree-level coefficients of the interacting theory -----------------------

def tree_ope_coefficient(ops: Sequence[OperatorLike], positions: Sequence[Sequence[float]], target: CompositeOp,
                         coupling: float = DEFAULT_COUPLING, lam0: float = DEFAULT_LAMBDA0,
                         mass: float = DEFAULT_MASS) -> complex:
    """Physical OPE coefficient at tree level (hbar^0) of the interacting theory, at fixed Lambda0."""
    return ope_coeff(ops, positions, target, lam0, mass, coupling=coupling, loops=0)
